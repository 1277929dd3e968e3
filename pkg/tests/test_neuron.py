"""Opamp neuron stage: transfer curve, derivative, faults, compensation."""

import dataclasses

import numpy as np
import pytest

from xbarnet import device as dev
from xbarnet.device import DeviceSpec
from xbarnet.neuron import (CompensationParams, FixedResistor, NeuronBank,
                            NeuronFault, NeuronParams, bank_derivative_gate,
                            bank_outputs, compensated_output,
                            differential_voltage, feedback_conductance,
                            inject_neuron_faults, make_bank,
                            neuron_derivative, neuron_out, vary_swing)
from xbarnet.errors import ConfigError, DimensionError, SingularityError

HIDDEN = NeuronParams()
OUTPUT = NeuronParams(is_output_layer=True)


def di_for(v_diff, p=HIDDEN):
    """Current difference that produces the requested differential voltage."""
    return v_diff / p.r_f


# --- transfer curve ---------------------------------------------------------

def test_hidden_linear_point():
    # v_diff 0.3 V -> clip stage 3 V -> scaled by 0.2/5 -> 0.12 V
    assert neuron_out(di_for(0.3), 0.0, HIDDEN) == pytest.approx(0.12)


def test_hidden_saturated_point():
    # v_diff 1 V saturates the gain stage; hidden output tops out at swing
    assert neuron_out(di_for(1.0), 0.0, HIDDEN) == pytest.approx(0.2)
    assert neuron_out(di_for(-1.0), 0.0, HIDDEN) == pytest.approx(-0.2)


def test_output_layer_unscaled():
    assert neuron_out(di_for(0.3, OUTPUT), 0.0, OUTPUT) == pytest.approx(3.0)
    assert neuron_out(di_for(2.0, OUTPUT), 0.0, OUTPUT) == pytest.approx(5.0)


def test_zero_input():
    assert neuron_out(0.0, 0.0, HIDDEN) == 0.0


def test_differential_rejects_common_mode():
    assert neuron_out(3e-4, 3e-4, HIDDEN) == 0.0
    a = neuron_out(5e-4, 2e-4, HIDDEN)
    b = neuron_out(8e-4, 5e-4, HIDDEN)
    assert a == pytest.approx(b)


def test_hidden_output_bounded():
    for di in np.linspace(-5e-3, 5e-3, 41):
        assert abs(neuron_out(di, 0.0, HIDDEN)) <= HIDDEN.out_swing + 1e-15


# --- derivative -------------------------------------------------------------

def test_derivative_values():
    assert neuron_derivative(di_for(0.3), 0.0, HIDDEN) == pytest.approx(0.4)
    assert neuron_derivative(di_for(0.3, OUTPUT), 0.0, OUTPUT) == \
        pytest.approx(10.0)
    assert neuron_derivative(di_for(1.0), 0.0, HIDDEN) == 0.0


def test_derivative_matches_finite_difference():
    # checked away from the clip kink (|v_diff| = 0.5 here)
    h = 1e-7
    for p in (HIDDEN, OUTPUT):
        for v_diff in (-0.45, -0.1, 0.0, 0.2, 0.49, 0.51, 0.8):
            if abs(abs(v_diff) - 0.5) < 1e-3:
                continue
            fd = (neuron_out(di_for(v_diff + h, p), 0.0, p)
                  - neuron_out(di_for(v_diff - h, p), 0.0, p)) / (2 * h)
            assert fd == pytest.approx(
                neuron_derivative(di_for(v_diff, p), 0.0, p), abs=1e-6)


def test_params_validation():
    with pytest.raises(ConfigError):
        NeuronParams(gain=0.0)
    with pytest.raises(ConfigError):
        NeuronParams(out_swing=0.0)
    with pytest.raises(ConfigError):
        NeuronParams(out_swing=6.0, v_sat=5.0)


# --- banks ------------------------------------------------------------------

def test_bank_matches_scalar_path():
    bank = make_bank(7, HIDDEN)
    v_diff = np.linspace(-1.2, 1.2, 7)
    got = bank_outputs(bank, v_diff)
    want = [neuron_out(di_for(v), 0.0, HIDDEN) for v in v_diff]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_bank_batch_shape():
    bank = make_bank(4, HIDDEN)
    out = bank_outputs(bank, np.zeros((9, 4)))
    assert out.shape == (9, 4)
    with pytest.raises(DimensionError):
        bank_outputs(bank, np.zeros(5))


def test_bank_derivative_gate():
    bank = make_bank(3, HIDDEN)
    gate = bank_derivative_gate(bank, np.array([0.1, 0.6, -0.7]))
    np.testing.assert_array_equal(gate, [1.0, 0.0, 0.0])


def test_fault_pins_output():
    bank = make_bank(6, HIDDEN)
    bank.fault[1] = NeuronFault.STUCK_HIGH
    bank.fault[4] = NeuronFault.STUCK_LOW
    out = bank_outputs(bank, np.zeros(6))
    assert out[1] == pytest.approx(HIDDEN.out_swing)
    assert out[4] == pytest.approx(-HIDDEN.out_swing)
    assert np.all(out[[0, 2, 3, 5]] == 0.0)
    gate = bank_derivative_gate(bank, np.zeros(6))
    assert gate[1] == 0.0 and gate[4] == 0.0


def test_inject_faults_counts_and_overrides():
    bank = make_bank(10, HIDDEN)
    out = inject_neuron_faults(bank, 0.2, 0.1, {0: 0.4, 3: 0.1}, seed=2)
    assert (out.fault == NeuronFault.STUCK_HIGH).sum() == 2
    assert (out.fault == NeuronFault.STUCK_LOW).sum() == 1
    assert out.swing[0] == 0.4 and out.swing[3] == 0.1
    assert bank.fault.sum() == 0  # input untouched


def test_inject_faults_validation():
    bank = make_bank(4, HIDDEN)
    with pytest.raises(ConfigError):
        inject_neuron_faults(bank, 0.6, 0.6, None, seed=0)
    with pytest.raises(DimensionError):
        inject_neuron_faults(bank, 0.0, 0.0, {9: 0.2}, seed=0)
    with pytest.raises(ConfigError):
        inject_neuron_faults(bank, 0.0, 0.0, {1: 0.0}, seed=0)


def test_vary_swing_spread_and_floor():
    bank = make_bank(2000, HIDDEN)
    out = vary_swing(bank, 0.3, seed=3)
    assert out.swing.std() > 0
    assert np.all(out.swing >= 0.05 * HIDDEN.out_swing)
    same = vary_swing(bank, 0.0, seed=3)
    np.testing.assert_array_equal(same.swing, bank.swing)


# --- temperature-compensated output stage -----------------------------------

def column_current(g_cells, spec, v, t=None):
    g_eff = dev.effective_conductance(np.asarray(g_cells), spec, t)
    return float(np.sum(g_eff * v))


def test_feedback_conductance_paths():
    comp = CompensationParams(feedback=FixedResistor(2000.0))
    assert feedback_conductance(comp) == pytest.approx(5e-4)
    spec = DeviceSpec()
    state = dataclasses.replace(dev.sample_device(spec, 1), g=50e-6)
    comp_m = CompensationParams(feedback=state)
    assert feedback_conductance(comp_m, t=spec.t_ref) == pytest.approx(50e-6)
    assert feedback_conductance(comp_m, t=75.0) > 50e-6


def test_matched_alpha_exact_invariance():
    # uniform-alpha devices and a feedback device from the same population:
    # the drift factor cancels algebraically, leaving only rounding ulps
    spec = DeviceSpec(alpha_exponent=0.0)
    g_cells = np.array([15e-6, 40e-6, 90e-6])
    fb = dataclasses.replace(dev.sample_device(spec, 5), g=35e-6)
    comp = CompensationParams(feedback=fb)
    ref = compensated_output(column_current(g_cells, spec, 0.2), comp,
                             t=spec.t_ref)
    for t in (35.0, 55.0, 75.0, 5.0):
        out = compensated_output(column_current(g_cells, spec, 0.2, t), comp,
                                 t=t)
        assert out == pytest.approx(ref, rel=1e-13)


def test_fixed_resistor_drift_law():
    # uniform alpha, fixed feedback: output scales by exactly 1 + alpha*dT
    spec = DeviceSpec(alpha_exponent=0.0)
    g_cells = np.array([20e-6, 60e-6])
    comp = CompensationParams(feedback=FixedResistor(10_000.0))
    ref = compensated_output(column_current(g_cells, spec, 0.2), comp,
                             t=spec.t_ref)
    for dt in (10.0, 30.0, 50.0):
        out = compensated_output(
            column_current(g_cells, spec, 0.2, spec.t_ref + dt), comp,
            t=spec.t_ref + dt)
        assert out / ref == pytest.approx(1.0 + spec.alpha0 * dt, rel=1e-12)


def residual_drift(g_bias, spec, g_cells, g_fb, dt=50.0):
    fb = dataclasses.replace(dev.sample_device(spec, 7), g=g_fb)
    comp = CompensationParams(feedback=fb, g_bias=g_bias, v_bias=0.2,
                              bias_spec=spec)
    ref = compensated_output(column_current(g_cells, spec, 0.2), comp,
                             t=spec.t_ref)
    out = compensated_output(
        column_current(g_cells, spec, 0.2, spec.t_ref + dt), comp,
        t=spec.t_ref + dt)
    return abs(out - ref)


def test_high_bias_compensates_better():
    # conductance-dependent alpha: the feedback device alone cannot cancel a
    # mixed-alpha column, and a stiffer bias leg shrinks what is left over
    spec = DeviceSpec(alpha_exponent=1.0)
    rng = np.random.default_rng(17)
    g_cells = rng.uniform(15e-6, 95e-6, 16)
    i_ref = column_current(g_cells, spec, 0.2)
    g_fb = i_ref / (16 * 0.2)
    assert residual_drift(80e-6, spec, g_cells, g_fb) < \
        residual_drift(15e-6, spec, g_cells, g_fb)


def test_compensated_output_singularity():
    spec = DeviceSpec()
    fb = dataclasses.replace(dev.sample_device(spec, 1), g=0.0)
    comp = CompensationParams(feedback=fb)
    with pytest.raises(SingularityError):
        compensated_output(1e-5, comp, t=spec.t_ref)


def test_compensation_validation():
    with pytest.raises(ConfigError):
        FixedResistor(0.0)
    with pytest.raises(ConfigError):
        CompensationParams(feedback=FixedResistor(1000.0), g_bias=-1e-6)
