"""Opamp neuron model: differential transimpedance, clipping, output scaling.

A neuron takes the currents of its (G+, G-) column pair, converts the
difference to a voltage through the feedback resistance, clips with a
piece-linear gain stage, and (hidden layers only) divides the result down so
the next crossbar is driven inside its non-disturbing read window:

    v_diff = r_f * (i_plus - i_minus)
    v_clip = clamp(gain * v_diff, -v_sat, +v_sat)
    out    = v_clip                      (output layer)
    out    = v_clip * out_swing / v_sat  (hidden layer)

Per-neuron imperfections are the measured kind: output-swing spread across
the bank and stuck-high/low faults.  The temperature-compensated output
stage (memristive feedback plus bias leg) lives here too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import device as dev
from .device import DeviceSpec, MemristorState
from .errors import ConfigError, DimensionError, SingularityError


class NeuronFault:
    OK = 0
    STUCK_HIGH = 1
    STUCK_LOW = 2


@dataclass(frozen=True)
class NeuronParams:
    r_f: float = 2000.0
    gain: float = 10.0
    v_sat: float = 5.0
    out_swing: float = 0.2
    is_output_layer: bool = False

    def __post_init__(self):
        if self.r_f <= 0 or self.gain <= 0 or self.v_sat <= 0:
            raise ConfigError("r_f, gain and v_sat must all be positive")
        if not 0 < self.out_swing <= self.v_sat:
            raise ConfigError("out_swing must lie in (0, v_sat]")


def differential_voltage(i_plus, i_minus, p: NeuronParams):
    return p.r_f * (i_plus - i_minus)


def _clip_stage(v_diff, p: NeuronParams):
    return np.clip(p.gain * v_diff, -p.v_sat, p.v_sat)


def neuron_out(i_plus: float, i_minus: float, p: NeuronParams) -> float:
    v_clip = _clip_stage(differential_voltage(i_plus, i_minus, p), p)
    if p.is_output_layer:
        return float(v_clip)
    return float(v_clip * (p.out_swing / p.v_sat))


def neuron_derivative(i_plus: float, i_minus: float, p: NeuronParams) -> float:
    """Slope d(out)/d(v_diff): piecewise constant, 0 in saturation.

    The kink at |gain * v_diff| = v_sat is kept exact (no smoothing); training
    code relies on the derivative being identically zero past it.
    """
    v_diff = differential_voltage(i_plus, i_minus, p)
    if abs(p.gain * v_diff) >= p.v_sat:
        return 0.0
    return p.gain if p.is_output_layer else p.gain * (p.out_swing / p.v_sat)


# ---------------------------------------------------------------------------
# neuron banks (one hidden or output layer)
# ---------------------------------------------------------------------------


@dataclass
class NeuronBank:
    """A layer's worth of neurons: shared params, per-neuron swing and fault.

    ``swing`` only matters for hidden banks (the scaling stage); output banks
    carry it for uniformity but never apply it.
    """

    params: NeuronParams
    swing: np.ndarray
    fault: np.ndarray

    def __post_init__(self):
        if self.swing.shape != self.fault.shape:
            raise DimensionError("swing and fault arrays must align")

    @property
    def n(self) -> int:
        return self.swing.shape[0]

    def copy(self) -> "NeuronBank":
        return NeuronBank(self.params, self.swing.copy(), self.fault.copy())


def make_bank(n: int, params: NeuronParams) -> NeuronBank:
    if n <= 0:
        raise ConfigError("bank size must be positive")
    return NeuronBank(
        params=params,
        swing=np.full(n, params.out_swing, dtype=np.float64),
        fault=np.zeros(n, dtype=np.int8),
    )


def bank_outputs(bank: NeuronBank, v_diff: np.ndarray) -> np.ndarray:
    """Vectorized neuron_out over a layer, swing spread and faults applied.

    v_diff may be (n,) or (batch, n); faults pin the affected neuron's output
    for every pattern in the batch.
    """
    v_diff = np.asarray(v_diff, dtype=np.float64)
    if v_diff.shape[-1] != bank.n:
        raise DimensionError(
            f"v_diff trailing dim {v_diff.shape[-1]} != bank size {bank.n}"
        )
    p = bank.params
    v_clip = np.clip(p.gain * v_diff, -p.v_sat, p.v_sat)
    if p.is_output_layer:
        out = v_clip
        high, low = p.v_sat, -p.v_sat
        out = np.where(bank.fault == NeuronFault.STUCK_HIGH, high, out)
        out = np.where(bank.fault == NeuronFault.STUCK_LOW, low, out)
        return out
    out = v_clip * (bank.swing / p.v_sat)
    out = np.where(bank.fault == NeuronFault.STUCK_HIGH, bank.swing, out)
    out = np.where(bank.fault == NeuronFault.STUCK_LOW, -bank.swing, out)
    return out


def bank_derivative_gate(bank: NeuronBank, v_diff: np.ndarray) -> np.ndarray:
    """1 inside the linear region, 0 in saturation or on a faulted neuron."""
    v_diff = np.asarray(v_diff, dtype=np.float64)
    p = bank.params
    gate = (np.abs(p.gain * v_diff) < p.v_sat).astype(np.float64)
    return gate * (bank.fault == NeuronFault.OK)


def inject_neuron_faults(
    bank: NeuronBank,
    stuck_high_frac: float,
    stuck_low_frac: float,
    swing_overrides: dict[int, float] | None,
    seed,
) -> NeuronBank:
    """Pin random disjoint neuron subsets high/low; set per-neuron swings.

    Overrides are applied after fault sampling, so a faulted neuron sticks at
    its overridden swing value.
    """
    for name, frac in (("stuck_high_frac", stuck_high_frac),
                       ("stuck_low_frac", stuck_low_frac)):
        if not 0 <= frac <= 1:
            raise ConfigError(f"{name} must lie in [0, 1]")
    if stuck_high_frac + stuck_low_frac > 1:
        raise ConfigError("stuck neuron fractions sum to more than 1")
    out = bank.copy()
    n_high = int(round(stuck_high_frac * bank.n))
    n_low = int(round(stuck_low_frac * bank.n))
    if n_high + n_low:
        rng = np.random.default_rng(seed)
        picks = rng.choice(bank.n, size=n_high + n_low, replace=False)
        out.fault[picks[:n_high]] = NeuronFault.STUCK_HIGH
        out.fault[picks[n_high:]] = NeuronFault.STUCK_LOW
    if swing_overrides:
        for idx, swing in swing_overrides.items():
            if not 0 <= idx < bank.n:
                raise DimensionError(f"swing override index {idx} out of range")
            if not 0 < swing <= bank.params.v_sat:
                raise ConfigError(f"override swing {swing} outside (0, v_sat]")
            out.swing[idx] = swing
    return out


def vary_swing(bank: NeuronBank, sigma: float, seed) -> NeuronBank:
    """Multiplicative N(1, sigma) spread on the output swing, floored at 5%
    of nominal (a swing of zero would silence the neuron outright, which is
    the stuck-fault mechanism's job, not this one's)."""
    if sigma < 0:
        raise ConfigError("swing sigma must be non-negative")
    out = bank.copy()
    if sigma > 0:
        rng = np.random.default_rng(seed)
        factor = 1.0 + sigma * rng.standard_normal(bank.n)
        out.swing = np.maximum(bank.params.out_swing * factor,
                               0.05 * bank.params.out_swing)
    return out


# ---------------------------------------------------------------------------
# temperature-compensated output stage
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedResistor:
    r_ohm: float

    def __post_init__(self):
        if self.r_ohm <= 0:
            raise ConfigError("feedback resistance must be positive")


@dataclass(frozen=True)
class CompensationParams:
    """Output stage: v_out = -(I + g_bias(t) * v_bias) / g_fb(t).

    ``feedback`` is a FixedResistor (temperature-independent baseline) or a
    MemristorState read through the device model.  ``g_bias`` is the bias-leg
    conductance; if ``bias_spec`` is given it drifts with alpha(g_bias) like
    an array cell, else it is ideal.
    """

    feedback: FixedResistor | MemristorState
    g_bias: float = 0.0
    v_bias: float = 0.2
    bias_spec: DeviceSpec | None = None

    def __post_init__(self):
        if self.g_bias < 0:
            raise ConfigError("g_bias must be non-negative")


def feedback_conductance(comp: CompensationParams, t: float | None = None) -> float:
    if isinstance(comp.feedback, FixedResistor):
        return 1.0 / comp.feedback.r_ohm
    state = comp.feedback
    return float(dev.effective_conductance(state.g, state.spec, t))


def compensated_output(
    weighted_current: float, comp: CompensationParams, t: float | None = None
) -> float:
    g_fb = feedback_conductance(comp, t)
    if g_fb <= 0:
        raise SingularityError(
            f"feedback conductance {g_fb} S at t={t}; output undefined"
        )
    g_b = comp.g_bias
    if g_b > 0 and comp.bias_spec is not None:
        g_b = float(dev.effective_conductance(g_b, comp.bias_spec, t))
    return -(weighted_current + g_b * comp.v_bias) / g_fb
