"""Device programming: forming and closed-loop write-verify tuning.

Forming turns virgin high-resistive devices into switchable ones with an
escalating voltage stress staircase under current compliance.  About one in
ten attempts needs a manual compliance adjustment before succeeding; the
simulation draws that event per cell and resolves it with one doubled-
compliance retry, which matches how the lab procedure recovers them.

Write-verify tuning drives a cell to a target conductance without knowing
its switching thresholds: read, pulse toward the target, escalate the pulse
amplitude whenever nothing measurably changed (that is how the unknown
threshold is found), back off one step whenever the move was much larger
than needed, flip polarity and restart the escalation on overshoot.  The
deadband between those two rules keeps the amplitude pinned just above the
responsiveness boundary, which matters under V/2 addressing: every excess
volt on the selected cell is half a volt of disturb stress on its whole
row and column.
The verify step is a two-point differential read (I(+v) - I(-v)) / 2v, which
cancels the quadratic asymmetry term and observes the true conductance.

Two execution styles share the per-cell decision rule exactly:

* sequential (default): one cell at a time through half-select addressing,
  with all its disturb physics; right for hardware-faithful array sizes.
* parallel: every unconverged cell pulsed per iteration with its own
  amplitude, no half-select cross-talk; right for MNIST-scale imports where
  walking 470k cells one by one is pointless.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import device as dev
from .crossbar import Crossbar, DefectMap, measure_maps, pulse_all, write_pulse
from .device import DefectKind, FormingMode
from .errors import ConfigError, DimensionError, FormingRequiredError


# ---------------------------------------------------------------------------
# forming
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FormingConfig:
    v_start: float = 2.0
    v_step: float = 0.1
    v_max: float = 5.0
    i_stop: float = 1e-4
    width: float = 1e-3
    mode: FormingMode = FormingMode.VOLTAGE
    max_attempts: int = 2

    def __post_init__(self):
        if not self.v_start < self.v_max:
            raise ConfigError("need v_start < v_max")
        if self.v_step <= 0:
            raise ConfigError("v_step must be positive")
        if self.i_stop <= 0:
            raise ConfigError("compliance i_stop must be positive")
        if self.width <= 0:
            raise ConfigError("width must be positive")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be at least 1")


@dataclass
class FormingReport:
    mode: FormingMode
    total: int
    already_formed: int
    auto_mask: np.ndarray
    manual_mask: np.ndarray
    failed_mask: np.ndarray
    forming_v: np.ndarray

    @property
    def n_auto(self) -> int:
        return int(self.auto_mask.sum())

    @property
    def n_manual(self) -> int:
        return int(self.manual_mask.sum())

    @property
    def n_failed(self) -> int:
        return int(self.failed_mask.sum())

    @property
    def manual_rate(self) -> float:
        n_target = self.total - self.already_formed
        return self.n_manual / n_target if n_target else 0.0


def form_array(xbar: Crossbar, cfg: FormingConfig, seed) -> tuple[Crossbar, FormingReport]:
    """Form every unformed cell; already-formed cells are skipped (counted in
    the report, not an error).

    Per cell the staircase stops at the first amplitude reaching its sampled
    forming voltage.  Cells drawn as needing manual intervention fail the
    automatic attempts and form on the doubled-compliance retry; cells whose
    forming voltage exceeds v_max are permanent failures.  Voltage- and
    current-pulse modes run the identical decision path (hardware showed no
    detectable difference), so the mode is a report label.
    """
    target = ~xbar.formed
    rng = np.random.default_rng(seed)
    # one draw per cell, target or not, so the stream is layout-independent
    needs_manual = rng.random(xbar.g.shape) < xbar.spec.forming_fail_prob

    over = np.maximum(xbar.v_form - cfg.v_start, 0.0)
    steps = np.ceil(over / cfg.v_step - 1e-12)
    v_reach = cfg.v_start + steps * cfg.v_step
    reachable = v_reach <= cfg.v_max + 1e-12

    auto = target & reachable & ~needs_manual
    manual = target & reachable & needs_manual
    failed = target & ~reachable

    out = xbar.copy()
    formed_now = auto | manual
    out.formed = xbar.formed | formed_now
    out.g = np.where(formed_now, out.g_lo, out.g)

    forming_v = np.where(formed_now, v_reach, np.nan)
    report = FormingReport(
        mode=cfg.mode,
        total=int(xbar.g.size),
        already_formed=int(xbar.formed.sum()),
        auto_mask=auto,
        manual_mask=manual,
        failed_mask=failed,
        forming_v=forming_v,
    )
    return out, report


# ---------------------------------------------------------------------------
# write-verify tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TuneConfig:
    tolerance: float = 0.05
    v_read: float = 0.2
    v_write_start: float = 0.8
    v_write_step: float = 0.05
    v_write_max: float = 2.0
    # low-overdrive programming moves in small steps, and low-conductance
    # targets approach their soft bound asymptotically; several hundred
    # pulses per cell is the honest price of staying gentle
    max_pulses: int = 800
    # 5 ms: long enough that a measurable step needs only ~0.1 V of
    # overdrive, so tuning parks near threshold and half-select stress on
    # neighbors stays below almost the entire threshold population
    width: float = 5e-3
    half_select: bool = True

    def __post_init__(self):
        if not 0 < self.tolerance < 1:
            raise ConfigError("tolerance must lie in (0, 1)")
        if not 0 < self.v_read <= dev.READ_REGIME_MAX:
            raise ConfigError(
                f"v_read must lie in (0, {dev.READ_REGIME_MAX}] V"
            )
        if not 0 < self.v_write_start <= self.v_write_max:
            raise ConfigError("need 0 < v_write_start <= v_write_max")
        if self.v_write_step <= 0:
            raise ConfigError("v_write_step must be positive")
        if self.max_pulses < 1:
            raise ConfigError("max_pulses must be at least 1")
        if self.width <= 0:
            raise ConfigError("width must be positive")


@dataclass
class CellTuneResult:
    row: int
    col: int
    ok: bool
    stuck: bool
    pulses: int
    rel_error: float
    g_final: float


@dataclass
class TuningReport:
    tolerance: float
    rel_error: np.ndarray
    pulses: np.ndarray
    ok_mask: np.ndarray
    stuck_mask: np.ndarray
    skipped_mask: np.ndarray
    failures: list[CellTuneResult] = field(default_factory=list)

    @property
    def n_tuned(self) -> int:
        return int(self.ok_mask.sum())

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    @property
    def converged_fraction(self) -> float:
        n_attempted = self.ok_mask.size - int(self.skipped_mask.sum())
        return self.n_tuned / n_attempted if n_attempted else 1.0

    @property
    def median_pulses(self) -> float:
        attempted = ~self.skipped_mask
        return float(np.median(self.pulses[attempted])) if attempted.any() else 0.0


def _verify(xbar: Crossbar, row: int, col: int, cfg: TuneConfig) -> float:
    return float(
        dev.differential_conductance(
            xbar.g[row, col], xbar.kappa[row, col], cfg.v_read, xbar.spec
        )
    )


def _probe_polarity(xbar: Crossbar, row: int, col: int, sign: float,
                    cfg: TuneConfig, n_pulses: int = 3) -> bool:
    """True if the cell's conductance moves at all under n_pulses at full
    write amplitude.  Exact-zero comparison: a stuck or unresponsive cell
    produces literally no change in this model."""
    g0 = xbar.g[row, col]
    for _ in range(n_pulses):
        write_pulse(xbar, row, col, sign * cfg.v_write_max, cfg.width,
                    half_select=cfg.half_select, copy=False)
    return bool(xbar.g[row, col] != g0)


def tune_cell(
    xbar: Crossbar,
    row: int,
    col: int,
    target_g: float,
    cfg: TuneConfig,
    *,
    copy: bool = True,
) -> tuple[Crossbar, CellTuneResult]:
    """Write-verify one cell to target_g within cfg.tolerance (relative).

    Returns the updated array and a CellTuneResult; a failed outcome is a
    result, not an exception, so array-scale imports can collect failures.
    The response floor for "no measurable change" is a tenth of the
    tolerance band, which keeps escalation moving near the soft bounds where
    single-pulse steps become arbitrarily small.  A pulse that moves the
    cell more than three floors backs the amplitude off one step, so it
    settles at the lowest level that still makes progress; under
    half-select addressing that minimizes the V/2 stress sprayed on row
    and column neighbors.
    """
    xbar._check_index(row, col)
    if not xbar.formed[row, col]:
        raise FormingRequiredError(
            f"cell ({row}, {col}) is unformed; tuning needs a formed device"
        )
    lo, hi = xbar.g_lo[row, col], xbar.g_hi[row, col]
    if not lo <= target_g <= hi:
        raise ConfigError(
            f"target {target_g:.3e} S outside cell range [{lo:.3e}, {hi:.3e}]"
        )
    out = xbar.copy() if copy else xbar

    band = cfg.tolerance * target_g
    floor = band / 10.0
    meas = _verify(out, row, col, cfg)
    if abs(meas - target_g) <= band:
        return out, CellTuneResult(row, col, True, False, 0,
                                   (meas - target_g) / target_g, meas)

    v_amp = cfg.v_write_start
    last_dir = 0
    pulses = 0
    while pulses < cfg.max_pulses:
        direction = 1 if meas < target_g else -1
        if last_dir != 0 and direction != last_dir:
            v_amp = cfg.v_write_start
        last_dir = direction
        write_pulse(out, row, col, direction * v_amp, cfg.width,
                    half_select=cfg.half_select, copy=False)
        pulses += 1
        new = _verify(out, row, col, cfg)
        if abs(new - meas) < floor:
            v_amp = min(v_amp + cfg.v_write_step, cfg.v_write_max)
        elif abs(new - meas) > 3.0 * floor:
            v_amp = max(v_amp - cfg.v_write_step, cfg.v_write_start)
        meas = new
        if abs(meas - target_g) <= band:
            return out, CellTuneResult(row, col, True, False, pulses,
                                       (meas - target_g) / target_g, meas)

    set_alive = _probe_polarity(out, row, col, +1.0, cfg)
    reset_alive = _probe_polarity(out, row, col, -1.0, cfg)
    meas = _verify(out, row, col, cfg)
    return out, CellTuneResult(
        row, col, ok=False, stuck=not (set_alive or reset_alive),
        pulses=pulses, rel_error=(meas - target_g) / target_g, g_final=meas,
    )


def import_conductance_map(
    xbar: Crossbar,
    targets: np.ndarray,
    cfg: TuneConfig,
) -> tuple[Crossbar, TuningReport]:
    """Tune the whole array to a target map (row-major); NaN entries skip.

    With cfg.half_select the cells are walked sequentially through the V/2
    addressing path; otherwise all unconverged cells are pulsed in parallel
    with identical per-cell decisions (no cross-cell disturb).
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != xbar.g.shape:
        raise DimensionError(
            f"target map shape {targets.shape} does not match array "
            f"{xbar.g.shape}"
        )
    live = np.isfinite(targets)
    bad = live & ((targets < xbar.g_lo) | (targets > xbar.g_hi))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ConfigError(
            f"target at ({r}, {c}) = {targets[r, c]:.3e} S outside the cell "
            f"range [{xbar.g_lo[r, c]:.3e}, {xbar.g_hi[r, c]:.3e}]"
        )
    if (live & ~xbar.formed).any():
        r, c = np.argwhere(live & ~xbar.formed)[0]
        raise FormingRequiredError(
            f"cell ({r}, {c}) has a tuning target but was never formed"
        )

    if cfg.half_select:
        return _import_sequential(xbar, targets, live, cfg)
    return _import_parallel(xbar, targets, live, cfg)


# Upper bound on write-verify passes over the array.  Sequential V/2
# addressing lets an escalated write disturb low-threshold neighbors that
# were already tuned, so one pass over the array is not enough; each pass
# re-tunes only the cells the previous pass knocked out of band, and the
# set shrinks fast.
_VERIFY_PASSES = 6

# Each pass tunes to this fraction of the requested band so cells park
# mid-band instead of at its edge; a small later disturb then leaves them
# inside the band the caller asked for instead of just outside it.
_GUARD_FRACTION = 0.6


def _import_sequential(xbar, targets, live, cfg):
    work = xbar.copy()
    shape = xbar.g.shape
    pulses = np.zeros(shape, dtype=np.int64)
    stuck = np.zeros(shape, dtype=bool)
    inner = replace(cfg, tolerance=_GUARD_FRACTION * cfg.tolerance)

    # Targets near a soft bound need the most escalation (window -> 0), so
    # their sessions radiate the strongest half-select stress.  Tune them
    # first: the hot pulses land while the rest of the array is still
    # untuned and there is nothing to wreck.
    margin = np.minimum(targets - work.g_lo, work.g_hi - targets)

    def ordered(mask):
        cells = np.argwhere(mask)
        return cells[np.argsort(margin[tuple(cells.T)], kind="stable")]

    def band_errors():
        meas = dev.differential_conductance(work.g, work.kappa, cfg.v_read,
                                            work.spec)
        with np.errstate(invalid="ignore"):
            rel = np.where(live, (meas - targets) / targets, np.nan)
        return meas, rel

    todo = ordered(live)
    for _ in range(_VERIFY_PASSES):
        for row, col in todo:
            if stuck[row, col]:
                continue
            work, res = tune_cell(work, row, col, targets[row, col], inner,
                                  copy=False)
            pulses[row, col] += res.pulses
            stuck[row, col] = res.stuck
        _, rel_error = band_errors()
        out_of_band = live & ~stuck & (np.abs(rel_error) > cfg.tolerance)
        if not out_of_band.any():
            break
        todo = ordered(out_of_band)

    meas, rel_error = band_errors()
    ok = live & ~stuck & (np.abs(rel_error) <= cfg.tolerance)
    failures = [
        CellTuneResult(int(r), int(c), False, bool(stuck[r, c]),
                       int(pulses[r, c]), float(rel_error[r, c]),
                       float(meas[r, c]))
        for r, c in np.argwhere(live & ~ok)
    ]
    report = TuningReport(cfg.tolerance, rel_error, pulses, ok, stuck, ~live,
                          failures)
    return work, report


def _import_parallel(xbar, targets, live, cfg):
    work = xbar.copy()
    shape = xbar.g.shape
    band = cfg.tolerance * np.where(live, targets, np.inf)
    floor = band / 10.0
    active = live.copy()
    v_amp = np.full(shape, cfg.v_write_start)
    last_dir = np.zeros(shape, dtype=np.int8)
    pulses = np.zeros(shape, dtype=np.int64)

    meas = dev.differential_conductance(work.g, work.kappa, cfg.v_read,
                                        work.spec)
    for _ in range(cfg.max_pulses):
        active &= ~(np.abs(meas - targets) <= band)
        if not active.any():
            break
        direction = np.where(meas < targets, 1, -1).astype(np.int8)
        flipped = active & (last_dir != 0) & (direction != last_dir)
        v_amp[flipped] = cfg.v_write_start
        last_dir = np.where(active, direction, last_dir)
        amp = np.where(active, direction * v_amp, 0.0)
        g_before = work.g.copy()
        pulse_all(work, amp, cfg.width, copy=False)
        moved = np.abs(work.g - g_before)
        no_resp = active & (moved < floor)
        v_amp = np.where(no_resp,
                         np.minimum(v_amp + cfg.v_write_step, cfg.v_write_max),
                         v_amp)
        v_amp = np.where(active & (moved > 3.0 * floor),
                         np.maximum(v_amp - cfg.v_write_step, cfg.v_write_start),
                         v_amp)
        pulses += active
        meas = dev.differential_conductance(work.g, work.kappa, cfg.v_read,
                                            work.spec)
    active &= ~(np.abs(meas - targets) <= band)

    stuck = np.zeros(shape, dtype=bool)
    if active.any():
        g0 = work.g.copy()
        for _ in range(3):
            pulse_all(work, np.where(active, cfg.v_write_max, 0.0), cfg.width,
                      copy=False)
        set_alive = work.g != g0
        g1 = work.g.copy()
        for _ in range(3):
            pulse_all(work, np.where(active, -cfg.v_write_max, 0.0), cfg.width,
                      copy=False)
        reset_alive = work.g != g1
        stuck = active & ~set_alive & ~reset_alive
        meas = dev.differential_conductance(work.g, work.kappa, cfg.v_read,
                                            work.spec)

    rel_error = np.where(live, (meas - targets) / targets, np.nan)
    ok = live & ~active
    failures = [
        CellTuneResult(int(r), int(c), False, bool(stuck[r, c]),
                       int(pulses[r, c]), float(rel_error[r, c]),
                       float(meas[r, c]))
        for r, c in np.argwhere(active)
    ]
    report = TuningReport(cfg.tolerance, rel_error, pulses, ok, stuck, ~live,
                          failures)
    return work, report


# ---------------------------------------------------------------------------
# defect diagnosis (measure-and-probe workflow)
# ---------------------------------------------------------------------------


def _staircase_alive(xbar, row, col, sign, cfg) -> bool:
    """Escalate from v_write_start; True at the first measurable response."""
    v_amp = cfg.v_write_start
    g_ref = xbar.g[row, col]
    while True:
        write_pulse(xbar, row, col, sign * v_amp, cfg.width,
                    half_select=cfg.half_select, copy=False)
        if xbar.g[row, col] != g_ref:
            return True
        if v_amp >= cfg.v_write_max:
            return False
        v_amp = min(v_amp + cfg.v_write_step, cfg.v_write_max)


def diagnose_defects(xbar: Crossbar, cfg: TuneConfig, v_read: float = 0.2
                     ) -> tuple[Crossbar, DefectMap]:
    """Recover the stuck-cell map by probing, plus the measured asymmetry map.

    A cell that responds to neither an escalating set staircase nor an
    escalating reset staircase (up to v_write_max) is diagnosed stuck; the
    kind is read off its conductance position.  Healthy cells get nudged by
    the probes (a cheap price; imports re-tune afterwards), so the perturbed
    array is returned along with the map.
    """
    work = xbar.copy()
    flags = np.zeros(work.g.shape, dtype=np.int8)
    for row in range(work.rows):
        for col in range(work.cols):
            if not work.formed[row, col]:
                continue
            if _staircase_alive(work, row, col, +1.0, cfg):
                continue
            if _staircase_alive(work, row, col, -1.0, cfg):
                continue
            g = work.g[row, col]
            near_hi = abs(g - work.g_hi[row, col]) <= abs(g - work.g_lo[row, col])
            flags[row, col] = DefectKind.STUCK_ON if near_hi else DefectKind.STUCK_OFF
    _, asym = measure_maps(work, v_read)
    return work, DefectMap(flags=flags, asymmetry=asym)


# ---------------------------------------------------------------------------
# image-to-conductance helper (grayscale tuning demo)
# ---------------------------------------------------------------------------


def image_to_targets(levels: np.ndarray, r_white: float, r_black: float
                     ) -> np.ndarray:
    """Map 8-bit grayscale levels linearly onto resistance [r_black, r_white]
    (level 0 -> r_black, level 255 -> r_white) and return conductances."""
    levels = np.asarray(levels, dtype=np.float64)
    if levels.min() < 0 or levels.max() > 255:
        raise ConfigError("grayscale levels must lie in [0, 255]")
    if r_white <= 0 or r_black <= 0:
        raise ConfigError("endpoint resistances must be positive")
    r = r_black + (r_white - r_black) * levels / 255.0
    return 1.0 / r
