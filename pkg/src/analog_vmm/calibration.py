"""Measurement-driven calibration, controlled decalibration and characterization.

All routines only *measure* the chip through MAC executions; none of them read
the hidden :class:`FixedPatternState`. Trims are digital:

* gain and leak trims are 10-bit codes mapped geometrically onto [0.25, 4.0],
* pulse trims are 0.1 ns steps in [-12.8, 12.7] ns,
* rest trims are 1/8 LSB steps.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import AnalogCore, CalibrationState, Placement
from .errors import CalibrationError, ContractViolation, IngestionError
from .mac import MacOptions, execute_batch

GAIN_CODES = 1024
GAIN_TRIM_RANGE = (0.25, 4.0)
PULSE_TRIM_STEP = 0.1
PULSE_TRIM_RANGE = (-12.8, 12.7)
REST_TRIM_STEP = 0.125

STIMULUS_WEIGHT = 30
STIMULUS_INPUT = 10
CALIBRATION_FORMAT = "analog-vmm-calibration"
CALIBRATION_VERSION = 1


def code_to_trim(code):
    lo, hi = GAIN_TRIM_RANGE
    return lo * (hi / lo) ** (np.asarray(code, dtype=float) / (GAIN_CODES - 1))


def trim_to_code(trim):
    lo, hi = GAIN_TRIM_RANGE
    code = np.rint(np.log(np.asarray(trim, dtype=float) / lo) / np.log(hi / lo) * (GAIN_CODES - 1))
    return np.clip(code, 0, GAIN_CODES - 1).astype(np.int64)


def quantize_pulse_trim(trim_ns):
    trim = np.rint(np.asarray(trim_ns, dtype=float) / PULSE_TRIM_STEP) * PULSE_TRIM_STEP
    return np.clip(trim, *PULSE_TRIM_RANGE)


def pulse_trim_floor() -> float:
    """Smallest achievable residual std given the trim step (uniform rounding error)."""
    return PULSE_TRIM_STEP / np.sqrt(12.0)


# --- measurements -------------------------------------------------------------

def _block_placements(core: AnalogCore) -> list[Placement]:
    g = core.geometry
    return [Placement(b, 0, g.cols_per_block, g.signed_rows, signed=True) for b in range(g.blocks)]


def measure_stimulus_response(core: AnalogCore, weight: int = STIMULUS_WEIGHT, level: int = STIMULUS_INPUT,
                              n_reads: int = 20, settle_us: float = 2.0) -> np.ndarray:
    """Mean baseline-subtracted response of every neuron to the standard stimulus.

    Every logical row of every block carries ``weight`` and receives ``level``.
    Returns one value per neuron (signed, LSB), averaged over ``n_reads``.
    """
    opts = MacOptions(mode="signed", settle_us=settle_us)
    out = []
    for placement in _block_placements(core):
        core.load_matrix(np.full((placement.n_rows, placement.n_cols), weight), placement)
        x = np.full((n_reads, placement.n_rows), level)
        out.append(execute_batch(core, placement, x, opts).values.mean(axis=0))
    return np.concatenate(out)


def response_cv(responses) -> float:
    r = np.abs(np.asarray(responses, dtype=float))
    mean = r.mean()
    return float(r.std() / mean) if mean > 0 else float("inf")


@dataclass
class NeuronCalibrationReport:
    iterations: int
    cv_pos: float
    cv_neg: float
    target: float


def _bisect_codes(measure, target: float, n_codes: int = GAIN_CODES) -> np.ndarray:
    """Per-element search for the smallest code whose response reaches ``target``.

    ``measure(codes) -> responses`` must be monotonically increasing in the code.
    """
    lo = np.zeros(np.shape(target), dtype=np.int64)
    hi = np.full_like(lo, n_codes - 1)
    steps = int(np.ceil(np.log2(n_codes)))
    for _ in range(steps):
        mid = (lo + hi) // 2
        reached = measure(mid) >= target
        hi = np.where(reached, mid, hi)
        lo = np.where(reached, lo, mid + 1)
    return lo


def calibrate_neurons(core: AnalogCore, target_amplitude: float | None = None, tolerance_cv: float = 0.07,
                      n_reads: int = 20, max_iterations: int = 20, return_report: bool = False):
    """Equalize positive and negative synaptic gain of all neurons.

    One iteration is one averaged measurement of the standard stimulus in both
    polarities. If the current trims already meet ``tolerance_cv`` nothing
    changes. Otherwise every neuron bisects its gain-trim code over the full
    range towards the target response; after each halving the spread is
    measured and the search stops as soon as it meets the tolerance. The residual spread therefore sits just below the
    tolerance rather than at the trim resolution. The target defaults to the
    median uncalibrated response.
    """
    cal = core.calibration
    iterations = 0

    def measure(codes=None):
        # one iteration: set both trim sets, then measure both polarities
        nonlocal iterations
        iterations += 1
        if codes is not None:
            cal.neuron_gain_trim_pos, cal.neuron_gain_trim_neg = code_to_trim(codes)
        return np.stack([measure_stimulus_response(core, STIMULUS_WEIGHT, STIMULUS_INPUT, n_reads),
                         -measure_stimulus_response(core, -STIMULUS_WEIGHT, STIMULUS_INPUT, n_reads)])

    def cv_of(resp):
        return max(response_cv(resp[0]), response_cv(resp[1]))

    resp = measure()
    target = float(np.median(resp)) if target_amplitude is None else float(target_amplitude)
    if target <= 0:
        raise ContractViolation("target amplitude must be positive")

    shape = (2, core.geometry.n_neurons)
    lo, hi = np.zeros(shape, dtype=np.int64), np.full(shape, GAIN_CODES - 1)
    while cv_of(resp) > tolerance_cv and iterations < max_iterations:
        if np.all(lo >= hi):
            # bracket collapsed without meeting the tolerance: reopen it around the last code
            width = max(1, GAIN_CODES // 64)
            lo, hi = np.clip(lo - width, 0, GAIN_CODES - 1), np.clip(hi + width, 0, GAIN_CODES - 1)
        mid = (lo + hi) // 2
        resp = measure(mid)
        reached = resp >= target
        hi = np.where(reached, mid, hi)
        lo = np.where(reached, lo, mid + 1)

    cvs = {1: response_cv(resp[0]), -1: response_cv(resp[1])}
    if max(cvs.values()) > tolerance_cv:
        deviation = np.abs(resp / target - 1).max(axis=0)
        offending = np.flatnonzero(deviation > tolerance_cv)
        if len(offending) == 0:
            offending = np.argsort(deviation)[::-1][:8]
        raise CalibrationError(
            f"neuron gains did not reach CV <= {tolerance_cv:g} after {iterations} iterations "
            f"(CV+ {cvs[1]:.4f}, CV- {cvs[-1]:.4f})", offending, max(cvs.values()))
    report = NeuronCalibrationReport(iterations, cvs[1], cvs[-1], target)
    return (cal, report) if return_report else cal


def measure_time_constants(core: AnalogCore, n_reads: int = 20, delays_us=(10.0, 60.0),
                           weight: int = STIMULUS_WEIGHT // 2) -> np.ndarray:
    """Membrane time constant per neuron from the decay between two read delays.

    A half-strength stimulus keeps the early reading well below the saturation knee.
    """
    early = measure_stimulus_response(core, weight, n_reads=n_reads, settle_us=delays_us[0])
    late = measure_stimulus_response(core, weight, n_reads=n_reads, settle_us=delays_us[1])
    ratio = np.clip(late / np.maximum(early, 1e-6), 1e-6, 1 - 1e-9)
    return (delays_us[1] - delays_us[0]) / -np.log(ratio)


def calibrate_leak(core: AnalogCore, target_us: float | None = None, n_reads: int = 40) -> CalibrationState:
    """Bisect the leak trim code of every neuron onto the target membrane time constant."""
    target = core.physics.tau_mem_target if target_us is None else target_us
    cal = core.calibration

    def measure(codes):
        cal.leak_trim = code_to_trim(codes)
        return measure_time_constants(core, n_reads)

    cal.leak_trim = code_to_trim(_bisect_codes(measure, np.full(core.geometry.n_neurons, target)))
    return cal


def calibrate_rest(core: AnalogCore, n_reads: int = 32) -> CalibrationState:
    """Center every neuron's resting level on the ADC's zero in signed mode."""
    cal = core.calibration
    levels = []
    opts = MacOptions(mode="signed")
    for placement in _block_placements(core):
        x = np.zeros((n_reads, placement.n_rows), dtype=np.int64)
        levels.append(execute_batch(core, placement, x, opts).baseline.mean(axis=0))
    cal.rest_trim = np.rint((cal.rest_trim - np.concatenate(levels)) / REST_TRIM_STEP) * REST_TRIM_STEP
    return cal


def measure_row_offsets(core: AnalogCore, n_reads: int = 16, resends: int = 12,
                        levels=(1, 31)) -> np.ndarray:
    """Net pulse-length offset (ns) of every physical row, from a two-point charge ratio.

    A single row is driven at inputs ``levels = (a, b)``. With responses
    ``R = k * (x + o)`` the offset in input units is ``o = R_a / k - a`` where
    ``k = (R_b - R_a) / (b - a)``. Rows are probed with their own polarity and
    averaged over all neurons of the block and ``n_reads`` reads.
    """
    a, b = levels
    g = core.geometry
    opts = MacOptions(mode="signed", resends=resends)
    n_logical = g.signed_rows
    offsets = np.zeros((g.blocks, g.rows_per_block))
    eye = np.eye(n_logical, dtype=np.int64)
    probes = np.concatenate([np.repeat(eye * a, n_reads, axis=0), np.repeat(eye * b, n_reads, axis=0)])
    for placement in _block_placements(core):
        for parity, weight in ((0, 63), (1, -63)):
            core.load_matrix(np.full((n_logical, placement.n_cols), weight), placement)
            act = np.sign(weight) * execute_batch(core, placement, probes, opts).values.mean(axis=1)
            r_a = act[:len(act) // 2].reshape(n_logical, n_reads).mean(axis=1)
            r_b = act[len(act) // 2:].reshape(n_logical, n_reads).mean(axis=1)
            k = (r_b - r_a) / (b - a)
            o = r_a / np.where(k > 0, k, np.nan) - a
            offsets[placement.block, parity::2] = np.nan_to_num(o, nan=0.0) * core.physics.pulse_unit
    return offsets.reshape(-1)


@dataclass
class DriverCalibrationReport:
    iterations: int
    residual_std_ns: float
    residual_ns: np.ndarray


def calibrate_drivers(core: AnalogCore, tolerance_ns: float = 0.3, n_reads: int = 16, max_iterations: int = 8,
                      return_report: bool = False):
    """Trim the pulse length of every synapse driver row.

    Iterates measure-and-trim until the estimated offsets no longer move the
    trims; strongly negative offsets (clipped pulses) converge over several
    iterations. The residual is re-measured with the same two-point estimator.
    """
    floor = pulse_trim_floor()
    if tolerance_ns < floor:
        raise CalibrationError(f"tolerance {tolerance_ns} ns is below the trim quantization floor {floor:.3f} ns")
    cal = core.calibration
    iterations = 0
    residual = measure_row_offsets(core, n_reads)
    while iterations < max_iterations:
        iterations += 1
        new = quantize_pulse_trim(cal.row_pulse_trim - residual)
        changed = not np.array_equal(new, cal.row_pulse_trim)
        cal.row_pulse_trim = new
        residual = measure_row_offsets(core, n_reads)
        if not changed or np.all(np.abs(residual) < 1.0):
            break
    std = float(np.std(residual))
    if std > tolerance_ns:
        raise CalibrationError(f"driver residual std {std:.3f} ns exceeds {tolerance_ns} ns",
                               np.flatnonzero(np.abs(residual) > tolerance_ns), std)
    report = DriverCalibrationReport(iterations, std, residual)
    return (cal, report) if return_report else cal


def calibrate(core: AnalogCore, tolerance_cv: float = 0.07, tolerance_ns: float = 0.3,
              n_reads: int = 20) -> CalibrationState:
    """Full calibration: resting levels, leak, driver pulses, then synaptic gains."""
    calibrate_rest(core)
    calibrate_leak(core)
    calibrate_drivers(core, tolerance_ns)
    calibrate_neurons(core, tolerance_cv=tolerance_cv, n_reads=n_reads)
    calibrate_rest(core)
    return core.calibration


# --- decalibration --------------------------------------------------------------

BLENDED_FIELDS = ("neuron_gain_trim_pos", "neuron_gain_trim_neg", "leak_trim")


def blend_decalibration(calibrated: CalibrationState, factor: float) -> CalibrationState:
    """Interpolate leak and synaptic-gain trims towards their median across neurons.

    ``factor = 0`` returns an equal copy, ``factor = 1`` gives every neuron the
    median trim, which restores the uncalibrated spread of the chip.
    """
    if not 0.0 <= factor <= 1.0:
        raise ContractViolation("decalibration factor must lie in [0, 1]")
    out = calibrated.copy()
    if factor == 0:
        return out
    for name in BLENDED_FIELDS:
        trims = getattr(calibrated, name)
        setattr(out, name, (1.0 - factor) * trims + factor * np.median(trims))
    return out


# --- characterization -----------------------------------------------------------

@dataclass
class CharacterizationReport:
    levels: np.ndarray
    weights: np.ndarray  # (rows, neurons), the configured weight map
    mean: np.ndarray  # (levels, neurons)
    std: np.ndarray  # (levels, neurons)
    ramp_columns: np.ndarray
    random_columns: np.ndarray

    def to_csv(self, path) -> None:
        lines = ["column,level,column_weight_sum,mean,std"]
        sums = self.weights.sum(axis=0)
        for li, level in enumerate(self.levels):
            for col in range(self.mean.shape[1]):
                lines.append(f"{col},{int(level)},{int(sums[col])},{float(self.mean[li, col])!r},{float(self.std[li, col])!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def characterization_weights(core: AnalogCore, seed: int = 0) -> np.ndarray:
    """Left half of each block: every synapse of column ``i`` holds ``i - 63`` for
    ``i < 127`` (column 127 holds 0); right half: uniform random weights in [-63, 63]."""
    g = core.geometry
    rng = np.random.default_rng(seed)
    half = g.cols_per_block // 2
    rows = g.signed_rows
    blocks = []
    for _ in range(g.blocks):
        ramp = np.clip(np.arange(half) - 63, -63, 63)
        ramp[127:] = 0
        left = np.broadcast_to(ramp, (rows, half))
        right = rng.integers(-63, 64, size=(rows, g.cols_per_block - half))
        blocks.append(np.hstack([left, right]))
    return np.hstack(blocks)


def characterize(core: AnalogCore, levels=(0, 3, 7, 15), repeats: int = 30, resends: int = 4,
                 seed: int = 0) -> CharacterizationReport:
    """Sweep homogeneous input vectors against the ramp/random test matrix."""
    g = core.geometry
    weights = characterization_weights(core, seed)
    levels = np.asarray(levels)
    opts = MacOptions(mode="signed", resends=resends)
    mean = np.zeros((len(levels), g.n_neurons))
    std = np.zeros_like(mean)
    for placement in _block_placements(core):
        cols = placement.neurons(g)
        core.load_matrix(weights[:, cols], placement)
        for li, level in enumerate(levels):
            x = np.full((repeats, placement.n_rows), int(level))
            values = execute_batch(core, placement, x, opts).values
            mean[li, cols] = values.mean(axis=0)
            std[li, cols] = values.std(axis=0)
    half = g.cols_per_block // 2
    local = np.arange(g.n_neurons) % g.cols_per_block
    return CharacterizationReport(levels, weights, mean, std,
                                  np.flatnonzero(local < 127), np.flatnonzero(local >= half))


# --- persistence ---------------------------------------------------------------

def save_calibration(cal: CalibrationState, path) -> None:
    """Flat key-value text: one ``neuron`` record per neuron, one ``row`` record per driver row."""
    lines = [f"# {CALIBRATION_FORMAT} v{CALIBRATION_VERSION}",
             f"format={CALIBRATION_FORMAT}", f"version={CALIBRATION_VERSION}",
             f"neurons={len(cal.leak_trim)}", f"rows={len(cal.row_pulse_trim)}"]
    for i in range(len(cal.leak_trim)):
        lines.append(f"neuron index={i} gain_trim_pos={float(cal.neuron_gain_trim_pos[i])!r} "
                     f"gain_trim_neg={float(cal.neuron_gain_trim_neg[i])!r} "
                     f"leak_trim={float(cal.leak_trim[i])!r} rest_trim={float(cal.rest_trim[i])!r}")
    for r in range(len(cal.row_pulse_trim)):
        lines.append(f"row index={r} pulse_trim={float(cal.row_pulse_trim[r])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_calibration(path) -> CalibrationState:
    header, neurons, rows = {}, {}, {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read calibration {path}: {exc.strerror}", field="file") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        kind, _, rest = line.partition(" ")
        if kind in ("neuron", "row"):
            try:
                record = dict(item.split("=", 1) for item in rest.split())
                (neurons if kind == "neuron" else rows)[int(record.pop("index"))] = record
            except (KeyError, ValueError) as exc:
                raise IngestionError(f"{path}:{lineno}: malformed {kind} record", field="index") from exc
        elif "=" in line:
            key, value = line.split("=", 1)
            header[key] = value
        else:
            raise IngestionError(f"{path}:{lineno}: unrecognised record", field=kind)
    if header.get("format") != CALIBRATION_FORMAT:
        raise IngestionError("not a calibration file", field="format")
    if header.get("version") != str(CALIBRATION_VERSION):
        raise IngestionError(f"unsupported calibration version {header.get('version')}", field="version")
    try:
        n, r = int(header["neurons"]), int(header["rows"])
    except (KeyError, ValueError) as exc:
        raise IngestionError("calibration header lacks neuron or row counts", field="count") from exc
    if sorted(neurons) != list(range(n)) or sorted(rows) != list(range(r)):
        raise IngestionError("calibration records incomplete", field="index")

    def col(table, key, count):
        try:
            return np.array([float(table[i][key]) for i in range(count)])
        except (KeyError, ValueError) as exc:
            raise IngestionError(f"{path}: bad or missing {key} ({exc})", field=key) from exc

    return CalibrationState(col(neurons, "gain_trim_pos", n), col(neurons, "gain_trim_neg", n),
                            col(neurons, "leak_trim", n), col(neurons, "rest_trim", n),
                            col(rows, "pulse_trim", r))


def calibration_fields() -> tuple[str, ...]:
    return tuple(f.name for f in dataclasses.fields(CalibrationState))
