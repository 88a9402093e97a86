"""Tile-level multiply-accumulate: schedule, integrate, digitize.

One execution follows the hardware sequence

1. weights already written to the synapse array (:meth:`AnalogCore.load_matrix`),
2. membrane reset and an immediate baseline read,
3. input events sent row by row, ``wait_ns`` apart, repeated ``resends`` times,
4. a settling pause of ``settle_us`` followed by the parallel ADC read.

:func:`execute_mac` walks an explicit :class:`MacSchedule` event by event and
serves as the reference. :func:`execute_batch` evaluates many input vectors at
once with the same physics in closed form and is what the network code uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import INPUT_MAX, AnalogCore, Placement, accumulate_membrane, pulse_length, response_kernel, soft_saturate
from .errors import ContractViolation, PartitionRequired

MODES = ("relu", "signed")
ADC_RANGE = {"relu": (0, 255), "signed": (-128, 127)}


@dataclass(frozen=True)
class MacOptions:
    wait_ns: float = 8.0
    resends: int = 1
    skip_zeros: bool = True
    mode: str = "signed"
    settle_us: float = 2.0

    def __post_init__(self):
        if not 8.0 <= self.wait_ns <= 200.0:
            raise ContractViolation(f"wait_ns must lie in [8, 200] ns, got {self.wait_ns}")
        if int(self.resends) != self.resends or self.resends < 1:
            raise ContractViolation("resends must be an integer >= 1")
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}")
        if self.settle_us < 0:
            raise ContractViolation("settle_us must be non-negative")


@dataclass(frozen=True)
class MacSchedule:
    """Timed input events of one integration phase.

    ``times_ns``, ``rows`` and ``inputs`` are parallel arrays; ``read_time`` is in µs.
    """

    times_ns: np.ndarray
    rows: np.ndarray
    inputs: np.ndarray
    read_time: float

    def __len__(self):
        return len(self.times_ns)

    @property
    def events(self) -> list[tuple[float, int, int]]:
        return list(zip(self.times_ns.tolist(), self.rows.tolist(), self.inputs.tolist()))


@dataclass
class ActivationVector:
    """Baseline-subtracted 8-bit activations; the last axis runs over columns."""

    values: np.ndarray
    mode: str
    baseline: np.ndarray


def _check_vector(vector, max_rows: int) -> np.ndarray:
    x = np.asarray(vector)
    if x.shape[-1] > max_rows:
        raise PartitionRequired(f"vector of length {x.shape[-1]} exceeds {max_rows} rows; partition the layer")
    if not np.issubdtype(x.dtype, np.integer):
        if np.any(x != np.round(x)):
            raise ContractViolation("inputs must be integers")
        x = x.astype(np.int64)
    if np.any(x < 0) or np.any(x > INPUT_MAX):
        raise ContractViolation(f"inputs must lie in [0, {INPUT_MAX}]")
    return x


def build_schedule(vector, opts: MacOptions | None = None, max_rows: int = 128) -> MacSchedule:
    """Lay out the events for one input vector. Rows go in ascending order within each pass."""
    opts = opts or MacOptions()
    x = _check_vector(vector, max_rows)
    rows = np.flatnonzero(x) if opts.skip_zeros else np.arange(len(x))
    rows = np.tile(rows, opts.resends)
    times = np.arange(len(rows)) * float(opts.wait_ns)
    last = times[-1] / 1000.0 if len(times) else 0.0
    return MacSchedule(times, rows, x[rows], last + opts.settle_us)


def digitize(amplitude, mode: str = "signed", rest_position=0.0):
    """Round and clamp to the 8-bit ADC range of ``mode``."""
    if mode not in MODES:
        raise ContractViolation(f"mode must be one of {MODES}")
    lo, hi = ADC_RANGE[mode]
    return np.clip(np.rint(np.asarray(amplitude, dtype=float) + rest_position), lo, hi).astype(np.int64)


def _rest_levels(core: AnalogCore, neurons: np.ndarray) -> np.ndarray:
    if core.physics.ideal_mode:
        return np.zeros(len(neurons))
    return core.rest_level()[neurons]


def _noise(core: AnalogCore, shape) -> np.ndarray:
    sigma = core.physics.trial_noise_sigma
    if sigma == 0:
        return np.zeros(shape)
    return sigma * core.rng.standard_normal(shape)


def reset_and_baseline(core: AnalogCore, placement: Placement, mode: str = "signed", batch: int | None = None):
    """Reset the membranes of ``placement`` and read their resting level."""
    neurons = placement.neurons(core.geometry)
    shape = (len(neurons),) if batch is None else (batch, len(neurons))
    return digitize(_rest_levels(core, neurons) + _noise(core, shape), mode)


def _finish(core, placement, amplitude, baseline, mode) -> ActivationVector:
    neurons = placement.neurons(core.geometry)
    if not core.physics.ideal_mode:
        amplitude = soft_saturate(amplitude, core.physics.saturation_knee)
    reading = digitize(_rest_levels(core, neurons) + amplitude + _noise(core, amplitude.shape), mode)
    lo, hi = ADC_RANGE[mode]
    return ActivationVector(np.clip(reading - baseline, lo, hi), mode, baseline)


def execute_mac(core: AnalogCore, placement: Placement, schedule: MacSchedule,
                opts: MacOptions | None = None) -> ActivationVector:
    """Run one schedule on the tile at ``placement`` and return its activations."""
    opts = opts or MacOptions()
    spec = core.physics
    if len(schedule) and (schedule.rows.min() < 0 or schedule.rows.max() >= placement.n_rows):
        raise ContractViolation("schedule references rows outside the tile")
    neurons = placement.neurons(core.geometry)
    baseline = reset_and_baseline(core, placement, opts.mode)

    block = placement.block
    cs = slice(placement.col_offset, placement.col_offset + placement.n_cols)
    mem = core.synapse_weights[block][:, cs].astype(float)
    polarity = core.row_polarity[block]
    offsets = core.row_offset()[block]
    gains = {1: core.gain_exc()[neurons], -1: core.gain_inh()[neurons]}
    if spec.ideal_mode:
        gains = {1: 1.0, -1: 1.0}

    times, charges = [], []
    for t_ns, row, inp in zip(schedule.times_ns, schedule.rows, schedule.inputs):
        physical = (2 * row, 2 * row + 1) if placement.signed else (row,)
        for p in physical:
            pulses = pulse_length(inp, offsets[p], spec) / spec.pulse_unit
            charges.append(polarity[p] * gains[int(polarity[p])] * mem[p] * pulses)
            times.append(t_ns / 1000.0)
    if charges:
        charges = np.array(charges)
        amplitude = accumulate_membrane(times, charges, schedule.read_time, core.tau_mem()[neurons],
                                        core.capacitance()[neurons], spec, saturate=False)
        amplitude = np.asarray(amplitude, dtype=float)
    else:
        amplitude = np.zeros(len(neurons))
    return _finish(core, placement, amplitude, baseline, opts.mode)


def batch_amplitude(core: AnalogCore, placement: Placement, inputs, opts: MacOptions) -> np.ndarray:
    """Pre-saturation membrane amplitudes for a batch of input vectors, shape ``(batch, cols)``."""
    spec = core.physics
    x = np.asarray(inputs)
    block = placement.block
    cs = slice(placement.col_offset, placement.col_offset + placement.n_cols)
    mem = core.synapse_weights[block][:, cs].astype(float)
    rows = x.shape[1]
    if placement.signed:
        w_exc, w_inh = mem[0:2 * rows:2], mem[1:2 * rows:2]
    else:
        w_exc, w_inh = mem[:rows], None

    if spec.ideal_mode:
        w = w_exc - w_inh if w_inh is not None else w_exc
        return (x @ w) * opts.resends * spec.charge_to_lsb

    neurons = placement.neurons(core.geometry)
    offsets = core.row_offset()[block]
    mask = x > 0 if opts.skip_zeros else np.ones(x.shape, dtype=bool)
    n_events = mask.sum(axis=1)
    rank = np.cumsum(mask, axis=1) - 1
    wait_us = opts.wait_ns / 1000.0
    # delay between an event in the last pass and the read
    delay = np.where(mask, (n_events[:, None] - 1 - rank) * wait_us, 0.0) + opts.settle_us
    # earlier passes lie n_events * wait further back
    pass_shift = np.arange(opts.resends)[None, :] * (n_events[:, None] * wait_us)

    tau_m = core.tau_mem()[neurons]
    tau_s = spec.tau_syn
    scale = tau_m / (tau_m - tau_s)
    passes_m = np.exp(-pass_shift[:, :, None] / tau_m[None, None, :]).sum(axis=1)  # (batch, cols)
    passes_s = np.exp(-pass_shift / tau_s).sum(axis=1)  # (batch,)
    rise = np.exp(-delay / tau_s)

    # The leak term couples event delay and per-neuron time constant, so it is
    # evaluated on active (vector, row) pairs only and summed per vector.
    b_idx, r_idx = np.nonzero(mask)
    leak = np.exp(-delay[b_idx, r_idx][:, None] / tau_m[None, :])  # (events, cols)
    starts = np.flatnonzero(np.r_[True, b_idx[1:] != b_idx[:-1]]) if len(b_idx) else np.array([], int)

    def branch(pulse_offsets, weights):
        pulses = np.where(mask, pulse_length(x, pulse_offsets[None, :], spec), 0.0) / spec.pulse_unit
        slow = np.zeros((x.shape[0], weights.shape[1]))
        if len(b_idx):
            contrib = leak * (pulses[b_idx, r_idx][:, None] * weights[r_idx])
            slow[b_idx[starts]] = np.add.reduceat(contrib, starts, axis=0)
        fast = (rise * pulses) @ weights
        return scale * (slow * passes_m - fast * passes_s[:, None])

    cap = core.capacitance()[neurons]
    if placement.signed:
        amp = (core.gain_exc()[neurons] * branch(offsets[0:2 * rows:2], w_exc)
               - core.gain_inh()[neurons] * branch(offsets[1:2 * rows:2], w_inh))
    else:
        amp = core.gain_exc()[neurons] * branch(offsets[:rows], w_exc)
    return amp * spec.charge_to_lsb / cap


def execute_batch(core: AnalogCore, placement: Placement, inputs, opts: MacOptions | None = None,
                  chunk: int = 256) -> ActivationVector:
    """Execute one MAC per row of ``inputs`` (shape ``(batch, rows)``) on the same tile.

    For a batch of one the noise stream, and hence the result, is identical to
    :func:`execute_mac` on the equivalent schedule.
    """
    opts = opts or MacOptions()
    max_rows = core.geometry.signed_rows if placement.signed else core.geometry.rows_per_block
    x = _check_vector(np.atleast_2d(inputs), min(max_rows, placement.n_rows))
    if x.shape[1] != placement.n_rows:
        raise ContractViolation(f"expected {placement.n_rows} inputs per vector, got {x.shape[1]}")
    values, baselines = [], []
    for start in range(0, len(x), chunk):
        part = x[start:start + chunk]
        baseline = reset_and_baseline(core, placement, opts.mode, batch=len(part))
        amplitude = batch_amplitude(core, placement, part, opts)
        act = _finish(core, placement, amplitude, baseline, opts.mode)
        values.append(act.values)
        baselines.append(act.baseline)
    return ActivationVector(np.concatenate(values), opts.mode, np.concatenate(baselines))


def kernel_value(delay_us, core: AnalogCore, neuron: int) -> float:
    """Response kernel of one neuron, exposed for inspection and tests."""
    return float(response_kernel(delay_us, core.physics.tau_syn, core.tau_mem()[neuron]))
