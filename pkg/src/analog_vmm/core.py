"""Physical model of the analog core: synapses, neurons and their mismatch.

A multiply-accumulate is modelled in closed form. Every input event emits a
charge ``gain * weight * pulse_length`` which is low-pass filtered by the
synaptic input (time constant ``tau_syn``) and integrated on a leaky membrane
(time constant ``tau_mem``). The membrane amplitude at read time is the sum of
all charges weighted by the double-exponential response kernel, followed by a
per-neuron soft saturation ``K * tanh(amp / K)``.

All amplitudes are expressed in ADC LSB, all times in microseconds unless a
name says ``_ns``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation

WEIGHT_MAX = 63
INPUT_MAX = 31


@dataclass(frozen=True)
class CoreGeometry:
    blocks: int = 2
    rows_per_block: int = 256
    cols_per_block: int = 256

    def __post_init__(self):
        for name in ("blocks", "rows_per_block", "cols_per_block"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.rows_per_block % 2:
            raise ConfigurationError("rows_per_block must be even for signed row pairing")

    @property
    def n_neurons(self) -> int:
        return self.blocks * self.cols_per_block

    @property
    def n_rows(self) -> int:
        """Physical synapse rows (and drivers) on the whole chip."""
        return self.blocks * self.rows_per_block

    @property
    def signed_rows(self) -> int:
        return self.rows_per_block // 2

    @property
    def matmul_shape(self) -> tuple[int, int]:
        return self.rows_per_block, self.n_neurons


@dataclass(frozen=True)
class VariationSpec:
    """Spread of the manufacturing mismatch, per parameter class.

    Gains and capacitances are log-normal around 1, leak time constants
    log-normal around ``leak_mean_us``, resting offsets and driver pulse
    offsets normal around 0. A spread of zero yields a perfectly homogeneous
    chip.
    """

    gain_sigma_ln: float = 0.22
    capacitance_sigma_ln: float = 0.15
    leak_mean_us: float = 100.0
    leak_sigma_ln: float = 0.3
    rest_sigma_lsb: float = 3.0
    row_offset_sigma_ns: float = 2.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value < 0:
                raise ConfigurationError(f"{f.name} must be a non-negative number, got {value}")
        if self.leak_mean_us <= 0:
            raise ConfigurationError("leak_mean_us must be positive")

    @classmethod
    def zero(cls, leak_mean_us: float = 100.0) -> "VariationSpec":
        return cls(0.0, 0.0, leak_mean_us, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PhysicsSpec:
    tau_syn: float = 1.0
    tau_mem_target: float = 100.0
    pulse_unit: float = 2.0
    charge_to_lsb: float = 0.002
    saturation_knee: float = 150.0
    trial_noise_sigma: float = 2.0
    ideal_mode: bool = False

    def __post_init__(self):
        if self.tau_syn <= 0 or self.tau_mem_target <= 0:
            raise ConfigurationError("time constants must be positive")
        if self.pulse_unit <= 0:
            raise ConfigurationError("pulse_unit must be positive")
        if self.charge_to_lsb <= 0:
            raise ConfigurationError("charge_to_lsb must be positive")
        if self.saturation_knee <= 0:
            raise ConfigurationError("saturation_knee must be positive")
        if self.trial_noise_sigma < 0:
            raise ConfigurationError("trial_noise_sigma must be non-negative")
        if self.ideal_mode and self.trial_noise_sigma != 0:
            object.__setattr__(self, "trial_noise_sigma", 0.0)

    def replace(self, **changes) -> "PhysicsSpec":
        return dataclasses.replace(self, **changes)


def _arrays_equal(a, b) -> bool:
    if type(a) is not type(b):
        return NotImplemented
    for f in dataclasses.fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, np.ndarray):
            if not np.array_equal(x, y):
                return False
        elif x != y:
            return False
    return True


@dataclass(eq=False)
class FixedPatternState:
    """The hidden, "true" per-device parameters of one chip."""

    neuron_gain_pos: np.ndarray
    neuron_gain_neg: np.ndarray
    neuron_leak: np.ndarray
    neuron_rest_offset: np.ndarray
    neuron_capacitance: np.ndarray
    row_pulse_offset: np.ndarray
    rng_seed: int

    __eq__ = _arrays_equal

    @property
    def n_neurons(self) -> int:
        return len(self.neuron_gain_pos)


def generate_fixed_pattern(seed: int, spec: VariationSpec | None = None,
                           geometry: CoreGeometry | None = None) -> FixedPatternState:
    """Draw a chip's mismatch. Identical ``(seed, spec, geometry)`` give identical state."""
    spec = spec or VariationSpec()
    geometry = geometry or CoreGeometry()
    n, r = geometry.n_neurons, geometry.n_rows
    rng = np.random.default_rng(seed)
    # One draw per class in fixed order, so a zero spread in one class does not
    # shift the random stream of the others.
    z = {name: rng.standard_normal(size) for name, size in (
        ("gain_pos", n), ("gain_neg", n), ("leak", n), ("rest", n), ("cap", n), ("row", r))}
    return FixedPatternState(
        neuron_gain_pos=np.exp(spec.gain_sigma_ln * z["gain_pos"]),
        neuron_gain_neg=np.exp(spec.gain_sigma_ln * z["gain_neg"]),
        neuron_leak=spec.leak_mean_us * np.exp(spec.leak_sigma_ln * z["leak"]),
        neuron_rest_offset=spec.rest_sigma_lsb * z["rest"],
        neuron_capacitance=np.exp(spec.capacitance_sigma_ln * z["cap"]),
        row_pulse_offset=spec.row_offset_sigma_ns * z["row"],
        rng_seed=int(seed),
    )


@dataclass(eq=False)
class CalibrationState:
    """Digital trim settings. Gain and leak trims multiply, rest and pulse trims add."""

    neuron_gain_trim_pos: np.ndarray
    neuron_gain_trim_neg: np.ndarray
    leak_trim: np.ndarray
    rest_trim: np.ndarray
    row_pulse_trim: np.ndarray

    __eq__ = _arrays_equal

    @classmethod
    def identity(cls, geometry: CoreGeometry | None = None) -> "CalibrationState":
        geometry = geometry or CoreGeometry()
        n, r = geometry.n_neurons, geometry.n_rows
        return cls(np.ones(n), np.ones(n), np.ones(n), np.zeros(n), np.zeros(r))

    def copy(self) -> "CalibrationState":
        return CalibrationState(*(getattr(self, f.name).copy() for f in dataclasses.fields(self)))


# --- closed-form physics -----------------------------------------------------

def response_kernel(dt, tau_syn: float, tau_mem):
    """Membrane response at delay ``dt`` to a unit charge, normalised so the
    late-time tail equals ``exp(-dt / tau_mem)``.

    ``dt`` and ``tau_mem`` broadcast against each other.
    """
    dt = np.asarray(dt, dtype=float)
    tau_mem = np.asarray(tau_mem, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        general = tau_mem / (tau_mem - tau_syn) * (np.exp(-dt / tau_mem) - np.exp(-dt / tau_syn))
    degenerate = dt / tau_syn * np.exp(-dt / tau_syn)
    out = np.where(np.isclose(tau_mem, tau_syn, rtol=1e-12, atol=0.0), degenerate, general)
    return np.where(dt < 0, 0.0, out)


def soft_saturate(amplitude, knee: float):
    return knee * np.tanh(np.asarray(amplitude, dtype=float) / knee)


def pulse_length(inputs, row_offset_ns, spec: PhysicsSpec):
    """Effective pulse length in ns; cannot go negative."""
    inputs = np.asarray(inputs, dtype=float)
    if spec.ideal_mode:
        return inputs * spec.pulse_unit
    return np.maximum(0.0, inputs * spec.pulse_unit + row_offset_ns)


def synapse_charge(weight, inputs, row_offset_ns=0.0, gain=1.0, polarity=1,
                   spec: PhysicsSpec | None = None):
    """Charge emitted by one synapse for one input event.

    ``weight`` is the signed 6-bit synapse weight, ``inputs`` the 5-bit pulse
    length code, ``polarity`` the sign of the row's connection (+1 excitatory,
    -1 inhibitory). The result is in units of ``weight * input``: a pulse of
    exactly ``input * pulse_unit`` ns with unit gain gives ``weight * input``.
    """
    spec = spec or PhysicsSpec()
    weight = np.asarray(weight)
    inputs = np.asarray(inputs)
    if np.any(np.abs(weight) > WEIGHT_MAX):
        raise ContractViolation(f"weights must satisfy |w| <= {WEIGHT_MAX}")
    if np.any(inputs < 0) or np.any(inputs > INPUT_MAX):
        raise ContractViolation(f"inputs must lie in [0, {INPUT_MAX}]")
    if spec.ideal_mode:
        gain = 1.0
    pulses = pulse_length(inputs, row_offset_ns, spec) / spec.pulse_unit
    return polarity * np.asarray(gain, dtype=float) * weight * pulses


def accumulate_membrane(event_times, charges, read_time: float, tau_mem=None,
                        capacitance=1.0, spec: PhysicsSpec | None = None, saturate: bool = True):
    """Membrane amplitude (LSB) at ``read_time`` for a train of charge events.

    ``charges`` has shape ``(events,)`` or ``(events, neurons)``; ``tau_mem``
    and ``capacitance`` broadcast over neurons. With ``saturate=False`` the
    soft clamp is left to the caller.
    """
    spec = spec or PhysicsSpec()
    times = np.asarray(event_times, dtype=float)
    charges = np.asarray(charges, dtype=float)
    if times.size == 0:
        shape = np.broadcast_shapes(charges.shape[1:], np.shape(capacitance), np.shape(tau_mem))
        return np.zeros(shape) if shape else 0.0
    if np.any(times > read_time):
        raise ContractViolation("read_time precedes an input event")
    if spec.ideal_mode:
        return charges.sum(axis=0) * spec.charge_to_lsb
    tau_mem = spec.tau_mem_target if tau_mem is None else tau_mem
    dt = read_time - times
    if charges.ndim > 1:
        dt = dt[:, None]
    kappa = response_kernel(dt, spec.tau_syn, tau_mem)
    amplitude = (charges * kappa).sum(axis=0) * spec.charge_to_lsb / np.asarray(capacitance, dtype=float)
    return soft_saturate(amplitude, spec.saturation_knee) if saturate else amplitude


# --- the chip ---------------------------------------------------------------

@dataclass(frozen=True)
class Placement:
    """Where a tile lives: a block and a contiguous column range of it."""

    block: int
    col_offset: int
    n_cols: int
    n_rows: int
    signed: bool = True

    def neurons(self, geometry: CoreGeometry) -> np.ndarray:
        start = self.block * geometry.cols_per_block + self.col_offset
        return np.arange(start, start + self.n_cols)


class AnalogCore:
    """A simulated chip: fixed pattern, calibration, synapse memory and noise source.

    The synapse memory holds weight magnitudes per physical row and column;
    the sign of a contribution comes from the row's polarity. In signed mode
    logical row ``i`` of a block uses physical rows ``2i`` (excitatory) and
    ``2i + 1`` (inhibitory).
    """

    def __init__(self, pattern: FixedPatternState | None = None, physics: PhysicsSpec | None = None,
                 calibration: CalibrationState | None = None,
                 geometry: CoreGeometry | None = None, noise_seed: int | None = None):
        self.geometry = geometry or CoreGeometry()
        self.physics = physics or PhysicsSpec()
        self.pattern = pattern if pattern is not None else generate_fixed_pattern(0, VariationSpec.zero(), self.geometry)
        if self.pattern.n_neurons != self.geometry.n_neurons:
            raise ConfigurationError("fixed pattern does not match geometry")
        self.calibration = calibration or CalibrationState.identity(self.geometry)
        g = self.geometry
        self.synapse_weights = np.zeros((g.blocks, g.rows_per_block, g.cols_per_block), dtype=np.int8)
        self.row_polarity = np.ones((g.blocks, g.rows_per_block), dtype=np.int8)
        seed = self.pattern.rng_seed if noise_seed is None else noise_seed
        self.rng = np.random.default_rng([int(seed), 0x5EED])

    @classmethod
    def from_seed(cls, seed: int, variation: VariationSpec | None = None, physics: PhysicsSpec | None = None,
                  geometry: CoreGeometry | None = None) -> "AnalogCore":
        geometry = geometry or CoreGeometry()
        return cls(generate_fixed_pattern(seed, variation, geometry), physics, geometry=geometry)

    def reseed_noise(self, seed: int) -> None:
        self.rng = np.random.default_rng([int(seed), 0x5EED])

    # effective per-neuron parameters, fixed pattern combined with trims

    def gain_exc(self) -> np.ndarray:
        return self.pattern.neuron_gain_pos * self.calibration.neuron_gain_trim_pos

    def gain_inh(self) -> np.ndarray:
        return self.pattern.neuron_gain_neg * self.calibration.neuron_gain_trim_neg

    def capacitance(self) -> np.ndarray:
        return self.pattern.neuron_capacitance

    def tau_mem(self) -> np.ndarray:
        return self.pattern.neuron_leak * self.calibration.leak_trim

    def rest_level(self) -> np.ndarray:
        return self.pattern.neuron_rest_offset + self.calibration.rest_trim

    def row_offset(self) -> np.ndarray:
        """Net pulse-length offset per physical row (ns), shape ``(blocks, rows_per_block)``."""
        net = self.pattern.row_pulse_offset + self.calibration.row_pulse_trim
        return net.reshape(self.geometry.blocks, self.geometry.rows_per_block)

    # synapse memory

    def load_matrix(self, weights, placement: Placement) -> None:
        """Write a logical weight matrix (rows x cols) into the synapse array."""
        w = np.asarray(weights)
        g = self.geometry
        rows, cols = w.shape
        if np.any(np.abs(w) > WEIGHT_MAX):
            raise ContractViolation("weights exceed the 6-bit range")
        if placement.col_offset + cols > g.cols_per_block or not 0 <= placement.block < g.blocks:
            raise ContractViolation("placement exceeds the block's columns")
        cs = slice(placement.col_offset, placement.col_offset + cols)
        mem = self.synapse_weights[placement.block]
        pol = self.row_polarity[placement.block]
        if placement.signed:
            if rows > g.signed_rows:
                raise ContractViolation(f"signed tiles hold at most {g.signed_rows} rows")
            mem[0:2 * rows:2, cs] = np.maximum(w, 0)
            mem[1:2 * rows:2, cs] = np.maximum(-w, 0)
            pol[0::2] = 1
            pol[1::2] = -1
        else:
            if rows > g.rows_per_block:
                raise ContractViolation(f"unsigned tiles hold at most {g.rows_per_block} rows")
            if np.any(w < 0):
                raise ContractViolation("unsigned tiles take non-negative weights only")
            mem[:rows, cs] = w
            pol[:rows] = 1

    def logical_weights(self, placement: Placement) -> np.ndarray:
        mem = self.synapse_weights[placement.block].astype(np.int64)
        cs = slice(placement.col_offset, placement.col_offset + placement.n_cols)
        if placement.signed:
            return mem[0:2 * placement.n_rows:2, cs] - mem[1:2 * placement.n_rows:2, cs]
        return mem[:placement.n_rows, cs]
