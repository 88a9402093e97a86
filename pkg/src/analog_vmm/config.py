"""Experiment configuration: one INI file with a flat section per module.

Every key is optional; missing keys take the dataclass defaults. Unknown
sections or keys are rejected so typos do not pass silently. Schema::

    [core]         VariationSpec and PhysicsSpec fields, e.g. gain_sigma_ln, trial_noise_sigma
    [mac]          wait_ns, skip_zeros, settle_us
    [calibration]  tolerance_cv, tolerance_ns, n_reads
    [compiler]     weight_limit, target_lsb, percentile, max_resends, input_percentile
    [training]     lr, beta1, beta2, eps, batch_size, batches_per_epoch,
                   software_epochs, itl_lr, sample_size, warmup_size
    [cost]         TimingSpec fields, e.g. t_matmul_ms, power_w
    [data]         mnist_dir
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from io import StringIO
from pathlib import Path

from .core import PhysicsSpec, VariationSpec
from .cost import TimingSpec
from .errors import ConfigurationError, IngestionError
from .training import Hyperparameters

CONFIG_ENV = "ANALOG_VMM_CONFIG"


@dataclass(frozen=True)
class MacSettings:
    wait_ns: float = 8.0
    skip_zeros: bool = True
    settle_us: float = 2.0


@dataclass(frozen=True)
class CalibrationSettings:
    tolerance_cv: float = 0.07
    tolerance_ns: float = 0.3
    n_reads: int = 20


@dataclass(frozen=True)
class CompilerSettings:
    weight_limit: int = 63
    target_lsb: float = 127.0
    percentile: float = 99.9
    max_resends: int = 32
    input_percentile: float = 100.0


@dataclass(frozen=True)
class TrainingSettings:
    software_epochs: int = 30
    itl_lr: float = 1e-3
    sample_size: int = 2000
    warmup_size: int = 200


@dataclass(frozen=True)
class DataSettings:
    mnist_dir: str = ""


@dataclass(frozen=True)
class Config:
    variation: VariationSpec = field(default_factory=VariationSpec)
    physics: PhysicsSpec = field(default_factory=PhysicsSpec)
    mac: MacSettings = field(default_factory=MacSettings)
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    compiler: CompilerSettings = field(default_factory=CompilerSettings)
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    timing: TimingSpec = field(default_factory=TimingSpec)
    data: DataSettings = field(default_factory=DataSettings)


# section -> config attributes whose fields it may set
SECTIONS = {
    "core": ("variation", "physics"),
    "mac": ("mac",),
    "calibration": ("calibration",),
    "compiler": ("compiler",),
    "training": ("hyper", "training"),
    "cost": ("timing",),
    "data": ("data",),
}


def _convert(raw: str, kind, key: str):
    text = raw.strip()
    try:
        if kind is bool or kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {kind}") from exc
    return text


def parse_config(text: str) -> Config:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    base = Config()
    changes = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown section [{section}]")
        targets = {name: getattr(base, name) for name in SECTIONS[section]}
        per_target = {name: {} for name in targets}
        for key, raw in parser.items(section):
            owner = next((n for n, obj in targets.items()
                          if key in {f.name for f in dataclasses.fields(obj)}), None)
            if owner is None:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            kind = {f.name: f.type for f in dataclasses.fields(targets[owner])}[key]
            per_target[owner][key] = _convert(raw, kind, f"[{section}] {key}")
        for name, values in per_target.items():
            if values:
                changes[name] = dataclasses.replace(targets[name], **values)
    return dataclasses.replace(base, **changes)


def load_config(path=None) -> Config:
    """Load ``path``; ``None`` falls back to the environment variable, ``"default"`` to built-ins."""
    path = path if path is not None else os.environ.get(CONFIG_ENV, "default")
    if path in ("", "default"):
        return Config()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read config {path}: {exc.strerror}", field="config") from exc
    return parse_config(text)


def dump_config(cfg: Config) -> str:
    """Render ``cfg`` in the INI schema; ``parse_config(dump_config(c)) == c``."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, names in SECTIONS.items():
        parser.add_section(section)
        for name in names:
            for key, value in dataclasses.asdict(getattr(cfg, name)).items():
                parser.set(section, key, repr(value) if isinstance(value, float) else str(value))
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
