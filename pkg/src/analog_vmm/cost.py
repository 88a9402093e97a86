"""Analytic runtime and energy model for packed chip runs."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

from .compiler import SLOTS_PER_RUN, PartitionPlan, partition, plan_model, total_runs, total_tiles
from .errors import ConfigurationError, ContractViolation


@dataclass(frozen=True)
class TimingSpec:
    t_weight_write_ms: float = 5.0
    t_reset_us: float = 1.0
    t_settle_us: float = 2.0
    t_adc_us: float = 1.5
    t_matmul_ms: float = 5.0
    power_w: float = 0.3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigurationError(f"{name} must be positive, got {value!r}")


@dataclass
class CostReport:
    runs: int
    tiles: int
    runtime_ms: float  # per image
    energy_mj: float  # per image
    batch: int = 1
    breakdown: dict = field(default_factory=dict)

    def summary(self) -> str:
        return (f"{self.tiles} tiles in {self.runs} runs: {self.runtime_ms:g} ms and "
                f"{self.energy_mj:g} mJ per image (batch {self.batch})")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "value"])
            for key in ("runs", "tiles", "batch", "runtime_ms", "energy_mj"):
                w.writerow([key, repr(getattr(self, key))])
            for key, value in self.breakdown.items():
                w.writerow([f"breakdown.{key}", repr(value)])


def _as_plans(plans) -> list[PartitionPlan]:
    if isinstance(plans, PartitionPlan):
        return [plans]
    plans = list(plans)
    if not plans or not all(isinstance(p, PartitionPlan) for p in plans):
        raise ContractViolation("estimate_cost needs one or more partition plans")
    return plans


def estimate_cost(plans, timing: TimingSpec | None = None, batch: int = 1) -> CostReport:
    """Per-image runtime and energy of a packed model.

    Every chip run costs one ``t_matmul_ms`` per image; weight writes happen
    once per run and batch and are amortized over the batch, so they are
    reported in the breakdown but not added to the per-image runtime.
    Energy is ``power * runtime``.
    """
    timing = timing or TimingSpec()
    if int(batch) != batch or batch < 1:
        raise ContractViolation("batch must be a positive integer")
    plans = _as_plans(plans)
    runs, tiles = total_runs(plans), total_tiles(plans)
    runtime = runs * timing.t_matmul_ms
    analog = runs * (timing.t_reset_us + timing.t_settle_us + timing.t_adc_us) / 1000.0
    breakdown = {
        "analog_phases_ms": analog,
        "transfer_and_control_ms": runtime - analog,
        "weight_write_per_batch_ms": runs * timing.t_weight_write_ms,
        "weight_write_per_image_ms": runs * timing.t_weight_write_ms / batch,
    }
    return CostReport(runs, tiles, runtime, timing.power_w * runtime, int(batch), breakdown)


def cost_for_model(name: str, timing: TimingSpec | None = None, batch: int = 1) -> CostReport:
    """Cost of a registered model (``dense``, ``conv``) or of one full-size tile (``single``)."""
    from .compiler import MODELS
    if name == "single":
        return estimate_cost(partition(128, 128), timing, batch)
    if name not in MODELS:
        raise ContractViolation(f"unknown model {name!r}; choose from {sorted(MODELS) + ['single']}")
    return estimate_cost(plan_model(MODELS[name]()), timing, batch)


def runs_for_tiles(tiles: int) -> int:
    """Run count for ``tiles`` signed half-block tiles under the packing rule."""
    return math.ceil(tiles / SLOTS_PER_RUN)
