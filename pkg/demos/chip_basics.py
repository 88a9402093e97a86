"""A single vector-matrix product on the simulated chip, before and after calibration.

    python demos/chip_basics.py
"""

from __future__ import annotations

import numpy as np

from analog_vmm import AnalogCore, MacOptions, calibrate, estimate_cost, execute_batch, plan_model
from analog_vmm.calibration import STIMULUS_WEIGHT, measure_stimulus_response, response_cv
from analog_vmm.compiler import dense_model
from analog_vmm.core import Placement


def main(seed: int = 42) -> None:
    rng = np.random.default_rng(0)
    core = AnalogCore.from_seed(seed)
    placement = Placement(block=0, col_offset=0, n_cols=64, n_rows=128)
    w = rng.integers(-20, 21, size=(128, 64))
    x = rng.integers(0, 32, size=(1, 128))
    ideal = x @ w * core.physics.charge_to_lsb * 4

    def show(label):
        core.load_matrix(w, placement)
        out = execute_batch(core, placement, x, MacOptions(resends=4)).values[0]
        err = out - np.clip(np.rint(ideal[0]), -128, 127)
        cv = response_cv(measure_stimulus_response(core))
        print(f"{label:>12}: neuron CV {cv:.3f}, rms error vs ideal {np.sqrt(np.mean(err ** 2)):.1f} LSB")

    show("uncalibrated")
    calibrate(core)
    show("calibrated")
    neg = -measure_stimulus_response(core, -STIMULUS_WEIGHT)
    print(f"inhibitory CV after calibration {response_cv(neg):.3f}")

    report = estimate_cost(plan_model(dense_model()))
    print(report.summary())


if __name__ == "__main__":
    main()
