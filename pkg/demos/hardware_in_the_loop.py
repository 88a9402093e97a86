"""Train the dense MNIST model in software, deploy it on a calibrated simulated
chip, then continue training for one epoch with the chip in the loop.

    ANALOG_VMM_MNIST=/path/to/mnist python demos/hardware_in_the_loop.py [epochs]

Takes a few minutes on a desktop CPU.
"""

from __future__ import annotations

import sys

from analog_vmm import AnalogCore, calibrate
from analog_vmm import training as tr
from analog_vmm.compiler import dense_model
from analog_vmm.data import load_split


def main(epochs: int = 30) -> None:
    train, test = load_split("train"), load_split("test")
    state = tr.init_state(dense_model(), seed=0)
    tr.train_software(state, train, epochs,
                      callback=lambda e, m: print(f"epoch {e + 1}: loss {sum(m.loss[-50:]) / 50:.4f}"))
    print(f"float       {tr.evaluate(state, test, 'float').accuracy:.4f}")

    core = AnalogCore.from_seed(42)
    calibrate(core)
    dep = tr.prepare_hardware(state, core, train.images[:2000], train.images[:200])
    print(f"resends per layer {dep.resends}")
    print(f"6-bit       {tr.evaluate(state, test, 'quantized').accuracy:.4f}")
    print(f"chip        {tr.evaluate(state, test, 'simulator').accuracy:.4f}")

    tr.set_learning_rate(state, 1e-3)
    tr.train_epoch(state, train)
    print(f"chip + ITL  {tr.evaluate(state, test, 'simulator').accuracy:.4f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 30)
