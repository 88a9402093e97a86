from __future__ import annotations

import numpy as np
import pytest

from analog_vmm.calibration import calibrate
from analog_vmm.core import AnalogCore, PhysicsSpec, VariationSpec
from analog_vmm.data import find_mnist_dir, load_split

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for the terminal summary, then assert.

    ``known_gap`` names a documented reason why the criterion cannot be met by
    this model; a failure is then still reported as FAIL but marks the test
    xfailed instead of erroring.
    """
    def report(number: int, name: str, ok: bool, detail: str, known_gap: str | None = None):
        line = f"criterion {number} ({name}): {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.stash[ACCEPTANCE_KEY].append(line)
        if not ok and known_gap:
            pytest.xfail(known_gap)
        assert ok, line
    return report


@pytest.fixture
def ideal_core():
    return AnalogCore.from_seed(0, VariationSpec.zero(), PhysicsSpec(ideal_mode=True))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir():
    root = find_mnist_dir()
    if root is None:
        pytest.skip("MNIST IDX files not available; set ANALOG_VMM_MNIST")
    return root


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    return load_split("train", mnist_dir), load_split("test", mnist_dir)


@pytest.fixture(scope="session")
def calibrated_core():
    core = AnalogCore.from_seed(42)
    calibrate(core)
    return core
