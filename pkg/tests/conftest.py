import numpy as np
import pytest

from milaed.mil import Bag


def toy_bags(n_bags, n_classes=3, dim=12, n_inst=6, seed=0, prefix="b"):
    """Gaussian-noise instances; a positive class plants its prototype in one instance."""
    rng = np.random.default_rng(seed)
    protos = np.random.default_rng(1234).normal(0, 3, size=(n_classes, dim))
    bags = []
    for i in range(n_bags):
        x = rng.normal(0, 1, size=(n_inst, dim))
        labels = (rng.random(n_classes) < 0.4).astype(int)
        for c in np.flatnonzero(labels):
            x[rng.integers(n_inst)] += protos[c]
        bags.append(Bag(f"{prefix}{i}", x, labels))
    return bags


@pytest.fixture
def toy():
    return toy_bags


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
