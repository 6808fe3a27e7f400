import numpy as np
import pytest

from delora.adapters import PretrainedLayer
from delora.numkit import make_rng

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def layer(rng):
    return PretrainedLayer.create(rng.standard_normal((7, 5)), rng.standard_normal(5))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_state(adapter, rng):
    """Perturb every learnable factor so states are generic (no zero blocks)."""
    out = adapter.copy()
    for k, v in out.params.items():
        if k == "lambda":
            out.params[k] = np.array(float(v) * rng.uniform(0.5, 1.5))
        else:
            out.params[k] = v + 0.5 * rng.standard_normal(v.shape)
    return out
