import json
from pathlib import Path

import numpy as np
import pytest

from dualadapt.data import ShiftSpec, gen_benchmark
from dualadapt.federation import TrainConfig

FROZEN_PATH = Path(__file__).parent / "oracles" / "frozen.json"

# filled by tests/test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def frozen():
    return json.loads(FROZEN_PATH.read_text())


SMALL_SHIFTS = [
    ShiftSpec(rotation=0.5, noise=0.2),
    ShiftSpec(translation=0.8, noise=0.2),
    ShiftSpec(rotation=-0.4, translation=-0.5, scale=1.1, noise=0.3),
]


def small_bench(seed: int = 0, shifts=None, n: int = 160, d: int = 6, C: int = 3, fraction: float = 0.25):
    return gen_benchmark(C, d, n, shifts or SMALL_SHIFTS, fraction, seed)


def small_cfg(**kw) -> TrainConfig:
    base = dict(
        num_clients=3,
        client_iters=3,
        server_iters=3,
        rounds=2,
        pretrain_epochs=3,
        batch_size=16,
        feature_dim=8,
        g_hidden=(12,),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def bench():
    return small_bench()


@pytest.fixture
def cfg():
    return small_cfg()


def fd_rel_error(f, arrays, analytic, h=1e-5):
    """Normwise relative error between analytic gradients and central differences.

    error = max|a - fd| / max(max|a|, max|fd|, 1e-12) over all entries.
    """
    num, den = 0.0, 1e-12
    for k, (arr, g) in enumerate(zip(arrays, analytic)):
        fd = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k][i] += h
            minus[k][i] -= h
            fd[i] = (f(plus) - f(minus)) / (2 * h)
        num = max(num, float(np.max(np.abs(g - fd))) if g.size else 0.0)
        den = max(den, float(np.max(np.abs(g))) if g.size else 0.0, float(np.max(np.abs(fd))) if fd.size else 0.0)
    return num / den


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
