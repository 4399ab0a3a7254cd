import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nnci.data import Dataset  # noqa: E402


@pytest.fixture
def tiny():
    """Three rows: two controls at x=0,1 and one treated at x=3."""
    return Dataset(X=[[0.0], [1.0], [3.0]], t=[0, 0, 1], y=[1.0, 2.0, 5.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dataset(rng, n, d, integer_grid=False):
    """Random rows with both groups of size >= 1; integer grids create ties."""
    if integer_grid:
        X = rng.integers(-3, 4, size=(n, d)).astype(float)
    else:
        X = rng.normal(size=(n, d))
    t = rng.integers(0, 2, size=n).astype(float)
    t[0], t[1] = 0.0, 1.0
    y = rng.normal(size=n)
    return Dataset(X=X, t=t, y=y)


def small_model(seed, family="dragonnet", nn=True, d=3, l2=1e-2):
    """A tiny three-head model with random (non-zero) biases."""
    from nnci.models import ArchConfig, build
    arch = ArchConfig(family=family, use_neighbor_features=nn, rep_layers=(5, 4), head_layers=(3, 3),
                      head_l2=l2)
    model = build(arch, d, seed)
    r = np.random.default_rng(seed + 1)
    for v in model.parameters().values():
        if v.ndim == 1:
            v[...] = r.normal(scale=0.3, size=v.shape)
    model.touch()
    return model


def small_batch(seed, n=7, d=3):
    from nnci.neighbors import NeighborFeatures
    r = np.random.default_rng(seed + 2)
    X = r.normal(size=(n, d))
    t = (r.uniform(size=n) < 0.5).astype(float)
    t[0], t[1] = 0.0, 1.0
    y = r.normal(size=n)
    feats = NeighborFeatures(r.normal(size=n), r.normal(size=n))
    return X, t, y, feats


ACCEPTANCE_LINES = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
