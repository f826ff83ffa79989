import numpy as np
import pandas as pd
import pytest

from stratakit.core import RandomSource, UnitTable


@pytest.fixture
def rng():
    return RandomSource(20240101)


@pytest.fixture
def points():
    return np.random.default_rng(7).normal(size=(40, 2))


def make_table(n: int, dim: int = 2, seed: int = 0, cost: bool = True) -> UnitTable:
    gen = np.random.default_rng(seed)
    psi = gen.normal(size=(n, dim))
    y0 = psi.sum(axis=1) + gen.normal(size=n)
    y1 = y0 + 1.0 + 0.5 * psi[:, 0]
    return UnitTable(
        psi1=psi,
        cost=gen.uniform(1.0, 4.0, size=n) if cost else None,
        y0=y0,
        y1=y1,
        psi1_names=tuple(f"x{j + 1}" for j in range(dim)),
    )


@pytest.fixture
def table():
    return make_table(120)


@pytest.fixture
def units_csv(tmp_path):
    """1000 eligible units with two covariates, a cost and an outcome."""
    gen = np.random.default_rng(3)
    n = 1000
    x = gen.normal(size=(n, 2))
    frame = pd.DataFrame({
        "id": [f"u{i:04d}" for i in range(n)],
        "x1": x[:, 0].round(6),
        "x2": x[:, 1].round(6),
        "cost": gen.uniform(1.0, 3.0, size=n).round(4),
        "y": (x.sum(axis=1) + gen.normal(size=n)).round(6),
    })
    path = tmp_path / "units.csv"
    frame.to_csv(path, index=False)
    return path
