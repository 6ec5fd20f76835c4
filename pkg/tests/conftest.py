"""Shared test configuration — project root on sys.path and small synthetic datasets."""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Ensure project root is importable
PROJECT_ROOT = Path(__file__).parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from lib.data import Dataset, make_roles  # noqa: E402


def correlated_mediator_frame(
    kinds=("continuous", "continuous"),
    rho: float = 0.0,
    n: int = 2000,
    seed: int = 1,
    outcome_effect: float = 0.5,
) -> pd.DataFrame:
    """Y, A, C plus one mediator per kind with error correlation `rho` (equicorrelated)."""
    gen = np.random.default_rng(seed)
    k = len(kinds)
    a = (gen.random(n) < 0.5).astype(float)
    c = (gen.random(n) < 0.5).astype(float)
    R = np.full((k, k), rho)
    np.fill_diagonal(R, 1.0)
    e = gen.standard_normal((n, k)) @ np.linalg.cholesky(R).T
    cols = {"A": a, "C": c}
    lp_y = -1.0 + 0.3 * a + 0.2 * c
    for j, kind in enumerate(kinds):
        latent = -0.3 + 0.6 * a + 0.4 * c + e[:, j]
        m = (latent > 0).astype(float) if kind == "binary" else latent
        cols[f"M{j + 1}"] = m
        lp_y = lp_y + outcome_effect * m
    cols["Y"] = (gen.random(n) < 1.0 / (1.0 + np.exp(-lp_y))).astype(float)
    return pd.DataFrame(cols)[["Y", "A", *[f"M{j + 1}" for j in range(k)], "C"]]


def make_data(kinds=("continuous", "continuous"), rho: float = 0.0, n: int = 2000, seed: int = 1, **kw) -> Dataset:
    roles = make_roles("Y", "A", [(f"M{j + 1}", kind) for j, kind in enumerate(kinds)], ["C"])
    return Dataset.from_frame(correlated_mediator_frame(kinds, rho, n, seed, **kw), roles, source="fixture")


@pytest.fixture
def continuous_data() -> Dataset:
    return make_data(("continuous", "continuous"), rho=0.5, n=1500, seed=11)


@pytest.fixture
def probit_data() -> Dataset:
    return make_data(("binary", "binary"), rho=0.5, n=1500, seed=12)


@pytest.fixture
def mixed_data() -> Dataset:
    return make_data(("binary", "continuous"), rho=0.5, n=1500, seed=13)


@pytest.fixture
def csv_path(tmp_path) -> Path:
    path = tmp_path / "data.csv"
    correlated_mediator_frame(("continuous", "binary"), rho=0.3, n=400, seed=5).to_csv(path, index=False)
    return path
