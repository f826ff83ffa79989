# stratakit/pilot.py
"""
Pilot-based feasible designs.

Variance functions are estimated in two nearest-neighbour passes per arm:
first the arm mean, then the mean of squared residuals, each a weighted
average over the k nearest pilot units of that arm with inverse-propensity
weights. Both are evaluated at the main-experiment covariates, so budget
normalisation happens over the main units only.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import statsmodels.api as sm
from sklearn.model_selection import GridSearchCV, KFold
from sklearn.neighbors import KNeighborsRegressor, NearestNeighbors

from .core import DesignResult, Propensity, PropensityMap, StratakitError, UnitTable
from .matching import as_points
from .optimal import (
    BudgetSpec,
    VarianceProfile,
    discretize_propensity,
    feasibility_rounding,
    neyman_propensity,
    optimal_constant_propensity,
    optimal_sampling_propensity,
)
from .settings import settings

K_GRID = (5, 10, 20, 40, 80)


@dataclass(frozen=True, eq=False)
class PilotData:
    table: UnitTable
    T: np.ndarray
    D: np.ndarray
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        n = self.table.n
        if self.table.y_obs is None:
            raise StratakitError("pilot table has no observed outcomes")
        for name in ("T", "D", "q", "p"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if arr.size == 1:
                arr = np.full(n, arr[0])
            if arr.size != n:
                raise StratakitError(f"pilot {name} has {arr.size} entries, expected {n}")
            object.__setattr__(self, name, arr)
        sampled = self.T == 1
        if not np.all(np.isfinite(self.table.y_obs[sampled])):
            raise StratakitError("sampled pilot units need observed outcomes")
        if np.any(sampled & ~((self.q > 0) & (self.p > 0) & (self.p < 1))):
            raise StratakitError("pilot propensities must satisfy q > 0 and 0 < p < 1")

    @classmethod
    def from_design(cls, table: UnitTable, design: DesignResult) -> PilotData:
        return cls(table, design.T, design.D, design.q_map.floats(), design.p_map.floats())

    def arm(self, d: int) -> np.ndarray:
        return (self.T == 1) & (self.D == d)


def _choose_k(X: np.ndarray, y: np.ndarray, seed: int) -> int:
    usable = int(0.8 * len(y))
    grid = [k for k in K_GRID if 3 <= k <= usable] or [min(3, usable)]
    if len(grid) == 1:
        return grid[0]
    search = GridSearchCV(
        KNeighborsRegressor(),
        {"n_neighbors": grid},
        cv=KFold(n_splits=5, shuffle=True, random_state=seed),
        scoring="neg_mean_squared_error",
    )
    search.fit(X, y)
    return int(search.best_params_["n_neighbors"])


def _smoother(X: np.ndarray, target: np.ndarray, weights: np.ndarray, k: int):
    index = NearestNeighbors(n_neighbors=k).fit(X)

    def predict(Z: np.ndarray) -> np.ndarray:
        _, idx = index.kneighbors(Z)
        w = weights[idx]
        return (w * target[idx]).sum(axis=1) / w.sum(axis=1)

    return predict


def estimate_variance_functions(pilot: PilotData, main_psi, k_neighbors: int | None = None,
                                *, seed: int = 0) -> VarianceProfile:
    """
    Arm-wise conditional standard deviations on the main-experiment units.

    k_neighbors=None picks k per arm by 5-fold cross-validation of the mean
    regression. Estimates are clamped below at 1e-6 times the pilot outcome
    variance.
    """
    X = pilot.table.psi1
    Z = as_points(main_psi)
    if Z.shape[1] != X.shape[1]:
        raise StratakitError(f"main covariates have {Z.shape[1]} columns, pilot has {X.shape[1]}")
    y = np.where(pilot.T == 1, pilot.table.y_obs, 0.0)
    spread = float(np.var(y[pilot.T == 1]))
    floor = 1e-6 * spread if spread > 0 else 1e-12

    sd = {}
    for d in (1, 0):
        arm = pilot.arm(d)
        size = int(arm.sum())
        if size < 3 or (k_neighbors is not None and size < k_neighbors):
            raise StratakitError(f"pilot arm {d} has {size} units, too few for {k_neighbors or 3} neighbours")
        if k_neighbors is not None and k_neighbors < 3:
            raise StratakitError(f"k_neighbors must be at least 3, got {k_neighbors}")
        p_arm = pilot.p if d == 1 else 1.0 - pilot.p
        Xa, ya = X[arm], y[arm]
        wa = 1.0 / (p_arm[arm] * pilot.q[arm])
        k = k_neighbors or _choose_k(Xa, ya, seed)

        mean_fn = _smoother(Xa, ya, wa, k)
        resid_sq = (ya - mean_fn(Xa)) ** 2
        var_fn = _smoother(Xa, resid_sq, wa, k)
        sd[d] = np.sqrt(np.maximum(var_fn(Z), floor))
        if settings.VERBOSE:
            print(f"[pilot] arm {d}: {size} units, k={k}")

    return VarianceProfile(sd[1], sd[0], source="pilot")


# ------------------------ Feasible designs --------------------


@dataclass(frozen=True, eq=False)
class FeasibleDesign:
    q_map: PropensityMap
    p_map: PropensityMap
    q_continuous: np.ndarray
    p_continuous: np.ndarray
    budget_gap: float
    flags: tuple[str, ...] = ()


def feasible_optimal_design(profile: VarianceProfile, costs, B: float, k_max: int | None = None,
                            L_max: int | None = None, *, constant_p: bool = False) -> FeasibleDesign:
    k_max = k_max or settings.KMAX
    L_max = L_max or settings.LEVELS
    budget = BudgetSpec(B, costs)
    n = len(profile)

    if constant_p:
        p_cont = np.full(n, optimal_constant_propensity(profile))
    else:
        p_cont = neyman_propensity(profile)
    # assignment propensities stay strictly inside (0, 1)
    p_clipped = np.clip(p_cont, 1.0 / k_max, (k_max - 1) / k_max)
    p_map = discretize_propensity(p_clipped, k_max, 1 if constant_p else L_max)

    flags: list[str] = []
    q_star = optimal_sampling_propensity(profile, p_cont, budget)
    if budget.saturated:
        flags.append("budget_saturated")
    q_cont = feasibility_rounding(q_star, budget.costs, budget.B)
    q_map = discretize_propensity(q_cont, k_max, L_max)

    gap = float(np.mean(q_map.floats() * budget.costs)) - budget.B
    if abs(gap) > budget.B * max(0.05, 1.0 / k_max):
        flags.append("budget_slack")
        print(f"[pilot] WARNING: discretised sampling spends {gap:+.4g} against budget {budget.B:.4g}")
    return FeasibleDesign(q_map, p_map, q_cont, p_cont, gap, tuple(flags))


@dataclass(frozen=True)
class SmallPilotChoice:
    propensity: Propensity
    p_hat: float
    s1: float
    s0: float
    flags: tuple[str, ...] = ()


def round_to_farey(value: float, k_max: int) -> Propensity:
    """Nearest a/k with 1 <= a < k <= k_max; ties toward 1/2, then smaller k."""
    if k_max < 2:
        raise StratakitError(f"k_max must be at least 2, got {k_max}")
    target = Fraction(value)
    half = Fraction(1, 2)
    best = min(
        (Fraction(a, k) for k in range(2, k_max + 1) for a in range(1, k)),
        key=lambda f: (abs(f - target), abs(f - half), f.denominator),
    )
    return Propensity.from_fraction(best)


def _arm_rms(X: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    design = sm.add_constant(X, has_constant="add")
    if y.size <= design.shape[1] or np.linalg.matrix_rank(design) < design.shape[1]:
        return float(np.std(y, ddof=1)), True
    resid = sm.OLS(y, design).fit().resid
    return float(np.sqrt(np.mean(resid**2))), False


def small_pilot_constant(pilot: PilotData, k_max: int | None = None, n_main: int | None = None) -> SmallPilotChoice:
    """Constant assignment propensity from linear residual spreads, rounded to a short fraction."""
    k_max = k_max or settings.KMAX
    X = pilot.table.psi1
    y = pilot.table.y_obs
    flags: list[str] = []
    spread = {}
    for d in (1, 0):
        arm = pilot.arm(d)
        if arm.sum() < 2:
            raise StratakitError(f"pilot arm {d} has fewer than 2 units")
        spread[d], fallback = _arm_rms(X[arm], y[arm])
        if fallback:
            flags.append(f"arm{d}_sd_fallback")
    if spread[1] + spread[0] <= 0:
        raise StratakitError("pilot outcomes have no spread in either arm")

    p_hat = spread[1] / (spread[1] + spread[0])
    if n_main is not None and k_max**2 > n_main:
        flags.append("fine_grid")
        print(f"[pilot] WARNING: k_max={k_max} is fine for a main experiment of {n_main} units")
    return SmallPilotChoice(round_to_farey(p_hat, k_max), p_hat, spread[1], spread[0], tuple(flags))
