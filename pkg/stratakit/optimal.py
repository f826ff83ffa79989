# stratakit/optimal.py
"""
Budget-constrained optimal propensities and the alternating design.

Sequence used by the pilot pipeline:
  * p from the arm standard deviations (per unit, or the best constant)
  * q proportional to sigma_bar / sqrt(cost), normalised to the budget over the
    main-experiment units
  * feasibility_rounding when some q exceeds 1
  * discretize_propensity onto a/k_max with at most L_max levels

Costs do not depend on the treatment arm here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .core import (
    InfeasibleBudgetError,
    Propensity,
    PropensityMap,
    RandomSource,
    StratakitError,
    new_seed,
)


def _vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise StratakitError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class VarianceProfile:
    sigma1: np.ndarray
    sigma0: np.ndarray
    source: Literal["oracle", "pilot"] = "oracle"

    def __post_init__(self) -> None:
        s1, s0 = _vector(self.sigma1, "sigma1"), _vector(self.sigma0, "sigma0")
        if s1.shape != s0.shape:
            raise StratakitError(f"sigma1 has {s1.size} entries, sigma0 has {s0.size}")
        if not (np.all(s1 > 0) and np.all(s0 > 0)):
            raise StratakitError("conditional standard deviations must be strictly positive")
        object.__setattr__(self, "sigma1", s1)
        object.__setattr__(self, "sigma0", s0)

    @classmethod
    def homoskedastic(cls, n: int, sigma1: float = 1.0, sigma0: float = 1.0) -> VarianceProfile:
        return cls(np.full(n, float(sigma1)), np.full(n, float(sigma0)))

    def __len__(self) -> int:
        return self.sigma1.size

    def ex_ante_sd(self, p) -> np.ndarray:
        p = np.broadcast_to(np.asarray(p, dtype=float), self.sigma1.shape)
        return np.sqrt(self.sigma1**2 / p + self.sigma0**2 / (1.0 - p))


@dataclass(frozen=True, eq=False)
class BudgetSpec:
    B: float
    costs: np.ndarray

    def __post_init__(self) -> None:
        costs = _vector(self.costs, "costs")
        if not np.all(costs > 0):
            raise StratakitError("costs must be strictly positive")
        if not self.B > 0:
            raise StratakitError(f"budget must be positive, got {self.B}")
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "B", float(self.B))

    @property
    def saturated(self) -> bool:
        """Budget covers sampling every unit."""
        return self.B >= float(self.costs.mean())


# ------------------------ Propensities ------------------------


def neyman_propensity(profile: VarianceProfile) -> np.ndarray:
    return profile.sigma1 / (profile.sigma1 + profile.sigma0)


def optimal_constant_propensity(profile: VarianceProfile) -> float:
    r1 = math.sqrt(float(np.mean(profile.sigma1**2)))
    r0 = math.sqrt(float(np.mean(profile.sigma0**2)))
    return r1 / (r1 + r0)


def optimal_sampling_propensity(profile: VarianceProfile, p, budget: BudgetSpec) -> np.ndarray:
    """
    q_i = B * sigma_bar_i / sqrt(c_i) / mean(sigma_bar * sqrt(c)).

    Means run over the units of the profile (the main experiment). Values can
    exceed 1; pass the result through feasibility_rounding.
    """
    if len(profile) != budget.costs.size:
        raise StratakitError(f"profile covers {len(profile)} units, costs {budget.costs.size}")
    if isinstance(p, PropensityMap):
        p = p.floats()
    sbar = profile.ex_ante_sd(p)
    root_c = np.sqrt(budget.costs)
    return budget.B * sbar / root_c / float(np.mean(sbar * root_c))


def feasibility_rounding(q, costs, B: float) -> np.ndarray:
    """
    Freeze the largest q above 1 at 1 and spread the residual budget over the
    remaining units in proportion to their current q, until max(q) <= 1.
    """
    q = _vector(q, "q").copy()
    c = _vector(costs, "costs")
    n = q.size
    if abs(float(np.mean(q * c)) - B) > 1e-9 * abs(B):
        raise InfeasibleBudgetError(f"input propensities spend {np.mean(q * c):.6g}, budget is {B:.6g}")
    if B >= float(c.mean()):
        print(f"[optimal] WARNING: budget {B:.6g} covers every unit (mean cost {c.mean():.6g}); q set to 1")
        return np.ones(n)

    frozen = np.zeros(n, dtype=bool)
    while True:
        over = np.flatnonzero(~frozen & (q > 1.0))
        if over.size == 0:
            break
        j = int(over[np.argmax(q[over])])
        frozen[j] = True
        q[j] = 1.0
        free = ~frozen
        residual = B - float(c[frozen].sum()) / n
        if residual <= 0:
            raise InfeasibleBudgetError(f"budget exhausted after freezing {int(frozen.sum())} units")
        share = residual / (free.sum() / n)
        q[free] *= share / float(np.mean(q[free] * c[free]))
    return q


def _grid_dp(sorted_q: np.ndarray, grid: np.ndarray, max_levels: int) -> list[int]:
    n = sorted_q.size
    p1 = np.concatenate([[0.0], np.cumsum(sorted_q)])
    p2 = np.concatenate([[0.0], np.cumsum(sorted_q**2)])

    def seg(lo: int, hi: int, v: float) -> float:
        if hi <= lo:
            return 0.0
        return float((p2[hi] - p2[lo]) - 2.0 * v * (p1[hi] - p1[lo]) + (hi - lo) * v * v)

    size = grid.size
    upto = np.searchsorted(sorted_q, grid, side="right")
    cost = np.full((max_levels + 1, size), math.inf)
    back = np.full((max_levels + 1, size), -1, dtype=int)
    for j in range(size):
        cost[1, j] = seg(0, upto[j], grid[j])
    for c in range(2, max_levels + 1):
        for j2 in range(size):
            for j1 in range(j2):
                if not math.isfinite(cost[c - 1, j1]):
                    continue
                # units at the midpoint go to the lower level
                cut = int(np.searchsorted(sorted_q, (grid[j1] + grid[j2]) / 2.0, side="right"))
                cut = min(max(cut, upto[j1]), upto[j2])
                val = cost[c - 1, j1] + seg(upto[j1], cut, grid[j1]) + seg(cut, upto[j2], grid[j2])
                if val < cost[c, j2] - 1e-12 * max(1.0, abs(val)):
                    cost[c, j2], back[c, j2] = val, j1

    best, best_c, best_j = math.inf, 1, 0
    for c in range(1, max_levels + 1):
        for j in range(size):
            total = cost[c, j] + seg(upto[j], n, grid[j])
            if total < best - 1e-12 * max(1.0, abs(total)):
                best, best_c, best_j = total, c, j

    chosen = [best_j]
    for c in range(best_c, 1, -1):
        chosen.append(int(back[c, chosen[-1]]))
    return sorted(chosen)


def discretize_propensity(q, k_max: int, L_max: int) -> PropensityMap:
    """
    Nearest PropensityMap with levels on the grid a/k_max and at most L_max
    distinct levels, by mean squared error. Exact dynamic programme over the
    sorted values; equidistant values round down.
    """
    q = _vector(q, "q")
    if k_max < 2 or L_max < 1:
        raise StratakitError(f"need k_max >= 2 and L_max >= 1, got {k_max}, {L_max}")
    if not (np.all(q > 0) and np.all(q <= 1.0)):
        raise StratakitError("propensities must lie in (0, 1]")

    grid = np.arange(1, k_max + 1) / k_max
    chosen = _grid_dp(np.sort(q), grid, min(L_max, k_max))
    levels = grid[chosen]
    mids = (levels[:-1] + levels[1:]) / 2.0
    slot = np.searchsorted(mids, q, side="left")
    props = [Propensity(chosen[s] + 1, k_max) for s in range(len(chosen))]
    return PropensityMap(tuple(props[s] for s in slot))


# ---------------------- Alternating design --------------------


def cut_weight(h, d) -> float:
    """Weight of K_n edges (w_ij = h_i h_j) crossing the allocation d."""
    h, d = _vector(h, "h"), np.asarray(d).reshape(-1)
    return float(h[d == 1].sum() * h[d == 0].sum())


def _objective(h: np.ndarray, d: np.ndarray) -> float:
    return float(((d - 0.5) @ h) ** 2)


@dataclass(frozen=True, eq=False)
class AlternatingDesign:
    d_star: np.ndarray
    allocation: np.ndarray
    objective: float
    cut: float
    mode: str


def _subset_sums(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    codes = np.arange(2 ** v.size)
    bits = (codes[:, None] >> np.arange(v.size)) & 1
    return bits @ v, bits


def _exact_allocation(h: np.ndarray) -> np.ndarray:
    # meet in the middle: pair every subset sum of the first half with the
    # closest complement among the second half
    half = h.size // 2
    target = h.sum() / 2.0
    s_lo, b_lo = _subset_sums(h[:half])
    s_hi, b_hi = _subset_sums(h[half:])
    order = np.argsort(s_hi, kind="stable")
    ranked = s_hi[order]
    pos = np.searchsorted(ranked, target - s_lo)
    lo = np.clip(pos - 1, 0, ranked.size - 1)
    hi = np.clip(pos, 0, ranked.size - 1)
    gap_lo = np.abs(s_lo + ranked[lo] - target)
    gap_hi = np.abs(s_lo + ranked[hi] - target)
    pick = np.where(gap_hi < gap_lo, hi, lo)
    gaps = np.minimum(gap_lo, gap_hi)
    row = int(np.argmin(gaps))
    return np.concatenate([b_lo[row], b_hi[order[pick[row]]]]).astype(np.int8)


def _local_search(h: np.ndarray, rng: RandomSource, restarts: int) -> np.ndarray:
    target = h.sum() / 2.0
    best, best_obj = None, math.inf
    for r in range(restarts):
        d = rng.generator("maxcut", r).integers(0, 2, size=h.size).astype(np.int8)
        s = float(d @ h - target)
        while True:
            flips = s + (1 - 2 * d) * h
            i = int(np.argmin(np.abs(flips)))
            move, gain = ("flip", i, -1), abs(flips[i])
            ones, zeros = np.flatnonzero(d == 1), np.flatnonzero(d == 0)
            if ones.size and zeros.size:
                swaps = s - h[ones][:, None] + h[zeros][None, :]
                a, b = np.unravel_index(int(np.argmin(np.abs(swaps))), swaps.shape)
                if abs(swaps[a, b]) < gain:
                    move, gain = ("swap", int(ones[a]), int(zeros[b])), abs(swaps[a, b])
            if not gain < abs(s) * (1.0 - 1e-12):
                break
            if move[0] == "flip":
                d[move[1]] = 1 - d[move[1]]
            else:
                d[move[1]], d[move[2]] = 0, 1
            s = float(d @ h - target)
        if s * s < best_obj:
            best, best_obj = d.copy(), s * s
    return best


def alternating_design(h, mode: Literal["exact", "heuristic"] = "exact", rng: RandomSource | None = None,
                       *, restarts: int = 50, max_exact: int = 24) -> AlternatingDesign:
    """
    Allocation d* minimising ((d - 1/2)'h)^2 (the Max-Cut of K_n with weights
    h_i h_j), realised as d* or its mirror with probability 1/2 each.
    """
    h = _vector(h, "h")
    if h.size == 0:
        raise StratakitError("balance vector is empty")
    rng = rng or RandomSource(new_seed())
    if mode == "exact":
        if h.size > max_exact:
            raise StratakitError(f"exact mode handles n <= {max_exact}, got {h.size}; use heuristic")
        d = _exact_allocation(h)
    elif mode == "heuristic":
        if restarts < 1:
            raise StratakitError("heuristic mode needs at least one restart")
        d = _local_search(h, rng, restarts)
    else:
        raise StratakitError(f"unknown mode {mode!r}")

    if d[0] == 1:
        d = (1 - d).astype(np.int8)
    mirror = rng.generator("alternating", "mirror").random() < 0.5
    allocation = (1 - d).astype(np.int8) if mirror else d.copy()
    return AlternatingDesign(d, allocation, _objective(h, d), cut_weight(h, d), mode)


def design_mse(y1, y0, allocations: Sequence[np.ndarray], p: float = 0.5,
               weights: Sequence[float] | None = None) -> float:
    """Exact MSE for the sample ATE of mean(D y1/p - (1-D) y0/(1-p)) over a finite design."""
    y1, y0 = _vector(y1, "y1"), _vector(y0, "y0")
    sate = float(np.mean(y1 - y0))
    errs = np.array([np.mean(d * y1 / p - (1 - d) * y0 / (1 - p)) - sate for d in map(np.asarray, allocations)])
    w = np.full(errs.size, 1.0 / errs.size) if weights is None else np.asarray(weights, dtype=float)
    return float(w @ errs**2)
