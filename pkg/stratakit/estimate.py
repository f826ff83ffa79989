# stratakit/estimate.py
"""
Point estimates and inference for two-stage stratified designs.

All averages run over the n eligible units (unsampled units contribute zero),
so confidence intervals scale with sqrt(V/n_eligible). Outcomes of unsampled
units are never read and may be NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import statsmodels.api as sm
from pydantic import BaseModel
from scipy.stats import norm
from sklearn.linear_model import LinearRegression

from .core import DesignResult, EstimationError, GroupPartition, PropensityMap, RandomSource, new_seed
from .matching import GroupPairing, absorb_remainders, as_points, pair_groups
from .settings import settings

# --------------------------- Models ---------------------------


class VarianceComponents(BaseModel):
    sample_var: float
    V1: float
    V0: float
    V01: float


class ReportFlags(BaseModel):
    variance_floored: bool = False
    remainder_heavy: bool = False
    subvector_warning: bool = False
    sate_floored: bool = False


class EstimateReport(BaseModel):
    estimator: str
    theta_hat: float
    V_hat: float
    components: VarianceComponents
    ci: tuple[float, float]
    alpha: float
    n_eligible: int
    n_sampled: int
    flags: ReportFlags
    # conservative variance for the sample ATE; V_acte is the residual part,
    # which is also the variance for the average conditional effect
    V_sate: float | None = None
    V_acte: float | None = None


@dataclass(frozen=True)
class CollapsedVariance:
    components: VarianceComponents
    V_hat: float
    floored: bool


@dataclass(frozen=True)
class SateBound:
    V_sate: float
    V_resid: float
    sigma1_sq: float
    sigma0_sq: float
    floored: bool


@dataclass(frozen=True)
class BalanceResult:
    beta: float
    p_value: float


# -------------------------- Helpers ---------------------------


def _inputs(y, D, T) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    D = np.asarray(D, dtype=int).reshape(-1)
    T = np.asarray(T, dtype=int).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if not (y.size == D.size == T.size):
        raise EstimationError(f"y, D, T lengths differ: {y.size}, {D.size}, {T.size}")
    if np.any((D == 1) & (T == 0)):
        raise EstimationError("treated units must be sampled")
    sampled = T == 1
    if not np.all(np.isfinite(y[sampled])):
        raise EstimationError(f"sampled unit {np.flatnonzero(sampled & ~np.isfinite(y))[0]} has no outcome")
    return np.where(sampled, y, 0.0), D, T


def _floats(values, n: int, name: str) -> np.ndarray:
    arr = values.floats() if isinstance(values, PropensityMap) else np.asarray(values, dtype=float).reshape(-1)
    if arr.size == 1:
        arr = np.full(n, float(arr[0]))
    if arr.size != n:
        raise EstimationError(f"{name} covers {arr.size} units, expected {n}")
    return arr


def _propensities(q_map, p_map, T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = T.size
    q, p = _floats(q_map, n, "q"), _floats(p_map, n, "p")
    s = T == 1
    bad = np.flatnonzero(s & ~((q > 0) & (q <= 1) & (p > 0) & (p < 1)))
    if bad.size:
        i = int(bad[0])
        raise EstimationError(f"unit {i}: propensities q={q[i]}, p={p[i]} leave an arm unreachable")
    return q, p


def _arms(D: np.ndarray, T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    treated = (T == 1) & (D == 1)
    control = (T == 1) & (D == 0)
    if not treated.any() or not control.any():
        raise EstimationError("both arms must be non-empty among sampled units")
    return treated, control


# ------------------------ Point estimates ---------------------


def difference_of_means(y, D, T) -> float:
    y, D, T = _inputs(y, D, T)
    treated, control = _arms(D, T)
    return float(y[treated].mean() - y[control].mean())


def double_ipw(y, D, T, q_map, p_map) -> float:
    y, D, T = _inputs(y, D, T)
    q, p = _propensities(q_map, p_map, T)
    n = y.size
    treated, control = (T == 1) & (D == 1), (T == 1) & (D == 0)
    return float(
        (y[treated] / (q[treated] * p[treated])).sum() / n
        - (y[control] / (q[control] * (1.0 - p[control]))).sum() / n
    )


def aipw2(y, D, T, q_map, p_map, mu1_hat=None, mu0_hat=None, folds=None, *, psi=None,
          rng: RandomSource | None = None) -> float:
    """
    Double IPW applied to regression residuals, plus the mean predicted effect.

    Without predictions, per-arm linear fits are cross-fitted on `psi` over
    `folds` (a random halving when folds is None).
    """
    y, D, T = _inputs(y, D, T)
    q, p = _propensities(q_map, p_map, T)
    n = y.size
    if folds is not None and np.unique(np.asarray(folds)).size != 2:
        raise EstimationError("cross-fitting expects exactly two fold labels")
    if mu1_hat is None or mu0_hat is None:
        if psi is None:
            raise EstimationError("aipw2 needs either predictions or covariates to cross-fit them on")
        mu1_hat, mu0_hat, _ = cross_fit_predictions(psi, y, D, T, folds, rng=rng)
    mu1 = np.asarray(mu1_hat, dtype=float).reshape(-1)
    mu0 = np.asarray(mu0_hat, dtype=float).reshape(-1)
    if mu1.size != n or mu0.size != n:
        raise EstimationError("predictions must cover every eligible unit")
    treated, control = (T == 1) & (D == 1), (T == 1) & (D == 0)
    adjust = (
        ((y - mu1)[treated] / (q[treated] * p[treated])).sum()
        - ((y - mu0)[control] / (q[control] * (1.0 - p[control]))).sum()
    ) / n
    return float(np.mean(mu1 - mu0) + adjust)


def cross_fit_predictions(psi, y, D, T, folds=None, rng: RandomSource | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per-arm linear predictions where each unit's prediction comes from a fit on
    the other fold. Returns (mu1_hat, mu0_hat, folds).
    """
    y, D, T = _inputs(y, D, T)
    X = as_points(psi)
    n = y.size
    if folds is None:
        rng = rng or RandomSource(new_seed())
        folds = np.zeros(n, dtype=int)
        folds[rng.generator("crossfit").permutation(n)[: n // 2]] = 1
    folds = np.asarray(folds).reshape(-1)
    labels = np.unique(folds)
    if labels.size != 2:
        raise EstimationError("cross-fitting expects exactly two fold labels")

    mu1, mu0 = np.zeros(n), np.zeros(n)
    for label in labels:
        target = folds == label
        train = ~target & (T == 1)
        for arm, out in ((1, mu1), (0, mu0)):
            rows = train & (D == arm)
            if rows.sum() < 2:
                raise EstimationError(f"fold {label}: arm {arm} has too few training units")
            out[target] = LinearRegression().fit(X[rows], y[rows]).predict(X[target])
    return mu1, mu0, folds


# -------------------------- Inference -------------------------


def collapsed_strata_variance(y, D, T, q_map, p_map, assignment_partition: GroupPartition,
                              mu: GroupPairing, *, floor: float | None = None) -> CollapsedVariance:
    y, D, T = _inputs(y, D, T)
    q, p = _propensities(q_map, p_map, T)
    floor = settings.VARIANCE_FLOOR if floor is None else floor
    n = y.size
    s = T == 1

    w1 = np.zeros(n)
    w0 = np.zeros(n)
    w1[s] = (1.0 - p[s] * q[s]) / (p[s] * q[s]) ** 2
    w0[s] = (1.0 - q[s] * (1.0 - p[s])) / (q[s] * (1.0 - p[s])) ** 2

    V1 = V0 = 0.0
    for uid, units in enumerate(mu.union_units(assignment_partition)):
        d = D[units]
        a, b = int(d.sum()), int(units.size - d.sum())
        if a <= 1 or b <= 1:
            raise EstimationError(f"union {uid} (groups {mu.unions[uid]}) has {a} treated and {b} control units")
        u1 = y[units] * d * np.sqrt(w1[units])
        u0 = y[units] * (1 - d) * np.sqrt(w0[units])
        V1 += (u1.sum() ** 2 - (u1**2).sum()) / (a - 1)
        V0 += (u0.sum() ** 2 - (u0**2).sum()) / (b - 1)

    V01 = 0.0
    for g in assignment_partition.groups:
        idx = np.asarray(g, dtype=int)
        d = D[idx]
        k, a = idx.size, int(d.sum())
        if a == 0 or a == k:
            continue
        r = y[idx] / np.sqrt(q[idx])
        V01 += k / (a * (k - a)) * r[d == 1].sum() * r[d == 0].sum()

    score = np.zeros(n)
    score[s] = (D[s] - p[s]) * y[s] / (q[s] * (p[s] - p[s] ** 2))
    comps = VarianceComponents(sample_var=float(np.var(score)), V1=V1 / n, V0=V0 / n, V01=V01 / n)

    V_hat = comps.sample_var - comps.V1 - comps.V0 - 2.0 * comps.V01
    floored = not V_hat > 0
    if floored:
        V_hat = max(floor * comps.sample_var, np.finfo(float).tiny)
    return CollapsedVariance(comps, float(V_hat), floored)


def confidence_interval(theta_hat: float, V_hat: float, n_eligible: int, alpha: float) -> tuple[float, float]:
    if not 0 < alpha < 1:
        raise EstimationError(f"alpha must lie in (0, 1), got {alpha}")
    if not V_hat > 0:
        raise EstimationError(f"variance must be positive, got {V_hat}")
    half = float(norm.ppf(1.0 - alpha / 2.0)) * math.sqrt(V_hat / n_eligible)
    return (theta_hat - half, theta_hat + half)


def sate_variance_bound(y, D, T, q_map, p_map, psi2, assignment_partition: GroupPartition,
                        mu: GroupPairing | None = None, *, floor: float | None = None) -> SateBound:
    """
    Conservative variance for the sample ATE.

    Arm variances are estimated inside each union of paired groups; the
    treatment-effect variance is bounded below by (sigma1 - sigma0)^2, which
    is subtracted from the residual variance.
    """
    y, D, T = _inputs(y, D, T)
    q, p = _propensities(q_map, p_map, T)
    floor = settings.VARIANCE_FLOOR if floor is None else floor
    if mu is None:
        mu = pair_groups(assignment_partition, psi2)
    n = y.size

    s1 = np.zeros(n)
    s0 = np.zeros(n)
    for uid, units in enumerate(mu.union_units(assignment_partition)):
        d = D[units]
        if d.sum() < 2 or (1 - d).sum() < 2:
            raise EstimationError(f"union {uid} needs at least two units per arm")
        s1[units] = np.var(y[units][d == 1], ddof=1)
        s0[units] = np.var(y[units][d == 0], ddof=1)

    treated, control = (T == 1) & (D == 1), (T == 1) & (D == 0)
    resid = (
        (s1[treated] / (q[treated] * p[treated]) ** 2).sum()
        + (s0[control] / (q[control] * (1.0 - p[control])) ** 2).sum()
    ) / n
    sampled = T == 1
    spread = float(((np.sqrt(s1[sampled]) - np.sqrt(s0[sampled])) ** 2 / q[sampled]).sum() / n)

    V = resid - spread
    floored = not V > 0
    if floored:
        V = max(floor * resid, np.finfo(float).tiny)
    w = 1.0 / q[sampled]
    return SateBound(
        V_sate=float(V),
        V_resid=float(resid),
        sigma1_sq=float(np.average(s1[sampled], weights=w)),
        sigma0_sq=float(np.average(s0[sampled], weights=w)),
        floored=floored,
    )


def balance_diagnostic(f, D, T) -> BalanceResult:
    """Slope and HC1 robust p-value of f ~ 1 + D among sampled units."""
    D = np.asarray(D, dtype=int).reshape(-1)
    T = np.asarray(T, dtype=int).reshape(-1)
    f = np.asarray(f, dtype=float).reshape(-1)
    s = T == 1
    _arms(D, T)
    X = sm.add_constant(D[s].astype(float), has_constant="add")
    fit = sm.OLS(f[s], X).fit(cov_type="HC1")
    beta = float(np.asarray(fit.params)[1])
    se = float(np.asarray(fit.bse)[1])
    if not se > 0:
        return BalanceResult(beta, 1.0 if abs(beta) < 1e-12 else 0.0)
    return BalanceResult(beta, float(np.asarray(fit.pvalues)[1]))


# --------------------------- Pipeline -------------------------


def _pairing_for(partition: GroupPartition, psi2) -> tuple[GroupPartition, GroupPairing]:
    if partition.complete:
        return partition, GroupPairing.single(partition)
    work = absorb_remainders(partition, psi2)
    if len(work.groups) < 2:
        return work, GroupPairing.single(work)
    return work, pair_groups(work, psi2)


def estimate_design(design: DesignResult, y, psi2, *, alpha: float | None = None,
                    estimator: Literal["auto", "dm", "ipw"] = "auto") -> EstimateReport:
    """End-to-end estimate, collapsed-strata variance and CI for a realised design."""
    alpha = settings.ALPHA if alpha is None else alpha
    psi2 = as_points(psi2)
    if psi2.shape[0] != design.n:
        raise EstimationError(f"psi2 has {psi2.shape[0]} rows, design covers {design.n} units")

    if estimator == "auto":
        estimator = "dm" if design.q_map.is_constant and design.p_map.is_constant else "ipw"
    if estimator == "dm":
        theta = difference_of_means(y, design.D, design.T)
    elif estimator == "ipw":
        theta = double_ipw(y, design.D, design.T, design.q_map, design.p_map)
    else:
        raise EstimationError(f"unknown estimator {estimator!r}")

    part = design.assignment_partition
    work, pairing = _pairing_for(part, psi2)
    var = collapsed_strata_variance(y, design.D, design.T, design.q_map, design.p_map, work, pairing)
    sate = sate_variance_bound(y, design.D, design.T, design.q_map, design.p_map, psi2, work, pairing)

    in_remainder = sum(len(part.groups[g]) for g in part.remainder_groups)
    flags = ReportFlags(
        variance_floored=var.floored,
        remainder_heavy=in_remainder > 0.1 * max(design.n_sampled, 1),
        subvector_warning=any(w.startswith("subvector") for w in design.warnings),
        sate_floored=sate.floored,
    )
    return EstimateReport(
        estimator=estimator,
        theta_hat=theta,
        V_hat=var.V_hat,
        components=var.components,
        ci=confidence_interval(theta, var.V_hat, design.n, alpha),
        alpha=alpha,
        n_eligible=design.n,
        n_sampled=design.n_sampled,
        flags=flags,
        V_sate=sate.V_sate,
        V_acte=sate.V_resid,
    )
