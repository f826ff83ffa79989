# stratakit/sim.py
"""
Simulation models, the design registry and the Monte Carlo comparison harness.

Every rep draws a fresh population from the model, runs each requested design
on it, reveals the outcomes of sampled units and estimates the ATE. Reps run in
worker processes; rep i always uses the sub-stream ("rep", i) of the master
seed, so results do not depend on the worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache, partial
from typing import Any, Literal, Sequence

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from .core import (
    DesignResult,
    Propensity,
    PropensityMap,
    RandomSource,
    StratakitError,
    UnitTable,
)
from .estimate import confidence_interval, estimate_design
from .optimal import VarianceProfile, discretize_propensity, feasibility_rounding
from .pilot import PilotData, estimate_variance_functions, feasible_optimal_design
from .randomize import two_stage
from .settings import settings

# ---------------------------- Models --------------------------

_BASE = dict(
    mean_rule="quadratic", beta1=3.0, beta0=0.0, q_scale=0.5,
    cost_rule="step", cost_high=10.0, budget=4.0, p_base="3/8",
    zeta0=1.0, zeta1=9.0, zeta_slope=0.0, residual="gaussian", half_width=1.0,
)

MODELS: dict[int, dict[str, Any]] = {
    1: dict(_BASE),
    2: {**_BASE, "cost_high": 4.0, "budget": 1.0, "p_base": "1/2",
        "zeta0": 5.0, "zeta1": 5.0, "zeta_slope": 30.0, "residual": "uniform"},
    3: {**_BASE, "cost_rule": "quadratic", "budget": 2.0, "zeta0": 2.0, "zeta1": 2.0},
    4: {**_BASE, "beta0": 2.0, "q_scale": 2.0, "cost_rule": "quadratic", "budget": 2.0,
        "zeta0": 5.0, "zeta1": 5.0, "zeta_slope": 30.0},
    5: {**_BASE, "mean_rule": "arctan", "beta1": 10.0, "beta0": 10.0, "q_scale": 0.0,
        "p_base": "1/2", "zeta0": 2.0, "zeta1": 2.0},
    6: {**_BASE, "mean_rule": "trig", "beta1": 0.0, "q_scale": 0.0, "p_base": "3/10",
        "zeta0": 6.0, "zeta1": 6.0, "half_width": math.pi},
}


@dataclass(frozen=True)
class DgpSpec:
    """
    Fully parameterised simulation model.

    Linear coefficients are scale * (1, 1/2, ..., 1/dim); the quadratic term is
    q_scale * (1'psi)^2. zeta0/zeta1 are conditional variances, zeta1 growing by
    zeta_slope * |psi|^2 / dim. Step costs are 1 below psi_1 = 0 and cost_high
    above; quadratic costs are 1/2 + 10 |psi|^2 / dim.
    """

    model_id: int | str
    n: int
    dim: int = 2
    seed: int | None = None
    mean_rule: Literal["quadratic", "arctan", "trig"] = "quadratic"
    beta1: float = 3.0
    beta0: float = 0.0
    q_scale: float = 0.5
    cost_rule: Literal["step", "quadratic"] = "step"
    cost_high: float = 10.0
    budget: float = 4.0
    p_base: str = "3/8"
    zeta0: float = 1.0
    zeta1: float = 9.0
    zeta_slope: float = 0.0
    residual: Literal["gaussian", "uniform"] = "gaussian"
    half_width: float = 1.0

    def __post_init__(self) -> None:
        if self.n < 2 or self.dim < 1:
            raise StratakitError(f"need n >= 2 and dim >= 1, got n={self.n}, dim={self.dim}")
        Propensity.parse(self.p_base)

    @classmethod
    def model(cls, model_id: int, n: int, dim: int = 2, seed: int | None = None) -> DgpSpec:
        if model_id not in MODELS:
            raise StratakitError(f"unknown model {model_id}; choose from {sorted(MODELS)}")
        return cls(model_id=model_id, n=n, dim=dim, seed=seed, **MODELS[model_id])

    @property
    def baseline_p(self) -> Propensity:
        return Propensity.parse(self.p_base)

    def coefficients(self, scale: float) -> np.ndarray:
        return scale / np.arange(1, self.dim + 1)


def mean_functions(spec: DgpSpec, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if spec.mean_rule == "trig":
        return 2.0 * np.cos(psi).sum(axis=1), 4.0 * np.sin(psi).sum(axis=1) + 2.0 * psi.sum(axis=1)
    if spec.mean_rule == "arctan":
        def g(x):
            return 0.5 + np.arctan(x) / math.pi

        return 5.0 * g(psi @ spec.coefficients(spec.beta0)), 5.0 * g(psi @ spec.coefficients(spec.beta1))
    quad = spec.q_scale * psi.sum(axis=1) ** 2
    return psi @ spec.coefficients(spec.beta0), psi @ spec.coefficients(spec.beta1) + quad


def variance_functions(spec: DgpSpec, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z0 = np.full(psi.shape[0], spec.zeta0)
    z1 = spec.zeta1 + spec.zeta_slope * (psi**2).sum(axis=1) / spec.dim
    return z0, z1


def cost_function(spec: DgpSpec, psi: np.ndarray) -> np.ndarray:
    if spec.cost_rule == "quadratic":
        return 0.5 + 10.0 * (psi**2).sum(axis=1) / spec.dim
    return np.where(psi[:, 0] <= 0, 1.0, spec.cost_high)


def _draw_psi(spec: DgpSpec, gen: np.random.Generator, size: int) -> np.ndarray:
    return gen.uniform(-spec.half_width, spec.half_width, size=(size, spec.dim))


def generate_dgp(spec: DgpSpec, rng: RandomSource) -> UnitTable:
    gen = rng.generator("dgp")
    psi = _draw_psi(spec, gen, spec.n)
    if spec.residual == "uniform":
        eps = gen.uniform(-1.0, 1.0, size=(spec.n, 2)) * math.sqrt(3.0)
    else:
        eps = gen.standard_normal(size=(spec.n, 2))
    mu0, mu1 = mean_functions(spec, psi)
    z0, z1 = variance_functions(spec, psi)
    return UnitTable(
        psi1=psi,
        cost=cost_function(spec, psi),
        y0=mu0 + np.sqrt(z0) * eps[:, 0],
        y1=mu1 + np.sqrt(z1) * eps[:, 1],
        psi1_names=tuple(f"psi{j + 1}" for j in range(spec.dim)),
    )


def oracle_profile(spec: DgpSpec, psi) -> VarianceProfile:
    z0, z1 = variance_functions(spec, np.asarray(psi, dtype=float))
    return VarianceProfile(np.sqrt(z1), np.sqrt(z0), source="oracle")


def true_ate(spec: DgpSpec) -> float:
    """Population E[y1 - y0]; closed form for the built-in models."""
    if spec.mean_rule == "quadratic":
        # linear terms vanish on the symmetric cube; E[(1'psi)^2] = dim * w^2 / 3
        return spec.q_scale * spec.dim * spec.half_width**2 / 3.0
    if spec.mean_rule == "arctan" and spec.beta0 == spec.beta1:
        return 0.0
    if spec.mean_rule == "trig" and spec.half_width == math.pi:
        return 0.0
    return quadrature_ate(spec)


@lru_cache(maxsize=64)
def _quadrature(spec: DgpSpec, draws: int, seed: int) -> float:
    gen = RandomSource(seed).generator("quadrature", str(spec.model_id), spec.dim)
    total, done = 0.0, 0
    while done < draws:
        size = min(200_000, draws - done)
        psi = _draw_psi(spec, gen, size)
        mu0, mu1 = mean_functions(spec, psi)
        total += float(np.sum(mu1 - mu0))
        done += size
    return total / draws


def quadrature_ate(spec: DgpSpec, draws: int = 1_000_000, seed: int = 20240101) -> float:
    return _quadrature(replace(spec, n=2, seed=None), draws, seed)


def analytic_variance(spec: DgpSpec, q: float, p: float, draws: int = 1_000_000, seed: int = 20240101) -> float:
    """
    Limit of n * Var(theta_hat) for locally stratified sampling at constant q
    and assignment at constant p: Var(tau) + E[(zeta1/p + zeta0/(1-p)) / q].
    """
    gen = RandomSource(seed).generator("analytic", str(spec.model_id), spec.dim)
    psi = _draw_psi(spec, gen, draws)
    mu0, mu1 = mean_functions(spec, psi)
    z0, z1 = variance_functions(spec, psi)
    return float(np.var(mu1 - mu0) + np.mean(z1 / p + z0 / (1.0 - p)) / q)


def cr_sampling_propensity(costs, B: float) -> Propensity:
    """Smallest-denominator a/k whose spend lands within 5% of the budget."""
    mean_c = float(np.mean(costs))
    if B >= mean_c:
        return Propensity(1, 1)
    for k in range(1, 10_000):
        a = min(max(round(k * B / mean_c), 1), k)
        if 0.95 * B <= a / k * mean_c <= 1.05 * B:
            return Propensity(a, k)
    raise StratakitError(f"no a/k spends within 5% of budget {B}")


# -------------------------- Designs ---------------------------


class DesignKind(str, Enum):
    CR = "CR"
    CR_LOC = "CR_Loc"
    LOC = "Loc"
    HOM = "Hom"
    OPT = "Opt"
    PILOT = "Pilot"


_ALIASES = {
    "cr": DesignKind.CR, "crloc": DesignKind.CR_LOC, "cr_loc": DesignKind.CR_LOC,
    "loc": DesignKind.LOC, "hom": DesignKind.HOM, "opt": DesignKind.OPT,
}
_PILOT_SIZES = {"pilots": 100, "pilotl": 400}


@dataclass(frozen=True)
class DesignId:
    kind: DesignKind
    pilot_size: int | None = None

    def __post_init__(self) -> None:
        if (self.kind is DesignKind.PILOT) != (self.pilot_size is not None):
            raise StratakitError("pilot designs, and only pilot designs, carry a pilot size")
        if self.pilot_size is not None and self.pilot_size < 8:
            raise StratakitError(f"pilot size must be at least 8, got {self.pilot_size}")

    @classmethod
    def parse(cls, text: str) -> DesignId:
        key = text.strip().lower().replace(",", "").replace(" ", "")
        if key in _ALIASES:
            return cls(_ALIASES[key])
        if key in _PILOT_SIZES:
            return cls(DesignKind.PILOT, _PILOT_SIZES[key])
        if key.startswith("pilot:"):
            try:
                return cls(DesignKind.PILOT, int(key.split(":", 1)[1]))
            except ValueError:
                pass
        raise StratakitError(f"unknown design {text!r}; expected cr, crloc, loc, hom, opt or pilot:<size>")

    @property
    def label(self) -> str:
        if self.kind is not DesignKind.PILOT:
            return self.kind.value
        named = {100: "PilotS", 400: "PilotL"}
        return named.get(self.pilot_size, f"Pilot{self.pilot_size}")


def parse_designs(text: str | Sequence[str]) -> list[DesignId]:
    items = text.split(",") if isinstance(text, str) else list(text)
    designs = [DesignId.parse(t) for t in items if t.strip()]
    if not designs:
        raise StratakitError("no designs requested")
    return designs


@dataclass(frozen=True)
class DesignConfig:
    k_max: int = field(default_factory=lambda: settings.KMAX)
    L_max: int = field(default_factory=lambda: settings.LEVELS)
    # folds of about this many units keep per-rep matching fast
    fold_size: int = 100
    # varying-q designs match assignment tuples inside each sampling stratum
    subordinate: bool = True


def reveal(table: UnitTable, design: DesignResult) -> np.ndarray:
    T, D = design.T, design.D
    return T * (D * table.y1 + (1 - D) * table.y0)


def _pilot_profile(size: int, spec: DgpSpec, table: UnitTable, rng: RandomSource,
                   config: DesignConfig) -> VarianceProfile:
    pilot = generate_dgp(replace(spec, n=size), rng.child("pilot", "dgp"))
    run = two_stage(pilot, PropensityMap.constant(size, "1"), PropensityMap.constant(size, "1/2"),
                    rng=rng.child("pilot", "design"), fold_size=config.fold_size, quiet=True)
    observed = PilotData.from_design(pilot.with_outcomes(y_obs=reveal(pilot, run)), run)
    seed = int(rng.generator("pilot", "cv").integers(2**31))
    return estimate_variance_functions(observed, table.psi1, seed=seed)


def execute_design(design: DesignId, table: UnitTable, spec: DgpSpec, rng: RandomSource,
                   config: DesignConfig | None = None) -> DesignResult:
    config = config or DesignConfig()
    n, costs, B = table.n, table.cost, spec.budget
    p_map = PropensityMap.constant(n, spec.baseline_p)
    kind = design.kind
    opts = dict(rng=rng, fold_size=config.fold_size, quiet=True)

    if kind in (DesignKind.CR, DesignKind.CR_LOC, DesignKind.LOC):
        q_map = PropensityMap.constant(n, cr_sampling_propensity(costs, B))
        sampling = "local" if kind is DesignKind.LOC else "complete"
        assignment = "complete" if kind is DesignKind.CR else "local"
        return two_stage(table, q_map, p_map, sampling=sampling, assignment=assignment, **opts)

    if kind is DesignKind.HOM:
        root = np.sqrt(costs)
        q_hom = B / root / float(np.mean(root))
        q_map = discretize_propensity(feasibility_rounding(q_hom, costs, B), config.k_max, config.L_max)
        return two_stage(table, q_map, p_map, subordinate=config.subordinate, **opts)

    if kind is DesignKind.OPT:
        profile = oracle_profile(spec, table.psi1)
    else:
        profile = _pilot_profile(design.pilot_size, spec, table, rng, config)
    plan = feasible_optimal_design(profile, costs, B, config.k_max, config.L_max, constant_p=True)
    return two_stage(table, plan.q_map, plan.p_map, subordinate=config.subordinate, **opts)


# ---------------------------- Harness -------------------------


def run_rep(spec: DgpSpec, designs: Sequence[DesignId], rng: RandomSource, config: DesignConfig,
            alpha: float, ate: float) -> list[dict[str, Any]]:
    table = generate_dgp(spec, rng.child("dgp"))
    sate = float(np.mean(table.y1 - table.y0))
    rows = []
    for design in designs:
        result = execute_design(design, table, spec, rng.child("design", design.label), config)
        report = estimate_design(result, reveal(table, result), table.psi1, alpha=alpha)
        lo, hi = report.ci
        s_lo, s_hi = confidence_interval(report.theta_hat, report.V_sate, table.n, alpha)
        rows.append({
            "design": design.label,
            "theta": report.theta_hat,
            "ci_length": hi - lo,
            "covered": float(lo <= ate <= hi),
            "sate_covered": float(s_lo <= sate <= s_hi),
            "n_sampled": float(result.n_sampled),
        })
    return rows


def _rep_job(spec: DgpSpec, designs: tuple[DesignId, ...], master: RandomSource, config: DesignConfig,
             alpha: float, ate: float, rep: int) -> list[dict[str, Any]]:
    rows = run_rep(spec, designs, master.child("rep", rep), config, alpha, ate)
    for row in rows:
        row["rep"] = rep
    return rows


def run_reps(spec: DgpSpec, designs: Sequence[DesignId], reps: int, rng: RandomSource, *,
             workers: int = 1, alpha: float | None = None, config: DesignConfig | None = None) -> pd.DataFrame:
    """One row per (rep, design), ordered by rep then design."""
    if reps < 1:
        raise StratakitError(f"reps must be at least 1, got {reps}")
    alpha = settings.ALPHA if alpha is None else alpha
    job = partial(_rep_job, spec, tuple(designs), rng, config or DesignConfig(), alpha, true_ate(spec))
    every = max(1, reps // 10)
    rows: list[dict[str, Any]] = []

    def collect(i: int, chunk: list[dict[str, Any]]) -> None:
        rows.extend(chunk)
        if settings.VERBOSE and (i + 1) % every == 0:
            print(f"[sim] rep {i + 1}/{reps}")

    if workers > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=min(workers, reps)) as pool:
            for i, chunk in enumerate(pool.map(job, range(reps), chunksize=max(1, reps // (4 * workers)))):
                collect(i, chunk)
    else:
        for i in range(reps):
            collect(i, job(i))
    return pd.DataFrame(rows, columns=["rep", "design", "theta", "ci_length", "covered", "sate_covered", "n_sampled"])


def summarize_reps(frame: pd.DataFrame, baseline: str = "CR") -> pd.DataFrame:
    order = list(dict.fromkeys(frame["design"]))
    grouped = frame.groupby("design", sort=False)
    summary = pd.DataFrame({
        "sd": grouped["theta"].std(ddof=1),
        "ci_length": grouped["ci_length"].mean(),
        "coverage": grouped["covered"].mean(),
        "sate_coverage": grouped["sate_covered"].mean(),
        "mean_n_sampled": grouped["n_sampled"].mean(),
    }).loc[order]
    if baseline in summary.index:
        base = summary.loc[baseline]
        summary["sd_ratio"] = summary["sd"] / base["sd"]
        summary["pct_delta_ci"] = 100.0 * (summary["ci_length"] / base["ci_length"] - 1.0)
    else:
        summary["sd_ratio"] = np.nan
        summary["pct_delta_ci"] = np.nan
    summary.index.name = "design"
    return summary


def run_design_comparison(spec: DgpSpec, designs: Sequence[DesignId], reps: int, rng: RandomSource, *,
                          workers: int = 1, alpha: float | None = None,
                          config: DesignConfig | None = None) -> pd.DataFrame:
    """
    Per-design Monte Carlo metrics: sd, sd_ratio and pct_delta_ci against CR,
    coverage of the true ATE, coverage of the sample ATE under the conservative
    SATE variance, mean CI length and mean sampled count.
    """
    designs = list(designs)
    if not any(d.kind is DesignKind.CR for d in designs):
        raise StratakitError("the comparison needs CR as its baseline")
    frame = run_reps(spec, designs, reps, rng, workers=workers, alpha=alpha, config=config)
    return summarize_reps(frame)


def comparison_table(summary: pd.DataFrame, spec: DgpSpec) -> pd.DataFrame:
    """Long layout: one row per (design, metric)."""
    metrics = ["sd_ratio", "pct_delta_ci", "coverage", "sate_coverage", "sd", "ci_length", "mean_n_sampled"]
    long = summary[metrics].reset_index().melt(id_vars="design", var_name="metric", value_name="value")
    long.insert(0, "dim", spec.dim)
    long.insert(0, "n", spec.n)
    long.insert(0, "model", str(spec.model_id))
    metric_rank = {m: i for i, m in enumerate(metrics)}
    design_rank = {d: i for i, d in enumerate(summary.index)}
    long = long.sort_values(
        ["metric", "design"],
        key=lambda col: col.map(metric_rank if col.name == "metric" else design_rank),
        kind="stable",
    )
    return long.reset_index(drop=True)


# ------------------------- Panel data -------------------------


def impute_panel(table: UnitTable, D, psi=None) -> UnitTable:
    """
    Fill the missing potential outcome of every unit with the observed outcome
    of its nearest neighbour (squared Euclidean on psi) in the other arm.
    """
    if table.y_obs is None:
        raise StratakitError("impute_panel needs observed outcomes")
    D = np.asarray(D, dtype=int).reshape(-1)
    if D.size != table.n:
        raise StratakitError(f"D has {D.size} entries, table has {table.n} units")
    pts = table.psi1 if psi is None else np.asarray(psi, dtype=float)
    y = table.y_obs
    filled = {}
    for d in (0, 1):
        arm = np.flatnonzero(D == d)
        if arm.size == 0:
            raise StratakitError(f"arm {d} has no units to borrow outcomes from")
        nearest = np.empty(table.n, dtype=int)
        for start in range(0, table.n, 2048):
            block = cdist(pts[start:start + 2048], pts[arm], "sqeuclidean")
            nearest[start:start + 2048] = arm[np.argmin(block, axis=1)]
        filled[d] = np.where(D == d, y, y[nearest])
    return table.with_outcomes(y0=filled[0], y1=filled[1])


def resample_panel(panel: UnitTable, n: int, rng: RandomSource) -> UnitTable:
    """Bootstrap draw of n units from an imputed panel."""
    if panel.y0 is None or panel.y1 is None:
        raise StratakitError("resample_panel needs both potential outcomes")
    return panel.take(rng.generator("resample").integers(0, panel.n, size=n))


def panel_comparison(panel: UnitTable, n: int, designs: Sequence[DesignId], reps: int, rng: RandomSource, *,
                     budget: float, p_base: str = "1/2", alpha: float | None = None,
                     config: DesignConfig | None = None) -> pd.DataFrame:
    """
    Design comparison on a semi-synthetic population: each rep resamples n
    units from the panel, whose mean effect serves as the estimand.
    """
    if panel.cost is None:
        panel = panel.with_outcomes(cost=np.ones(panel.n))
    alpha = settings.ALPHA if alpha is None else alpha
    config = config or DesignConfig()
    spec = DgpSpec(model_id="panel", n=n, dim=panel.psi1.shape[1], budget=budget, p_base=p_base)
    for design in designs:
        if design.kind in (DesignKind.OPT, DesignKind.PILOT):
            raise StratakitError(f"{design.label} needs a simulation model; panels support CR, CR_Loc, Loc, Hom")
    ate = float(np.mean(panel.y1 - panel.y0))
    rows = []
    for rep in range(reps):
        rep_rng = rng.child("rep", rep)
        table = resample_panel(panel, n, rep_rng)
        for design in designs:
            result = execute_design(design, table, spec, rep_rng.child("design", design.label), config)
            report = estimate_design(result, reveal(table, result), table.psi1, alpha=alpha)
            lo, hi = report.ci
            rows.append({"rep": rep, "design": design.label, "theta": report.theta_hat, "ci_length": hi - lo,
                         "covered": float(lo <= ate <= hi), "sate_covered": np.nan,
                         "n_sampled": float(result.n_sampled)})
    return summarize_reps(pd.DataFrame(rows))
