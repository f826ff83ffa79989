# stratakit/cli.py
"""
Command-line entry point.

  python -m stratakit design --units units.csv --psi1-cols x1,x2 --q 3/10 --p 1/4 --seed 1 --out design.csv

Every command that writes --out also writes <out>.manifest.json (input hashes,
seed, version, flags). Flags override values from a JSON --config file.
Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from . import __version__
from .core import (
    DesignResult,
    GroupPartition,
    Propensity,
    PropensityMap,
    RandomSource,
    SchemaError,
    StratakitError,
    UnitSchema,
    UnitTable,
    load_units,
    new_seed,
    standardize,
)
from .estimate import estimate_design
from .matching import match_within_folds
from .optimal import VarianceProfile, alternating_design
from .pilot import PilotData, estimate_variance_functions, feasible_optimal_design
from .randomize import complete_randomize, local_randomize, two_stage
from .settings import settings
from .sim import DesignConfig, DgpSpec, comparison_table, parse_designs, run_design_comparison
from .writer import (
    RunManifest,
    atomic_write_text,
    file_sha256,
    read_design,
    write_design,
    write_frame,
    write_manifest,
    write_partition,
)

# execution-only flags; they never change results
_UNRECORDED = {"config", "threads", "command", "func"}


def _step(label: str, fn: Callable[[], Any]) -> Any:
    """Run a command stage with timing; failures are reported and re-raised."""
    t0 = time.monotonic()
    try:
        result = fn()
    except Exception as e:
        print(f"[cli] {label}: FAILED after {time.monotonic() - t0:.1f}s: {e}", file=sys.stderr)
        if settings.VERBOSE:
            traceback.print_exc()
        raise
    if settings.VERBOSE:
        print(f"[cli] {label}: done ({time.monotonic() - t0:.1f}s)")
    return result


# -------------------------- Helpers ---------------------------


def _cols(text: str | None) -> tuple[str, ...]:
    return tuple(c.strip() for c in (text or "").split(",") if c.strip())


def _require(ns: argparse.Namespace, *names: str) -> None:
    missing = [n for n in names if getattr(ns, n, None) in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        ns._parser.error(f"missing required option(s): {flags}")


def _seed(ns: argparse.Namespace) -> int:
    if ns.seed is not None:
        return int(ns.seed)
    if settings.SEED is not None:
        return settings.SEED
    seed = new_seed()
    print(f"[cli] seed={seed} (generated)")
    return seed


def _load(ns: argparse.Namespace, path: str | None = None, *, y_col: str | None = None) -> UnitTable:
    _require(ns, "psi1_cols")
    schema = UnitSchema(
        psi1_cols=_cols(ns.psi1_cols),
        psi2_cols=_cols(getattr(ns, "psi2_cols", None)),
        cost_col=getattr(ns, "cost_col", None),
        y_col=y_col,
        id_col=getattr(ns, "id_col", None),
    )
    table = load_units(path or ns.units, schema)
    return standardize(table) if getattr(ns, "standardize", False) else table


def _propensity_map(ns: argparse.Namespace, table_path: str, n: int, value: str | None,
                    column: str | None, name: str) -> PropensityMap:
    if value and column:
        ns._parser.error(f"give either --{name} or --{name}-col, not both")
    if value:
        return PropensityMap.constant(n, Propensity.parse(value))
    if column:
        frame = pd.read_csv(table_path, dtype=str, keep_default_na=False)
        if column not in frame.columns:
            raise SchemaError(f"{table_path}: missing propensity column {column!r}")
        return PropensityMap.parse(frame[column])
    ns._parser.error(f"--{name} or --{name}-col is required")


def _record(ns: argparse.Namespace, seed: int | None, inputs: list[str], warnings=()) -> None:
    flags = {k: v for k, v in vars(ns).items() if k not in _UNRECORDED and not k.startswith("_")}
    manifest = RunManifest(
        command=ns.command,
        version=__version__,
        seed=seed,
        inputs={p: file_sha256(p) for p in inputs if p},
        flags=flags,
        outputs=[ns.out],
        warnings=list(warnings),
    )
    write_manifest(ns.out, manifest)


def _finish(design: DesignResult, table: UnitTable, ns: argparse.Namespace, seed: int, *,
            with_assignment: bool = True) -> None:
    _step("write", lambda: write_design(design, ns.out, table.unit_ids(), with_assignment=with_assignment))
    _record(ns, seed, [ns.units], design.warnings)
    print(f"[cli] {ns.command}: {design.n} units, {design.n_sampled} sampled, {design.n_treated} treated -> {ns.out}")


# -------------------------- Commands --------------------------


def cmd_sample(ns: argparse.Namespace) -> None:
    _require(ns, "units", "out")
    table = _step("load", lambda: _load(ns))
    q_map = _propensity_map(ns, ns.units, table.n, ns.q, ns.q_col, "q")
    seed = _seed(ns)
    rng = RandomSource(seed)
    if ns.complete:
        if not q_map.is_constant:
            ns._parser.error("--complete needs a constant --q")
        level = q_map.levels[0]
        T = complete_randomize(table.n, level, rng, stream=("sampling",))
        part, warnings = GroupPartition.complete_design(range(table.n), level), ()
    else:
        draw = _step("sample", lambda: local_randomize(table.psi1, q_map, rng, stream=("sampling",),
                                                       fold_size=ns.fold_size, parallelism=ns.threads))
        T, part, warnings = draw.indicator, draw.partition, draw.warnings
    for w in warnings:
        print(f"[design] WARNING: {w}")
    empty = GroupPartition((), ())
    design = DesignResult(T, np.zeros(table.n), part, empty, q_map, PropensityMap.constant(table.n, "1"),
                          seed, tuple(warnings))
    _finish(design, table, ns, seed, with_assignment=False)


def cmd_assign(ns: argparse.Namespace) -> None:
    _require(ns, "units", "out")
    table = _step("load", lambda: _load(ns))
    p_map = _propensity_map(ns, ns.units, table.n, ns.p, ns.p_col, "p")
    seed = _seed(ns)
    design = _step("assign", lambda: two_stage(
        table, PropensityMap.constant(table.n, "1"), p_map, rng=RandomSource(seed),
        assignment="complete" if ns.complete else "local",
        fold_size=ns.fold_size, parallelism=ns.threads))
    _finish(design, table, ns, seed)


def cmd_design(ns: argparse.Namespace) -> None:
    _require(ns, "units", "out")
    table = _step("load", lambda: _load(ns))
    q_map = _propensity_map(ns, ns.units, table.n, ns.q, ns.q_col, "q")
    p_map = _propensity_map(ns, ns.units, table.n, ns.p, ns.p_col, "p")
    seed = _seed(ns)
    design = _step("design", lambda: two_stage(
        table, q_map, p_map, ns.subordinate, RandomSource(seed), sampling=ns.sampling,
        assignment=ns.assignment, fold_size=ns.fold_size, parallelism=ns.threads))
    _finish(design, table, ns, seed)


def cmd_match(ns: argparse.Namespace) -> None:
    _require(ns, "units", "out", "k")
    if ns.k < 1 or ns.folds < 1:
        ns._parser.error("--k and --folds must be positive")
    table = _step("load", lambda: _load(ns))
    part = _step("match", lambda: match_within_folds(table.psi1, ns.k, ns.folds, ns.threads))
    _step("write", lambda: write_partition(part, ns.out, table.unit_ids()))
    _record(ns, None, [ns.units])
    print(f"[cli] match: {len(part)} groups of {ns.k}, objective {part.objective:.6g} -> {ns.out}")


def _plan_frame(table: UnitTable, plan) -> pd.DataFrame:
    return pd.DataFrame({
        "unit_id": list(table.unit_ids()),
        "q": [str(v) for v in plan.q_map.values],
        "p": [str(v) for v in plan.p_map.values],
        "q_continuous": plan.q_continuous,
        "p_continuous": plan.p_continuous,
    })


def _report_plan(ns: argparse.Namespace, table: UnitTable, plan, inputs: list[str]) -> None:
    _step("write", lambda: write_frame(_plan_frame(table, plan), ns.out))
    _record(ns, None, inputs, plan.flags)
    spend = float(np.mean(plan.q_map.floats() * table.cost))
    print(f"[cli] {ns.command}: q levels {[str(v) for v in plan.q_map.levels]}, "
          f"p levels {[str(v) for v in plan.p_map.levels]}, spend {spend:.4g} vs budget {ns.budget:.4g}")


def cmd_optimize(ns: argparse.Namespace) -> None:
    _require(ns, "units", "out", "budget", "cost_col")
    table = _step("load", lambda: _load(ns))
    if ns.sigma1_col and ns.sigma0_col:
        sig = load_units(ns.units, UnitSchema(psi1_cols=(ns.sigma1_col, ns.sigma0_col)))
        profile = VarianceProfile(sig.psi1[:, 0], sig.psi1[:, 1])
    else:
        profile = VarianceProfile.homoskedastic(table.n, ns.sigma1, ns.sigma0)
    plan = _step("optimize", lambda: feasible_optimal_design(
        profile, table.cost, ns.budget, ns.kmax, ns.levels, constant_p=ns.constant_p))
    _report_plan(ns, table, plan, [ns.units])


def _read_pilot(ns: argparse.Namespace) -> PilotData:
    table = _load(ns, ns.pilot, y_col=ns.y_col)
    frame = pd.read_csv(ns.pilot, dtype=str, keep_default_na=False)
    missing = [c for c in (ns.t_col, ns.d_col) if c not in frame.columns]
    if missing:
        raise SchemaError(f"{ns.pilot}: missing column(s) {', '.join(missing)}")

    def propensities(col: str | None, default: str) -> np.ndarray:
        if not col:
            return PropensityMap.constant(table.n, default).floats()
        if col not in frame.columns:
            raise SchemaError(f"{ns.pilot}: missing propensity column {col!r}")
        return PropensityMap.parse(frame[col]).floats()

    return PilotData(
        table,
        frame[ns.t_col].astype(int).to_numpy(),
        frame[ns.d_col].astype(int).to_numpy(),
        propensities(ns.pilot_q_col, "1"),
        propensities(ns.pilot_p_col, "1/2"),
    )


def cmd_pilot_design(ns: argparse.Namespace) -> None:
    _require(ns, "pilot", "units", "out", "budget", "cost_col", "y_col")
    pilot = _step("load pilot", lambda: _read_pilot(ns))
    table = _step("load main", lambda: _load(ns))
    profile = _step("variance", lambda: estimate_variance_functions(
        pilot, table.psi1, ns.k_neighbors, seed=_seed(ns)))
    plan = _step("optimize", lambda: feasible_optimal_design(
        profile, table.cost, ns.budget, ns.kmax, ns.levels, constant_p=ns.constant_p))
    _report_plan(ns, table, plan, [ns.pilot, ns.units])


def cmd_estimate(ns: argparse.Namespace) -> None:
    _require(ns, "design", "units", "y_col")
    design, ids = _step("load design", lambda: read_design(ns.design))
    table = _step("load units", lambda: _load(ns, y_col=ns.y_col))
    if table.unit_ids() != ids:
        raise SchemaError(f"unit ids of {ns.units} do not match {ns.design} row for row")
    report = _step("estimate", lambda: estimate_design(
        design, table.y_obs, table.psi2, alpha=ns.alpha, estimator=ns.estimator))
    text = report.model_dump_json(indent=2) + "\n"
    if ns.out:
        atomic_write_text(ns.out, text)
        _record(ns, design.seed, [ns.design, ns.units])
    else:
        sys.stdout.write(text)
    lo, hi = report.ci
    print(f"[cli] estimate: theta={report.theta_hat:.6g} CI=({lo:.6g}, {hi:.6g})", file=sys.stderr)


def cmd_simulate(ns: argparse.Namespace) -> None:
    _require(ns, "out")
    spec = DgpSpec.model(ns.model, ns.n, ns.dim)
    designs = parse_designs(ns.designs)
    config = DesignConfig(k_max=ns.kmax or settings.KMAX, L_max=ns.levels or settings.LEVELS,
                          fold_size=ns.fold_size if ns.fold_size is not None else DesignConfig().fold_size)
    seed = _seed(ns)
    summary = _step("reps", lambda: run_design_comparison(
        spec, designs, ns.reps, RandomSource(seed), workers=ns.threads, alpha=ns.alpha, config=config))
    _step("write", lambda: write_frame(comparison_table(summary, spec), ns.out))
    _record(ns, seed, [])
    if settings.VERBOSE:
        print(summary.to_string())
    print(f"[cli] simulate: model {ns.model}, {ns.reps} reps, {len(designs)} designs -> {ns.out}")


def cmd_maxcut(ns: argparse.Namespace) -> None:
    _require(ns, "units", "out", "h_col")
    table = load_units(ns.units, UnitSchema(psi1_cols=(ns.h_col,), id_col=ns.id_col))
    seed = _seed(ns)
    result = _step("maxcut", lambda: alternating_design(
        table.psi1[:, 0], ns.mode, RandomSource(seed), restarts=ns.restarts))
    frame = pd.DataFrame({"unit_id": list(table.unit_ids()), "d_star": result.d_star.astype(int),
                          "D": result.allocation.astype(int)})
    _step("write", lambda: write_frame(frame, ns.out))
    _record(ns, seed, [ns.units])
    print(f"[cli] maxcut: objective {result.objective:.6g}, cut {result.cut:.6g} ({result.mode}) -> {ns.out}")


# --------------------------- Parser ---------------------------


def _rational(text: str) -> str:
    try:
        return str(Propensity.parse(text))
    except StratakitError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON file with default flag values")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=settings.THREADS)
    common.add_argument("--out", default=None)

    units = argparse.ArgumentParser(add_help=False)
    units.add_argument("--units", default=None, help="delimited text file, one row per eligible unit")
    units.add_argument("--psi1-cols", default=None, help="comma-separated sampling covariates")
    units.add_argument("--psi2-cols", default=None, help="assignment covariates (default: psi1)")
    units.add_argument("--cost-col", default=None)
    units.add_argument("--id-col", default=None)
    units.add_argument("--standardize", action="store_true")
    units.add_argument("--fold-size", type=int, default=None)

    budget = argparse.ArgumentParser(add_help=False)
    budget.add_argument("--budget", type=float, default=None)
    budget.add_argument("--kmax", type=int, default=None)
    budget.add_argument("--levels", type=int, default=None)
    budget.add_argument("--constant-p", action="store_true")

    ap = argparse.ArgumentParser(prog="stratakit", description="Stratified two-stage experiment designs.")
    ap.add_argument("--version", action="version", version=f"stratakit {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="command")

    def add(name: str, fn, parents, help_text: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, parents=parents, help=help_text)
        sp.set_defaults(func=fn, _parser=sp)
        return sp

    sp = add("sample", cmd_sample, [common, units], "draw the sampling vector T")
    sp.add_argument("--q", type=_rational, default=None)
    sp.add_argument("--q-col", default=None)
    sp.add_argument("--complete", action="store_true")

    sp = add("assign", cmd_assign, [common, units], "draw the assignment vector D for every unit")
    sp.add_argument("--p", type=_rational, default=None)
    sp.add_argument("--p-col", default=None)
    sp.add_argument("--complete", action="store_true")

    sp = add("design", cmd_design, [common, units], "two-stage sampling and assignment")
    sp.add_argument("--q", type=_rational, default=None)
    sp.add_argument("--q-col", default=None)
    sp.add_argument("--p", type=_rational, default=None)
    sp.add_argument("--p-col", default=None)
    sp.add_argument("--subordinate", action="store_true")
    sp.add_argument("--sampling", choices=("local", "complete"), default="local")
    sp.add_argument("--assignment", choices=("local", "complete"), default="local")

    sp = add("match", cmd_match, [common, units], "write matched k-tuples")
    sp.add_argument("--k", type=int, default=None)
    sp.add_argument("--folds", type=int, default=1)

    sp = add("optimize", cmd_optimize, [common, units, budget], "budget-constrained optimal propensities")
    sp.add_argument("--sigma1-col", default=None)
    sp.add_argument("--sigma0-col", default=None)
    sp.add_argument("--sigma1", type=float, default=1.0)
    sp.add_argument("--sigma0", type=float, default=1.0)

    sp = add("pilot-design", cmd_pilot_design, [common, units, budget], "optimal propensities from pilot data")
    sp.add_argument("--pilot", default=None)
    sp.add_argument("--main", dest="units", default=None, help="alias of --units")
    sp.add_argument("--y-col", default=None)
    sp.add_argument("--t-col", default="T")
    sp.add_argument("--d-col", default="D")
    sp.add_argument("--pilot-q-col", default=None)
    sp.add_argument("--pilot-p-col", default=None)
    sp.add_argument("--k-neighbors", type=int, default=None)

    sp = add("estimate", cmd_estimate, [common, units], "ATE estimate and confidence interval")
    sp.add_argument("--design", default=None)
    sp.add_argument("--y-col", default=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--estimator", choices=("auto", "dm", "ipw"), default="auto")

    sp = add("simulate", cmd_simulate, [common], "Monte Carlo design comparison")
    sp.add_argument("--model", type=int, default=1)
    sp.add_argument("--n", type=int, default=800)
    sp.add_argument("--dim", type=int, default=2)
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--designs", default="cr,crloc,loc")
    sp.add_argument("--fold-size", type=int, default=None)
    sp.add_argument("--kmax", type=int, default=None)
    sp.add_argument("--levels", type=int, default=None)
    sp.add_argument("--alpha", type=float, default=None)

    sp = add("maxcut", cmd_maxcut, [common], "alternating design from a balance column")
    sp.add_argument("--units", default=None)
    sp.add_argument("--h-col", default=None)
    sp.add_argument("--id-col", default=None)
    sp.add_argument("--mode", choices=("exact", "heuristic"), default="exact")
    sp.add_argument("--restarts", type=int, default=50)
    return ap


def _config_defaults(argv: list[str]) -> dict[str, Any]:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    try:
        data = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise SchemaError(f"{known.config}: unreadable config ({e})") from e
    if not isinstance(data, dict):
        raise SchemaError(f"{known.config}: config must be a JSON object")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        defaults = _config_defaults(argv)
    except StratakitError as e:
        print(f"[cli] ERROR: {e}", file=sys.stderr)
        return 2

    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_usage(sys.stderr)
            return 2
        if defaults:
            # re-parse so flags on the command line still win over the config
            ns._parser.set_defaults(**defaults)
            ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        ns.func(ns)
    except SystemExit as e:
        return int(e.code or 0)
    except StratakitError as e:
        print(f"[cli] ERROR: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
