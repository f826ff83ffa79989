# stratakit/randomize.py
"""
Finely stratified randomisation.

Within a propensity stratum a/k the units are matched into k-tuples and
exactly a units of every tuple are selected; the remainder group (fewer than k
units) draws iid Bernoulli(a/k). Each stratum draws from its own named RNG
sub-stream, so results do not depend on the order strata are processed in.
"""

from __future__ import annotations

import math
from typing import Literal, NamedTuple

import numpy as np

from .core import (
    DesignError,
    DesignResult,
    GroupPartition,
    Propensity,
    PropensityMap,
    RandomSource,
    UnitTable,
    new_seed,
    round_half_down,
)
from .matching import as_points, build_k_tuples, match_within_folds
from .settings import settings

Scheme = Literal["local", "complete"]


class LocalDraw(NamedTuple):
    indicator: np.ndarray
    partition: GroupPartition
    warnings: tuple[str, ...]


def _match_stratum(points: np.ndarray, level: Propensity, fold_size: int, parallelism: int) -> GroupPartition:
    m = points.shape[0]
    if level.den == 1:
        return GroupPartition(tuple((u,) for u in range(m)), (level,) * m)
    if fold_size and m > fold_size:
        folds = math.ceil(m / fold_size)
        return match_within_folds(points, level.den, folds, parallelism, stratum=level)
    return build_k_tuples(points, level.den, stratum=level)


def stratify(points, q_map: PropensityMap, *, fold_size: int | None = None,
             parallelism: int = 1) -> tuple[GroupPartition, tuple[str, ...]]:
    """Deterministic half of local randomisation: strata by level, then k-tuples."""
    pts = as_points(points)
    if len(q_map) != pts.shape[0]:
        raise DesignError(f"propensity map covers {len(q_map)} units, points have {pts.shape[0]}")
    fold = settings.FOLD_SIZE if fold_size is None else fold_size

    parts: list[GroupPartition] = []
    warnings: list[str] = []
    for level in q_map.levels:
        members = q_map.stratum(level)
        if len(members) < level.den:
            warnings.append(f"stratum {level} has {len(members)} units (< {level.den}); drawn iid")
            parts.append(GroupPartition((tuple(int(u) for u in members),), (level,), frozenset({0})))
            continue
        parts.append(_match_stratum(pts[members], level, fold, parallelism).relabel(members))
    return GroupPartition.merge(parts), tuple(warnings)


def draw_groups(partition: GroupPartition, size: int, rng: RandomSource,
                stream: tuple = ("sampling",)) -> np.ndarray:
    """Exactly a of every full k-tuple; iid Bernoulli(a/k) in remainder groups."""
    out = np.zeros(size, dtype=np.int8)
    by_level: dict[Propensity, list[int]] = {}
    for gid, level in enumerate(partition.stratum_of_group):
        by_level.setdefault(level, []).append(gid)

    for level in sorted(by_level):
        gen = rng.generator(*stream, str(level))
        for gid in by_level[level]:
            group = np.asarray(partition.groups[gid], dtype=int)
            if gid in partition.remainder_groups:
                out[group] = gen.integers(0, level.den, size=group.size) < level.num
            else:
                out[gen.permutation(group)[: level.num]] = 1
    return out


def local_randomize(points, q_map: PropensityMap, rng: RandomSource, *,
                    stream: tuple = ("sampling",), fold_size: int | None = None,
                    parallelism: int = 1) -> LocalDraw:
    pts = as_points(points)
    partition, warnings = stratify(pts, q_map, fold_size=fold_size, parallelism=parallelism)
    indicator = draw_groups(partition, pts.shape[0], rng, stream)
    return LocalDraw(indicator, partition, warnings)


def complete_randomize(n: int, pi: Propensity, rng: RandomSource, *,
                       stream: tuple = ("complete",)) -> np.ndarray:
    """round(n*a/k) ones (ties down) placed uniformly at random."""
    count = round_half_down(n, pi)
    out = np.zeros(n, dtype=np.int8)
    out[rng.generator(*stream, str(pi)).permutation(n)[:count]] = 1
    return out


def _only_level(q_map: PropensityMap, stage: str) -> Propensity:
    if not q_map.is_constant:
        raise DesignError(f"complete {stage} needs a constant propensity, got {len(q_map.levels)} levels")
    return q_map.levels[0]


def _is_subvector(table: UnitTable, q_map: PropensityMap, q_stratified: bool = False) -> bool:
    cols = [table.psi2[:, j] for j in range(table.psi2.shape[1])]

    def present(vec: np.ndarray) -> bool:
        return any(np.array_equal(vec, c) for c in cols)

    psi1_ok = all(present(table.psi1[:, j]) for j in range(table.psi1.shape[1]))
    # subordinate assignment is stratified on q, which covers the q coordinate
    return psi1_ok and (q_stratified or present(q_map.floats()))


def two_stage(table: UnitTable, q_map: PropensityMap, p_map: PropensityMap, subordinate: bool = False,
              rng: RandomSource | None = None, *, sampling: Scheme = "local",
              assignment: Scheme = "local", fold_size: int | None = None,
              parallelism: int = 1, quiet: bool = False) -> DesignResult:
    """
    Sample on psi1 with q_map, then assign the sampled units on psi2 with p_map.

    With subordinate=True the assignment tuples are matched separately inside
    each sampling-propensity stratum. Warnings are returned on the result and
    printed unless quiet=True.
    """
    n = table.n
    if len(q_map) != n or len(p_map) != n:
        raise DesignError(f"propensity maps must cover all {n} units")
    rng = rng or RandomSource(new_seed())
    warnings: list[str] = []

    if sampling == "complete":
        level = _only_level(q_map, "sampling")
        T = complete_randomize(n, level, rng, stream=("sampling",))
        s_part = GroupPartition.complete_design(range(n), level)
    else:
        draw = local_randomize(table.psi1, q_map, rng, stream=("sampling",),
                               fold_size=fold_size, parallelism=parallelism)
        T, s_part = draw.indicator, draw.partition
        warnings += draw.warnings

    sampled = np.flatnonzero(T == 1)
    if sampled.size == 0:
        raise DesignError("sampling stage selected no units")

    D = np.zeros(n, dtype=np.int8)
    if assignment == "complete":
        level = _only_level(p_map.subset(sampled), "assignment")
        D[sampled] = complete_randomize(sampled.size, level, rng, stream=("assignment",))
        a_part = GroupPartition.complete_design(sampled, level)
    else:
        blocks = [(sampled, ("assignment",))]
        if subordinate and sampling == "local" and not q_map.is_constant:
            q_vals = np.array(q_map.values, dtype=object)
            blocks = [(sampled[q_vals[sampled] == level], ("assignment", str(level))) for level in q_map.levels]
        parts = []
        for members, stream in blocks:
            if members.size == 0:
                continue
            draw = local_randomize(table.psi2[members], p_map.subset(members), rng, stream=stream,
                                   fold_size=fold_size, parallelism=parallelism)
            D[members] = draw.indicator
            parts.append(draw.partition.relabel(members))
            warnings += draw.warnings
        a_part = GroupPartition.merge(parts)

    q_stratified = subordinate and sampling == "local"
    if not q_map.is_constant and not _is_subvector(table, q_map, q_stratified):
        warnings.append("subvector: (psi1, q) is not a coordinate subvector of psi2")
    if not quiet:
        for w in warnings:
            print(f"[design] WARNING: {w}")

    return DesignResult(T, D, s_part, a_part, q_map, p_map, rng.seed, tuple(warnings), subordinate)
