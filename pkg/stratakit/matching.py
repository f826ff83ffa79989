# stratakit/matching.py
"""
Homogeneous grouping of points.

  * pair_min_weight: optimal perfect pairing on squared Euclidean distance
    (exhaustive enumeration for small inputs, networkx blossom above that)
  * build_k_tuples: k-tuples from repeated pairings along a cardinality tree,
    fake singletons filling the gap between k and the next power of two
  * pca_folds / match_within_folds: split large problems along the leading
    principal component and match each fold separately
  * pair_groups: collapse matched groups into unions of neighbouring groups
    (used by the variance estimator)

Fake entities carry no covariates: their distance to anything is zero and the
cardinality tree decides which pairings involving them are allowed.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import networkx as nx
import numpy as np
from scipy.spatial.distance import cdist

from .core import (
    DegenerateDataError,
    GroupPartition,
    InfeasibleMatchError,
    Propensity,
    StratakitError,
)
from .settings import settings


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    return pts


# ------------------------- Pairing ----------------------------


@dataclass(frozen=True, eq=False)
class MatchProblem:
    points: np.ndarray
    # callable (i, j) -> bool, or a symmetric boolean matrix
    forbidden: Callable[[int, int], bool] | np.ndarray | None = None
    fake_flags: np.ndarray | None = None

    def __post_init__(self) -> None:
        pts = as_points(self.points)
        if pts.shape[0] < 2:
            raise StratakitError(f"matching needs at least 2 entities, got {pts.shape[0]}")
        object.__setattr__(self, "points", pts)
        if self.fake_flags is not None:
            flags = np.asarray(self.fake_flags, dtype=bool).reshape(-1)
            if flags.shape[0] != pts.shape[0]:
                raise StratakitError("fake_flags length does not match the point count")
            object.__setattr__(self, "fake_flags", flags)

    @property
    def m(self) -> int:
        return self.points.shape[0]

    def distances(self) -> np.ndarray:
        dist = cdist(self.points, self.points, "sqeuclidean")
        if self.fake_flags is not None and self.fake_flags.any():
            dist[self.fake_flags, :] = 0.0
            dist[:, self.fake_flags] = 0.0
        return dist

    def blocked(self) -> np.ndarray:
        m = self.m
        if self.forbidden is None:
            return np.zeros((m, m), dtype=bool)
        if callable(self.forbidden):
            out = np.zeros((m, m), dtype=bool)
            for i in range(m):
                for j in range(i + 1, m):
                    if self.forbidden(i, j):
                        out[i, j] = out[j, i] = True
            return out
        out = np.asarray(self.forbidden, dtype=bool)
        if out.shape != (m, m):
            raise StratakitError(f"forbidden mask has shape {out.shape}, expected {(m, m)}")
        return out | out.T


def pairing_cost(problem: MatchProblem, pairs: Sequence[tuple[int, int]]) -> float:
    dist = problem.distances()
    return float(sum(dist[i, j] for i, j in pairs))


def _tie_tol(best: float) -> float:
    return 1e-12 * max(1.0, abs(best))


def _pair_exhaustive(dist: np.ndarray, blocked: np.ndarray) -> list[tuple[int, int]] | None:
    # matchings come out in lexicographic order of their sorted pair lists, so
    # the first optimum found is the lexicographically smallest one
    best_cost = math.inf
    best: list[tuple[int, int]] | None = None

    def walk(free: list[int], chosen: list[tuple[int, int]], cost: float) -> None:
        nonlocal best_cost, best
        if cost >= best_cost - _tie_tol(best_cost):
            return
        if not free:
            best_cost, best = cost, list(chosen)
            return
        i = free[0]
        for pos in range(1, len(free)):
            j = free[pos]
            if blocked[i, j]:
                continue
            chosen.append((i, j))
            walk(free[1:pos] + free[pos + 1:], chosen, cost + float(dist[i, j]))
            chosen.pop()

    walk(list(range(dist.shape[0])), [], 0.0)
    return best


def _pair_blossom(dist: np.ndarray, blocked: np.ndarray) -> list[tuple[int, int]]:
    m = dist.shape[0]
    iu, ju = np.triu_indices(m, 1)
    keep = ~blocked[iu, ju]
    graph = nx.Graph()
    graph.add_nodes_from(range(m))
    graph.add_weighted_edges_from(zip(iu[keep].tolist(), ju[keep].tolist(), dist[iu[keep], ju[keep]].tolist()))
    # forbidden pairs are missing edges; min_weight_matching asks for maximum
    # cardinality first, so a perfect matching is found whenever one exists
    matching = nx.min_weight_matching(graph)
    return sorted(tuple(sorted((int(a), int(b)))) for a, b in matching)


def _unmatched(m: int, pairs: Sequence[tuple[int, int]] | None, blocked: np.ndarray) -> int:
    others = ~np.eye(m, dtype=bool)
    isolated = [i for i in range(m) if blocked[i][others[i]].all()]
    if isolated:
        return isolated[0]
    used = {u for p in (pairs or []) for u in p}
    left = [i for i in range(m) if i not in used]
    return left[0] if left else 0


def pair_min_weight(problem: MatchProblem, *, exhaustive_limit: int | None = None) -> list[tuple[int, int]]:
    """
    Perfect pairing minimising the sum of squared distances.

    Returns sorted (i, j) pairs with i < j. Up to `exhaustive_limit` entities
    (settings.BRUTE_FORCE_LIMIT by default) every perfect matching is
    enumerated and ties go to the lexicographically smallest pairing. Above
    the limit the blossom solver returns one optimum with no tie-breaking
    rule; equal-cost alternatives are not compared, though the result is
    still deterministic for a given input.
    """
    m = problem.m
    if m % 2:
        raise StratakitError(f"pairing needs an even number of entities, got {m}")
    dist = problem.distances()
    blocked = problem.blocked()
    limit = settings.BRUTE_FORCE_LIMIT if exhaustive_limit is None else exhaustive_limit

    pairs = _pair_exhaustive(dist, blocked) if m <= limit else _pair_blossom(dist, blocked)
    if pairs is None or 2 * len(pairs) != m:
        who = _unmatched(m, pairs, blocked)
        raise InfeasibleMatchError(f"no feasible perfect matching: entity {who} cannot be paired")
    return pairs


# ---------------------- Cardinality tree ----------------------


@dataclass(frozen=True)
class CardinalityTree:
    """
    Pairing schedule that turns singletons into k-tuples.

    depth is the smallest J with 2**J >= k and digits are the binary digits
    (least significant first) of 2**J - k. Before pairing level j, one fake
    singleton of type j per final group is added when digits[j] == 1.
    """

    k: int

    def __post_init__(self) -> None:
        if self.k < 2:
            raise StratakitError(f"group size must be at least 2, got {self.k}")

    @property
    def depth(self) -> int:
        return (self.k - 1).bit_length()

    @property
    def digits(self) -> tuple[int, ...]:
        gap = 2**self.depth - self.k
        return tuple((gap >> j) & 1 for j in range(self.depth))

    def fake_levels(self) -> tuple[int, ...]:
        return tuple(j for j, bit in enumerate(self.digits) if bit)

    def fake_budget(self, level: int) -> int:
        return sum(self.digits[: level + 1])

    def forbids(self, fakes_a: frozenset[int], fakes_b: frozenset[int], level: int) -> bool:
        if fakes_a & fakes_b:
            return True
        total = len(fakes_a) + len(fakes_b)
        return total > 0 and total != self.fake_budget(level)


Entity = tuple[tuple[int, ...], frozenset[int]]


def _pair_level(pts: np.ndarray, entities: list[Entity], tree: CardinalityTree, level: int,
                exhaustive_limit: int | None) -> list[Entity]:
    count = len(entities)
    centroids = np.zeros((count, pts.shape[1]))
    fake = np.zeros(count, dtype=bool)
    for e, (reals, _) in enumerate(entities):
        if reals:
            centroids[e] = pts[list(reals)].mean(axis=0)
        else:
            fake[e] = True

    masks = np.array([sum(1 << t for t in f) for _, f in entities], dtype=np.int64)
    sizes = np.array([len(f) for _, f in entities])
    total = sizes[:, None] + sizes[None, :]
    blocked = ((masks[:, None] & masks[None, :]) != 0) | ((total > 0) & (total != tree.fake_budget(level)))

    problem = MatchProblem(centroids, forbidden=blocked, fake_flags=fake)
    pairs = pair_min_weight(problem, exhaustive_limit=exhaustive_limit)
    return [(entities[a][0] + entities[b][0], entities[a][1] | entities[b][1]) for a, b in pairs]


def _carve_remainder(pts: np.ndarray, size: int) -> tuple[int, ...]:
    # the outlying unit plus its nearest neighbours
    center = pts.mean(axis=0)
    far = int(np.argmax(((pts - center) ** 2).sum(axis=1)))
    dist = ((pts - pts[far]) ** 2).sum(axis=1)
    dist[far] = -1.0
    order = np.argsort(dist, kind="stable")
    return tuple(sorted(int(i) for i in order[:size]))


def build_k_tuples(points, k: int, *, stratum: Propensity | None = None,
                   exhaustive_limit: int | None = None) -> GroupPartition:
    """
    floor(m/k) groups of exactly k plus one remainder group of m mod k units.

    Indices in the result are row positions in `points`.
    """
    pts = as_points(points)
    m = pts.shape[0]
    tree = CardinalityTree(k)
    if m < k:
        raise StratakitError(f"cannot build {k}-tuples from {m} points")

    n_groups, delta = divmod(m, k)
    remainder: tuple[int, ...] = _carve_remainder(pts, delta) if delta else ()
    set_aside = set(remainder)
    core = [u for u in range(m) if u not in set_aside]

    entities: list[Entity] = [((u,), frozenset()) for u in core]
    for level in range(tree.depth):
        if tree.digits[level]:
            entities = entities + [((), frozenset({level}))] * n_groups
        entities = _pair_level(pts, entities, tree, level, exhaustive_limit)

    groups = sorted(tuple(sorted(reals)) for reals, _ in entities)
    for g in groups:
        if len(g) != k:
            raise InfeasibleMatchError(f"cardinality tree produced a group of {len(g)} instead of {k}")

    flagged: frozenset[int] = frozenset()
    if remainder:
        groups.append(remainder)
        flagged = frozenset({len(groups) - 1})
    part = GroupPartition(tuple(groups), (stratum,) * len(groups), flagged)
    return replace(part, objective=homogeneity_objective(part, pts))


# ---------------------------- Folds ---------------------------


def pca_folds(points, K: int) -> np.ndarray:
    """Fold label per point: K quantile bins of the first principal component score."""
    pts = as_points(points)
    m = pts.shape[0]
    if K < 1 or m < K:
        raise StratakitError(f"cannot split {m} points into {K} folds")
    if K == 1:
        return np.zeros(m, dtype=int)

    cov = np.atleast_2d(np.cov(pts, rowvar=False))
    vals, vecs = np.linalg.eigh(cov)
    if not vals[-1] > 0:
        raise DegenerateDataError("all points identical: principal component undefined")
    lead = vecs[:, -1]
    first = np.flatnonzero(np.abs(lead) > 1e-12)[0]
    if lead[first] < 0:
        lead = -lead

    order = np.argsort(pts @ lead, kind="stable")
    labels = np.empty(m, dtype=int)
    for fold, chunk in enumerate(np.array_split(order, K)):
        labels[chunk] = fold
    return labels


def _fold_job(job: tuple[np.ndarray, int, int | None]) -> GroupPartition:
    pts, k, limit = job
    return build_k_tuples(pts, k, exhaustive_limit=limit)


def _run_jobs(jobs: list, parallelism: int) -> list[GroupPartition]:
    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(parallelism, len(jobs))) as pool:
            return list(pool.map(_fold_job, jobs))
    return [_fold_job(job) for job in jobs]


def match_within_folds(points, k: int, K: int, parallelism: int = 1, *,
                       stratum: Propensity | None = None,
                       exhaustive_limit: int | None = None) -> GroupPartition:
    pts = as_points(points)
    if K == 1:
        return build_k_tuples(pts, k, stratum=stratum, exhaustive_limit=exhaustive_limit)

    labels = pca_folds(pts, K)
    folds = [np.flatnonzero(labels == f) for f in range(K)]
    jobs = [(pts[idx], k, exhaustive_limit) for idx in folds if len(idx) >= k]
    if settings.VERBOSE:
        print(f"[match] {K} folds of sizes {[len(f) for f in folds]} (k={k}, workers={parallelism})")
    results = iter(_run_jobs(jobs, parallelism))

    groups: list[tuple[int, ...]] = []
    leftovers: list[int] = []
    for idx in folds:
        if len(idx) < k:
            leftovers.extend(int(u) for u in idx)
            continue
        part = next(results)
        for gid, g in enumerate(part.groups):
            mapped = tuple(int(idx[u]) for u in g)
            if gid in part.remainder_groups:
                leftovers.extend(mapped)
            else:
                groups.append(mapped)

    leftovers.sort()
    remainder: tuple[int, ...] = tuple(leftovers)
    if len(leftovers) >= k:
        extra = build_k_tuples(pts[leftovers], k, exhaustive_limit=exhaustive_limit)
        remainder = ()
        for gid, g in enumerate(extra.groups):
            mapped = tuple(sorted(leftovers[u] for u in g))
            if gid in extra.remainder_groups:
                remainder = mapped
            else:
                groups.append(mapped)

    flagged: frozenset[int] = frozenset()
    if remainder:
        groups.append(remainder)
        flagged = frozenset({len(groups) - 1})
    part = GroupPartition(tuple(groups), (stratum,) * len(groups), flagged)
    return replace(part, objective=homogeneity_objective(part, pts))


# ------------------------ Group pairing -----------------------


@dataclass(frozen=True)
class GroupPairing:
    """Unions of group indices: pairs, plus one triple when the count is odd."""

    unions: tuple[tuple[int, ...], ...]

    @classmethod
    def single(cls, partition: GroupPartition) -> GroupPairing:
        return cls((tuple(range(len(partition.groups))),))

    def mate(self, group: int) -> tuple[int, ...]:
        for union in self.unions:
            if group in union:
                return tuple(g for g in union if g != group)
        raise StratakitError(f"group {group} is not part of the pairing")

    def union_units(self, partition: GroupPartition) -> list[np.ndarray]:
        return [np.array(sorted(u for g in union for u in partition.groups[g]), dtype=int)
                for union in self.unions]


def group_centroids(partition: GroupPartition, points) -> np.ndarray:
    pts = as_points(points)
    return np.vstack([pts[list(g)].mean(axis=0) for g in partition.groups])


def pair_groups(partition: GroupPartition, points) -> GroupPairing:
    pts = as_points(points)
    count = len(partition.groups)
    if count < 2:
        raise StratakitError(f"pairing groups needs at least 2 groups, got {count}")
    cents = group_centroids(partition, pts)
    if count % 2 == 0:
        return GroupPairing(tuple(pair_min_weight(MatchProblem(cents))))

    padded = np.vstack([cents, np.zeros((1, cents.shape[1]))])
    fake = np.zeros(count + 1, dtype=bool)
    fake[count] = True
    pairs = pair_min_weight(MatchProblem(padded, fake_flags=fake))
    leftover = next(a for a, b in pairs if b == count)
    unions = [p for p in pairs if count not in p]

    joint = np.vstack([pts[[u for g in p for u in partition.groups[g]]].mean(axis=0) for p in unions])
    gaps = ((joint - cents[leftover]) ** 2).sum(axis=1)
    best = int(np.argmin(gaps))
    unions[best] = tuple(sorted(unions[best] + (leftover,)))
    return GroupPairing(tuple(unions))


def absorb_remainders(partition: GroupPartition, points) -> GroupPartition:
    """Fold each remainder group into the nearest full group of its stratum."""
    if partition.complete or not partition.remainder_groups:
        return partition
    pts = as_points(points)
    groups = [list(g) for g in partition.groups]
    strata = list(partition.stratum_of_group)
    full = partition.full_groups()
    kept_rem: set[int] = set()
    dropped: set[int] = set()
    for r in sorted(partition.remainder_groups):
        cands = [g for g in full if strata[g] == strata[r]] or full
        if not cands:
            kept_rem.add(r)
            continue
        center = pts[groups[r]].mean(axis=0)
        gaps = [float(((pts[groups[g]].mean(axis=0) - center) ** 2).sum()) for g in cands]
        target = cands[int(np.argmin(gaps))]
        groups[target] = groups[target] + groups[r]
        dropped.add(r)

    order = [g for g in range(len(groups)) if g not in dropped]
    renumber = {g: i for i, g in enumerate(order)}
    return GroupPartition(
        tuple(tuple(sorted(groups[g])) for g in order),
        tuple(strata[g] for g in order),
        frozenset(renumber[g] for g in kept_rem),
    )


def homogeneity_objective(partition: GroupPartition, points) -> float:
    """n^-1 sum_g sum_{i,j in g} |psi_i - psi_j|^2 over the covered units."""
    pts = as_points(points)
    total = 0.0
    covered = 0
    for g in partition.groups:
        covered += len(g)
        if len(g) < 2:
            continue
        block = pts[list(g)]
        total += 2.0 * len(g) * float(((block - block.mean(axis=0)) ** 2).sum())
    return total / covered if covered else 0.0
