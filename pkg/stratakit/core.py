# stratakit/core.py
"""
Domain types shared by every stratakit module.

  * Propensity / PropensityMap: exact rationals a/k (never floats)
  * UnitTable: the eligible population (psi1, psi2, costs, outcomes)
  * GroupPartition: propensity stratum -> matched tuple -> unit
  * DesignResult: realised T, D plus the audit trail that produced them
  * RandomSource: seeded, named sub-streams, independent of scheduling

Ingestion (load_units) and standardisation live here too. Unit identity is the
row index; an external id column is carried along untouched.
"""

from __future__ import annotations

import hashlib
import math
import secrets
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import total_ordering
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

# --------------------------- Errors ---------------------------


class StratakitError(ValueError):
    """Base class for every domain error raised by stratakit."""


class SchemaError(StratakitError):
    pass


class DegenerateDataError(StratakitError):
    pass


class InfeasibleMatchError(StratakitError):
    pass


class InfeasibleBudgetError(StratakitError):
    pass


class DesignError(StratakitError):
    pass


class EstimationError(StratakitError):
    pass


# ------------------------- Propensities -----------------------


@total_ordering
@dataclass(frozen=True)
class Propensity:
    """Exact rational a/k in (0, 1], normalised so gcd(a, k) = 1."""

    num: int
    den: int

    def __post_init__(self) -> None:
        a, k = int(self.num), int(self.den)
        if a != self.num or k != self.den:
            raise StratakitError(f"propensity needs integer parts, got {self.num}/{self.den}")
        if k <= 0 or a <= 0 or a > k:
            raise StratakitError(f"propensity {a}/{k} is outside (0, 1]")
        g = math.gcd(a, k)
        object.__setattr__(self, "num", a // g)
        object.__setattr__(self, "den", k // g)

    @classmethod
    def parse(cls, text: Any) -> Propensity:
        s = str(text).strip()
        if "/" in s:
            a, k = s.split("/", 1)
            try:
                return cls(int(a.strip()), int(k.strip()))
            except ValueError:
                pass
        elif s.isdigit() and int(s) == 1:
            return cls(1, 1)
        raise StratakitError(f"expected a rational 'a/k', got {text!r}")

    @classmethod
    def from_fraction(cls, value: Fraction) -> Propensity:
        return cls(value.numerator, value.denominator)

    @property
    def value(self) -> Fraction:
        return Fraction(self.num, self.den)

    def __float__(self) -> float:
        return self.num / self.den

    def __str__(self) -> str:
        return f"{self.num}/{self.den}"

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, Propensity):
            return NotImplemented
        return self.num * other.den < other.num * self.den


def round_half_down(n: int, level: Propensity) -> int:
    """round(n * a / k) to the nearest integer, ties going down."""
    q, r = divmod(n * level.num, level.den)
    return q + 1 if 2 * r > level.den else q


@dataclass(frozen=True)
class PropensityMap:
    values: tuple[Propensity, ...]
    levels: tuple[Propensity, ...] = field(init=False)

    def __post_init__(self) -> None:
        vals = tuple(self.values)
        if not vals:
            raise StratakitError("propensity map is empty")
        for v in vals:
            if not isinstance(v, Propensity):
                raise StratakitError(f"propensity map entry {v!r} is not a Propensity")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "levels", tuple(sorted(set(vals))))

    @classmethod
    def constant(cls, n: int, level: Propensity | str) -> PropensityMap:
        if not isinstance(level, Propensity):
            level = Propensity.parse(level)
        return cls((level,) * int(n))

    @classmethod
    def parse(cls, items: Iterable[Any]) -> PropensityMap:
        return cls(tuple(Propensity.parse(x) for x in items))

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i: int) -> Propensity:
        return self.values[i]

    @property
    def is_constant(self) -> bool:
        return len(self.levels) == 1

    def floats(self) -> np.ndarray:
        lookup = {lv: float(lv) for lv in self.levels}
        return np.array([lookup[v] for v in self.values], dtype=float)

    def stratum(self, level: Propensity) -> np.ndarray:
        return np.array([i for i, v in enumerate(self.values) if v == level], dtype=int)

    def subset(self, idx: Sequence[int] | np.ndarray) -> PropensityMap:
        return PropensityMap(tuple(self.values[int(i)] for i in idx))


# --------------------------- Units ----------------------------


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _as_matrix(x: Any, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float, copy=True)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise SchemaError(f"{name} must be an n x d matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        row, col = np.argwhere(~np.isfinite(arr))[0]
        raise SchemaError(f"{name}: non-finite covariate at row {row + 1}, column {col}")
    return _frozen(arr)


def _as_vector(x: Any, name: str, n: int) -> np.ndarray:
    arr = np.array(x, dtype=float, copy=True).reshape(-1)
    if arr.shape[0] != n:
        raise SchemaError(f"{name} has {arr.shape[0]} entries, expected {n}")
    return _frozen(arr)


@dataclass(frozen=True, eq=False)
class UnitTable:
    psi1: np.ndarray
    psi2: np.ndarray | None = None
    cost: np.ndarray | None = None
    y_obs: np.ndarray | None = None
    y0: np.ndarray | None = None
    y1: np.ndarray | None = None
    ids: tuple[str, ...] | None = None
    psi1_names: tuple[str, ...] = ()
    psi2_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        aliased = self.psi2 is None or self.psi2 is self.psi1
        psi1 = _as_matrix(self.psi1, "psi1")
        psi2 = psi1 if aliased else _as_matrix(self.psi2, "psi2")
        n = psi1.shape[0]
        if n < 2:
            raise SchemaError(f"need at least 2 eligible units, got {n}")
        if psi2.shape[0] != n:
            raise SchemaError(f"psi2 has {psi2.shape[0]} rows, psi1 has {n}")
        object.__setattr__(self, "psi1", psi1)
        object.__setattr__(self, "psi2", psi2)
        for name in ("cost", "y_obs", "y0", "y1"):
            vec = getattr(self, name)
            if vec is not None:
                object.__setattr__(self, name, _as_vector(vec, name, n))
        if self.cost is not None:
            bad = np.flatnonzero(~(self.cost > 0))
            if bad.size:
                raise SchemaError(f"cost must be positive: row {bad[0] + 1} has {self.cost[bad[0]]}")
        if self.ids is not None:
            ids = tuple(str(v) for v in self.ids)
            if len(ids) != n:
                raise SchemaError(f"ids has {len(ids)} entries, expected {n}")
            object.__setattr__(self, "ids", ids)
        if aliased and not self.psi2_names:
            object.__setattr__(self, "psi2_names", tuple(self.psi1_names))

    @property
    def n(self) -> int:
        return self.psi1.shape[0]

    @property
    def psi2_aliased(self) -> bool:
        return self.psi2 is self.psi1

    def unit_ids(self) -> tuple[str, ...]:
        return self.ids if self.ids is not None else tuple(str(i) for i in range(self.n))

    def with_outcomes(self, **values: Any) -> UnitTable:
        return replace(self, **values)

    def take(self, idx: Sequence[int] | np.ndarray) -> UnitTable:
        """Row subset (or bootstrap draw when idx repeats)."""
        idx = np.asarray(idx, dtype=int)

        def pick(v):
            return None if v is None else v[idx]

        return UnitTable(
            psi1=self.psi1[idx],
            psi2=None if self.psi2_aliased else self.psi2[idx],
            cost=pick(self.cost),
            y_obs=pick(self.y_obs),
            y0=pick(self.y0),
            y1=pick(self.y1),
            ids=None if self.ids is None else tuple(self.ids[i] for i in idx),
            psi1_names=self.psi1_names,
            psi2_names=self.psi2_names,
        )


# -------------------------- Partitions ------------------------


@dataclass(frozen=True, eq=False)
class GroupPartition:
    groups: tuple[tuple[int, ...], ...]
    stratum_of_group: tuple[Propensity | None, ...]
    remainder_groups: frozenset[int] = frozenset()
    complete: bool = False
    objective: float | None = None

    def __post_init__(self) -> None:
        groups = tuple(tuple(int(u) for u in g) for g in self.groups)
        strata = tuple(self.stratum_of_group)
        if len(strata) != len(groups):
            raise StratakitError(f"{len(groups)} groups but {len(strata)} strata labels")
        rem = frozenset(int(g) for g in self.remainder_groups)
        if any(g < 0 or g >= len(groups) for g in rem):
            raise StratakitError("remainder flag points at a missing group")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "stratum_of_group", strata)
        object.__setattr__(self, "remainder_groups", rem)

    @classmethod
    def complete_design(cls, units: Iterable[int], level: Propensity) -> GroupPartition:
        """Complete randomisation described as one group over every unit."""
        return cls((tuple(sorted(int(u) for u in units)),), (level,), frozenset(), complete=True)

    @classmethod
    def merge(cls, parts: Iterable[GroupPartition]) -> GroupPartition:
        groups: list[tuple[int, ...]] = []
        strata: list[Propensity | None] = []
        rem: set[int] = set()
        complete = False
        for part in parts:
            offset = len(groups)
            groups.extend(part.groups)
            strata.extend(part.stratum_of_group)
            rem.update(offset + g for g in part.remainder_groups)
            complete = complete or part.complete
        return cls(tuple(groups), tuple(strata), frozenset(rem), complete=complete)

    def relabel(self, ids: Sequence[int] | np.ndarray) -> GroupPartition:
        """Map local row positions to the given unit ids."""
        ids = np.asarray(ids, dtype=int)
        return replace(self, groups=tuple(tuple(int(ids[u]) for u in g) for g in self.groups))

    def with_stratum(self, level: Propensity | None) -> GroupPartition:
        return replace(self, stratum_of_group=(level,) * len(self.groups))

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self) -> Iterator[tuple[int, ...]]:
        return iter(self.groups)

    @property
    def units(self) -> np.ndarray:
        if not self.groups:
            return np.zeros(0, dtype=int)
        return np.sort(np.concatenate([np.asarray(g, dtype=int) for g in self.groups]))

    def full_groups(self) -> list[int]:
        return [g for g in range(len(self.groups)) if g not in self.remainder_groups]

    def group_labels(self, n: int) -> np.ndarray:
        labels = np.full(n, -1, dtype=int)
        for gid, g in enumerate(self.groups):
            labels[list(g)] = gid
        return labels

    def validate(self, index_set: Iterable[int] | None = None, *, one_remainder: bool = True) -> list[str]:
        problems: list[str] = []
        seen: set[int] = set()
        for gid, g in enumerate(self.groups):
            overlap = seen.intersection(g)
            if overlap:
                problems.append(f"group {gid} reuses unit {min(overlap)}")
            seen.update(g)
        if index_set is not None and seen != set(int(i) for i in index_set):
            problems.append("groups do not cover the intended index set")
        if self.complete:
            return problems
        per_stratum: dict[Propensity | None, int] = {}
        for gid, g in enumerate(self.groups):
            level = self.stratum_of_group[gid]
            if gid in self.remainder_groups:
                per_stratum[level] = per_stratum.get(level, 0) + 1
                if level is not None and len(g) >= level.den:
                    problems.append(f"remainder group {gid} has {len(g)} >= {level.den} units")
            elif level is not None and len(g) != level.den:
                problems.append(f"group {gid} in stratum {level} has {len(g)} units")
        if one_remainder:
            for level, count in per_stratum.items():
                if count > 1:
                    problems.append(f"stratum {level} has {count} remainder groups")
        return problems


# --------------------------- Designs --------------------------


@dataclass(frozen=True, eq=False)
class DesignResult:
    T: np.ndarray
    D: np.ndarray
    sampling_partition: GroupPartition
    assignment_partition: GroupPartition
    q_map: PropensityMap
    p_map: PropensityMap
    seed: int
    warnings: tuple[str, ...] = ()
    subordinate: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "T", _frozen(np.asarray(self.T, dtype=np.int8).copy()))
        object.__setattr__(self, "D", _frozen(np.asarray(self.D, dtype=np.int8).copy()))

    @property
    def n(self) -> int:
        return int(self.T.shape[0])

    @property
    def n_sampled(self) -> int:
        return int(self.T.sum())

    @property
    def n_treated(self) -> int:
        return int(self.D.sum())

    def check(self) -> list[str]:
        """Every violated design invariant, in one pass over the units."""
        problems: list[str] = []
        bad = np.flatnonzero((self.D == 1) & (self.T == 0))
        if bad.size:
            problems.append(f"unit {bad[0]} treated but not sampled")
        problems += _check_counts(self.sampling_partition, self.T, "sampling")
        problems += _check_counts(self.assignment_partition, self.D, "assignment")
        return problems


def _check_counts(partition: GroupPartition, indicator: np.ndarray, stage: str) -> list[str]:
    problems = []
    for gid, g in enumerate(partition.groups):
        level = partition.stratum_of_group[gid]
        if level is None or gid in partition.remainder_groups:
            continue
        got = int(indicator[list(g)].sum())
        want = round_half_down(len(g), level) if partition.complete else level.num
        if got != want:
            problems.append(f"{stage} group {gid} ({level}): {got} selected, expected {want}")
    return problems


# ------------------------- Randomness -------------------------


def _label_key(label: Any) -> int:
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool) and label >= 0:
        return int(label)
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def new_seed() -> int:
    return secrets.randbits(63)


@dataclass(frozen=True)
class RandomSource:
    """
    Seeded randomness handed out as named sub-streams.

    generator("assignment", "3/8") always yields the same stream for the same
    seed, whichever thread or process asks for it and in whatever order.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise StratakitError(f"seed must be a 64-bit non-negative integer, got {self.seed}")
        object.__setattr__(self, "seed", int(self.seed))

    def generator(self, *labels: Any) -> np.random.Generator:
        key = self.path + tuple(_label_key(lb) for lb in labels)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key)))

    def child(self, *labels: Any) -> RandomSource:
        return RandomSource(self.seed, self.path + tuple(_label_key(lb) for lb in labels))


# -------------------------- Ingestion -------------------------


@dataclass(frozen=True)
class UnitSchema:
    psi1_cols: tuple[str, ...]
    psi2_cols: tuple[str, ...] = ()
    cost_col: str | None = None
    y_col: str | None = None
    y0_col: str | None = None
    y1_col: str | None = None
    id_col: str | None = None


def _numeric_column(frame: pd.DataFrame, col: str, path: Path, *, required: bool) -> np.ndarray:
    raw = frame[col].astype(str).str.strip()
    values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
    blank = (raw == "").to_numpy()
    if required:
        bad = ~np.isfinite(values)
    else:
        bad = np.isnan(values) & ~blank & (raw.str.lower() != "nan").to_numpy()
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise SchemaError(f"{path}: row {i + 1}, column {col!r}: not a number ({frame[col].iloc[i]!r})")
    return values


def load_units(path: str | Path, schema: UnitSchema) -> UnitTable:
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"{path}: no such file")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise SchemaError(f"{path}: malformed file ({e})") from e

    missing = [c for c in (*schema.psi1_cols, *schema.psi2_cols) if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing covariate column(s) {', '.join(missing)}")
    if not schema.psi1_cols:
        raise SchemaError("at least one psi1 column is required")

    def block(cols: tuple[str, ...]) -> np.ndarray:
        return np.column_stack([_numeric_column(frame, c, path, required=True) for c in cols])

    def optional(col: str | None, *, required: bool = False) -> np.ndarray | None:
        if col is None or col not in frame.columns:
            return None
        return _numeric_column(frame, col, path, required=required)

    cost = optional(schema.cost_col, required=True)
    if cost is not None:
        bad = np.flatnonzero(~(cost > 0))
        if bad.size:
            raise SchemaError(f"{path}: row {bad[0] + 1}, column {schema.cost_col!r}: cost must be positive")

    psi1 = block(schema.psi1_cols)
    psi2 = block(schema.psi2_cols) if schema.psi2_cols and schema.psi2_cols != schema.psi1_cols else None
    ids = None
    if schema.id_col and schema.id_col in frame.columns:
        ids = tuple(str(v).strip() for v in frame[schema.id_col].tolist())

    return UnitTable(
        psi1=psi1,
        psi2=psi2,
        cost=cost,
        y_obs=optional(schema.y_col),
        y0=optional(schema.y0_col),
        y1=optional(schema.y1_col),
        ids=ids,
        psi1_names=tuple(schema.psi1_cols),
        psi2_names=tuple(schema.psi2_cols or schema.psi1_cols),
    )


def _standardize_block(block: np.ndarray, names: tuple[str, ...], label: str) -> np.ndarray:
    mean = block.mean(axis=0)
    sd = block.std(axis=0, ddof=1)
    bad = np.flatnonzero(~(sd > 0))
    if bad.size:
        j = int(bad[0])
        name = names[j] if j < len(names) else f"{label}[{j}]"
        raise DegenerateDataError(f"column {name!r} has zero variance")
    return (block - mean) / sd


def standardize(table: UnitTable) -> UnitTable:
    """Mean 0, sample variance 1 (denominator n - 1) per psi column."""
    psi1 = _standardize_block(table.psi1, table.psi1_names, "psi1")
    if table.psi2_aliased:
        return replace(table, psi1=psi1, psi2=None)
    psi2 = _standardize_block(table.psi2, table.psi2_names, "psi2")
    return replace(table, psi1=psi1, psi2=psi2)
