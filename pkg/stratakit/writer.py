# stratakit/writer.py
from __future__ import annotations

import hashlib
import io
import os
import tempfile
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .core import DesignResult, GroupPartition, Propensity, PropensityMap, SchemaError

COMPLETE = "complete"

# --------------------------- Manifest -------------------------


class RunManifest(BaseModel):
    command: str
    version: str
    seed: int | None = None
    inputs: dict[str, str] = Field(default_factory=dict)
    flags: dict[str, Any] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)
    warnings: list[str] = Field(default_factory=list)


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_path(out: str | Path) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def write_manifest(out: str | Path, manifest: RunManifest) -> Path:
    path = manifest_path(out)
    atomic_write_text(path, manifest.model_dump_json(indent=2) + "\n")
    return path


def read_manifest(out: str | Path) -> RunManifest | None:
    path = manifest_path(out)
    if not path.is_file():
        return None
    return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))


# ------------------------- Atomic files -----------------------


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write to a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_frame(frame: pd.DataFrame, path: str | Path) -> None:
    buf = io.StringIO()
    frame.to_csv(buf, index=False, lineterminator="\n")
    atomic_write_text(path, buf.getvalue())


# ------------------------ Normalization -----------------------


def _group_columns(partition: GroupPartition, n: int) -> tuple[list[str], list[int]]:
    labels = [""] * n
    flags = [0] * n
    for gid, g in enumerate(partition.groups):
        tag = COMPLETE if partition.complete else str(gid)
        for u in g:
            labels[u] = tag
            flags[u] = int(gid in partition.remainder_groups)
    return labels, flags


def _clean_str(v: Any) -> str:
    return "" if v is None else str(v).strip()


def _rebuild_partition(labels: Sequence[str], flags: Sequence[int], levels: Sequence[Propensity]) -> GroupPartition:
    members: dict[str, list[int]] = {}
    for u, tag in enumerate(labels):
        if tag:
            members.setdefault(tag, []).append(u)
    if not members:
        return GroupPartition((), ())
    if COMPLETE in members:
        units = members[COMPLETE]
        return GroupPartition.complete_design(units, levels[units[0]])
    try:
        ordered = sorted(members, key=int)
    except ValueError as e:
        raise SchemaError(f"group ids must be integers or {COMPLETE!r}") from e
    groups = tuple(tuple(members[tag]) for tag in ordered)
    strata = tuple(levels[g[0]] for g in groups)
    rem = frozenset(i for i, g in enumerate(groups) if flags[g[0]])
    return GroupPartition(groups, strata, rem)


# ---------------------- Public entrypoints --------------------


def design_frame(design: DesignResult, ids: Sequence[str], *, with_assignment: bool = True) -> pd.DataFrame:
    s_labels, s_flags = _group_columns(design.sampling_partition, design.n)
    frame = pd.DataFrame({
        "unit_id": list(ids),
        "T": design.T.astype(int),
        "D": design.D.astype(int),
        "sampling_group": s_labels,
        "assignment_group": [""] * design.n,
        "q": [str(v) for v in design.q_map.values],
        "p": [str(v) for v in design.p_map.values],
        "sampling_remainder": s_flags,
        "assignment_remainder": [0] * design.n,
    })
    if with_assignment:
        a_labels, a_flags = _group_columns(design.assignment_partition, design.n)
        frame["assignment_group"] = a_labels
        frame["assignment_remainder"] = a_flags
    else:
        frame = frame.drop(columns=["D", "assignment_group", "p", "assignment_remainder"])
    return frame


def write_design(design: DesignResult, path: str | Path, ids: Sequence[str] | None = None, *,
                 with_assignment: bool = True) -> None:
    ids = ids if ids is not None else [str(i) for i in range(design.n)]
    if len(ids) != design.n:
        raise SchemaError(f"{len(ids)} unit ids for a design over {design.n} units")
    write_frame(design_frame(design, ids, with_assignment=with_assignment), path)


def read_design(path: str | Path) -> tuple[DesignResult, tuple[str, ...]]:
    """Load a design file written by write_design; the seed comes from its manifest."""
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"{path}: no such file")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    needed = ["unit_id", "T", "D", "sampling_group", "assignment_group", "q", "p"]
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: not a full design file, missing {', '.join(missing)}")

    def ints(col: str) -> np.ndarray:
        try:
            return np.array([int(_clean_str(v) or 0) for v in frame[col]], dtype=int)
        except ValueError as e:
            raise SchemaError(f"{path}: column {col!r} must hold integers") from e

    q_map = PropensityMap.parse(frame["q"])
    p_map = PropensityMap.parse(frame["p"])
    s_flags = ints("sampling_remainder") if "sampling_remainder" in frame else np.zeros(len(frame), int)
    a_flags = ints("assignment_remainder") if "assignment_remainder" in frame else np.zeros(len(frame), int)
    s_part = _rebuild_partition([_clean_str(v) for v in frame["sampling_group"]], s_flags, q_map.values)
    a_part = _rebuild_partition([_clean_str(v) for v in frame["assignment_group"]], a_flags, p_map.values)

    manifest = read_manifest(path)
    seed = manifest.seed if manifest and manifest.seed is not None else 0
    warnings = tuple(manifest.warnings) if manifest else ()
    design = DesignResult(ints("T"), ints("D"), s_part, a_part, q_map, p_map, seed, warnings)
    return design, tuple(_clean_str(v) for v in frame["unit_id"])


def write_partition(partition: GroupPartition, path: str | Path, ids: Sequence[str]) -> None:
    rows = []
    for gid, g in enumerate(partition.groups):
        level = partition.stratum_of_group[gid]
        for u in g:
            rows.append((u, ids[u], gid, "" if level is None else str(level), int(gid in partition.remainder_groups)))
    rows.sort()
    frame = pd.DataFrame([r[1:] for r in rows], columns=["unit_id", "group_id", "stratum", "is_remainder"])
    write_frame(frame, path)
