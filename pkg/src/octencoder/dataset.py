"""Labelled mesh collections: a directory written by ``synth`` or generated in memory."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .mesh_io import Mesh, list_meshes, load_mesh_auto
from .synth import synth_meshes


@dataclass
class MeshSet:
    meshes: list[Mesh]
    labels: list[int] | None = None
    splits: list[str] | None = None
    vertex_labels: list[np.ndarray] | None = None
    names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.meshes)

    def indices(self, split: str) -> list[int]:
        if self.splits is None:
            raise DataError("dataset has no train/test split column")
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset(self, idx) -> "MeshSet":
        pick = lambda seq: None if seq is None else [seq[i] for i in idx]  # noqa: E731
        return MeshSet([self.meshes[i] for i in idx], pick(self.labels), pick(self.splits),
                       pick(self.vertex_labels), pick(self.names) or [])


def from_synth(kind: str, n: int, seed: int, divisions: int = 9) -> MeshSet:
    meshes, labels, splits, segs = [], [], [], []
    for mesh, label, split, seg in synth_meshes(kind, n, seed, divisions):
        meshes.append(mesh)
        labels.append(label)
        splits.append(split)
        segs.append(seg)
    return MeshSet(meshes, labels, splits, segs, [m.name for m in meshes])


def _read_seg(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["label"]:
        raise DataError(f"{path}: expected a 'label' header")
    try:
        return np.array([int(r[0]) for r in rows[1:] if r], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_dir(directory) -> MeshSet:
    """Meshes (+ sibling feature CSVs) in ``directory``; ``labels.csv`` and ``*.seg`` if present."""
    d = Path(directory)
    paths = list_meshes(d)
    if not paths:
        raise DataError(f"no .off or .node meshes in {d}")
    meshes = [load_mesh_auto(p) for p in paths]
    names = [p.name for p in paths]
    out = MeshSet(meshes, names=names)
    lab = d / "labels.csv"
    if lab.exists():
        with open(lab, newline="") as fh:
            table = {r["mesh"]: r for r in csv.DictReader(fh)}
        missing = [n for n in names if n not in table]
        if missing:
            raise DataError(f"{lab}: no label row for {missing[0]}")
        try:
            out.labels = [int(table[n]["label"]) for n in names]
        except (KeyError, ValueError) as exc:
            raise DataError(f"{lab}: bad label column ({exc})") from None
        out.splits = [table[n].get("split") or "train" for n in names]
    segs = [p.with_suffix(".seg") for p in paths]
    if all(s.exists() for s in segs):
        out.vertex_labels = [_read_seg(s) for s in segs]
    return out
