"""Representative point sets drawn from mesh simplices."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import DataError
from .mesh_io import Mesh

KINDS = ("vertices", "edge-midpoints", "face-centroids", "cell-centroids")


@dataclass(frozen=True, eq=False)
class RepPointSet:
    points: np.ndarray      # (M, 3)
    features: np.ndarray    # (M, F)
    source: np.ndarray      # (M,) vertex id for kind=vertices, else row of `members`
    members: np.ndarray     # (M, j) vertex ids averaged into each point
    kind: str

    def __len__(self) -> int:
        return len(self.points)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


def unique_subsimplices(simplices: np.ndarray, size: int) -> np.ndarray:
    """Sorted, deduplicated vertex tuples of the given size, lexicographic order."""
    k = simplices.shape[1]
    cols = list(combinations(range(k), size))
    sub = np.concatenate([simplices[:, c] for c in cols], axis=0)
    sub = np.sort(sub, axis=1)
    return np.unique(sub, axis=0)


_TOPOLOGY_CACHE: dict[tuple[str, str], np.ndarray] = {}


def topology_key(simplices: np.ndarray) -> str:
    s = np.ascontiguousarray(simplices, dtype=np.int64)
    return hashlib.sha1(s.tobytes() + str(s.shape).encode()).hexdigest()


def _members(mesh: Mesh, kind: str) -> np.ndarray:
    s = mesh.simplices
    if kind == "cell-centroids":
        if mesh.k != 4:
            raise DataError("cell-centroids require a tetrahedral mesh (k=4)")
        return s
    if kind == "face-centroids" and mesh.k == 3:
        return s
    size = 2 if kind == "edge-midpoints" else 3
    key = (topology_key(s), kind)
    cached = _TOPOLOGY_CACHE.get(key)
    if cached is None:
        cached = unique_subsimplices(s, size)
        _TOPOLOGY_CACHE[key] = cached
    return cached


def rep_points(mesh: Mesh, kind: str) -> RepPointSet:
    if kind not in KINDS:
        raise DataError(f"unknown representative point kind {kind!r}; expected one of {KINDS}")
    if kind == "vertices":
        ids = np.arange(mesh.num_vertices)
        return RepPointSet(mesh.vertices.copy(), mesh.features.copy(), ids, ids[:, None], kind)
    if len(mesh.simplices) == 0:
        raise DataError("mesh has no simplices")
    members = _members(mesh, kind)
    j = members.shape[1]
    # explicit left-to-right sums keep results independent of numpy's reduction order
    pts = mesh.vertices[members[:, 0]].copy()
    feats = mesh.features[members[:, 0]].copy()
    for c in range(1, j):
        pts += mesh.vertices[members[:, c]]
        feats += mesh.features[members[:, c]]
    pts /= j
    feats /= j
    return RepPointSet(pts, feats, np.arange(len(members)), members, kind)


def default_kinds(k: int) -> list[str]:
    """Vertex branch plus the highest-order centroid branch for this mesh order."""
    return ["vertices", "cell-centroids" if k == 4 else "face-centroids"]
