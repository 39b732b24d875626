"""Linear octrees over representative points.

Keys are 3d-bit integers.  Z-order digits are taken from the most significant
level down; inside each octant digit the x bit is most significant, then y,
then z, so ``zorder_encode(3, 1, 2, 2) == 0b101_110 == 46``.  Hilbert keys use
Skilling's transpose construction with the same digit packing.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DataError
from .simplex import RepPointSet

MAX_DEPTH = 20
CURVES = ("zorder", "hilbert")

# stencil offsets in (dx, dy, dz) lexicographic order; index 13 is the centre
STENCIL = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
                   dtype=np.int64)
CENTER_TAP = 13


def _check_grid(g: np.ndarray, depth: int) -> None:
    if not 1 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth must be in [1, {MAX_DEPTH}], got {depth}")
    if g.size and (g.min() < 0 or g.max() >= (1 << depth)):
        raise ValueError(f"grid coordinate outside [0, {1 << depth}) at depth {depth}")


def _interleave(x: np.ndarray, y: np.ndarray, z: np.ndarray, depth: int) -> np.ndarray:
    code = np.zeros(np.shape(x), dtype=np.int64)
    for level in range(depth - 1, -1, -1):
        digit = (((x >> level) & 1) << 2) | (((y >> level) & 1) << 1) | ((z >> level) & 1)
        code = (code << 3) | digit
    return code


def _deinterleave(code: np.ndarray, depth: int):
    code = np.asarray(code, dtype=np.int64)
    x = np.zeros_like(code)
    y = np.zeros_like(code)
    z = np.zeros_like(code)
    for level in range(depth):
        digit = (code >> (3 * level)) & 7
        x |= ((digit >> 2) & 1) << level
        y |= ((digit >> 1) & 1) << level
        z |= (digit & 1) << level
    return x, y, z


def zorder_encode_array(grid: np.ndarray, depth: int) -> np.ndarray:
    g = np.asarray(grid, dtype=np.int64).reshape(-1, 3)
    _check_grid(g, depth)
    return _interleave(g[:, 0], g[:, 1], g[:, 2], depth)


def zorder_decode_array(codes: np.ndarray, depth: int) -> np.ndarray:
    return np.stack(_deinterleave(codes, depth), axis=-1)


def zorder_encode(gx: int, gy: int, gz: int, depth: int) -> int:
    return int(zorder_encode_array(np.array([[gx, gy, gz]]), depth)[0])


def zorder_decode(code: int, depth: int) -> tuple[int, int, int]:
    if not 0 <= code < (1 << (3 * depth)):
        raise ValueError(f"code {code} out of range at depth {depth}")
    x, y, z = zorder_decode_array(np.array([code]), depth)[0]
    return int(x), int(y), int(z)


def _axes_to_transpose(X: list[np.ndarray], bits: int) -> list[np.ndarray]:
    n = len(X)
    X = [x.copy() for x in X]
    q = 1 << (bits - 1)
    while q > 1:
        p = q - 1
        for i in range(n):
            hit = (X[i] & q) != 0
            t = (X[0] ^ X[i]) & p
            x0 = np.where(hit, X[0] ^ p, X[0] ^ t)
            if i:
                X[i] = np.where(hit, X[i], X[i] ^ t)
            X[0] = x0
        q >>= 1
    for i in range(1, n):
        X[i] = X[i] ^ X[i - 1]
    t = np.zeros_like(X[0])
    q = 1 << (bits - 1)
    while q > 1:
        t = np.where((X[n - 1] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    return [x ^ t for x in X]


def _transpose_to_axes(X: list[np.ndarray], bits: int) -> list[np.ndarray]:
    n = len(X)
    X = [x.copy() for x in X]
    N = 2 << (bits - 1)
    t = X[n - 1] >> 1
    for i in range(n - 1, 0, -1):
        X[i] = X[i] ^ X[i - 1]
    X[0] = X[0] ^ t
    q = 2
    while q != N:
        p = q - 1
        for i in range(n - 1, -1, -1):
            hit = (X[i] & q) != 0
            t = (X[0] ^ X[i]) & p
            x0 = np.where(hit, X[0] ^ p, X[0] ^ t)
            if i:
                X[i] = np.where(hit, X[i], X[i] ^ t)
            X[0] = x0
        q <<= 1
    return X


def hilbert_encode_array(grid: np.ndarray, depth: int) -> np.ndarray:
    g = np.asarray(grid, dtype=np.int64).reshape(-1, 3)
    _check_grid(g, depth)
    tx, ty, tz = _axes_to_transpose([g[:, 0], g[:, 1], g[:, 2]], depth)
    return _interleave(tx, ty, tz, depth)


def hilbert_decode_array(codes: np.ndarray, depth: int) -> np.ndarray:
    tx, ty, tz = _deinterleave(codes, depth)
    return np.stack(_transpose_to_axes([tx, ty, tz], depth), axis=-1)


def hilbert_encode(gx: int, gy: int, gz: int, depth: int) -> int:
    return int(hilbert_encode_array(np.array([[gx, gy, gz]]), depth)[0])


def hilbert_decode(code: int, depth: int) -> tuple[int, int, int]:
    if not 0 <= code < (1 << (3 * depth)):
        raise ValueError(f"code {code} out of range at depth {depth}")
    x, y, z = hilbert_decode_array(np.array([code]), depth)[0]
    return int(x), int(y), int(z)


def encode_array(grid: np.ndarray, depth: int, curve: str) -> np.ndarray:
    if curve == "zorder":
        return zorder_encode_array(grid, depth)
    if curve == "hilbert":
        return hilbert_encode_array(grid, depth)
    raise ValueError(f"unknown curve {curve!r}; expected one of {CURVES}")


# ---------------------------------------------------------------- octree


@dataclass(frozen=True, eq=False)
class Octree:
    depth: int
    curve: str
    bbox: np.ndarray            # (2, 3): lo, hi
    keys: np.ndarray            # (L,) strictly increasing curve codes
    grid: np.ndarray            # (L, 3) integer cell coordinates
    coords: np.ndarray          # (L, 3) mean normalised coordinate per leaf
    features: np.ndarray        # (L, F) mean feature per leaf
    counts: np.ndarray          # (L,)
    point_to_leaf: np.ndarray   # (M,) leaf rank of each input point
    kind: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @cached_property
    def neighbor_table(self) -> np.ndarray:
        """(L, 27) leaf rank of each stencil neighbour, -1 when absent."""
        L = len(self)
        side = 1 << self.depth
        nb = self.grid[:, None, :] + STENCIL[None, :, :]
        inside = ((nb >= 0) & (nb < side)).all(axis=-1)
        lookup = zorder_encode_array(self.grid, self.depth)
        order = np.argsort(lookup, kind="stable")
        sorted_codes = lookup[order]
        nb_codes = _interleave(np.where(inside, nb[..., 0], 0), np.where(inside, nb[..., 1], 0),
                               np.where(inside, nb[..., 2], 0), self.depth)
        pos = np.searchsorted(sorted_codes, nb_codes)
        pos = np.minimum(pos, max(L - 1, 0))
        found = inside & (sorted_codes[pos] == nb_codes) if L else inside
        table = np.where(found, order[pos] if L else -1, -1)
        return table.astype(np.int64)

    def leaf_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        side = float(1 << self.depth)
        return self.grid / side, (self.grid + 1) / side


def default_bbox(points: np.ndarray) -> np.ndarray:
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    ext = hi - lo
    flat = ext == 0
    lo = np.where(flat, lo - 0.5, lo - 0.01 * ext)
    hi = np.where(flat, hi + 0.5, hi + 0.01 * ext)
    return np.stack([lo, hi])


def _segment_sums(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    if values.shape[1] == 0:
        return np.zeros((len(starts), 0))
    return np.add.reduceat(values, starts, axis=0)


def build_octree(points: RepPointSet, depth: int, curve: str = "zorder", bbox=None) -> Octree:
    """Quantise points to a depth-``depth`` grid; one leaf per occupied cell."""
    if not 1 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth must be in [1, {MAX_DEPTH}], got {depth}")
    if curve not in CURVES:
        raise ValueError(f"unknown curve {curve!r}; expected one of {CURVES}")
    pts = np.asarray(points.points, dtype=np.float64)
    feats = np.asarray(points.features, dtype=np.float64)
    if len(pts) == 0:
        raise DataError("cannot build an octree from an empty point set")
    if bbox is None:
        box = default_bbox(pts)
    else:
        box = np.array(bbox, dtype=np.float64).reshape(2, 3)
        flat = box[1] - box[0] <= 0
        box = np.stack([np.where(flat, box[0] - 0.5, box[0]), np.where(flat, box[1] + 0.5, box[1])])
    norm = np.clip((pts - box[0]) / (box[1] - box[0]), 0.0, 1.0)
    side = 1 << depth
    grid = np.minimum(np.floor(norm * side).astype(np.int64), side - 1)
    codes = encode_array(grid, depth, curve)

    # total order on (code, coords, features) makes the segment sums order-free
    sort_keys = [feats[:, j] for j in range(feats.shape[1] - 1, -1, -1)]
    sort_keys += [norm[:, 2], norm[:, 1], norm[:, 0], codes]
    order = np.lexsort(sort_keys)
    sc = codes[order]
    new = np.ones(len(sc), dtype=bool)
    new[1:] = sc[1:] != sc[:-1]
    starts = np.flatnonzero(new)
    counts = np.diff(np.append(starts, len(sc)))
    sums = _segment_sums(norm[order], starts)
    mean_coords = sums / counts[:, None]
    leaf_grid = grid[order][starts]
    mean_coords = np.clip(mean_coords, leaf_grid / side, (leaf_grid + 1) / side)
    mean_feats = _segment_sums(feats[order], starts) / counts[:, None]
    ranks_sorted = np.cumsum(new) - 1
    point_to_leaf = np.empty(len(pts), dtype=np.int64)
    point_to_leaf[order] = ranks_sorted
    return Octree(depth=depth, curve=curve, bbox=box, keys=sc[starts], grid=leaf_grid,
                  coords=mean_coords, features=mean_feats, counts=counts,
                  point_to_leaf=point_to_leaf, kind=points.kind)


def leaf_neighbors(octree: Octree, rank: int):
    """27 ``(offset, rank-or-None)`` pairs; offsets leaving the grid are absent."""
    if not 0 <= rank < len(octree):
        raise IndexError(f"leaf rank {rank} out of range")
    row = octree.neighbor_table[rank]
    return [(tuple(int(v) for v in STENCIL[i]), None if row[i] < 0 else int(row[i]))
            for i in range(27)]


def octree_stats(octree: Octree) -> dict:
    hist = np.bincount(octree.counts)
    return {
        "kind": octree.kind,
        "depth": octree.depth,
        "curve": octree.curve,
        "points": int(octree.counts.sum()),
        "leaves": len(octree),
        "max_leaves": 1 << (3 * octree.depth),
        "occupancy_histogram": {str(c): int(n) for c, n in enumerate(hist) if n},
        "mean_points_per_leaf": float(octree.counts.mean()),
        "max_points_per_leaf": int(octree.counts.max()),
    }


# ---------------------------------------------------------------- windows


@dataclass(frozen=True, eq=False)
class WindowPartition:
    window_size: int
    index: np.ndarray       # (W, K) token rank per slot, -1 for padding

    @property
    def pad_mask(self) -> np.ndarray:
        return self.index < 0

    @property
    def windows(self) -> list[list[int | None]]:
        return [[None if r < 0 else int(r) for r in row] for row in self.index]

    def __len__(self) -> int:
        return len(self.index)

    @property
    def num_tokens(self) -> int:
        return int((self.index >= 0).sum())


def _chunk(ranks: np.ndarray, K: int) -> np.ndarray:
    n = len(ranks)
    rows = -(-n // K)
    out = np.full(rows * K, -1, dtype=np.int64)
    out[:n] = ranks
    return out.reshape(rows, K)


def _length(octree_or_len) -> int:
    return octree_or_len if isinstance(octree_or_len, (int, np.integer)) else len(octree_or_len)


def partition_windows(octree_or_len, K: int) -> WindowPartition:
    if K < 1:
        raise ValueError("window size must be >= 1")
    L = _length(octree_or_len)
    return WindowPartition(K, _chunk(np.arange(L, dtype=np.int64), K))


def dilated_grouping(octree_or_len, K: int, stride: int) -> WindowPartition:
    """Residue class ``r mod stride`` first, then runs of ``K`` inside each class."""
    if K < 1 or stride < 1:
        raise ValueError("window size and stride must be >= 1")
    L = _length(octree_or_len)
    if stride == 1:
        return partition_windows(L, K)
    blocks = [_chunk(np.arange(c, L, stride, dtype=np.int64), K) for c in range(min(stride, L))]
    index = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, K), dtype=np.int64)
    return WindowPartition(K, index)


# ---------------------------------------------------------------- caching


def points_digest(points: RepPointSet, depth: int, curve: str, bbox=None) -> str:
    h = hashlib.sha1()
    for arr in (points.points, points.features):
        a = np.ascontiguousarray(arr)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    h.update(f"{points.kind}|{depth}|{curve}".encode())
    if bbox is not None:
        h.update(np.ascontiguousarray(bbox, dtype=np.float64).tobytes())
    return h.hexdigest()


class OctreeCache:
    """Memoises :func:`build_octree` by content digest."""

    def __init__(self):
        self._store: dict[str, Octree] = {}
        self.hits = 0
        self.misses = 0

    def get(self, points: RepPointSet, depth: int, curve: str, bbox=None) -> Octree:
        key = points_digest(points, depth, curve, bbox)
        tree = self._store.get(key)
        if tree is None:
            self.misses += 1
            tree = build_octree(points, depth, curve, bbox)
            self._store[key] = tree
        else:
            self.hits += 1
        return tree

    def __len__(self) -> int:
        return len(self._store)
