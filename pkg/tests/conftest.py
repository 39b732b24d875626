"""Shared fixtures and independent reference implementations used as oracles."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from octencoder.config import parse_config
from octencoder.mesh_io import Mesh

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


# ---------------------------------------------------------------- oracles


def morton_oracle(x: int, y: int, z: int, depth: int) -> int:
    """Interleave via bit strings: one (x, y, z) octal digit per level, MSB first."""
    bx, by, bz = (format(v, f"0{depth}b") for v in (x, y, z))
    return int("".join(a + b + c for a, b, c in zip(bx, by, bz)), 2)


def brute_nearest(P, Q):
    """Per point of P: (lowest index of a nearest Q point, its squared distance)."""
    out = []
    for p in P:
        best, arg = None, -1
        for j, q in enumerate(Q):
            dx, dy, dz = p[0] - q[0], p[1] - q[1], p[2] - q[2]
            d = dx * dx + dy * dy + dz * dz
            if best is None or d < best:
                best, arg = d, j
        out.append((arg, best))
    return out


def brute_chamfer(P, Q) -> float:
    """Forward sum plus backward sum, each accumulated left to right."""
    sums = []
    for A, B in ((P, Q), (Q, P)):
        acc = 0.0
        for _, d in brute_nearest(A, B):
            acc += d
        sums.append(acc)
    return sums[0] + sums[1]


def brute_octree(points: np.ndarray, features: np.ndarray, depth: int, bbox: np.ndarray):
    """Dict-of-cells octree: {cell: (count, mean_coord, mean_feat)} with normalised coords."""
    side = 2 ** depth
    cells: dict[tuple, list[int]] = {}
    norm = np.clip((points - bbox[0]) / (bbox[1] - bbox[0]), 0.0, 1.0)
    for i, p in enumerate(norm):
        cell = tuple(min(int(np.floor(c * side)), side - 1) for c in p)
        cells.setdefault(cell, []).append(i)
    return {c: (len(ix), norm[ix].mean(axis=0), features[ix].mean(axis=0)) for c, ix in cells.items()}


def finite_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of array ``x`` (restored afterwards)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


# denominator floor for composite gradchecks: relative 1e-5 above 1e-3, absolute 1e-8 below
GRAD_FLOOR = 1e-3


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |a-b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# ---------------------------------------------------------------- fixtures


def tetra_surface() -> Mesh:
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
    f = [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]
    return Mesh(v, f, np.array([[0.0, 1.0], [1.0, 2.0], [2.0, 3.0], [3.0, 4.0]]), ("a", "b"), "tetra")


def tiny_config(**over):
    base = {
        "branches": [{"kind": "vertices", "depth": 3}],
        "model": {"dim": 8, "heads": 2, "mlp_ratio": 2,
                  "schedule": [{"type": "local", "window": 4}, {"type": "dilated", "window": 4, "stride": 2}],
                  "decoder_schedule": [{"type": "local", "window": 4}, {"type": "dilated", "window": 4, "stride": 2}]},
        "optim": {"epochs": 3, "batch_size": 2, "lr": 1e-3},
        "finetune": {"epochs": 2, "batch_size": 4},
        "seed": 7,
    }
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            base[k] = {**base[k], **v}
        else:
            base[k] = v
    return parse_config(base)


@pytest.fixture
def tetra():
    return tetra_surface()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
