"""Synthetic triangle-mesh cohorts for desk-scale experiments.

Every shape starts from the same cube-sphere tessellation (``6 m^2 + 2``
vertices for ``m`` divisions), so spheres, ellipsoids and boxes share one
topology.  Two per-vertex channels are attached: ``curvature`` (umbrella
Laplacian length over mean incident edge length) and ``radial`` (distance
from the shape centre).
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .mesh_io import Mesh, write_features, write_off
from .seeding import rng_for

KINDS = ("ellipsoids", "boxes-vs-spheres")
CHANNELS = ("curvature", "radial")


def cube_grid(divisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Cube surface in [-1, 1]^3 with ``divisions`` cells per edge, shared vertices."""
    m = divisions
    index: dict[tuple[int, int, int], int] = {}
    verts: list[tuple[int, int, int]] = []
    faces: list[tuple[int, int, int]] = []

    def vid(p):
        if p not in index:
            index[p] = len(verts)
            verts.append(p)
        return index[p]

    steps = range(-m, m + 1, 2)
    for axis in range(3):
        u, v = (axis + 1) % 3, (axis + 2) % 3
        for sign in (-1, 1):
            ids = np.empty((m + 1, m + 1), dtype=np.int64)
            for i, a in enumerate(steps):
                for j, b in enumerate(steps):
                    p = [0, 0, 0]
                    p[axis], p[u], p[v] = sign * m, a, b
                    ids[i, j] = vid(tuple(p))
            for i in range(m):
                for j in range(m):
                    a, b, c, d = ids[i, j], ids[i + 1, j], ids[i + 1, j + 1], ids[i, j + 1]
                    if sign > 0:
                        faces += [(a, b, c), (a, c, d)]
                    else:
                        faces += [(a, c, b), (a, d, c)]
    return np.array(verts, dtype=np.float64) / m, np.array(faces, dtype=np.int64)


def vertex_neighbors(n: int, faces: np.ndarray) -> list[np.ndarray]:
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        nbrs[a].append(int(b))
        nbrs[b].append(int(a))
    return [np.array(sorted(x), dtype=np.int64) for x in nbrs]


def curvature_proxy(vertices: np.ndarray, neighbors: list[np.ndarray]) -> np.ndarray:
    out = np.empty(len(vertices))
    for i, nb in enumerate(neighbors):
        p = vertices[nb]
        lap = p.mean(axis=0) - vertices[i]
        scale = np.linalg.norm(p - vertices[i], axis=1).mean()
        out[i] = np.linalg.norm(lap) / scale if scale > 0 else 0.0
    return out


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def make_shape(shape: str, half_axes, rotation=None, center=None, divisions: int = 9,
               name: str = "") -> tuple[Mesh, np.ndarray]:
    """Build one shape and its per-vertex half-space labels (canonical x > 0).

    ``shape`` is sphere, ellipsoid or box; round shapes are the normalised cube grid.
    """
    base, faces = cube_grid(divisions)
    if shape in ("sphere", "ellipsoid"):
        base = base / np.linalg.norm(base, axis=1, keepdims=True)
    elif shape != "box":
        raise ValueError(f"unknown shape {shape!r}")
    local = base * np.asarray(half_axes, dtype=np.float64)
    radial = np.linalg.norm(local, axis=1)
    rot = np.eye(3) if rotation is None else np.asarray(rotation)
    ctr = np.zeros(3) if center is None else np.asarray(center)
    verts = local @ rot.T + ctr
    curv = curvature_proxy(verts, vertex_neighbors(len(verts), faces))
    mesh = Mesh(verts, faces, np.stack([curv, radial], axis=1), CHANNELS, name=name)
    return mesh, (base[:, 0] > 0).astype(np.int64)


def synth_meshes(kind: str, n: int, seed: int, divisions: int = 9):
    """Yield ``(mesh, label, split, vertex_labels)``; boxes-vs-spheres alternates classes."""
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if n < 1:
        raise ValueError("n must be >= 1")
    for i in range(n):
        rng = rng_for(seed, "data", i)
        rot = random_rotation(rng)
        center = rng.uniform(-0.5, 0.5, size=3)
        if kind == "ellipsoids":
            shape, axes, label = "ellipsoid", rng.uniform(0.5, 1.5, size=3), 0
        elif i % 2 == 0:
            shape, axes, label = "sphere", np.full(3, rng.uniform(0.7, 1.3)), 0
        else:
            shape, axes, label = "box", rng.uniform(0.5, 1.3, size=3), 1
        name = f"{'ellipsoid' if kind == 'ellipsoids' else 'shape'}_{i:04d}"
        mesh, seg = make_shape(shape, axes, rot, center, divisions, name=name)
        split = "test" if i % 3 == 2 else "train"
        yield mesh, label, split, seg


def write_dataset(kind: str, n: int, seed: int, out_dir, divisions: int = 9) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    rows = []
    for mesh, label, split, seg in synth_meshes(kind, n, seed, divisions):
        p = out / f"{mesh.name}.off"
        write_off(mesh, p)
        write_features(mesh, p.with_suffix(".csv"))
        with open(out / f"{mesh.name}.seg", "w") as fh:
            fh.write("label\n" + "".join(f"{int(v)}\n" for v in seg))
        rows.append((p.name, label, split))
        paths.append(p)
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mesh", "label", "split"])
        w.writerows(rows)
    return paths
