"""Mesh containers and the ASCII formats we read and write.

Formats
-------
OFF       ``OFF`` header, ``nv nf ne`` counts, ``nv`` lines ``x y z``, then
          ``nf`` lines ``3 i j k`` (0-based).  ``#`` starts a comment.
TetGen    ``.node``: ``n 3 nattr nbnd`` then ``idx x y z [attr..] [bnd]``.
          ``.ele``: ``m 4 nattr`` then ``idx a b c d [attr..]``.  Indices use
          the numbering of the first ``.node`` entry (0 or 1); we store 0-based.
CSV       Header of channel names, one numeric row per vertex.
PLY       ASCII 1.0, ``x y z`` floats and optional ``red green blue`` uchar.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, MeshFormatError


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    simplices: np.ndarray
    features: np.ndarray = field(default=None)
    channels: tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        s = np.ascontiguousarray(self.simplices, dtype=np.int64)
        if s.ndim != 2:
            raise DataError("simplices must be a 2-D index array")
        f = self.features
        if f is None:
            f = np.zeros((len(v), 0))
        f = np.ascontiguousarray(f, dtype=np.float64)
        if f.ndim == 1:
            f = f.reshape(-1, 1)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "simplices", s)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "channels", tuple(self.channels))
        validate(self)

    @property
    def k(self) -> int:
        return self.simplices.shape[1]

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: np.ndarray, channels: Sequence[str]) -> "Mesh":
        return replace(self, features=features, channels=tuple(channels))


def validate(mesh: Mesh) -> None:
    n = len(mesh.vertices)
    s = mesh.simplices
    if s.shape[1] not in (3, 4) and not (s.shape[0] == 0):
        raise DataError(f"simplex order must be 3 or 4, got {s.shape[1]}")
    if s.size and (s.min() < 0 or s.max() >= n):
        raise DataError(f"simplex index out of range [0, {n})")
    if not np.isfinite(mesh.vertices).all():
        raise DataError("non-finite vertex coordinate")
    if mesh.features.shape[0] != n:
        raise DataError(f"feature rows {mesh.features.shape[0]} != vertex count {n}")
    if not np.isfinite(mesh.features).all():
        raise DataError("non-finite feature value")
    if mesh.channels and len(mesh.channels) != mesh.features.shape[1]:
        raise DataError("channel names do not match feature columns")


# ---------------------------------------------------------------- tokenizing helper


def _data_lines(path: Path):
    """Yield (lineno, tokens) for non-empty, comment-stripped lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _floats(tokens, path, lineno, what="value"):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise MeshFormatError(f"non-numeric {what}", path, lineno) from None


def _ints(tokens, path, lineno, what="index"):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise MeshFormatError(f"non-integer {what}", path, lineno) from None


def _check_coord(xyz, path, lineno):
    if not all(np.isfinite(xyz)):
        raise MeshFormatError("NaN/Inf coordinate", path, lineno)


# ---------------------------------------------------------------- OFF


def read_off(path) -> Mesh:
    path = Path(path)
    lines = _data_lines(path)
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise MeshFormatError("empty file", path) from None
    if not head[0].upper().endswith("OFF"):
        raise MeshFormatError("missing OFF header", path, lineno)
    counts = head[1:]
    if not counts:
        try:
            lineno, counts = next(lines)
        except StopIteration:
            raise MeshFormatError("missing counts line", path) from None
    if len(counts) < 2:
        raise MeshFormatError("counts line needs 'nv nf [ne]'", path, lineno)
    nv, nf = _ints(counts[:2], path, lineno, "count")
    verts = np.empty((nv, 3))
    for i in range(nv):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise MeshFormatError(f"expected {nv} vertices, got {i}", path) from None
        if len(tok) < 3:
            raise MeshFormatError("vertex line needs 3 coordinates", path, lineno)
        xyz = _floats(tok[:3], path, lineno, "coordinate")
        _check_coord(xyz, path, lineno)
        verts[i] = xyz
    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise MeshFormatError(f"expected {nf} faces, got {i}", path) from None
        vals = _ints(tok[:1], path, lineno, "face arity")
        arity = vals[0]
        if arity != 3:
            raise MeshFormatError(f"mixed simplex arity: face with {arity} vertices", path, lineno)
        if len(tok) < 4:
            raise MeshFormatError("face line truncated", path, lineno)
        idx = _ints(tok[1:4], path, lineno)
        for j in idx:
            if j < 0 or j >= nv:
                raise MeshFormatError(f"index {j} out of range [0, {nv})", path, lineno)
        faces[i] = idx
    return Mesh(verts, faces, name=path.stem)


def write_off(mesh: Mesh, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.num_vertices} {len(mesh.simplices)} 0\n")
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")
        for tri in mesh.simplices:
            fh.write("3 " + " ".join(str(int(i)) for i in tri) + "\n")


# ---------------------------------------------------------------- TetGen


def _tetgen_paths(path: Path) -> tuple[Path, Path]:
    if path.suffix in (".node", ".ele"):
        stem = path.with_suffix("")
    else:
        stem = path
    return stem.with_suffix(".node"), stem.with_suffix(".ele")


def read_tetgen(path) -> Mesh:
    node_path, ele_path = _tetgen_paths(Path(path))
    for p in (node_path, ele_path):
        if not p.exists():
            raise MeshFormatError("missing TetGen file", p)

    lines = _data_lines(node_path)
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise MeshFormatError("empty .node file", node_path) from None
    head = _ints(head, node_path, lineno, "header field")
    n, dim = head[0], head[1] if len(head) > 1 else 3
    if dim != 3:
        raise MeshFormatError(f"only 3-D nodes supported, got dim={dim}", node_path, lineno)
    verts = np.empty((n, 3))
    base = 0
    for i in range(n):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise MeshFormatError(f"expected {n} nodes, got {i}", node_path) from None
        if len(tok) < 4:
            raise MeshFormatError("node line needs 'idx x y z'", node_path, lineno)
        (idx,) = _ints(tok[:1], node_path, lineno)
        if i == 0:
            if idx not in (0, 1):
                raise MeshFormatError(f"first node index must be 0 or 1, got {idx}", node_path, lineno)
            base = idx
        if idx != i + base:
            raise MeshFormatError(f"node index {idx} out of sequence", node_path, lineno)
        xyz = _floats(tok[1:4], node_path, lineno, "coordinate")
        _check_coord(xyz, node_path, lineno)
        verts[i] = xyz

    lines = _data_lines(ele_path)
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise MeshFormatError("empty .ele file", ele_path) from None
    head = _ints(head, ele_path, lineno, "header field")
    m, per = head[0], head[1] if len(head) > 1 else 4
    if per != 4:
        raise MeshFormatError(f"mixed simplex arity: {per} nodes per element", ele_path, lineno)
    tets = np.empty((m, 4), dtype=np.int64)
    for i in range(m):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise MeshFormatError(f"expected {m} elements, got {i}", ele_path) from None
        if len(tok) < 5:
            raise MeshFormatError("element line needs 'idx a b c d'", ele_path, lineno)
        idx = _ints(tok[1:5], ele_path, lineno)
        for j in idx:
            if j - base < 0 or j - base >= n:
                raise MeshFormatError(f"index {j} out of range for {n} nodes (base {base})",
                                      ele_path, lineno)
        tets[i] = [j - base for j in idx]
    return Mesh(verts, tets, name=node_path.stem)


def write_tetgen(mesh: Mesh, path, base: int = 0) -> None:
    node_path, ele_path = _tetgen_paths(Path(path))
    with open(node_path, "w", encoding="utf-8") as fh:
        fh.write(f"{mesh.num_vertices} 3 0 0\n")
        for i, (x, y, z) in enumerate(mesh.vertices.tolist()):
            fh.write(f"{i + base} {x!r} {y!r} {z!r}\n")
    with open(ele_path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(mesh.simplices)} 4 0\n")
        for i, tet in enumerate(mesh.simplices):
            fh.write(f"{i + base} " + " ".join(str(int(j) + base) for j in tet) + "\n")


# ---------------------------------------------------------------- dispatch

FORMATS = ("off", "tetgen")


def guess_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".off":
        return "off"
    if suffix in (".node", ".ele"):
        return "tetgen"
    raise DataError(f"cannot infer mesh format from {path}")


def load_mesh(path, format: str | None = None) -> Mesh:
    fmt = format or guess_format(path)
    if fmt == "off":
        return read_off(path)
    if fmt == "tetgen":
        return read_tetgen(path)
    raise DataError(f"unknown mesh format {fmt!r}; expected one of {FORMATS}")


# ---------------------------------------------------------------- features


def load_features(path, mesh: Mesh) -> Mesh:
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MeshFormatError("missing header row", path, 1) from None
        names = [h.strip() for h in header]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise MeshFormatError(f"duplicate channel name(s) {dup}", path, 1)
        rows = []
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(names):
                raise MeshFormatError(f"expected {len(names)} columns, got {len(row)}", path, lineno)
            rows.append(_floats(row, path, lineno, "cell"))
            if not all(np.isfinite(rows[-1])):
                raise MeshFormatError("NaN/Inf feature value", path, lineno)
    if len(rows) != mesh.num_vertices:
        raise MeshFormatError(f"feature row count {len(rows)} != vertex count {mesh.num_vertices}", path)
    feats = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return mesh.with_features(feats, names)


def write_features(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(mesh.channels)
        for row in mesh.features:
            w.writerow([repr(float(v)) for v in row])


def features_path(mesh_path) -> Path:
    p = Path(mesh_path)
    return p.with_suffix(".csv")


def load_mesh_auto(path) -> Mesh:
    """Load a mesh and, when present, its sibling ``<stem>.csv`` feature table."""
    mesh = load_mesh(path)
    fp = features_path(path)
    if fp.exists():
        mesh = load_features(fp, mesh)
    return mesh


def list_meshes(directory) -> list[Path]:
    """Mesh files in ``directory``: ``*.off`` plus one entry per ``*.node``."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"not a directory: {d}")
    return sorted(list(d.glob("*.off")) + list(d.glob("*.node")))


# ---------------------------------------------------------------- PLY


def export_points(points, path, colors=None) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if colors is not None:
        colors = np.asarray(colors).reshape(-1, 3)
        if len(colors) != len(pts):
            raise DataError(f"{len(colors)} colors for {len(pts)} points")
        colors = np.clip(np.round(colors), 0, 255).astype(np.int64)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if colors is not None:
            fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for i, (x, y, z) in enumerate(pts):
            line = f"{x:.9g} {y:.9g} {z:.9g}"
            if colors is not None:
                r, g, b = colors[i]
                line += f" {r} {g} {b}"
            fh.write(line + "\n")


def read_ply_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read back what :func:`export_points` writes."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise MeshFormatError("not a PLY file", path, 1)
    n = 0
    has_color = False
    end = None
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        elif line.startswith("property uchar red"):
            has_color = True
        elif line == "end_header":
            end = i
            break
    if end is None:
        raise MeshFormatError("missing end_header", path)
    body = [ln.split() for ln in lines[end + 1:end + 1 + n]]
    pts = np.array([[float(t) for t in row[:3]] for row in body]).reshape(n, 3)
    cols = None
    if has_color:
        cols = np.array([[int(t) for t in row[3:6]] for row in body], dtype=np.int64).reshape(n, 3)
    return pts, cols
