"""Triangle mesh container, ASCII OBJ/PLY I/O, spiral extraction and volume."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Raised for invalid mesh data or unreadable mesh files."""


@dataclass(frozen=True)
class TriMesh:
    """Fixed-topology triangle mesh: vertex coordinates plus face index triples.

    Vertices are float64 of shape (N, 3); faces are int64 of shape (F, 3).
    Instances are immutable; all derived quantities are recomputed on demand.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (N, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must have shape (F, 3), got {f.shape}")
        if f.size:
            bad = (f < 0) | (f >= len(v))
            if bad.any():
                row = int(np.argmax(bad.any(axis=1)))
                raise MeshError(f"face index out of range [0, {len(v)}): face row {row}")
        degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degen.any():
            raise MeshError(f"degenerate face at row {int(np.argmax(degen))}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def flipped(self) -> "TriMesh":
        """Same geometry with reversed face winding."""
        return TriMesh(self.vertices, self.faces[:, ::-1])


@dataclass(frozen=True)
class SpiralIndexSet:
    """Per-vertex fixed-length spiral orderings.

    ``spirals`` has shape (N, length); entries equal to ``pad_marker`` mark
    exhausted positions and gather a zero feature vector downstream.
    """

    spirals: np.ndarray
    length: int
    dilation: int
    pad_marker: int

    def __post_init__(self):
        s = np.ascontiguousarray(np.asarray(self.spirals, dtype=np.int64))
        if s.size and (s.min() < 0 or s.max() > self.pad_marker):
            raise MeshError(
                f"spiral indices must lie in [0, {self.pad_marker}] "
                f"(pad marker inclusive), got range [{s.min()}, {s.max()}]")
        s.setflags(write=False)
        object.__setattr__(self, "spirals", s)


# ---------------------------------------------------------------------------
# I/O


def load_mesh(path, format: str | None = None) -> TriMesh:
    """Read an ASCII OBJ or PLY file.

    The format is inferred from the file extension unless given explicitly.
    Parse errors are reported with a 1-based line number.
    """
    fmt = _resolve_format(path, format)
    with open(path, "r") as fh:
        lines = fh.readlines()
    if fmt == "obj":
        return _parse_obj(lines)
    return _parse_ply(lines)


def save_mesh(mesh: TriMesh, path, format: str | None = None) -> None:
    """Write an ASCII OBJ or PLY file; coordinates use %.17g (lossless)."""
    fmt = _resolve_format(path, format)
    out = []
    if fmt == "obj":
        for v in mesh.vertices:
            out.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            out.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    else:
        out.append("ply\nformat ascii 1.0\n")
        out.append(f"element vertex {mesh.n_vertices}\n")
        out.append("property double x\nproperty double y\nproperty double z\n")
        out.append(f"element face {mesh.n_faces}\n")
        out.append("property list uchar int vertex_indices\n")
        out.append("end_header\n")
        for v in mesh.vertices:
            out.append(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            out.append(f"3 {f[0]} {f[1]} {f[2]}\n")
    with open(path, "w") as fh:
        fh.writelines(out)


def _resolve_format(path, format):
    if format is None:
        format = str(path).rsplit(".", 1)[-1].lower()
    if format not in ("obj", "ply"):
        raise MeshError(f"unsupported mesh format {format!r} (expected obj or ply)")
    return format


def _parse_obj(lines) -> TriMesh:
    verts, faces = [], []
    for ln, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "v":
            if len(tok) < 4:
                raise MeshError(f"line {ln}: vertex needs 3 coordinates")
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise MeshError(f"line {ln}: bad vertex coordinate") from None
        elif tok[0] == "f":
            if len(tok) != 4:
                raise MeshError(f"line {ln}: only triangular faces are supported")
            idx = []
            for t in tok[1:4]:
                t = t.split("/")[0]
                try:
                    i = int(t)
                except ValueError:
                    raise MeshError(f"line {ln}: bad face index {t!r}") from None
                if i <= 0:
                    raise MeshError(f"line {ln}: face index {i} out of range (OBJ is 1-based)")
                idx.append(i - 1)
            faces.append(idx)
    return _finish_parse(verts, faces)


def _parse_ply(lines) -> TriMesh:
    if not lines or lines[0].strip() != "ply":
        raise MeshError("line 1: missing 'ply' magic")
    n_vert = n_face = None
    body_at = None
    for ln, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise MeshError(f"line {ln}: only ASCII PLY is supported")
        if tok[0] == "element" and tok[1] == "vertex":
            n_vert = int(tok[2])
        if tok[0] == "element" and tok[1] == "face":
            n_face = int(tok[2])
        if tok[0] == "end_header":
            body_at = ln
            break
    if body_at is None or n_vert is None or n_face is None:
        raise MeshError("incomplete PLY header")
    body = [l for l in lines[body_at:] if l.strip()]
    if len(body) < n_vert + n_face:
        raise MeshError(f"expected {n_vert + n_face} body lines, found {len(body)}")
    verts, faces = [], []
    for ln, line in enumerate(body[:n_vert], start=body_at + 1):
        tok = line.split()
        try:
            verts.append([float(t) for t in tok[:3]])
        except (ValueError, IndexError):
            raise MeshError(f"line {ln}: bad vertex line") from None
    for ln, line in enumerate(body[n_vert:n_vert + n_face], start=body_at + n_vert + 1):
        tok = line.split()
        if len(tok) < 4 or tok[0] != "3":
            raise MeshError(f"line {ln}: only triangular faces are supported")
        faces.append([int(t) for t in tok[1:4]])
    return _finish_parse(verts, faces)


def _finish_parse(verts, faces) -> TriMesh:
    try:
        return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                       np.array(faces, dtype=np.int64).reshape(-1, 3))
    except MeshError as e:
        raise MeshError(str(e)) from None


# ---------------------------------------------------------------------------
# Adjacency / spirals


def _oriented_rings(mesh: TriMesh):
    """One-ring of every vertex in consistent winding order.

    Faces (a, b, c) are taken counter-clockwise seen from outside, so the
    successor map succ[v][p] = q for face (v, p, q) walks each ring CCW
    w.r.t. the outward normal. Returns a list of index lists. Raises on
    non-manifold or isolated vertices; open fans (boundary) are supported
    by walking back to the fan start first.
    """
    n = mesh.n_vertices
    succ = [dict() for _ in range(n)]
    pred = [dict() for _ in range(n)]
    for a, b, c in mesh.faces:
        for v, p, q in ((a, b, c), (b, c, a), (c, a, b)):
            if p in succ[v] or q in pred[v]:
                raise MeshError(f"non-manifold vertex {v}")
            succ[v][p] = q
            pred[v][q] = p
    rings = []
    for v in range(n):
        if not succ[v]:
            raise MeshError(f"isolated vertex {v}")
        start = min(succ[v])
        # rewind to the fan boundary so open rings are walked end to end
        seen = {start}
        closed = False
        while start in pred[v]:
            prev = pred[v][start]
            if prev in seen:
                closed = True
                break
            start = prev
            seen.add(start)
        ring = [start]
        cur = start
        while cur in succ[v]:
            cur = succ[v][cur]
            if cur == start:
                break
            ring.append(cur)
        expect = len(succ[v]) if closed else len(succ[v]) + 1
        if len(ring) != expect or len(set(ring)) != len(ring):
            raise MeshError(f"non-manifold vertex {v}")
        if closed:
            k = ring.index(min(ring))
            ring = ring[k:] + ring[:k]
        rings.append(ring)
    return rings


def compute_spirals(mesh: TriMesh, length: int, dilation: int = 1) -> SpiralIndexSet:
    """Fixed-length spiral neighbor ordering for every vertex.

    Each spiral starts at the vertex itself, then walks its one-ring CCW
    (w.r.t. the outward normal) from the lowest-index neighbor, then
    successive rings. The raw trajectory is subsampled by ``dilation`` and
    truncated/padded to ``length`` with ``pad_marker = n_vertices``.
    """
    if length < 1:
        raise ValueError("spiral length must be >= 1")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    n = mesh.n_vertices
    rings = _oriented_rings(mesh)
    want = length * dilation
    rows = np.full((n, length), n, dtype=np.int64)
    for v in range(n):
        traj = [v]
        visited = {v}
        frontier = []
        for u in rings[v]:
            if u not in visited:
                traj.append(u)
                visited.add(u)
                frontier.append(u)
        while len(traj) < want and frontier:
            nxt = []
            for u in frontier:
                for w in rings[u]:
                    if w not in visited:
                        traj.append(w)
                        visited.add(w)
                        nxt.append(w)
            frontier = nxt
        kept = traj[::dilation][:length]
        rows[v, :len(kept)] = kept
    return SpiralIndexSet(rows, length, dilation, pad_marker=n)


# ---------------------------------------------------------------------------
# Volume


def mesh_volume(mesh: TriMesh) -> float:
    """Signed volume via the divergence theorem (tetrahedra against origin).

    Positive for a closed, outward-oriented mesh. Raises on boundary edges.
    """
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    fwd = {tuple(e) for e in edges.tolist()}
    for a, b in fwd:
        if (b, a) not in fwd:
            raise MeshError(f"open mesh: boundary edge ({a}, {b})")
    v = mesh.vertices
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)
