"""Mesh pooling hierarchy: QEM edge-collapse decimation and barycentric up-maps."""

from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .mesh import MeshError, TriMesh


@dataclass(frozen=True)
class SamplingHierarchy:
    """Template meshes per level plus sparse maps between adjacent levels.

    ``down_maps[l]`` has shape (N_{l+1}, N_l) and selects the kept vertex of
    each coarse node; ``up_maps[l]`` has shape (N_l, N_{l+1}) and carries
    barycentric interpolation weights. Both are row-stochastic.
    """

    templates: tuple
    down_maps: tuple
    up_maps: tuple

    @property
    def level_sizes(self):
        return [t.n_vertices for t in self.templates]

    def to_json(self) -> str:
        """Serialize to a documented JSON container (see README)."""
        doc = {"version": 1, "level_sizes": self.level_sizes, "levels": []}
        for i, t in enumerate(self.templates):
            level = {
                "vertices": t.vertices.tolist(),
                "faces": t.faces.tolist(),
            }
            if i < len(self.down_maps):
                level["down"] = _coo_triplets(self.down_maps[i])
                level["up"] = _coo_triplets(self.up_maps[i])
            doc["levels"].append(level)
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "SamplingHierarchy":
        doc = json.loads(text)
        templates, downs, ups = [], [], []
        sizes = doc["level_sizes"]
        for i, level in enumerate(doc["levels"]):
            templates.append(TriMesh(np.array(level["vertices"]),
                                     np.array(level["faces"], dtype=np.int64)))
            if "down" in level:
                downs.append(_from_triplets(level["down"], (sizes[i + 1], sizes[i])))
                ups.append(_from_triplets(level["up"], (sizes[i], sizes[i + 1])))
        return cls(tuple(templates), tuple(downs), tuple(ups))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _coo_triplets(m):
    coo = m.tocoo()
    order = np.lexsort((coo.col, coo.row))
    return [[int(coo.row[k]), int(coo.col[k]), float(coo.data[k])] for k in order]


def _from_triplets(triplets, shape):
    if not triplets:
        return sparse.csr_matrix(shape)
    arr = np.array(triplets)
    return sparse.csr_matrix((arr[:, 2], (arr[:, 0].astype(int), arr[:, 1].astype(int))),
                             shape=shape)


# ---------------------------------------------------------------------------
# Quadric-error-metric decimation


def _face_quadrics(vertices, faces):
    a = vertices[faces[:, 0]]
    n = np.cross(vertices[faces[:, 1]] - a, vertices[faces[:, 2]] - a)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(norm > 0, norm, 1.0)
    d = -np.einsum("ij,ij->i", n, a)
    p = np.concatenate([n, d[:, None]], axis=1)  # plane [a,b,c,d]
    return np.einsum("fi,fj->fij", p, p)


def _quadric_cost(q, pos):
    p = np.array([pos[0], pos[1], pos[2], 1.0])
    return float(p @ q @ p)


def decimate(mesh: TriMesh, target: int, strict: bool = True):
    """Greedy QEM edge collapse down to ``target`` vertices.

    Each collapse contracts an edge onto one of its endpoints (the cheaper
    one), so coarse vertices are a subset of fine vertices. Returns
    (coarse TriMesh, kept fine-vertex index per coarse vertex).

    The manifold link condition is enforced while any valid collapse
    remains; if the queue empties early and ``strict`` is false, the
    condition is relaxed (needed only for extremely coarse bottom levels
    that never feed spiral convolution).
    """
    n = mesh.n_vertices
    if target >= n:
        return mesh, np.arange(n)
    if target < 3:
        raise MeshError(f"cannot decimate below 3 vertices (target {target})")

    verts = mesh.vertices.copy()
    faces = {i: tuple(f) for i, f in enumerate(mesh.faces.tolist())}
    vfaces = [set() for _ in range(n)]
    for fi, f in faces.items():
        for v in f:
            vfaces[v].add(fi)
    quad = np.zeros((n, 4, 4))
    fq = _face_quadrics(verts, mesh.faces)
    for fi, f in faces.items():
        for v in f:
            quad[v] += fq[fi]

    alive = np.ones(n, dtype=bool)
    version = np.zeros(n, dtype=np.int64)

    def neighbors(v):
        out = set()
        for fi in vfaces[v]:
            out.update(faces[fi])
        out.discard(v)
        return out

    def edge_entry(u, v):
        # contract towards the endpoint with lower quadric error
        q = quad[u] + quad[v]
        cu = _quadric_cost(q, verts[u])
        cv = _quadric_cost(q, verts[v])
        if (cv, v) < (cu, u):
            u, v = v, u
            cu = cv
        # (cost, kept, removed, versions at push time)
        return (cu, u, v, int(version[u]), int(version[v]))

    heap = []
    pushed = set()
    for fi, f in faces.items():
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            e = (min(a, b), max(a, b))
            if e not in pushed:
                pushed.add(e)
                heapq.heappush(heap, edge_entry(*e))

    def link_ok(u, v):
        shared_faces = vfaces[u] & vfaces[v]
        if len(shared_faces) != 2:
            return False
        common = neighbors(u) & neighbors(v)
        return len(common) == 2

    def do_collapse(keep, drop):
        quad[keep] = quad[keep] + quad[drop]
        dead = vfaces[keep] & vfaces[drop]
        for fi in dead:
            for v in faces[fi]:
                vfaces[v].discard(fi)
            del faces[fi]
        moved = list(vfaces[drop])
        for fi in moved:
            f = tuple(keep if v == drop else v for v in faces[fi])
            if len(set(f)) != 3:
                for v in faces[fi]:
                    vfaces[v].discard(fi)
                del faces[fi]
                continue
            faces[fi] = f
            vfaces[drop].discard(fi)
            vfaces[keep].add(fi)
        alive[drop] = False
        version[keep] += 1
        nb = neighbors(keep)
        for w in nb:
            version[w] += 1
        for w in nb:
            heapq.heappush(heap, edge_entry(*sorted((keep, w))))

    remaining = n
    relaxed = False
    deferred = []
    progress = 0
    flushed_at = -1
    while remaining > target:
        if not heap and deferred and progress > flushed_at:
            # link-condition failures may become valid after nearby collapses
            flushed_at = progress
            for u, v in deferred:
                if alive[u] and alive[v] and v in neighbors(u):
                    heapq.heappush(heap, edge_entry(*sorted((u, v))))
            deferred = []
            continue
        if not heap:
            if strict:
                raise MeshError(
                    f"decimation cannot reach target size {target}: no valid collapse left "
                    f"at {remaining} vertices")
            if relaxed:
                raise MeshError(
                    f"decimation cannot reach target size {target}: stuck at {remaining}")
            # rebuild the queue without the link condition
            relaxed = True
            seen = set()
            for fi, f in faces.items():
                for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                    e = (min(a, b), max(a, b))
                    if e not in seen:
                        seen.add(e)
                        heapq.heappush(heap, edge_entry(*e))
            continue
        cost, keep, drop, vk, vd = heapq.heappop(heap)
        if not (alive[keep] and alive[drop]):
            continue
        if version[keep] != vk or version[drop] != vd:
            e = (min(keep, drop), max(keep, drop))
            if drop in neighbors(keep):
                heapq.heappush(heap, edge_entry(*e))
            continue
        if drop not in neighbors(keep):
            continue
        if not relaxed and not link_ok(keep, drop):
            deferred.append((keep, drop))
            continue
        if relaxed and len(vfaces[keep] & vfaces[drop]) < 1:
            continue
        do_collapse(keep, drop)
        remaining -= 1
        progress += 1

    kept = np.flatnonzero(alive)
    remap = -np.ones(n, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    new_faces = np.array([[remap[v] for v in f] for f in faces.values()],
                         dtype=np.int64).reshape(-1, 3)
    # deterministic face order
    if len(new_faces):
        new_faces = new_faces[np.lexsort((new_faces[:, 2], new_faces[:, 1], new_faces[:, 0]))]
    return TriMesh(verts[kept], new_faces), kept


# ---------------------------------------------------------------------------
# Barycentric up-sampling map


def _closest_on_triangles(p, a, b, c):
    """Closest point to p on each triangle (a,b,c); returns (points, bary)."""
    ab, ac, ap = b - a, c - a, p[None, :] - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p[None, :] - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p[None, :] - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-300, 1.0, denom)
    v = vb / denom
    w = vc / denom
    v = np.clip(v, 0.0, 1.0)
    w = np.clip(w, 0.0, 1.0 - v)

    # vertex regions
    v = np.where((d1 <= 0) & (d2 <= 0), 0.0, v)
    w = np.where((d1 <= 0) & (d2 <= 0), 0.0, w)
    v = np.where((d3 >= 0) & (d4 <= d3), 1.0, v)
    w = np.where((d3 >= 0) & (d4 <= d3), 0.0, w)
    v = np.where((d6 >= 0) & (d5 <= d6), 0.0, v)
    w = np.where((d6 >= 0) & (d5 <= d6), 1.0, w)
    # edge regions
    vc_mask = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    t_ab = np.where(d1 - d3 != 0, d1 / np.where(d1 - d3 == 0, 1, d1 - d3), 0.0)
    v = np.where(vc_mask, np.clip(t_ab, 0, 1), v)
    w = np.where(vc_mask, 0.0, w)
    vb_mask = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    t_ac = np.where(d2 - d6 != 0, d2 / np.where(d2 - d6 == 0, 1, d2 - d6), 0.0)
    v = np.where(vb_mask, 0.0, v)
    w = np.where(vb_mask, np.clip(t_ac, 0, 1), w)
    va_mask = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    t_bc = (d4 - d3) / np.where((d4 - d3) + (d5 - d6) == 0, 1.0, (d4 - d3) + (d5 - d6))
    v = np.where(va_mask, np.clip(1 - t_bc, 0, 1), v)
    w = np.where(va_mask, np.clip(t_bc, 0, 1), w)

    u = 1.0 - v - w
    pts = u[:, None] * a + v[:, None] * b + w[:, None] * c
    return pts, np.stack([u, v, w], axis=1)


def _barycentric_up_map(fine: TriMesh, coarse: TriMesh) -> sparse.csr_matrix:
    fv = fine.vertices
    cv = coarse.vertices
    cf = coarse.faces
    a, b, c = cv[cf[:, 0]], cv[cf[:, 1]], cv[cf[:, 2]]
    rows, cols, vals = [], [], []
    for i in range(fine.n_vertices):
        pts, bary = _closest_on_triangles(fv[i], a, b, c)
        d2 = np.einsum("ij,ij->i", pts - fv[i], pts - fv[i])
        fi = int(np.argmin(d2))
        wsum = bary[fi].sum()
        for j in range(3):
            rows.append(i)
            cols.append(int(cf[fi, j]))
            vals.append(float(bary[fi, j] / wsum))
    m = sparse.csr_matrix((vals, (rows, cols)), shape=(fine.n_vertices, coarse.n_vertices))
    m.sum_duplicates()
    return m


def build_hierarchy(template: TriMesh, factors) -> SamplingHierarchy:
    """Pooling hierarchy with one extra level per downsample factor.

    Level l+1 has ceil(N_l / factor_l) vertices. Down-maps select kept
    vertices (one-hot rows); up-maps interpolate fine vertices from the
    barycentric coordinates of their closest coarse triangle.
    """
    templates = [template]
    downs, ups = [], []
    for r in factors:
        if r < 1:
            raise ValueError(f"downsample factor must be >= 1, got {r}")
        cur = templates[-1]
        target = math.ceil(cur.n_vertices / r)
        if target == cur.n_vertices:
            n = cur.n_vertices
            eye = sparse.identity(n, format="csr")
            templates.append(cur)
            downs.append(eye)
            ups.append(eye.copy())
            continue
        coarse, kept = decimate(cur, target, strict=False)
        down = sparse.csr_matrix(
            (np.ones(len(kept)), (np.arange(len(kept)), kept)),
            shape=(coarse.n_vertices, cur.n_vertices))
        up = _barycentric_up_map(cur, coarse)
        templates.append(coarse)
        downs.append(down)
        ups.append(up)
    return SamplingHierarchy(tuple(templates), tuple(downs), tuple(ups))
