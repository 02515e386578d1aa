"""Closest-point queries against a posed triangle mesh.

Maps observation-space points to surface field coordinates (u, v, l): the
texel coordinate of the nearest surface point plus the unsigned distance to
it. A median-split BVH accelerates the search; an exhaustive scan over all
faces serves as the reference implementation. Both resolve distance ties
(within 1e-9) to the lowest face index, so their results are comparable
face-for-face.

The same BVH also answers nearest ray-triangle intersections, used by the
ground-truth ray tracer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .body import PosedMesh

TIE_EPS = 1e-9          # distance window treated as a tie
LEAF_SIZE = 4


@dataclass(frozen=True)
class ProjectionResult:
    """Field coordinate of one query point: nearest-surface texel plus distance."""

    u: float
    v: float
    l: float
    face: int
    bary: np.ndarray    # (3,) barycentric weights of the nearest point


@dataclass(frozen=True)
class TriangleBvh:
    """Flat axis-aligned box tree over mesh triangles (immutable, query-only)."""

    node_min: np.ndarray    # (N, 3)
    node_max: np.ndarray    # (N, 3)
    node_left: np.ndarray   # (N,) child index, -1 for leaves
    node_right: np.ndarray  # (N,)
    node_start: np.ndarray  # (N,) leaf range into tri_order
    node_count: np.ndarray  # (N,)
    tri_order: np.ndarray   # (F,) permutation of face indices
    tri_verts: np.ndarray   # (F, 3, 3) triangle corners, original face order

    @property
    def num_faces(self) -> int:
        return self.tri_verts.shape[0]

    def depth(self) -> int:
        def walk(i):
            if self.node_left[i] < 0:
                return 1
            return 1 + max(walk(self.node_left[i]), walk(self.node_right[i]))
        return walk(0)


def build_bvh(mesh: PosedMesh, leaf_size: int = LEAF_SIZE) -> TriangleBvh:
    """Median split on the longest centroid axis; leaves hold <= leaf_size faces."""
    tris = np.ascontiguousarray(mesh.vertices[mesh.faces], dtype=np.float64)
    nf = tris.shape[0]
    if nf == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    lo = tris.min(axis=1)
    hi = tris.max(axis=1)
    centers = 0.5 * (lo + hi)

    node_min, node_max = [], []
    node_left, node_right, node_start, node_count = [], [], [], []
    order = np.arange(nf)

    def new_node():
        node_min.append(None)
        node_max.append(None)
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(0)
        node_count.append(0)
        return len(node_left) - 1

    def build(idx, start, count):
        sel = order[start:start + count]
        node_min[idx] = lo[sel].min(axis=0)
        node_max[idx] = hi[sel].max(axis=0)
        if count <= leaf_size:
            node_start[idx] = start
            node_count[idx] = count
            return
        cmin = centers[sel].min(axis=0)
        cmax = centers[sel].max(axis=0)
        axis = int(np.argmax(cmax - cmin))
        half = count // 2
        local = np.argsort(centers[sel, axis], kind="stable")
        order[start:start + count] = sel[local]
        left = new_node()
        right = new_node()
        node_left[idx] = left
        node_right[idx] = right
        build(left, start, half)
        build(right, start + half, count - half)

    root = new_node()
    build(root, 0, nf)
    return TriangleBvh(
        node_min=np.asarray(node_min), node_max=np.asarray(node_max),
        node_left=np.asarray(node_left, dtype=np.int32),
        node_right=np.asarray(node_right, dtype=np.int32),
        node_start=np.asarray(node_start, dtype=np.int32),
        node_count=np.asarray(node_count, dtype=np.int32),
        tri_order=order.astype(np.int32), tri_verts=tris)


# ---------------------------------------------------------------------------
# Public queries
# ---------------------------------------------------------------------------


def closest_point(bvh: TriangleBvh, mesh: PosedMesh, x: np.ndarray) -> ProjectionResult:
    """Project one point onto the surface via the BVH."""
    faces, bary, dist = project_points(bvh, np.asarray(x, dtype=np.float64)[None, :])
    return _result(mesh, int(faces[0]), bary[0], float(dist[0]))


def brute_force_closest(mesh: PosedMesh, x: np.ndarray) -> ProjectionResult:
    """Project one point by scanning every face (reference route)."""
    tris = np.ascontiguousarray(mesh.vertices[mesh.faces], dtype=np.float64)
    faces, bary, dist = _brute_batch(tris, np.asarray(x, dtype=np.float64)[None, :])
    return _result(mesh, int(faces[0]), bary[0], float(dist[0]))


def project_points(bvh: TriangleBvh, points: np.ndarray,
                   max_dist: float = np.inf):
    """Batch closest-point query. Returns (faces, bary (N,3), distances).

    With a finite max_dist, points farther than that from the surface are
    reported as misses (face -1, distance +inf) without an exact search;
    results within the cap are identical to the uncapped query.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    return _bvh_batch(bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right,
                      bvh.node_start, bvh.node_count, bvh.tri_order,
                      bvh.tri_verts, pts, max_dist)


def brute_force_project_points(mesh: PosedMesh, points: np.ndarray):
    tris = np.ascontiguousarray(mesh.vertices[mesh.faces], dtype=np.float64)
    return _brute_batch(tris, np.ascontiguousarray(points, dtype=np.float64))


def interpolate_uv(mesh: PosedMesh, faces: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Barycentric blend of the face corners' texels. Returns (N, 2)."""
    corners = mesh.uv_per_corner[faces]            # (N, 3, 2)
    return np.einsum("nc,ncd->nd", bary, corners)


def accept_sample(result: ProjectionResult, delta_n: float) -> bool:
    """Geometry-guided acceptance: keep only samples strictly closer than delta_n."""
    if delta_n <= 0.0:
        raise ValueError("acceptance threshold must be positive")
    return result.l < delta_n


def _result(mesh: PosedMesh, face: int, bary: np.ndarray, dist: float) -> ProjectionResult:
    uv = interpolate_uv(mesh, np.array([face]), bary[None, :])[0]
    return ProjectionResult(u=float(uv[0]), v=float(uv[1]), l=dist,
                            face=face, bary=bary.copy())


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _closest_on_triangle(px, py, pz, tri):
    """Squared distance and barycentrics of the closest point on one triangle.

    Region classification after Ericson, with barycentrics clamped exactly
    to the simplex on every branch.
    """
    ax, ay, az = tri[0, 0], tri[0, 1], tri[0, 2]
    abx, aby, abz = tri[1, 0] - ax, tri[1, 1] - ay, tri[1, 2] - az
    acx, acy, acz = tri[2, 0] - ax, tri[2, 1] - ay, tri[2, 2] - az
    apx, apy, apz = px - ax, py - ay, pz - az

    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        w0, w1, w2 = 1.0, 0.0, 0.0
    else:
        bpx, bpy, bpz = px - tri[1, 0], py - tri[1, 1], pz - tri[1, 2]
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0.0 and d4 <= d3:
            w0, w1, w2 = 0.0, 1.0, 0.0
        else:
            vc = d1 * d4 - d3 * d2
            if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                t = d1 / (d1 - d3)
                w0, w1, w2 = 1.0 - t, t, 0.0
            else:
                cpx, cpy, cpz = px - tri[2, 0], py - tri[2, 1], pz - tri[2, 2]
                d5 = abx * cpx + aby * cpy + abz * cpz
                d6 = acx * cpx + acy * cpy + acz * cpz
                if d6 >= 0.0 and d5 <= d6:
                    w0, w1, w2 = 0.0, 0.0, 1.0
                else:
                    vb = d5 * d2 - d1 * d6
                    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                        t = d2 / (d2 - d6)
                        w0, w1, w2 = 1.0 - t, 0.0, t
                    else:
                        va = d3 * d6 - d5 * d4
                        if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
                            t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                            w0, w1, w2 = 0.0, 1.0 - t, t
                        else:
                            denom = 1.0 / (va + vb + vc)
                            w1 = vb * denom
                            w2 = vc * denom
                            w0 = 1.0 - w1 - w2
    qx = w0 * tri[0, 0] + w1 * tri[1, 0] + w2 * tri[2, 0]
    qy = w0 * tri[0, 1] + w1 * tri[1, 1] + w2 * tri[2, 1]
    qz = w0 * tri[0, 2] + w1 * tri[1, 2] + w2 * tri[2, 2]
    dx, dy, dz = px - qx, py - qy, pz - qz
    return dx * dx + dy * dy + dz * dz, w0, w1, w2


@njit(cache=True, inline="always")
def _box_dist_sq(px, py, pz, bmin, bmax):
    d = 0.0
    t = bmin[0] - px
    if t > 0.0:
        d += t * t
    t = px - bmax[0]
    if t > 0.0:
        d += t * t
    t = bmin[1] - py
    if t > 0.0:
        d += t * t
    t = py - bmax[1]
    if t > 0.0:
        d += t * t
    t = bmin[2] - pz
    if t > 0.0:
        d += t * t
    t = pz - bmax[2]
    if t > 0.0:
        d += t * t
    return d


@njit(cache=True, nogil=True)
def _bvh_batch(node_min, node_max, node_left, node_right, node_start,
               node_count, tri_order, tris, points, max_dist):
    n = points.shape[0]
    out_face = np.empty(n, dtype=np.int64)
    out_bary = np.empty((n, 3), dtype=np.float64)
    out_dist = np.empty(n, dtype=np.float64)
    stack = np.empty(128, dtype=np.int64)
    cap = max_dist * max_dist
    for q in range(n):
        px, py, pz = points[q, 0], points[q, 1], points[q, 2]

        # pass 1: exact minimum distance (searched only below the cap)
        best = cap
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist_sq(px, py, pz, node_min[node], node_max[node]) > best:
                continue
            if node_left[node] < 0:
                s = node_start[node]
                for i in range(s, s + node_count[node]):
                    d2, _, _, _ = _closest_on_triangle(px, py, pz, tris[tri_order[i]])
                    if d2 < best:
                        best = d2
                continue
            l, r = node_left[node], node_right[node]
            dl = _box_dist_sq(px, py, pz, node_min[l], node_max[l])
            dr = _box_dist_sq(px, py, pz, node_min[r], node_max[r])
            # push the farther child first so the nearer one is visited next
            if dl <= dr:
                if dr <= best:
                    stack[top] = r
                    top += 1
                if dl <= best:
                    stack[top] = l
                    top += 1
            else:
                if dl <= best:
                    stack[top] = l
                    top += 1
                if dr <= best:
                    stack[top] = r
                    top += 1

        if best >= cap:
            out_face[q] = -1
            out_bary[q] = 0.0
            out_dist[q] = np.inf
            continue

        # pass 2: lowest face index whose distance ties the minimum
        limit = np.sqrt(best) + TIE_EPS
        limit_sq = limit * limit
        best_face = np.int64(2 ** 62)
        bw0 = bw1 = bw2 = 0.0
        bd = best
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist_sq(px, py, pz, node_min[node], node_max[node]) > limit_sq:
                continue
            if node_left[node] < 0:
                s = node_start[node]
                for i in range(s, s + node_count[node]):
                    f = tri_order[i]
                    d2, w0, w1, w2 = _closest_on_triangle(px, py, pz, tris[f])
                    if d2 <= limit_sq and f < best_face:
                        best_face = f
                        bw0, bw1, bw2 = w0, w1, w2
                        bd = d2
                continue
            stack[top] = node_left[node]
            top += 1
            stack[top] = node_right[node]
            top += 1

        out_face[q] = best_face
        out_bary[q, 0] = bw0
        out_bary[q, 1] = bw1
        out_bary[q, 2] = bw2
        out_dist[q] = np.sqrt(bd)
    return out_face, out_bary, out_dist


@njit(cache=True, nogil=True)
def _brute_batch(tris, points):
    n = points.shape[0]
    nf = tris.shape[0]
    out_face = np.empty(n, dtype=np.int64)
    out_bary = np.empty((n, 3), dtype=np.float64)
    out_dist = np.empty(n, dtype=np.float64)
    for q in range(n):
        px, py, pz = points[q, 0], points[q, 1], points[q, 2]
        best = np.inf
        for f in range(nf):
            d2, _, _, _ = _closest_on_triangle(px, py, pz, tris[f])
            if d2 < best:
                best = d2
        limit = np.sqrt(best) + TIE_EPS
        limit_sq = limit * limit
        for f in range(nf):
            d2, w0, w1, w2 = _closest_on_triangle(px, py, pz, tris[f])
            if d2 <= limit_sq:
                out_face[q] = f
                out_bary[q, 0] = w0
                out_bary[q, 1] = w1
                out_bary[q, 2] = w2
                out_dist[q] = np.sqrt(d2)
                break
    return out_face, out_bary, out_dist


# ---------------------------------------------------------------------------
# Ray casting against the same BVH (ground-truth renderer support)
# ---------------------------------------------------------------------------


def cast_rays(bvh: TriangleBvh, origins: np.ndarray, directions: np.ndarray):
    """Nearest ray-triangle hits. Returns (faces, t, bary); face -1 on miss."""
    return _ray_batch(bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right,
                      bvh.node_start, bvh.node_count, bvh.tri_order, bvh.tri_verts,
                      np.ascontiguousarray(origins, dtype=np.float64),
                      np.ascontiguousarray(directions, dtype=np.float64))


@njit(cache=True, inline="always")
def _ray_box(ox, oy, oz, ix, iy, iz, bmin, bmax, tmax):
    t0, t1 = 1e-9, tmax
    tn = (bmin[0] - ox) * ix
    tf = (bmax[0] - ox) * ix
    if tn > tf:
        tn, tf = tf, tn
    if tn > t0:
        t0 = tn
    if tf < t1:
        t1 = tf
    tn = (bmin[1] - oy) * iy
    tf = (bmax[1] - oy) * iy
    if tn > tf:
        tn, tf = tf, tn
    if tn > t0:
        t0 = tn
    if tf < t1:
        t1 = tf
    tn = (bmin[2] - oz) * iz
    tf = (bmax[2] - oz) * iz
    if tn > tf:
        tn, tf = tf, tn
    if tn > t0:
        t0 = tn
    if tf < t1:
        t1 = tf
    return t0 <= t1


@njit(cache=True, nogil=True)
def _ray_batch(node_min, node_max, node_left, node_right, node_start,
               node_count, tri_order, tris, origins, dirs):
    n = origins.shape[0]
    out_face = np.full(n, -1, dtype=np.int64)
    out_t = np.full(n, np.inf, dtype=np.float64)
    out_bary = np.zeros((n, 3), dtype=np.float64)
    stack = np.empty(128, dtype=np.int64)
    for q in range(n):
        ox, oy, oz = origins[q, 0], origins[q, 1], origins[q, 2]
        dx, dy, dz = dirs[q, 0], dirs[q, 1], dirs[q, 2]
        ix = 1.0 / dx if dx != 0.0 else np.inf
        iy = 1.0 / dy if dy != 0.0 else np.inf
        iz = 1.0 / dz if dz != 0.0 else np.inf
        best_t = np.inf
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if not _ray_box(ox, oy, oz, ix, iy, iz,
                            node_min[node], node_max[node], best_t):
                continue
            if node_left[node] < 0:
                s = node_start[node]
                for i in range(s, s + node_count[node]):
                    f = tri_order[i]
                    tri = tris[f]
                    # Moller-Trumbore
                    e1x, e1y, e1z = tri[1, 0] - tri[0, 0], tri[1, 1] - tri[0, 1], tri[1, 2] - tri[0, 2]
                    e2x, e2y, e2z = tri[2, 0] - tri[0, 0], tri[2, 1] - tri[0, 1], tri[2, 2] - tri[0, 2]
                    hx = dy * e2z - dz * e2y
                    hy = dz * e2x - dx * e2z
                    hz = dx * e2y - dy * e2x
                    det = e1x * hx + e1y * hy + e1z * hz
                    if -1e-12 < det < 1e-12:
                        continue
                    inv = 1.0 / det
                    sx, sy, sz = ox - tri[0, 0], oy - tri[0, 1], oz - tri[0, 2]
                    u = (sx * hx + sy * hy + sz * hz) * inv
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = sy * e1z - sz * e1y
                    qy = sz * e1x - sx * e1z
                    qz = sx * e1y - sy * e1x
                    v = (dx * qx + dy * qy + dz * qz) * inv
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = (e2x * qx + e2y * qy + e2z * qz) * inv
                    if 1e-9 < t < best_t:
                        best_t = t
                        out_face[q] = f
                        out_t[q] = t
                        out_bary[q, 0] = 1.0 - u - v
                        out_bary[q, 1] = u
                        out_bary[q, 2] = v
                continue
            stack[top] = node_left[node]
            top += 1
            stack[top] = node_right[node]
            top += 1
    return out_face, out_t, out_bary
