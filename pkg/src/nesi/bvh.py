"""Ray queries against triangle meshes.

A flattened median-split BVH is traversed by numba kernels for any-hit and
first-hit queries. A vectorized brute-force path implements the exact same
intersection predicate and serves as the correctness oracle: for every ray,
accelerated and brute-force answers are identical, including tie handling
(first hit prefers smaller t, then smaller face index).

Rays parallel to and coplanar with a triangle count as a miss (the Moller-
Trumbore determinant test), so measure-zero configurations are deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange
from scipy.spatial import ConvexHull

from .mesh import RayHit, TriMesh

# Offset along the ray before counting hits, in normalized model units;
# avoids self-intersection when casting from on-surface points.
EPS_RAY = 1e-4
_DET_EPS = 1e-12
_LEAF_SIZE = 4


# ---------------------------------------------------------------------------
# Construction

def _build_nodes_recursive(centroids, tri_min, tri_max):
    """Recursive builder with explicit child index bookkeeping."""
    n = len(centroids)
    order = np.arange(n, dtype=np.int64)
    node_min, node_max, node_left, node_right, node_first, node_count = [], [], [], [], [], []

    def build(start, end):
        idx = len(node_min)
        sel = order[start:end]
        node_min.append(tri_min[sel].min(axis=0))
        node_max.append(tri_max[sel].max(axis=0))
        node_left.append(-1)
        node_right.append(-1)
        node_first.append(start)
        node_count.append(end - start)
        if end - start <= _LEAF_SIZE:
            return idx
        cent = centroids[order[start:end]]
        spread = cent.max(axis=0) - cent.min(axis=0)
        axis = int(np.argmax(spread))
        if spread[axis] <= 0.0:
            return idx  # all centroids coincide; keep as leaf
        mid = (end - start) // 2
        part = np.argpartition(cent[:, axis], mid, kind="introselect")
        order[start:end] = order[start:end][part]
        node_count[idx] = 0
        left = build(start, start + mid)
        right = build(start + mid, end)
        node_left[idx] = left
        node_right[idx] = right
        return idx

    import sys
    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 10000 + 4 * int(np.log2(n + 1) + 64)))
    try:
        build(0, n)
    finally:
        sys.setrecursionlimit(old_limit)
    return (np.asarray(node_min), np.asarray(node_max),
            np.asarray(node_left, dtype=np.int64), np.asarray(node_right, dtype=np.int64),
            np.asarray(node_first, dtype=np.int64), np.asarray(node_count, dtype=np.int64),
            order)


class RayIndex:
    """Immutable ray acceleration structure over a TriMesh (safe to share)."""

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        a, b, c = mesh.triangle_corners()
        tri_min = np.minimum(np.minimum(a, b), c)
        tri_max = np.maximum(np.maximum(a, b), c)
        centroids = (a + b + c) / 3.0
        (self.node_min, self.node_max, self.node_left, self.node_right,
         self.node_first, self.node_count, order) = _build_nodes_recursive(centroids, tri_min, tri_max)
        self.v0 = np.ascontiguousarray(a[order])
        self.e1 = np.ascontiguousarray(b[order] - a[order])
        self.e2 = np.ascontiguousarray(c[order] - a[order])
        self.tri_index = np.ascontiguousarray(order)  # position -> original face id

    # Scalar conveniences -------------------------------------------------
    def any_hit(self, origin, direction, t_min: float = EPS_RAY) -> bool:
        o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
        d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
        return bool(self.any_hit_batch(o, d, t_min)[0])

    def first_hit(self, origin, direction, t_min: float = EPS_RAY):
        o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
        d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
        t, face = self.first_hit_batch(o, d, t_min)
        if face[0] < 0:
            return None
        pt = o[0] + t[0] * d[0]
        return RayHit(t=float(t[0]), point=pt, face_index=int(face[0]),
                      normal=self.mesh.face_normals[face[0]].copy())

    # Batched queries ------------------------------------------------------
    def any_hit_batch(self, origins, dirs, t_min: float = EPS_RAY) -> np.ndarray:
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        out = np.zeros(len(origins), dtype=np.bool_)
        _any_hit_kernel(origins, dirs, t_min,
                        self.node_min, self.node_max, self.node_left, self.node_right,
                        self.node_first, self.node_count,
                        self.v0, self.e1, self.e2, out)
        return out

    def first_hit_batch(self, origins, dirs, t_min: float = EPS_RAY):
        """Returns (t, face_index) arrays; face_index -1 for misses."""
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        t_out = np.full(len(origins), np.inf, dtype=np.float64)
        f_out = np.full(len(origins), -1, dtype=np.int64)
        _first_hit_kernel(origins, dirs, t_min,
                          self.node_min, self.node_max, self.node_left, self.node_right,
                          self.node_first, self.node_count,
                          self.v0, self.e1, self.e2, self.tri_index, t_out, f_out)
        return t_out, f_out


def build_ray_index(mesh: TriMesh) -> RayIndex:
    return RayIndex(mesh)


def ray_any_hit(index: RayIndex, origin, direction, t_min: float = EPS_RAY) -> bool:
    return index.any_hit(origin, direction, t_min)


def ray_first_hit(index: RayIndex, origin, direction, t_min: float = EPS_RAY):
    return index.first_hit(origin, direction, t_min)


# ---------------------------------------------------------------------------
# Numba kernels

@njit(cache=True, inline="always")
def _tri_hit_t(ox, oy, oz, dx, dy, dz, v0, e1, e2, k):
    """Moller-Trumbore; returns hit parameter t or -inf for a miss."""
    hx = dy * e2[k, 2] - dz * e2[k, 1]
    hy = dz * e2[k, 0] - dx * e2[k, 2]
    hz = dx * e2[k, 1] - dy * e2[k, 0]
    det = e1[k, 0] * hx + e1[k, 1] * hy + e1[k, 2] * hz
    if abs(det) < _DET_EPS:
        return -np.inf
    inv = 1.0 / det
    sx = ox - v0[k, 0]
    sy = oy - v0[k, 1]
    sz = oz - v0[k, 2]
    u = (sx * hx + sy * hy + sz * hz) * inv
    if u < 0.0 or u > 1.0:
        return -np.inf
    qx = sy * e1[k, 2] - sz * e1[k, 1]
    qy = sz * e1[k, 0] - sx * e1[k, 2]
    qz = sx * e1[k, 1] - sy * e1[k, 0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -np.inf
    return (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * inv


@njit(cache=True, inline="always")
def _slab_test(ox, oy, oz, dx, dy, dz, lo, hi, t_max):
    """Ray / AABB overlap on [0, t_max]; parallel rays handled without NaN."""
    t0 = 0.0
    t1 = t_max
    for a in range(3):
        if a == 0:
            o = ox
            d = dx
        elif a == 1:
            o = oy
            d = dy
        else:
            o = oz
            d = dz
        if d == 0.0:
            if o < lo[a] or o > hi[a]:
                return False
        else:
            inv = 1.0 / d
            ta = (lo[a] - o) * inv
            tb = (hi[a] - o) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 > t1:
                return False
    return True


@njit(cache=True, parallel=True)
def _any_hit_kernel(origins, dirs, t_min, node_min, node_max, node_left, node_right,
                    node_first, node_count, v0, e1, e2, out):
    for r in prange(origins.shape[0]):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        stack = np.empty(128, dtype=np.int64)
        top = 0
        stack[top] = 0
        top += 1
        hit = False
        while top > 0 and not hit:
            top -= 1
            node = stack[top]
            if not _slab_test(ox, oy, oz, dx, dy, dz, node_min[node], node_max[node], np.inf):
                continue
            if node_count[node] > 0:
                first = node_first[node]
                for k in range(first, first + node_count[node]):
                    t = _tri_hit_t(ox, oy, oz, dx, dy, dz, v0, e1, e2, k)
                    if t > t_min:
                        hit = True
                        break
            else:
                stack[top] = node_left[node]
                top += 1
                stack[top] = node_right[node]
                top += 1
        out[r] = hit


@njit(cache=True, parallel=True)
def _first_hit_kernel(origins, dirs, t_min, node_min, node_max, node_left, node_right,
                      node_first, node_count, v0, e1, e2, tri_index, t_out, f_out):
    for r in prange(origins.shape[0]):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        stack = np.empty(128, dtype=np.int64)
        top = 0
        stack[top] = 0
        top += 1
        best_t = np.inf
        best_f = np.int64(-1)
        while top > 0:
            top -= 1
            node = stack[top]
            if not _slab_test(ox, oy, oz, dx, dy, dz, node_min[node], node_max[node], best_t):
                continue
            if node_count[node] > 0:
                first = node_first[node]
                for k in range(first, first + node_count[node]):
                    t = _tri_hit_t(ox, oy, oz, dx, dy, dz, v0, e1, e2, k)
                    if t > t_min:
                        f = tri_index[k]
                        if t < best_t or (t == best_t and f < best_f):
                            best_t = t
                            best_f = f
            else:
                stack[top] = node_left[node]
                top += 1
                stack[top] = node_right[node]
                top += 1
        t_out[r] = best_t
        f_out[r] = best_f


# ---------------------------------------------------------------------------
# Brute-force reference (oracle for the BVH; identical predicate)

def brute_force_any_hit(mesh: TriMesh, origins, dirs, t_min: float = EPS_RAY) -> np.ndarray:
    t, f = brute_force_first_hit(mesh, origins, dirs, t_min)
    return f >= 0


def brute_force_first_hit(mesh: TriMesh, origins, dirs, t_min: float = EPS_RAY):
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    a, b, c = mesh.triangle_corners()
    e1 = b - a
    e2 = c - a
    n_rays = len(origins)
    t_best = np.full(n_rays, np.inf)
    f_best = np.full(n_rays, -1, dtype=np.int64)
    chunk = max(1, int(4e6) // max(1, mesh.n_faces))
    for s in range(0, n_rays, chunk):
        o = origins[s:s + chunk][:, None, :]   # (R,1,3)
        d = dirs[s:s + chunk][:, None, :]
        h = np.cross(d, e2[None, :, :])
        det = np.sum(e1[None, :, :] * h, axis=2)
        ok = np.abs(det) >= _DET_EPS
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        sv = o - a[None, :, :]
        u = np.sum(sv * h, axis=2) * inv
        ok &= (u >= 0.0) & (u <= 1.0)
        q = np.cross(sv, e1[None, :, :])
        v = np.sum(d * q, axis=2) * inv
        ok &= (v >= 0.0) & (u + v <= 1.0)
        t = np.sum(e2[None, :, :] * q, axis=2) * inv
        ok &= t > t_min
        t = np.where(ok, t, np.inf)
        # Smaller t wins; exact ties resolved toward the smaller face index,
        # which argmin already provides for equal values.
        j = np.argmin(t, axis=1)
        rows = np.arange(t.shape[0])
        tb = t[rows, j]
        hit = np.isfinite(tb)
        t_best[s:s + chunk] = np.where(hit, tb, np.inf)
        f_best[s:s + chunk] = np.where(hit, j, -1)
    return t_best, f_best


# ---------------------------------------------------------------------------
# Convex hull prefilter

class HullPrefilter:
    """Conservative ray rejection: a rejected ray provably misses the hull of S."""

    def __init__(self, mesh: TriMesh, slack: float = 1e-9):
        hull = ConvexHull(mesh.vertices)
        eq = hull.equations  # A x + b <= 0 inside
        self.normals = np.ascontiguousarray(eq[:, :3])
        self.offsets = np.ascontiguousarray(eq[:, 3]) - slack

    def ray_may_hit(self, origins, dirs, t_min: float = 0.0) -> np.ndarray:
        """True where the ray [t_min, inf) intersects the (slightly inflated) hull."""
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        denom = dirs @ self.normals.T                     # (R, P)
        num = -(origins @ self.normals.T + self.offsets)  # (R, P)
        t_lo = np.full(len(origins), t_min)
        t_hi = np.full(len(origins), np.inf)
        pos = denom > 0.0
        neg = denom < 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = num / denom
        hi = np.where(pos, ratio, np.inf).min(axis=1)
        lo = np.where(neg, ratio, -np.inf).max(axis=1)
        t_hi = np.minimum(t_hi, hi)
        t_lo = np.maximum(t_lo, lo)
        # Parallel half-spaces with the origin outside reject the ray outright.
        outside_parallel = ((denom == 0.0) & (num < 0.0)).any(axis=1)
        return (t_lo <= t_hi) & ~outside_parallel
