"""Analytic height-field volumes realized through ray casts against a mesh.

A volumetric explicit (VE) is either a half-space bounded above by a single
height-field (HF) or the closed hull between two opposite height-fields
(DHF). Containment never evaluates the height functions explicitly: a point
is inside an HF iff a ray from it along the axis hits the surface, and
inside a DHF iff rays along both axis directions hit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .bvh import EPS_RAY, RayIndex
from .mesh import TriMesh, sample_surface
from .rng import STREAM_VE_BOUNDARY, make_rng

# Nudge (against the cast direction) used when deciding whether an existing
# boundary sample belongs to another VE: gives closed-set semantics so that
# samples lying exactly on a second VE's bounding surface are retained.
EPS_CONTAIN = 2.0 * EPS_RAY

# Rays that sample depth values start this far out along the axis, safely
# outside any normalized mesh (circumradius <= sqrt(3)/1.1).
_CAST_HEIGHT = 3.0

HF = "hf"
DHF = "dhf"


@dataclass(frozen=True)
class LocalFrame:
    """Right-handed orthonormal frame; `axis` is the local z direction."""

    axis: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    origin: np.ndarray

    def to_local(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64)) - self.origin
        return np.stack([p @ self.u_axis, p @ self.v_axis, p @ self.axis], axis=1)

    def to_world(self, u, v, z) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        return (self.origin + np.multiply.outer(u, self.u_axis)
                + np.multiply.outer(v, self.v_axis) + np.multiply.outer(z, self.axis))

    def rotation(self) -> np.ndarray:
        """Rows u, v, axis: world -> local rotation matrix."""
        return np.stack([self.u_axis, self.v_axis, self.axis])


def make_frame(d, origin=None) -> LocalFrame:
    """Deterministic frame for an axis: u is +z (or +x when d is near +-z)
    projected into the plane orthogonal to d; v completes u x v = d."""
    d = np.asarray(d, dtype=np.float64)
    n = np.linalg.norm(d)
    if n == 0.0:
        raise ValueError("zero axis vector")
    d = d / n
    a = np.array([0.0, 0.0, 1.0]) if abs(d[2]) <= 0.9 else np.array([1.0, 0.0, 0.0])
    u = a - (a @ d) * d
    u = u / np.linalg.norm(u)
    v = np.cross(d, u)
    o = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
    return LocalFrame(axis=d, u_axis=u, v_axis=v, origin=o)


@dataclass(frozen=True)
class CutPlaneRelax:
    """Relaxed containment for an HF introduced by a cutting plane.

    The HF constrains only the half-space on its own side: points with
    side * (p . normal - offset) <= eps pass automatically.
    """

    normal: np.ndarray
    offset: float
    side: float     # +1.0 or -1.0
    eps: float

    def auto_pass(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return self.side * (p @ self.normal - self.offset) <= self.eps


@dataclass
class HFEntry:
    frame: LocalFrame
    plane: Optional[CutPlaneRelax] = None
    # Ray index over the half mesh for plane-restricted HFs; rebuilt on demand,
    # never serialized.
    half_index: Optional[RayIndex] = None


@dataclass
class ESIModel:
    dhf: LocalFrame
    hfs: list[HFEntry]
    energy_trace: list[float]
    pruning_stats: dict = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.hfs)


# ---------------------------------------------------------------------------
# Containment oracles (pure ray tests, per the VE definitions)

def hf_contains_batch(index: RayIndex, frame: LocalFrame, points: np.ndarray,
                      plane: Optional[CutPlaneRelax] = None,
                      half_index: Optional[RayIndex] = None) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dirs = np.broadcast_to(frame.axis, pts.shape)
    target = half_index if (plane is not None and half_index is not None) else index
    inside = target.any_hit_batch(pts, np.ascontiguousarray(dirs))
    if plane is not None:
        inside = inside | plane.auto_pass(pts)
    return inside


def hf_contains(index: RayIndex, frame: LocalFrame, point) -> bool:
    return bool(hf_contains_batch(index, frame, np.asarray(point)[None, :])[0])


def dhf_contains_batch(index: RayIndex, frame: LocalFrame, points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = np.broadcast_to(frame.axis, pts.shape)
    up = index.any_hit_batch(pts, np.ascontiguousarray(d))
    down = index.any_hit_batch(pts, np.ascontiguousarray(-d))
    return up & down


def dhf_contains(index: RayIndex, frame: LocalFrame, point) -> bool:
    return bool(dhf_contains_batch(index, frame, np.asarray(point)[None, :])[0])


def esi_contains_batch(esi: ESIModel, index: RayIndex, points: np.ndarray) -> np.ndarray:
    inside = dhf_contains_batch(index, esi.dhf, points)
    for hf in esi.hfs:
        inside &= hf_contains_batch(index, hf.frame, points,
                                    plane=hf.plane, half_index=hf.half_index)
    return inside


def esi_contains(esi: ESIModel, index: RayIndex, point) -> bool:
    return bool(esi_contains_batch(esi, index, np.asarray(point)[None, :])[0])


# ---------------------------------------------------------------------------
# Boundary sampling

@dataclass
class BoundarySamples:
    points: np.ndarray    # (n, 3)
    normals: np.ndarray   # (n, 3) outward unit
    kind: str             # HF or DHF


def _oriented_normals(normals: np.ndarray, outward: np.ndarray) -> np.ndarray:
    """Flip face normals so they point along the outward side of the VE."""
    flip = np.sum(normals * outward, axis=1) < 0.0
    out = normals.copy()
    out[flip] = -out[flip]
    return out


def _depth_hits(index: RayIndex, frame: LocalFrame, uv: np.ndarray, direction: int,
                hull=None):
    """Cast axis-parallel rays at 2D points; direction +1 gives the nearest
    hit from below (min z), -1 the nearest from above (max z).

    Returns (hit mask, points, normals, z values); normals oriented outward
    for the corresponding side. An optional convex-hull prefilter skips rays
    that provably miss the mesh.
    """
    n = len(uv)
    starts = frame.to_world(uv[:, 0], uv[:, 1],
                            np.full(n, -_CAST_HEIGHT if direction > 0 else _CAST_HEIGHT))
    dirs = np.ascontiguousarray(np.broadcast_to(frame.axis * direction, (n, 3)))
    if hull is not None:
        may = hull.ray_may_hit(starts, dirs)
    else:
        may = np.ones(n, dtype=bool)
    t = np.full(n, np.inf)
    f = np.full(n, -1, dtype=np.int64)
    if may.any():
        t_q, f_q = index.first_hit_batch(starts[may], dirs[may])
        t[may] = t_q
        f[may] = f_q
    hit = f >= 0
    pts = starts[hit] + t[hit, None] * dirs[hit]
    normals = index.mesh.face_normals[f[hit]]
    outward = np.broadcast_to(frame.axis * (-direction), normals.shape)
    normals = _oriented_normals(normals, outward)
    z = (pts - frame.origin) @ frame.axis
    return hit, pts, normals, z


def sample_ve_boundary(mesh: TriMesh, index: RayIndex, frame: LocalFrame,
                       kind: str, n: int, seed: int,
                       half_index: Optional[RayIndex] = None,
                       hull=None) -> BoundarySamples:
    """Sample n points on the bounding surface of an HF or DHF volume.

    HF samples lie on the depth-map surface (farthest hit along the axis).
    DHF samples split between the two depth surfaces plus silhouette wall
    segments detected on a regular 2D grid (pitch 2/sqrt(n)).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind not in (HF, DHF):
        raise ValueError(f"unknown VE kind: {kind}")
    rng = make_rng(seed, STREAM_VE_BOUNDARY)
    cast_index = half_index if half_index is not None else index

    wall_pts = wall_nrm = None
    n_surface = n
    if kind == DHF:
        wall_pts, wall_nrm = _dhf_wall_samples(cast_index, frame, n, hull=hull)
        if len(wall_pts) > n // 2:
            keep = np.linspace(0, len(wall_pts) - 1, n // 2).round().astype(np.int64)
            wall_pts, wall_nrm = wall_pts[keep], wall_nrm[keep]
        n_surface = n - len(wall_pts)

    pts_acc, nrm_acc = [], []
    collected = 0
    attempts = 0
    per_sample = 2 if kind == DHF else 1
    while collected < n_surface:
        want = n_surface - collected
        batch = max(256, min(4 * want, 65536))
        attempts += batch
        if attempts > 500 * n + 100000:
            raise RuntimeError("VE boundary sampling failed to find the silhouette")
        uv = rng.uniform(-1.0, 1.0, size=(batch, 2))
        if kind == HF:
            hit, pts, normals, _ = _depth_hits(cast_index, frame, uv, direction=-1, hull=hull)
            take = min(want, len(pts))
            pts_acc.append(pts[:take])
            nrm_acc.append(normals[:take])
            collected += take
        else:
            hit_a, pts_a, nrm_a, _ = _depth_hits(cast_index, frame, uv, direction=-1, hull=hull)
            uv_in = uv[hit_a]
            hit_b, pts_b, nrm_b, _ = _depth_hits(cast_index, frame, uv_in, direction=+1, hull=hull)
            # A line that hits from one side hits from the other up to the
            # determinant epsilon; drop the (measure-zero) mismatches.
            pts_a, nrm_a = pts_a[hit_b], nrm_a[hit_b]
            take = min((want + per_sample - 1) // per_sample, len(pts_a))
            pts_acc.extend([pts_a[:take], pts_b[:take]])
            nrm_acc.extend([nrm_a[:take], nrm_b[:take]])
            collected += 2 * take
    pts = np.concatenate(pts_acc)[:n_surface] if pts_acc else np.zeros((0, 3))
    nrm = np.concatenate(nrm_acc)[:n_surface] if nrm_acc else np.zeros((0, 3))
    if kind == DHF and len(wall_pts):
        pts = np.concatenate([pts, wall_pts])
        nrm = np.concatenate([nrm, wall_nrm])
    return BoundarySamples(points=pts[:n], normals=nrm[:n], kind=kind)


def _dhf_wall_samples(index: RayIndex, frame: LocalFrame, n: int, hull=None):
    """Vertical silhouette-wall samples at grid points whose 4-neighborhood
    leaves the silhouette; sample spacing along the wall equals the pitch."""
    g = max(4, int(np.ceil(np.sqrt(n))))
    pitch = 2.0 / g
    axis_vals = np.linspace(-1.0 + 0.5 * pitch, 1.0 - 0.5 * pitch, g)
    uu, vv = np.meshgrid(axis_vals, axis_vals, indexing="ij")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    hit_a, pts_a, _, z_a = _depth_hits(index, frame, uv, direction=-1, hull=hull)
    inside = hit_a.reshape(g, g)
    z_top = np.full(g * g, np.nan)
    z_top[np.flatnonzero(hit_a)] = z_a
    hit_b, _, _, z_b = _depth_hits(index, frame, uv[hit_a], direction=+1, hull=hull)
    z_bot = np.full(g * g, np.nan)
    z_bot[np.flatnonzero(hit_a)[hit_b]] = z_b
    # Grid cells whose opposite casts disagree (determinant epsilon) are not
    # usable for wall spans.
    inside = inside & np.isfinite(z_bot.reshape(g, g))
    z_top = z_top.reshape(g, g)
    z_bot = z_bot.reshape(g, g)

    pts, nrm = [], []
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        shifted = np.zeros_like(inside)
        src = inside
        if di == 1:
            shifted[:-1, :] = src[1:, :]
        elif di == -1:
            shifted[1:, :] = src[:-1, :]
        elif dj == 1:
            shifted[:, :-1] = src[:, 1:]
        else:
            shifted[:, 1:] = src[:, :-1]
        boundary = inside & ~shifted
        ii, jj = np.nonzero(boundary)
        if len(ii) == 0:
            continue
        za = z_top[ii, jj]
        zb = z_bot[ii, jj]
        span = za - zb
        counts = np.maximum(1, np.ceil(span / pitch).astype(np.int64))
        out_dir = di * frame.u_axis + dj * frame.v_axis
        for k in range(len(ii)):
            zs = np.linspace(zb[k], za[k], counts[k] + 2)[1:-1] if counts[k] > 0 else []
            if len(zs) == 0:
                zs = [0.5 * (za[k] + zb[k])]
            u0 = axis_vals[ii[k]]
            v0 = axis_vals[jj[k]]
            for z in zs:
                pts.append(frame.to_world(u0, v0, z))
                nrm.append(out_dir)
    if not pts:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.asarray(pts).reshape(-1, 3), np.asarray(nrm).reshape(-1, 3)


# ---------------------------------------------------------------------------
# Per-axis caches and cross-axis containment memoization

class ContainmentMemo:
    """Lazily filled (direction, sample) bit tables shared across the search.

    Two tables are kept per direction: the pure visibility ray test (does a
    ray from the sample along the direction hit S) and the nudged containment
    test (origin backed off along the direction so that samples lying exactly
    on a VE's bounding surface count as inside). Entries are idempotent, so
    concurrent duplicate fills are benign.
    """

    def __init__(self, index: RayIndex):
        self.index = index
        self._dir_ids: dict[tuple, int] = {}
        self._dirs: list[np.ndarray] = []
        self._hit: list[np.ndarray] = []      # per direction, int8 of capacity
        self._contain: list[np.ndarray] = []
        self._points = np.zeros((0, 3))
        self._n_registered = 0

    def _ensure_capacity(self, total: int):
        cap = len(self._points)
        if total <= cap:
            return
        new_cap = max(total, 2 * cap, 1024)
        grown = np.zeros((new_cap, 3))
        grown[:cap] = self._points
        self._points = grown
        for table in (self._hit, self._contain):
            for i, row in enumerate(table):
                new_row = np.full(new_cap, -1, dtype=np.int8)
                new_row[:cap] = row
                table[i] = new_row

    def register_samples(self, points: np.ndarray) -> np.ndarray:
        self._ensure_capacity(self._n_registered + len(points))
        ids = np.arange(self._n_registered, self._n_registered + len(points))
        self._points[ids] = points
        self._n_registered += len(points)
        return ids

    def direction_id(self, d: np.ndarray) -> int:
        key = tuple(np.round(np.asarray(d, dtype=np.float64), 12))
        did = self._dir_ids.get(key)
        if did is None:
            did = len(self._dirs)
            self._dir_ids[key] = did
            self._dirs.append(np.asarray(d, dtype=np.float64))
            self._hit.append(np.full(len(self._points), -1, dtype=np.int8))
            self._contain.append(np.full(len(self._points), -1, dtype=np.int8))
        return did

    def _fill(self, table, did, sample_ids, nudge: float):
        row = table[did]
        unknown = sample_ids[row[sample_ids] < 0]
        if len(unknown):
            d = self._dirs[did]
            pts = self._points[unknown] - nudge * d
            dirs = np.broadcast_to(d, (len(unknown), 3))
            hits = self.index.any_hit_batch(pts, np.ascontiguousarray(dirs))
            row[unknown] = hits.astype(np.int8)
        return row[sample_ids].astype(bool)

    def ray_hits(self, d, sample_ids) -> np.ndarray:
        """Pure test: ray from the sample along d hits S (visibility = ~hits)."""
        return self._fill(self._hit, self.direction_id(d), sample_ids, nudge=0.0)

    def contains(self, d, sample_ids) -> np.ndarray:
        """Closed-set containment bit for HF(d): nudged ray test."""
        return self._fill(self._contain, self.direction_id(d), sample_ids, nudge=EPS_CONTAIN)


@dataclass
class AxisCache:
    direction: np.ndarray
    kind: str
    frame: LocalFrame
    boundary: BoundarySamples
    visibility_P: np.ndarray          # v(p, d) for the global sample set P
    nn_index: cKDTree                 # over boundary points
    dist_P: np.ndarray                # NN distance from each P point to boundary
    sample_ids: Optional[np.ndarray] = None   # rows in the shared memo tables
    plane: Optional[CutPlaneRelax] = None
    half_index: Optional[RayIndex] = None


def build_axis_cache(mesh: TriMesh, index: RayIndex, d: np.ndarray, kind: str,
                     sample_set_P: np.ndarray, n_boundary: int, seed: int,
                     plane: Optional[CutPlaneRelax] = None,
                     half_index: Optional[RayIndex] = None,
                     hull=None) -> AxisCache:
    """Per-axis precomputation; independent per direction (pool-friendly)."""
    frame = make_frame(d)
    boundary = sample_ve_boundary(mesh, index, frame, kind, n_boundary, seed,
                                  half_index=half_index, hull=hull)
    dirs = np.broadcast_to(frame.axis, sample_set_P.shape)
    vis = ~index.any_hit_batch(sample_set_P, np.ascontiguousarray(dirs))
    tree = cKDTree(boundary.points)
    dist, _ = tree.query(sample_set_P, k=1)
    return AxisCache(direction=frame.axis, kind=kind, frame=frame, boundary=boundary,
                     visibility_P=vis, nn_index=tree, dist_P=dist,
                     plane=plane, half_index=half_index)


def register_caches(memo: ContainmentMemo, caches: list[AxisCache]) -> None:
    """Assign shared memo rows to caches (sequential; registration mutates)."""
    for cache in caches:
        if cache.sample_ids is None:
            cache.sample_ids = memo.register_samples(cache.boundary.points)


def _contained_in_cache(memo: ContainmentMemo, cache: AxisCache, sample_ids,
                        points: np.ndarray) -> np.ndarray:
    """Containment of registered samples in another cache's VE."""
    if cache.kind == DHF:
        up = memo.contains(cache.frame.axis, sample_ids)
        down = memo.contains(-cache.frame.axis, sample_ids)
        return up & down
    if cache.plane is not None:
        # Half-restricted HFs cast against the half mesh, so the shared memo
        # (full mesh) does not apply; auto-pass covers the other side.
        inside = cache.plane.auto_pass(points)
        need = ~inside
        if need.any():
            d = cache.frame.axis
            pts = points[need] - EPS_CONTAIN * d
            dirs = np.broadcast_to(d, (len(pts), 3))
            inside = inside.copy()
            inside[need] = cache.half_index.any_hit_batch(pts, np.ascontiguousarray(dirs))
        return inside
    return memo.contains(cache.frame.axis, sample_ids)


def esi_boundary_samples(caches: list[AxisCache], memo: ContainmentMemo):
    """Boundary samples of the intersection: a cached sample of one VE is
    retained iff contained in every other participating VE.

    Returns (points, normals, source axis indices, memo sample ids). Raises
    if the intersection degenerates to an empty sample set.
    """
    pts, nrm, src, ids = [], [], [], []
    for i, cache in enumerate(caches):
        keep = np.ones(len(cache.boundary.points), dtype=bool)
        for j, other in enumerate(caches):
            if i == j:
                continue
            keep &= _contained_in_cache(memo, other, cache.sample_ids, cache.boundary.points)
            if not keep.any():
                break
        if keep.any():
            pts.append(cache.boundary.points[keep])
            nrm.append(cache.boundary.normals[keep])
            src.append(np.full(int(keep.sum()), i, dtype=np.int64))
            ids.append(cache.sample_ids[keep])
    if not pts:
        raise ValueError("degenerate intersection: no boundary samples retained")
    return (np.concatenate(pts), np.concatenate(nrm),
            np.concatenate(src), np.concatenate(ids))
