"""Queries and renderers over trained models.

Occupancy is the conjunction of per-explicit tests (two-sided height check
for the DHF, mask + height check per HF, cutting-plane HFs auto-passing
their far side). The raytracer brackets the first occupancy change along a
ray by repeated even subdivision, so its error bound depends only on the
sample count and refinement depth, not on the network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .mesh import TriMesh
from .model import NESIModel
from .net import forward, input_gradient

RAYTRACE_SAMPLES = 200
RAYTRACE_REFINEMENTS = 3
ATLAS_SENTINEL = np.array([1.0, 0.0, 1.0])  # out-of-domain texels

# Chart / explicit ids: 0 = DHF upper side, 1 = DHF lower side, 2+k = HF k.
DHF_TOP = 0
DHF_BOTTOM = 1


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov_deg: float
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError("fov must be in (0, 180) degrees")
        fwd = self.look_at - self.position
        n = np.linalg.norm(fwd)
        if n == 0.0:
            raise ValueError("camera position equals look_at")
        if np.linalg.norm(np.cross(fwd / n, self.up)) < 1e-9:
            raise ValueError("up vector parallel to view direction")

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Primary ray origins/directions, row-major over pixels."""
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        half_h = np.tan(np.radians(self.fov_deg) / 2.0)
        half_w = half_h * self.width / self.height
        xs = (np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0
        ys = 1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0
        xx, yy = np.meshgrid(xs, ys)
        dirs = (fwd[None, :]
                + (xx.ravel() * half_w)[:, None] * right[None, :]
                + (yy.ravel() * half_h)[:, None] * up[None, :])
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.position, dirs.shape).copy()
        return origins, dirs


# ---------------------------------------------------------------------------
# Occupancy

def _dhf_occupancy(model: NESIModel, points: np.ndarray) -> np.ndarray:
    local = model.dhf_frame.to_local(points)
    in_box = (np.abs(points) <= 1.0).all(axis=1)
    in_dom = (np.abs(local[:, 0]) <= 1.0) & (np.abs(local[:, 1]) <= 1.0)
    out = np.zeros(len(points), dtype=bool)
    ok = in_box & in_dom
    if ok.any():
        f = forward(model.dhf_params, local[ok, :2].astype(np.float32))
        z = local[ok, 2]
        out[ok] = (z <= f[:, 0]) & (z >= f[:, 1])
    return out


def _hf_occupancy(model: NESIModel, k: int, points: np.ndarray) -> np.ndarray:
    hf = model.hfs[k]
    local = hf.frame.to_local(points)
    in_box = (np.abs(points) <= 1.0).all(axis=1)
    in_dom = (np.abs(local[:, 0]) <= 1.0) & (np.abs(local[:, 1]) <= 1.0)
    out = np.zeros(len(points), dtype=bool)
    ok = in_box & in_dom
    if ok.any():
        uv = local[ok, :2].astype(np.float32)
        inside_mask = forward(hf.mask, uv)[:, 0] >= 0.5
        height_ok = local[ok, 2] <= forward(hf.height, uv)[:, 0]
        out[ok] = inside_mask & height_ok
    if hf.plane is not None:
        out = out | (hf.plane.auto_pass(points) & in_box)
    return out


def explicit_occupancies(model: NESIModel, points: np.ndarray) -> list[np.ndarray]:
    """Per-explicit occupancy bits ([DHF, HF_1, ..., HF_m]); the total
    occupancy is exactly their conjunction."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    parts = [_dhf_occupancy(model, points)]
    for k in range(model.m):
        parts.append(_hf_occupancy(model, k, points))
    return parts


def occupancy_batch(model: NESIModel, points: np.ndarray) -> np.ndarray:
    parts = explicit_occupancies(model, points)
    out = parts[0]
    for p in parts[1:]:
        out = out & p
    return out


def occupancy(model: NESIModel, point) -> bool:
    return bool(occupancy_batch(model, np.asarray(point)[None, :])[0])


# ---------------------------------------------------------------------------
# Raytracing

def _clip_to_box(origins: np.ndarray, dirs: np.ndarray):
    """Entry/exit parameters against [-1,1]^3 intersected with t >= 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-1.0 - origins) / dirs
        t2 = (1.0 - origins) / dirs
    lo = np.where(dirs != 0.0, np.minimum(t1, t2), -np.inf)
    hi = np.where(dirs != 0.0, np.maximum(t1, t2), np.inf)
    inside_slab = (np.abs(origins) <= 1.0) | (dirs != 0.0)
    t_lo = np.where(inside_slab.all(axis=1), lo.max(axis=1), np.inf).clip(min=0.0)
    t_hi = np.minimum(hi.min(axis=1), np.inf)
    parallel_outside = ((dirs == 0.0) & (np.abs(origins) > 1.0)).any(axis=1)
    valid = (t_lo <= t_hi) & ~parallel_outside
    return t_lo, t_hi, valid


def raytrace_field(occ_fn: Callable[[np.ndarray], np.ndarray],
                   origins: np.ndarray, dirs: np.ndarray,
                   n: int = RAYTRACE_SAMPLES,
                   refinements: int = RAYTRACE_REFINEMENTS):
    """Bracket the first occupancy change along each ray inside [-1,1]^3.

    Evenly samples n points on the clipped segment, locates the first
    adjacent pair whose occupancy differs, then re-subdivides that segment
    `refinements` more times (endpoints included each pass). Returns
    (t, hit_mask) with t the final bracket midpoint.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    t_lo, t_hi, valid = _clip_to_box(origins, dirs)
    n_rays = len(origins)
    lo = t_lo.copy()
    hi = t_hi.copy()
    active = valid & (t_hi > t_lo)
    for level in range(refinements + 1):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        frac = np.linspace(0.0, 1.0, n)
        ts = lo[idx, None] + (hi[idx] - lo[idx])[:, None] * frac[None, :]
        pts = origins[idx, None, :] + ts[:, :, None] * dirs[idx, None, :]
        occ = occ_fn(pts.reshape(-1, 3)).reshape(len(idx), n)
        change = occ[:, 1:] != occ[:, :-1]
        has = change.any(axis=1)
        first = np.argmax(change, axis=1)
        rows = np.arange(len(idx))
        new_lo = ts[rows, first]
        new_hi = ts[rows, first + 1]
        lo[idx[has]] = new_lo[has]
        hi[idx[has]] = new_hi[has]
        active[idx[~has]] = False
        if not has.any():
            break
    hit = valid & active
    t = 0.5 * (lo + hi)
    return np.where(hit, t, np.inf), hit


def raytrace(model: NESIModel, origin, direction,
             n: int = RAYTRACE_SAMPLES, refinements: int = RAYTRACE_REFINEMENTS):
    """First intersection of a single ray with the model surface, or None."""
    o = np.asarray(origin, dtype=np.float64)[None, :]
    d = np.asarray(direction, dtype=np.float64)[None, :]
    t, hit = raytrace_field(lambda p: occupancy_batch(model, p), o, d, n, refinements)
    if not hit[0]:
        return None
    return float(t[0]), o[0] + t[0] * d[0]


def raytrace_batch(model: NESIModel, origins, dirs,
                   n: int = RAYTRACE_SAMPLES, refinements: int = RAYTRACE_REFINEMENTS):
    return raytrace_field(lambda p: occupancy_batch(model, p), origins, dirs,
                          n, refinements)


# ---------------------------------------------------------------------------
# Parametric access

def _candidate_heights(model: NESIModel, points: np.ndarray):
    """Per explicit id: (domain mask, |f - z|, f) at each point's projection."""
    n = len(points)
    results = {}
    local0 = model.dhf_frame.to_local(points)
    uv0 = local0[:, :2].astype(np.float32)
    in_dom0 = (np.abs(local0[:, 0]) <= 1.0) & (np.abs(local0[:, 1]) <= 1.0)
    f = forward(model.dhf_params, uv0)
    sep = f[:, 0] >= f[:, 1]
    results[DHF_TOP] = (in_dom0 & sep, np.abs(f[:, 0] - local0[:, 2]), f[:, 0], local0)
    results[DHF_BOTTOM] = (in_dom0 & sep, np.abs(f[:, 1] - local0[:, 2]), f[:, 1], local0)
    for k, hf in enumerate(model.hfs):
        local = hf.frame.to_local(points)
        uv = local[:, :2].astype(np.float32)
        dom = (np.abs(local[:, 0]) <= 1.0) & (np.abs(local[:, 1]) <= 1.0)
        dom &= forward(hf.mask, uv)[:, 0] >= 0.5
        if hf.plane is not None:
            dom &= ~hf.plane.auto_pass(points)
        fk = forward(hf.height, uv)[:, 0]
        results[2 + k] = (dom, np.abs(fk - local[:, 2]), fk, local)
    return results


def param_map_batch(model: NESIModel, points: np.ndarray):
    """Closest-explicit chart assignment: among explicits whose domain test
    passes at the projection, pick the smallest |f - z|; ties prefer the DHF
    then the lowest HF index. Returns (ids, u, v)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cand = _candidate_heights(model, points)
    n = len(points)
    best_id = np.full(n, -1, dtype=np.int64)
    best_err = np.full(n, np.inf)
    us = np.zeros(n)
    vs = np.zeros(n)
    for cid in sorted(cand.keys()):
        dom, err, _, local = cand[cid]
        better = dom & (err < best_err)
        best_err = np.where(better, err, best_err)
        best_id = np.where(better, cid, best_id)
        us = np.where(better, local[:, 0], us)
        vs = np.where(better, local[:, 1], vs)
    # Points whose projection passes no domain test fall back to the raw
    # nearest height ignoring domain membership, keeping the map total.
    missing = best_id < 0
    if missing.any():
        for cid in sorted(cand.keys()):
            _, err, _, local = cand[cid]
            better = missing & (err < best_err)
            best_err = np.where(better, err, best_err)
            best_id = np.where(better, cid, best_id)
            us = np.where(better, local[:, 0], us)
            vs = np.where(better, local[:, 1], vs)
    return best_id, us, vs


def param_map(model: NESIModel, point):
    ids, us, vs = param_map_batch(model, np.asarray(point)[None, :])
    return int(ids[0]), float(us[0]), float(vs[0])


def eval_height(model: NESIModel, explicit_id: int, u, v) -> np.ndarray:
    """Lift chart coordinates back to a world-space surface point."""
    scalar = np.isscalar(u) and np.isscalar(v)
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    uv = np.stack([u, v], axis=1).astype(np.float32)
    if explicit_id in (DHF_TOP, DHF_BOTTOM):
        f = forward(model.dhf_params, uv)
        z = f[:, 0] if explicit_id == DHF_TOP else f[:, 1]
        pts = model.dhf_frame.to_world(u, v, z.astype(np.float64))
    else:
        hf = model.hfs[explicit_id - 2]
        z = forward(hf.height, uv)[:, 0]
        pts = hf.frame.to_world(u, v, z.astype(np.float64))
    return pts[0] if scalar else pts


def surface_normal_batch(model: NESIModel, points: np.ndarray) -> np.ndarray:
    """Outward unit normals via the chart assignment and the height net's
    input gradient (sign flipped on the DHF lower side)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ids, us, vs = param_map_batch(model, points)
    normals = np.zeros((len(points), 3))
    for cid in np.unique(ids):
        sel = np.flatnonzero(ids == cid)
        uv = np.stack([us[sel], vs[sel]], axis=1).astype(np.float32)
        if cid in (DHF_TOP, DHF_BOTTOM):
            jac = input_gradient(model.dhf_params, uv)
            row = 0 if cid == DHF_TOP else 1
            g = jac[:, row, :].astype(np.float64)
            frame = model.dhf_frame
            if cid == DHF_TOP:
                local = np.stack([-g[:, 0], -g[:, 1], np.ones(len(sel))], axis=1)
            else:
                local = np.stack([g[:, 0], g[:, 1], -np.ones(len(sel))], axis=1)
        else:
            hf = model.hfs[cid - 2]
            jac = input_gradient(hf.height, uv)
            g = jac[:, 0, :].astype(np.float64)
            frame = hf.frame
            local = np.stack([-g[:, 0], -g[:, 1], np.ones(len(sel))], axis=1)
        local /= np.linalg.norm(local, axis=1, keepdims=True)
        normals[sel] = local @ frame.rotation()
    return normals


def surface_normal(model: NESIModel, point) -> np.ndarray:
    return surface_normal_batch(model, np.asarray(point)[None, :])[0]


# ---------------------------------------------------------------------------
# Rendering

BACKGROUND = np.array([0.10, 0.11, 0.13])
BASE_ALBEDO = 0.82
AMBIENT = 0.15


def render(model: NESIModel, camera: Camera,
           n: int = RAYTRACE_SAMPLES, refinements: int = RAYTRACE_REFINEMENTS) -> np.ndarray:
    """Flat-shaded render (single directional headlight, clamped Lambert);
    returns an (H, W, 3) uint8 image."""
    origins, dirs = camera.rays()
    t, hit = raytrace_batch(model, origins, dirs, n, refinements)
    img = np.tile(BACKGROUND, (len(dirs), 1))
    if hit.any():
        pts = origins[hit] + t[hit, None] * dirs[hit]
        normals = surface_normal_batch(model, pts)
        fwd = camera.look_at - camera.position
        light = -fwd / np.linalg.norm(fwd)
        lambert = np.clip(normals @ light, 0.0, 1.0)
        shade = np.clip(AMBIENT + BASE_ALBEDO * lambert, 0.0, 1.0)
        img[hit] = shade[:, None]
    img = np.clip(img, 0.0, 1.0) ** (1.0 / 2.2)
    return (img.reshape(camera.height, camera.width, 3) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# Meshing

def extract_mesh(model: NESIModel, grid_resolution: int = 128) -> Optional[TriMesh]:
    """Marching cubes over the occupancy field on a regular grid in [-1,1]^3.
    Returns None when the model occupies no grid cell."""
    res = int(grid_resolution)
    axis = np.linspace(-1.0, 1.0, res)
    xx, yy, zz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    occ = np.zeros(len(pts))
    chunk = 1 << 18
    for s in range(0, len(pts), chunk):
        occ[s:s + chunk] = occupancy_batch(model, pts[s:s + chunk]).astype(np.float64)
    field3d = occ.reshape(res, res, res)
    if field3d.max() == field3d.min():
        return None
    spacing = (2.0 / (res - 1),) * 3
    verts, faces, _, _ = measure.marching_cubes(field3d, level=0.5, spacing=spacing)
    verts = verts - 1.0
    return TriMesh(np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# Texture atlas

@dataclass
class Atlas:
    resolution: int
    charts: dict = field(default_factory=dict)   # id -> (res, res, 3) float
    valid: dict = field(default_factory=dict)    # id -> (res, res) bool


def _chart_domain(model: NESIModel, cid: int, uv: np.ndarray) -> np.ndarray:
    uv32 = uv.astype(np.float32)
    if cid in (DHF_TOP, DHF_BOTTOM):
        f = forward(model.dhf_params, uv32)
        return f[:, 0] >= f[:, 1]
    hf = model.hfs[cid - 2]
    return forward(hf.mask, uv32)[:, 0] >= 0.5


def bake_atlas(model: NESIModel, source: TriMesh, resolution: int = 512) -> Atlas:
    """One chart per explicit side: every in-domain texel lifts to 3D and
    samples the nearest source vertex color; out-of-domain texels hold the
    sentinel color."""
    if source.vertex_colors is None:
        raise ValueError("source mesh has no vertex colors")
    tree = cKDTree(source.vertices)
    colors = source.vertex_colors
    atlas = Atlas(resolution=resolution)
    axis = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    uu, vv = np.meshgrid(axis, axis, indexing="ij")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    for cid in range(2 + model.m):
        dom = _chart_domain(model, cid, uv)
        chart = np.tile(ATLAS_SENTINEL, (resolution * resolution, 1))
        if dom.any():
            pts = eval_height(model, cid, uv[dom, 0], uv[dom, 1])
            _, nearest = tree.query(pts, k=1)
            chart[dom] = colors[nearest]
        atlas.charts[cid] = chart.reshape(resolution, resolution, 3)
        atlas.valid[cid] = dom.reshape(resolution, resolution)
    return atlas


def atlas_lookup(model: NESIModel, atlas: Atlas, point) -> np.ndarray:
    """Chart assignment followed by a bilinear fetch."""
    cid, u, v = param_map(model, np.asarray(point, dtype=np.float64))
    chart = atlas.charts[cid]
    res = atlas.resolution
    fu = (u + 1.0) * 0.5 * res - 0.5
    fv = (v + 1.0) * 0.5 * res - 0.5
    i0 = int(np.clip(np.floor(fu), 0, res - 1))
    j0 = int(np.clip(np.floor(fv), 0, res - 1))
    i1 = min(i0 + 1, res - 1)
    j1 = min(j0 + 1, res - 1)
    a = np.clip(fu - i0, 0.0, 1.0)
    b = np.clip(fv - j0, 0.0, 1.0)
    return ((1 - a) * (1 - b) * chart[i0, j0] + a * (1 - b) * chart[i1, j0]
            + (1 - a) * b * chart[i0, j1] + a * b * chart[i1, j1])


def save_atlas(atlas: Atlas, model: NESIModel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = {"resolution": atlas.resolution, "charts": []}
    for cid, chart in sorted(atlas.charts.items()):
        name = f"chart_{cid:02d}.ppm"
        img = (np.clip(chart, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        write_ppm(out / name, img)
        kind = ("dhf_top" if cid == DHF_TOP else
                "dhf_bottom" if cid == DHF_BOTTOM else f"hf_{cid - 2}")
        table["charts"].append({"id": cid, "file": name, "kind": kind})
    with open(out / "atlas.json", "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
