"""Supervised sample-set generation for height-field training.

For the DHF: surface samples visible along either axis direction supply
(u, v) -> (upper height, lower height, normals) records, plus planar samples
outside the silhouette used to train the two bounding functions to cross.

For each HF: surface samples visible along the HF axis split into the
restricted domain (regions not already well represented by earlier
explicits) and the remainder, which is supervised to push the learned height
above ground truth. A dense planar grid labels the silhouette mask.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .bvh import RayIndex
from .explicit import DHF, HF, LocalFrame, _depth_hits
from .mesh import TriMesh, sample_surface
from .rng import STREAM_DOMAIN_SAMPLING, make_rng

GRAZING_DEG = 70.0
N_VOID_SAMPLES = 32
MASK_GRID = 256


@dataclass
class DHFSamples:
    uv: np.ndarray        # (n, 2) inside the silhouette
    f_upper: np.ndarray   # (n,)
    f_lower: np.ndarray   # (n,)
    n_upper: np.ndarray   # (n, 3) local-frame unit normals, outward +z side
    n_lower: np.ndarray   # (n, 3) outward -z side
    uv_outside: np.ndarray  # (n_bar, 2) outside the silhouette


@dataclass
class HFSamples:
    uv_prime: np.ndarray     # (n', 2) restricted-domain records
    f_prime: np.ndarray      # (n',)
    n_prime: np.ndarray      # (n', 3) local-frame normals
    uv_rest: np.ndarray      # (r, 2) covered elsewhere; height pushed above gt
    f_rest: np.ndarray       # (r,)
    mask_uv: np.ndarray      # (m, 2)
    mask_label: np.ndarray   # (m,) float 0/1 silhouette membership


@dataclass
class PriorExplicit:
    """An already-selected explicit, as seen by later HF sampling."""

    kind: str                # DHF or HF
    frame: LocalFrame

    def directions(self) -> list[np.ndarray]:
        if self.kind == DHF:
            return [self.frame.axis, -self.frame.axis]
        return [self.frame.axis]


def _hits_along(index: RayIndex, points: np.ndarray, d: np.ndarray) -> np.ndarray:
    dirs = np.broadcast_to(d, (len(points), 3))
    return index.any_hit_batch(points, np.ascontiguousarray(dirs))


def _local_normals(frame: LocalFrame, normals: np.ndarray, outward_sign: float) -> np.ndarray:
    """Rotate world normals into the frame and flip them toward the outward
    axis side, making supervision independent of input winding."""
    local = normals @ frame.rotation().T
    flip = local[:, 2] * outward_sign < 0.0
    local = local.copy()
    local[flip] = -local[flip]
    return local


def sample_dhf_sets(mesh: TriMesh, index: RayIndex, frame: LocalFrame,
                    n: int, seed: int, n_outside: Optional[int] = None) -> DHFSamples:
    """Training records for the two DHF bounding functions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n_outside is None:
        n_outside = n
    surf = sample_surface(mesh, n, seed)
    vis_up = ~_hits_along(index, surf.points, frame.axis)
    vis_down = ~_hits_along(index, surf.points, -frame.axis)
    q = surf.points[vis_up | vis_down]
    local = frame.to_local(q)
    keep = (np.abs(local[:, 0]) <= 1.0) & (np.abs(local[:, 1]) <= 1.0)
    uv = local[keep, :2]

    # Heights recomputed at the projections: the two surface intersections
    # farthest apart along the axis, with their face normals.
    hit_a, pts_a, nrm_a, z_a = _depth_hits(index, frame, uv, direction=-1)
    uv = uv[hit_a]
    hit_b, pts_b, nrm_b, z_b = _depth_hits(index, frame, uv, direction=+1)
    uv = uv[hit_b]
    z_a = z_a[hit_b]
    nrm_a = nrm_a[hit_b]

    n_up = _local_normals(frame, nrm_a, +1.0)
    n_dn = _local_normals(frame, nrm_b, -1.0)

    rng = make_rng(seed, STREAM_DOMAIN_SAMPLING)
    out = []
    got = 0
    attempts = 0
    while got < n_outside and attempts < 50 * n_outside + 10000:
        batch = max(1024, n_outside - got)
        attempts += batch
        cand = rng.uniform(-1.0, 1.0, size=(batch, 2))
        pts = frame.to_world(cand[:, 0], cand[:, 1], np.zeros(len(cand)))
        miss = (~_hits_along(index, pts, frame.axis)
                & ~_hits_along(index, pts, -frame.axis))
        sel = cand[miss][:n_outside - got]
        out.append(sel)
        got += len(sel)
    uv_out = np.concatenate(out) if out else np.zeros((0, 2))

    return DHFSamples(uv=uv, f_upper=z_a, f_lower=z_b,
                      n_upper=n_up, n_lower=n_dn, uv_outside=uv_out)


@dataclass
class RestrictedDomainMask:
    in_restricted: np.ndarray   # the union of the three criteria
    cond_not_covered: np.ndarray
    cond_grazing: np.ndarray
    cond_void: np.ndarray       # evaluated only where the first two fail


def in_restricted_domain(points: np.ndarray, normals: np.ndarray,
                         prev: Sequence[PriorExplicit], frame_k: LocalFrame,
                         index: RayIndex, grazing_deg: float = GRAZING_DEG,
                         n_void: int = N_VOID_SAMPLES,
                         use_void_condition: bool = True) -> RestrictedDomainMask:
    """Which HF-surface samples the k-th height function must actually learn.

    A sample q (whose ray along the HF axis misses the surface) belongs when
    (1) it is not on the bounding surface of any earlier explicit, or
    (2) every earlier explicit covering it sees it only at a grazing angle, or
    (3) some point along the ray from q toward the domain boundary is
        invisible from all earlier directions (interior voids).
    """
    points = np.atleast_2d(points)
    n_pts = len(points)
    prev_dirs = [d for p in prev for d in p.directions()]
    if not prev_dirs:
        return RestrictedDomainMask(np.ones(n_pts, dtype=bool), np.ones(n_pts, dtype=bool),
                                    np.zeros(n_pts, dtype=bool), np.zeros(n_pts, dtype=bool))

    hits = np.stack([_hits_along(index, points, d) for d in prev_dirs])  # (D, n)
    covered = ~hits
    cond1 = hits.all(axis=0)

    cos_lim = np.cos(np.radians(grazing_deg))
    grazing = np.stack([np.abs(normals @ d) < cos_lim for d in prev_dirs])
    any_cover = covered.any(axis=0)
    graze_all_covering = np.ones(n_pts, dtype=bool)
    for row_cov, row_graze in zip(covered, grazing):
        graze_all_covering &= ~row_cov | row_graze
    cond2 = any_cover & graze_all_covering

    cond3 = np.zeros(n_pts, dtype=bool)
    if use_void_condition:
        need = ~(cond1 | cond2)
        idx = np.flatnonzero(need)
        if len(idx):
            q = points[idx]
            d = frame_k.axis
            # Exit parameter of q + t*d against the [-1,1]^3 box.
            with np.errstate(divide="ignore"):
                t_hi = np.where(d != 0.0, (np.where(d > 0, 1.0, -1.0) - q) / d, np.inf)
            t_exit = t_hi.min(axis=1).clip(min=0.0)
            frac = (np.arange(n_void) + 0.5) / n_void
            probe = q[:, None, :] + (t_exit[:, None] * frac[None, :])[:, :, None] * d
            probe = probe.reshape(-1, 3)
            invisible = np.ones(len(probe), dtype=bool)
            for pd in prev_dirs:
                invisible &= _hits_along(index, probe, pd)
            cond3[idx] = invisible.reshape(len(idx), n_void).any(axis=1)

    return RestrictedDomainMask(cond1 | cond2 | cond3, cond1, cond2, cond3)


def sample_hf_sets(mesh: TriMesh, index: RayIndex, prev: Sequence[PriorExplicit],
                   frame_k: LocalFrame, n: int, seed: int,
                   grazing_deg: float = GRAZING_DEG,
                   n_void: int = N_VOID_SAMPLES,
                   use_void_condition: bool = True,
                   mask_grid: int = MASK_GRID,
                   half_index: Optional[RayIndex] = None) -> HFSamples:
    """Training records for one HF's height and mask networks."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cast = half_index if half_index is not None else index
    surf = sample_surface(half_index.mesh if half_index is not None else mesh, n, seed)
    on_hf = ~_hits_along(cast, surf.points, frame_k.axis)
    q = surf.points[on_hf]
    q_n = surf.normals[on_hf]
    local = frame_k.to_local(q)
    keep = (np.abs(local[:, 0]) <= 1.0) & (np.abs(local[:, 1]) <= 1.0)
    q, q_n, local = q[keep], q_n[keep], local[keep]

    mask = in_restricted_domain(q, q_n, prev, frame_k, cast,
                                grazing_deg=grazing_deg, n_void=n_void,
                                use_void_condition=use_void_condition)
    inside = mask.in_restricted
    n_loc = _local_normals(frame_k, q_n, +1.0)

    uv_prime = local[inside, :2]
    f_prime = local[inside, 2]
    n_prime = n_loc[inside]
    uv_rest = local[~inside, :2]
    f_rest = local[~inside, 2]

    # Silhouette mask labels: dense regular grid plus the projected surface
    # samples, all labeled by the same ray test so labels are recomputable.
    g = mask_grid
    axis_vals = np.linspace(-1.0 + 1.0 / g, 1.0 - 1.0 / g, g)
    uu, vv = np.meshgrid(axis_vals, axis_vals, indexing="ij")
    mask_uv = np.concatenate([np.stack([uu.ravel(), vv.ravel()], axis=1), local[:, :2]])
    starts = frame_k.to_world(mask_uv[:, 0], mask_uv[:, 1], np.full(len(mask_uv), -3.0))
    labels = _hits_along(cast, starts, frame_k.axis).astype(np.float64)

    return HFSamples(uv_prime=uv_prime, f_prime=f_prime, n_prime=n_prime,
                     uv_rest=uv_rest, f_rest=f_rest,
                     mask_uv=mask_uv, mask_label=labels)


# ---------------------------------------------------------------------------
# Binary dumps (reproducibility sidecar)

_MAGIC = b"NSMP"
_VERSION = 1


def _write_array(fh, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<II", arr.ndim, 0))
    fh.write(struct.pack("<" + "Q" * arr.ndim, *arr.shape))
    fh.write(arr.tobytes())


def _read_array(fh) -> np.ndarray:
    ndim, _ = struct.unpack("<II", fh.read(8))
    shape = struct.unpack("<" + "Q" * ndim, fh.read(8 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8")
    return data.reshape(shape).copy()


def save_dhf_samples(samples: DHFSamples, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IB", _VERSION, 0))
        for arr in (samples.uv, samples.f_upper, samples.f_lower,
                    samples.n_upper, samples.n_lower, samples.uv_outside):
            _write_array(fh, arr)


def load_dhf_samples(path) -> DHFSamples:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("bad magic")
        version, kind = struct.unpack("<IB", fh.read(5))
        if version != _VERSION or kind != 0:
            raise ValueError("unsupported sample dump")
        arrays = [_read_array(fh) for _ in range(6)]
    return DHFSamples(*arrays)


def save_hf_samples(samples: HFSamples, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IB", _VERSION, 1))
        for arr in (samples.uv_prime, samples.f_prime, samples.n_prime,
                    samples.uv_rest, samples.f_rest,
                    samples.mask_uv, samples.mask_label):
            _write_array(fh, arr)


def load_hf_samples(path) -> HFSamples:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("bad magic")
        version, kind = struct.unpack("<IB", fh.read(5))
        if version != _VERSION or kind != 1:
            raise ValueError("unsupported sample dump")
        arrays = [_read_array(fh) for _ in range(7)]
    return HFSamples(*arrays)
