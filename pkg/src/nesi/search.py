"""Axis selection for the intersection model.

Chooses one DHF axis and up to three HF axes from finite candidate sets by
minimizing E = Dist + min(Cov * (Dist + eps1), eps2), where Dist is the
symmetric chamfer distance between samples of the input surface and samples
of the candidate intersection boundary, and Cov penalizes surface regions
not well covered by any participating bounding function.

Full evaluations are expensive, so candidate tuples are first screened by an
admissible lower bound (the one-sided chamfer from the input samples to the
nearest per-axis boundary, which never exceeds Dist). The search runs batch-
synchronously: bounds for a batch, full energies for survivors, then a
deterministic incumbent update, which makes results independent of worker
count.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .bvh import HullPrefilter, RayIndex
from .explicit import (DHF, HF, AxisCache, ContainmentMemo, ESIModel, HFEntry,
                       build_axis_cache, esi_boundary_samples, register_caches)
from .mesh import TriMesh, sample_surface


@dataclass
class SearchConfig:
    n_dhf_candidates: int = 50
    n_hf_candidates: int = 80
    augment_major_axes: bool = True
    max_hfs: int = 3
    eps1: float = 1e-4
    eps2: float = 1e-3
    n_discretization_samples: int = 10000
    n_boundary_samples: int = 10000
    grazing_center_deg: float = 80.0
    grazing_sharpness_deg: float = 5.0
    # Relative E decrease required to accept one more HF; 0 reproduces the
    # strict any-improvement rule.
    improvement_threshold: float = 1e-3
    seed: int = 0
    threads: int = 1
    prune: bool = True
    batch_size: int = 64
    use_hull_prefilter: bool = True
    debug_check_bounds: bool = False

    def __post_init__(self):
        if self.n_dhf_candidates < 1 or self.n_hf_candidates < 1:
            raise ValueError("candidate counts must be >= 1")
        if not self.eps1 < self.eps2:
            raise ValueError("eps1 must be < eps2")
        if self.max_hfs > 3 or self.max_hfs < 0:
            raise ValueError("max_hfs must be in [0, 3]")


@dataclass
class EnergyBreakdown:
    cd_s_to_esi: float
    cd_esi_to_s: float
    cov: float
    eps1: float
    eps2: float

    @property
    def dist(self) -> float:
        return self.cd_s_to_esi + self.cd_esi_to_s

    @property
    def total(self) -> float:
        return self.dist + min(self.cov * (self.dist + self.eps1), self.eps2)


MAJOR_AXES = np.array([
    [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0], [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0], [0.0, 0.0, -1.0],
])


def fibonacci_directions(n: int, augment_major_axes: bool = False) -> np.ndarray:
    """n unit directions from the spherical Fibonacci spiral, optionally
    augmented with the six signed coordinate axes; near-duplicates removed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * i
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if augment_major_axes:
        dirs = np.concatenate([dirs, MAJOR_AXES])
    keep = []
    for d in dirs:
        if all(np.linalg.norm(d - k) > 1e-6 for k in keep):
            keep.append(d)
    return np.asarray(keep)


def canonical_dhf_direction(d: np.ndarray) -> np.ndarray:
    """d and -d define the same DHF; keep the representative whose first
    nonzero coordinate is nonnegative."""
    for c in d:
        if c > 0.0:
            return d
        if c < 0.0:
            return -d
    return d


def dhf_candidate_directions(config: SearchConfig) -> np.ndarray:
    dirs = fibonacci_directions(config.n_dhf_candidates, config.augment_major_axes)
    canon = np.array([canonical_dhf_direction(d) for d in dirs])
    keep = []
    for d in canon:
        if all(np.linalg.norm(d - k) > 1e-6 for k in keep):
            keep.append(d)
    return np.asarray(keep)


def hf_candidate_directions(config: SearchConfig) -> np.ndarray:
    return fibonacci_directions(config.n_hf_candidates, config.augment_major_axes)


# ---------------------------------------------------------------------------
# Coverage terms

def grazing_weight(angle_deg: np.ndarray, config: SearchConfig) -> np.ndarray:
    """Shifted/scaled tanh of the normal-to-axis angle: ~0 when the surface
    faces the axis, rising to ~1 as the angle nears 90 degrees."""
    t = 0.5 * np.tanh((np.asarray(angle_deg, dtype=np.float64)
                       - config.grazing_center_deg) / config.grazing_sharpness_deg) + 0.5
    return np.clip(t, 0.0, 1.0)


def on_score(visible: np.ndarray, normals: np.ndarray, d: np.ndarray,
             config: SearchConfig) -> np.ndarray:
    """Likelihood that a boundary sample is represented by the bounding
    function of axis d: invisible points score 1, visible points score by
    how grazing their normal is."""
    cosang = np.clip(normals @ d, -1.0, 1.0)
    angle = np.degrees(np.arccos(cosang))
    return np.maximum(1.0 - visible.astype(np.float64), grazing_weight(angle, config))


def _participating_dirs(caches: Sequence[AxisCache]) -> list[np.ndarray]:
    dirs = []
    for cache in caches:
        dirs.append(cache.frame.axis)
        if cache.kind == DHF:
            dirs.append(-cache.frame.axis)
    return dirs


def coverage(points: np.ndarray, normals: np.ndarray, ids: np.ndarray,
             caches: Sequence[AxisCache], memo: ContainmentMemo,
             config: SearchConfig) -> float:
    """Mean over boundary samples of the min on-score over participating
    bounding directions (both DHF sides participate)."""
    best = np.full(len(points), np.inf)
    for d in _participating_dirs(caches):
        visible = ~memo.ray_hits(d, ids)
        best = np.minimum(best, on_score(visible, normals, d, config))
    return float(best.mean())


# ---------------------------------------------------------------------------
# Energy and bound

def energy(P: np.ndarray, tree_P: cKDTree, caches: Sequence[AxisCache],
           memo: ContainmentMemo, config: SearchConfig) -> EnergyBreakdown:
    """Full quality score of the intersection defined by the given caches."""
    pts, nrm, src, ids = esi_boundary_samples(list(caches), memo)
    d_se, _ = cKDTree(pts).query(P, k=1)
    d_es, _ = tree_P.query(pts, k=1)
    cov = coverage(pts, nrm, ids, caches, memo, config)
    return EnergyBreakdown(cd_s_to_esi=float(d_se.mean()),
                           cd_esi_to_s=float(d_es.mean()),
                           cov=cov, eps1=config.eps1, eps2=config.eps2)


def lower_bound(caches: Sequence[AxisCache]) -> float:
    """Admissible screen: mean over input samples of the min per-axis
    boundary distance; never exceeds the full Dist term."""
    d = caches[0].dist_P
    for cache in caches[1:]:
        d = np.minimum(d, cache.dist_P)
    return float(d.mean())


# ---------------------------------------------------------------------------
# Search

@dataclass
class SearchResult:
    model: ESIModel
    breakdown: EnergyBreakdown
    dhf_index: int
    hf_indices: tuple[int, ...]


class _SearchState:
    """Precomputed per-mesh data shared by every tuple evaluation."""

    def __init__(self, mesh: TriMesh, index: RayIndex, config: SearchConfig,
                 sample_points: Optional[np.ndarray] = None,
                 hull: Optional[HullPrefilter] = None):
        self.mesh = mesh
        self.index = index
        self.config = config
        if sample_points is None:
            sample_points = sample_surface(mesh, config.n_discretization_samples,
                                           config.seed).points
        self.P = sample_points
        self.tree_P = cKDTree(self.P)
        if hull is None and config.use_hull_prefilter:
            hull = HullPrefilter(mesh)
        self.hull = hull
        self.memo = ContainmentMemo(index)
        self.dhf_dirs = dhf_candidate_directions(config)
        self.hf_dirs = hf_candidate_directions(config)
        self.dhf_caches: list[AxisCache] = []
        self.hf_caches: list[AxisCache] = []

    def build_caches(self):
        cfg = self.config

        def build(args):
            d, kind = args
            return build_axis_cache(self.mesh, self.index, d, kind, self.P,
                                    cfg.n_boundary_samples, cfg.seed, hull=self.hull)

        jobs = [(d, DHF) for d in self.dhf_dirs] + [(d, HF) for d in self.hf_dirs]
        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                caches = list(pool.map(build, jobs))
        else:
            caches = [build(j) for j in jobs]
        self.dhf_caches = caches[:len(self.dhf_dirs)]
        self.hf_caches = caches[len(self.dhf_dirs):]
        register_caches(self.memo, self.dhf_caches + self.hf_caches)

    def tuple_caches(self, dhf_i: int, hf_idx: tuple[int, ...]) -> list[AxisCache]:
        return [self.dhf_caches[dhf_i]] + [self.hf_caches[j] for j in hf_idx]

    def evaluate(self, dhf_i: int, hf_idx: tuple[int, ...]) -> EnergyBreakdown:
        caches = self.tuple_caches(dhf_i, hf_idx)
        br = energy(self.P, self.tree_P, caches, self.memo, self.config)
        if self.config.debug_check_bounds:
            lb = lower_bound(caches)
            assert lb <= br.dist + 1e-12, (lb, br.dist)
        return br


def _enumerate_level(state: _SearchState, m: int, incumbent: float,
                     stats: dict) -> Optional[tuple[float, int, tuple[int, ...], EnergyBreakdown]]:
    """Evaluate all (DHF, m-subset-of-HFs) tuples at one HF count.

    Batch-synchronous branch and bound: per batch, screen by lower bound
    against the incumbent, fully evaluate survivors (in parallel when
    configured), then update the incumbent. Deterministic for any worker
    count. Returns the best (E, dhf, hfs, breakdown) at this level.
    """
    cfg = state.config
    best_here: Optional[tuple[float, int, tuple[int, ...], EnergyBreakdown]] = None
    n_hf = len(state.hf_caches)
    combos = itertools.chain.from_iterable(
        ((i, c) for c in itertools.combinations(range(n_hf), m))
        for i in range(len(state.dhf_caches)))

    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        while True:
            batch = list(itertools.islice(combos, cfg.batch_size))
            if not batch:
                break
            if cfg.prune:
                survivors = []
                for i, c in batch:
                    lb = lower_bound(state.tuple_caches(i, c))
                    stats["bounds"] += 1
                    if lb < incumbent:
                        survivors.append((i, c))
                    else:
                        stats["pruned"] += 1
            else:
                survivors = batch
                stats["bounds"] += len(batch)
            if survivors:
                stats["evaluated"] += len(survivors)
                if pool is not None:
                    results = list(pool.map(lambda t: state.evaluate(*t), survivors))
                else:
                    results = [state.evaluate(i, c) for i, c in survivors]
                for (i, c), br in zip(survivors, results):
                    e = br.total
                    if best_here is None or e < best_here[0]:
                        best_here = (e, i, c, br)
                if best_here is not None and best_here[0] < incumbent:
                    incumbent = best_here[0]
    finally:
        if pool is not None:
            pool.shutdown()
    return best_here


def search_axes(mesh: TriMesh, config: SearchConfig,
                index: Optional[RayIndex] = None,
                state: Optional[_SearchState] = None) -> SearchResult:
    """Select the DHF axis and up to max_hfs HF axes minimizing E.

    Levels are evaluated incrementally by HF count; the search stops as soon
    as one more HF fails to improve E by the configured relative threshold.
    DHF and HF axes are enumerated jointly at every level. Ties resolve to
    the lexicographically smallest candidate indices.
    """
    if state is None:
        state = _SearchState(mesh, index if index is not None else RayIndex(mesh), config)
        state.build_caches()
    stats = {"bounds": 0, "pruned": 0, "evaluated": 0, "per_level": {}}

    energy_trace: list[float] = []
    best: Optional[tuple[float, int, tuple[int, ...], EnergyBreakdown]] = None
    for m in range(0, config.max_hfs + 1):
        level_stats = {"bounds": 0, "pruned": 0, "evaluated": 0}
        incumbent = np.inf if best is None else best[0]
        found = _enumerate_level(state, m, incumbent, level_stats)
        for k in ("bounds", "pruned", "evaluated"):
            stats[k] += level_stats[k]
        level_stats["pruned_fraction"] = (level_stats["pruned"] / level_stats["bounds"]
                                          if level_stats["bounds"] else 0.0)
        stats["per_level"][m] = level_stats
        if m == 0:
            assert found is not None
            best = found
            energy_trace.append(found[0])
            continue
        if found is None:
            break
        prev = best[0]
        if prev - found[0] >= config.improvement_threshold * prev and found[0] < prev:
            best = found
            energy_trace.append(found[0])
        else:
            break
    stats["pruned_fraction"] = stats["pruned"] / stats["bounds"] if stats["bounds"] else 0.0

    e, dhf_i, hf_idx, br = best
    model = ESIModel(
        dhf=state.dhf_caches[dhf_i].frame,
        hfs=[HFEntry(frame=state.hf_caches[j].frame) for j in hf_idx],
        energy_trace=energy_trace,
        pruning_stats=stats,
        config_echo={
            "n_dhf_candidates": config.n_dhf_candidates,
            "n_hf_candidates": config.n_hf_candidates,
            "augment_major_axes": config.augment_major_axes,
            "max_hfs": config.max_hfs,
            "eps1": config.eps1,
            "eps2": config.eps2,
            "n_discretization_samples": config.n_discretization_samples,
            "n_boundary_samples": config.n_boundary_samples,
            "grazing_center_deg": config.grazing_center_deg,
            "grazing_sharpness_deg": config.grazing_sharpness_deg,
            "improvement_threshold": config.improvement_threshold,
            "seed": config.seed,
        },
    )
    return SearchResult(model=model, breakdown=br, dhf_index=dhf_i, hf_indices=tuple(hf_idx))


def search_fixed_m(mesh: TriMesh, config: SearchConfig, m: int,
                   index: Optional[RayIndex] = None,
                   state: Optional[_SearchState] = None) -> SearchResult:
    """Best tuple with exactly m HFs (no early stop); m may exceed max_hfs
    for sweep-style evaluations."""
    if state is None:
        state = _SearchState(mesh, index if index is not None else RayIndex(mesh), config)
        state.build_caches()
    stats = {"bounds": 0, "pruned": 0, "evaluated": 0}
    found = _enumerate_level(state, m, np.inf, stats)
    if found is None:
        raise ValueError(f"no feasible tuple at m={m}")
    e, dhf_i, hf_idx, br = found
    model = ESIModel(dhf=state.dhf_caches[dhf_i].frame,
                     hfs=[HFEntry(frame=state.hf_caches[j].frame) for j in hf_idx],
                     energy_trace=[e], pruning_stats=stats, config_echo={})
    return SearchResult(model=model, breakdown=br, dhf_index=dhf_i, hf_indices=tuple(hf_idx))
