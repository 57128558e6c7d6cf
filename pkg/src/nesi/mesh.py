"""Triangle mesh ingestion, normalization, sampling, and point-set distances.

Meshes are treated as triangle soup: no manifoldness or watertightness is
required, since every downstream containment test is phrased as "does a ray
hit the surface". Geometry is kept in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .rng import STREAM_SURFACE_SAMPLING, make_rng

# Target half-extent of the normalized bounding box: the longest side of the
# input box maps onto [-1/1.1, 1/1.1].
NORM_HALF_EXTENT = 1.0 / 1.1


class MeshError(ValueError):
    """Raised for unusable mesh input (empty, non-finite, degenerate)."""


@dataclass
class Similarity:
    """p_out = scale * (p_in - center): uniform scale about a center point."""

    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center


@dataclass
class TriMesh:
    vertices: np.ndarray          # (V, 3) float64
    triangles: np.ndarray         # (F, 3) int64
    face_normals: np.ndarray = field(init=False)
    face_areas: np.ndarray = field(init=False)
    bbox: np.ndarray = field(init=False)            # (2, 3) min/max
    bbox_diagonal: float = field(init=False)
    vertex_colors: Optional[np.ndarray] = None      # (V, 3) in [0,1], optional

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be (V, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be (F, 3)")
        if len(self.triangles) == 0:
            raise MeshError("mesh has no faces")
        if not np.isfinite(self.vertices).all():
            raise MeshError("non-finite coordinate")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise MeshError("triangle index out of range")
        v = self.vertices
        t = self.triangles
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        norms = np.linalg.norm(cross, axis=1)
        # Degenerate (zero-area) faces get a placeholder normal; they can never
        # produce a ray hit so the placeholder is unobservable.
        safe = np.where(norms > 0.0, norms, 1.0)
        self.face_normals = cross / safe[:, None]
        self.face_areas = 0.5 * norms
        self.bbox = np.stack([v.min(axis=0), v.max(axis=0)])
        self.bbox_diagonal = float(np.linalg.norm(self.bbox[1] - self.bbox[0]))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.triangles)

    def triangle_corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = self.triangles
        return self.vertices[t[:, 0]], self.vertices[t[:, 1]], self.vertices[t[:, 2]]


@dataclass
class RayHit:
    t: float
    point: np.ndarray
    face_index: int
    normal: np.ndarray


@dataclass
class SurfacePointSet:
    points: np.ndarray    # (N, 3)
    normals: np.ndarray   # (N, 3) unit, face normal of the containing triangle
    seed: int

    def __len__(self) -> int:
        return len(self.points)


def load_mesh(path) -> TriMesh:
    """Load an ASCII Wavefront OBJ file.

    Only `v` and `f` records are honored; `vn`/`vt` are ignored. Polygonal
    faces are fan-triangulated. Vertex color extensions (`v x y z r g b`)
    are preserved when present on every vertex.
    """
    vertices = []
    colors = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                coords = [float(x) for x in parts[1:4]]
                vertices.append(coords)
                if len(parts) >= 7:
                    colors.append([float(x) for x in parts[4:7]])
            elif parts[0] == "f":
                idx = []
                for token in parts[1:]:
                    # f supports v, v/vt, v//vn, v/vt/vn references
                    raw = token.split("/")[0]
                    i = int(raw)
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not faces:
        raise MeshError(f"{path}: mesh has no faces")
    verts = np.asarray(vertices, dtype=np.float64)
    if not np.isfinite(verts).all():
        raise MeshError(f"{path}: non-finite coordinate")
    vcol = None
    if len(colors) == len(vertices) and len(colors) > 0:
        vcol = np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0)
    return TriMesh(verts, np.asarray(faces, dtype=np.int64), vertex_colors=vcol)


def save_obj(mesh: TriMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if mesh.vertex_colors is not None:
            for v, c in zip(mesh.vertices, mesh.vertex_colors):
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
        else:
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def normalize(mesh: TriMesh) -> tuple[TriMesh, Similarity]:
    """Center at the bbox center and scale the longest bbox side to 2/1.1."""
    extent = mesh.bbox[1] - mesh.bbox[0]
    longest = float(extent.max())
    if longest <= 0.0:
        raise MeshError("degenerate mesh: zero-extent bounding box")
    center = 0.5 * (mesh.bbox[0] + mesh.bbox[1])
    transform = Similarity(center=center, scale=2.0 * NORM_HALF_EXTENT / longest)
    out = TriMesh(transform.apply(mesh.vertices), mesh.triangles.copy(),
                  vertex_colors=None if mesh.vertex_colors is None else mesh.vertex_colors.copy())
    return out, transform


def sample_surface(mesh: TriMesh, n: int, seed: int) -> SurfacePointSet:
    """Area-weighted uniform surface samples, deterministic per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed, STREAM_SURFACE_SAMPLING)
    total = mesh.face_areas.sum()
    if total <= 0.0:
        raise MeshError("mesh has zero surface area")
    cdf = np.cumsum(mesh.face_areas) / total
    face_idx = np.searchsorted(cdf, rng.random(n), side="right").clip(0, mesh.n_faces - 1)
    # Square-root warping gives uniform barycentric coordinates.
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = mesh.triangle_corners()
    a, b, c = a[face_idx], b[face_idx], c[face_idx]
    pts = (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return SurfacePointSet(points=pts, normals=mesh.face_normals[face_idx].copy(), seed=seed)


def chamfer_one_sided(a: np.ndarray, b: np.ndarray) -> float:
    """Mean Euclidean nearest-neighbor distance from each point of `a` into `b`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance of an empty point set")
    dists, _ = cKDTree(b).query(a, k=1)
    return float(np.mean(dists))


def chamfer_l1(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric chamfer distance: sum of both one-sided means."""
    return chamfer_one_sided(a, b) + chamfer_one_sided(b, a)
