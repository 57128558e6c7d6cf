"""Deterministic procedural test shapes.

Each fixture provides a triangle mesh in raw coordinates and, where the
shape has a usable closed form, a signed-distance function in the same
coordinates (negative inside). Meshes built from unions are plain triangle
soup; ray-based containment handles them without boolean surgery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from skimage import measure

from .mesh import TriMesh


def box_mesh(half_extents, center=(0.0, 0.0, 0.0)) -> TriMesh:
    hx, hy, hz = half_extents
    c = np.asarray(center, dtype=np.float64)
    corners = np.array([[sx * hx, sy * hy, sz * hz]
                        for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) + c
    # Outward-wound faces of the unit box corner ordering above.
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    tris = []
    for a, b, cc, d in quads:
        tris.append((a, b, cc))
        tris.append((a, cc, d))
    return TriMesh(corners, np.asarray(tris, dtype=np.int64))


def uv_sphere(radius: float, nu: int = 32, nv: int = 64,
              center=(0.0, 0.0, 0.0), hemisphere: Optional[str] = None) -> TriMesh:
    """Latitude/longitude sphere; `hemisphere` in {"upper", "lower"} keeps an
    open half shell."""
    c = np.asarray(center, dtype=np.float64)
    th_lo, th_hi = 0.0, np.pi
    if hemisphere == "upper":
        th_hi = np.pi / 2
    elif hemisphere == "lower":
        th_lo = np.pi / 2
    thetas = np.linspace(th_lo, th_hi, nu + 1)
    verts = []
    rows = []
    for th in thetas:
        row = []
        for j in range(nv):
            ph = 2.0 * np.pi * j / nv
            row.append(len(verts))
            verts.append(c + radius * np.array([np.sin(th) * np.cos(ph),
                                                np.sin(th) * np.sin(ph),
                                                np.cos(th)]))
        rows.append(row)
    tris = []
    for i in range(nu):
        for j in range(nv):
            a, b = rows[i][j], rows[i][(j + 1) % nv]
            d, e = rows[i + 1][j], rows[i + 1][(j + 1) % nv]
            tris.append((a, d, b))
            tris.append((b, d, e))
    return TriMesh(np.asarray(verts), np.asarray(tris, dtype=np.int64))


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron: 20 * 4^subdivisions faces."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        vlist = list(verts)
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = vlist[i] + vlist[j]
                m /= np.linalg.norm(m)
                cache[key] = len(vlist)
                vlist.append(m)
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        verts = np.asarray(vlist)
        faces = np.asarray(new_faces, dtype=np.int64)
    return TriMesh(verts * radius, faces)


def torus_mesh(major: float = 0.7, minor: float = 0.3,
               n_major: int = 64, n_minor: int = 32) -> TriMesh:
    verts = []
    for i in range(n_major):
        a = 2.0 * np.pi * i / n_major
        for j in range(n_minor):
            b = 2.0 * np.pi * j / n_minor
            r = major + minor * np.cos(b)
            verts.append((r * np.cos(a), r * np.sin(a), minor * np.sin(b)))
    tris = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = i * n_minor + (j + 1) % n_minor
            c = ((i + 1) % n_major) * n_minor + j
            d = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            tris.append((a, c, b))
            tris.append((b, c, d))
    return TriMesh(np.asarray(verts, dtype=np.float64), np.asarray(tris, dtype=np.int64))


def cylinder_mesh(radius: float, half_len: float, axis: int, n_seg: int = 48) -> TriMesh:
    """Closed cylinder along a coordinate axis."""
    verts = []
    for s in (-1.0, 1.0):
        for j in range(n_seg):
            a = 2.0 * np.pi * j / n_seg
            p = np.zeros(3)
            p[axis] = s * half_len
            p[(axis + 1) % 3] = radius * np.cos(a)
            p[(axis + 2) % 3] = radius * np.sin(a)
            verts.append(p)
    lo_c = len(verts)
    p = np.zeros(3)
    p[axis] = -half_len
    verts.append(p.copy())
    hi_c = len(verts)
    p[axis] = half_len
    verts.append(p.copy())
    tris = []
    for j in range(n_seg):
        a, b = j, (j + 1) % n_seg
        c, d = n_seg + j, n_seg + (j + 1) % n_seg
        tris += [(a, b, c), (b, d, c)]
        tris.append((lo_c, b, a))
        tris.append((hi_c, c, d))
    return TriMesh(np.asarray(verts), np.asarray(tris, dtype=np.int64))


def concat_meshes(*meshes: TriMesh) -> TriMesh:
    verts, tris, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        off += m.n_vertices
    return TriMesh(np.concatenate(verts), np.concatenate(tris))


def mesh_from_sdf(sdf: Callable[[np.ndarray], np.ndarray], res: int = 64,
                  bound: float = 1.1) -> TriMesh:
    axis = np.linspace(-bound, bound, res)
    xx, yy, zz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    vol = sdf(pts).reshape(res, res, res)
    spacing = (2.0 * bound / (res - 1),) * 3
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=spacing)
    return TriMesh(np.asarray(verts - bound, dtype=np.float64),
                   np.asarray(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# Signed distance helpers (negative inside)

def sdf_sphere(p, radius, center=(0, 0, 0)):
    return np.linalg.norm(p - np.asarray(center, dtype=np.float64), axis=1) - radius


def sdf_box(p, half_extents, center=(0, 0, 0)):
    q = np.abs(p - np.asarray(center, dtype=np.float64)) - np.asarray(half_extents)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def sdf_torus(p, major, minor):
    ring = np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2) - major
    return np.sqrt(ring ** 2 + p[:, 2] ** 2) - minor


def sdf_cylinder(p, radius, half_len, axis):
    i, j = (axis + 1) % 3, (axis + 2) % 3
    radial = np.sqrt(p[:, i] ** 2 + p[:, j] ** 2) - radius
    axial = np.abs(p[:, axis]) - half_len
    outside = np.sqrt(np.maximum(radial, 0) ** 2 + np.maximum(axial, 0) ** 2)
    inside = np.minimum(np.maximum(radial, axial), 0.0)
    return outside + inside


def sdf_union(*fns):
    return lambda p: np.minimum.reduce([f(p) for f in fns])


def sdf_difference(base, *cuts):
    return lambda p: np.maximum.reduce([base(p)] + [-c(p) for c in cuts])


# ---------------------------------------------------------------------------
# Fixture registry

@dataclass
class Fixture:
    name: str
    build: Callable[[], TriMesh]
    sdf: Optional[Callable[[np.ndarray], np.ndarray]] = None


def _chair_boxes():
    seat = ((0.6, 0.6, 0.1), (0.0, 0.0, 0.5))
    legs = [((0.08, 0.08, 0.5), (sx * 0.5, sy * 0.5, -0.1))
            for sx in (-1, 1) for sy in (-1, 1)]
    return [seat] + legs


def _chair_mesh():
    return concat_meshes(*[box_mesh(h, c) for h, c in _chair_boxes()])


def _chair_sdf(p):
    return np.minimum.reduce([sdf_box(p, h, c) for h, c in _chair_boxes()])


def _cross_boxes():
    return [((0.85, 0.25, 0.25), (0, 0, 0)),
            ((0.25, 0.85, 0.25), (0, 0, 0)),
            ((0.25, 0.25, 0.85), (0, 0, 0))]


def _l_bracket_boxes():
    return [((0.8, 0.3, 0.25), (0.0, 0.0, -0.55)),
            ((0.25, 0.3, 0.8), (-0.55, 0.0, 0.0))]


def _three_hole_sdf(p):
    plate = sdf_box(p, (0.9, 0.55, 0.18))
    holes = []
    for cx in (-0.55, 0.0, 0.55):
        q = p.copy()
        q[:, 0] -= cx
        holes.append(sdf_cylinder(q, 0.16, 0.5, axis=2))
    return np.maximum.reduce([plate] + [-h for h in holes])


def _saddle_sdf(p):
    block = sdf_box(p, (0.8, 0.8, 0.7), (0.0, 0.0, -0.1))
    saddle = p[:, 2] - (0.15 + 0.45 * (p[:, 0] ** 2 - p[:, 1] ** 2))
    return np.maximum(block, saddle)


def _cylinder_union_mesh():
    return concat_meshes(cylinder_mesh(0.35, 0.85, axis=0),
                         cylinder_mesh(0.35, 0.85, axis=2))


def _cylinder_union_sdf(p):
    return np.minimum(sdf_cylinder(p, 0.35, 0.85, axis=0),
                      sdf_cylinder(p, 0.35, 0.85, axis=2))


def _nested_sphere_mesh():
    return concat_meshes(uv_sphere(0.85, 32, 64), uv_sphere(0.45, 24, 48))


def _nested_hemisphere_mesh():
    return concat_meshes(uv_sphere(0.85, 32, 64),
                         uv_sphere(0.45, 16, 48, hemisphere="lower"))


FIXTURES: dict[str, Fixture] = {
    "sphere": Fixture("sphere", lambda: uv_sphere(1.0, 32, 64),
                      lambda p: sdf_sphere(p, 1.0)),
    "box": Fixture("box", lambda: box_mesh((0.9, 0.7, 0.55)),
                   lambda p: sdf_box(p, (0.9, 0.7, 0.55))),
    "torus": Fixture("torus", lambda: torus_mesh(0.7, 0.3),
                     lambda p: sdf_torus(p, 0.7, 0.3)),
    "three_hole_torus": Fixture("three_hole_torus",
                                lambda: mesh_from_sdf(_three_hole_sdf, res=72),
                                _three_hole_sdf),
    "l_bracket": Fixture("l_bracket",
                         lambda: concat_meshes(*[box_mesh(h, c) for h, c in _l_bracket_boxes()]),
                         lambda p: np.minimum.reduce([sdf_box(p, h, c)
                                                      for h, c in _l_bracket_boxes()])),
    "chair_with_void": Fixture("chair_with_void", _chair_mesh, _chair_sdf),
    "cross": Fixture("cross",
                     lambda: concat_meshes(*[box_mesh(h, c) for h, c in _cross_boxes()]),
                     lambda p: np.minimum.reduce([sdf_box(p, h, c)
                                                  for h, c in _cross_boxes()])),
    "nested_hemisphere": Fixture("nested_hemisphere", _nested_hemisphere_mesh, None),
    "cylinder_union": Fixture("cylinder_union", _cylinder_union_mesh,
                              _cylinder_union_sdf),
    "saddle_block": Fixture("saddle_block",
                            lambda: mesh_from_sdf(_saddle_sdf, res=64),
                            _saddle_sdf),
    "nested_sphere": Fixture("nested_sphere", _nested_sphere_mesh, None),
}

ACCEPTANCE_FIXTURES = ("sphere", "box", "torus", "three_hole_torus", "l_bracket",
                       "chair_with_void", "cross", "nested_hemisphere",
                       "cylinder_union", "saddle_block")


def build_fixture(name: str) -> TriMesh:
    return FIXTURES[name].build()
