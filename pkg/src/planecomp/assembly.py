"""Polygonal mesh assembly from selected plane primitives.

Each primitive's inliers are projected to their plane and hulled into a convex
polygon; polygons are then clipped against the half-spaces of intersecting
neighbor planes, welded at shared vertices, and fan-triangulated.  The result
is a polygon soup (watertightness is not enforced; empty selections count as
reconstruction failures downstream).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import CartesianPlane, PlanePrimitive, polar_to_cartesian
from .synth import PolyMesh

_WELD_TOL = 1e-6
_CLIP_TOL = 1e-9
_DIHEDRAL_MIN_DEG = 15.0


class DegenerateFootprint(ValueError):
    """Inliers are too few or collinear after projection; no polygon exists."""


class EmptySelection(ValueError):
    """No primitives selected; maps to a reconstruction failure."""


def _plane_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u = np.cross(normal, [1.0, 0.0, 0.0])
    if np.linalg.norm(u) < 1e-6:
        u = np.cross(normal, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    return u, np.cross(normal, u)


def _hull_2d(pts: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull indices, counter-clockwise."""
    order = np.lexsort((pts[:, 1], pts[:, 0]))

    def cross(o, a, b):
        return (pts[a, 0] - pts[o, 0]) * (pts[b, 1] - pts[o, 1]) - \
               (pts[a, 1] - pts[o, 1]) * (pts[b, 0] - pts[o, 0])

    lower: list[int] = []
    for i in order:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], i) <= 0:
            lower.pop()
        lower.append(int(i))
    upper: list[int] = []
    for i in order[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], i) <= 0:
            upper.pop()
        upper.append(int(i))
    return np.array(lower[:-1] + upper[:-1], dtype=np.intp)


def polygonize_primitive(p: PlanePrimitive) -> np.ndarray:
    """Ordered planar polygon (k, 3) covering the primitive's inlier footprint."""
    pts = np.asarray(p.points, dtype=np.float64)
    if pts.shape[0] < 3:
        raise DegenerateFootprint(f"need >= 3 inliers, got {pts.shape[0]}")
    plane = polar_to_cartesian(p.plane)
    n = plane.normal
    u, w = _plane_basis(n)
    foot = plane.offset * n
    uv = np.stack([(pts - foot) @ u, (pts - foot) @ w], axis=1)
    spread = uv.max(axis=0) - uv.min(axis=0)
    if np.min(spread) < 1e-9 or uv.shape[0] < 3:
        raise DegenerateFootprint("inliers are collinear after projection")
    hull = _hull_2d(uv)
    if len(hull) < 3:
        raise DegenerateFootprint("convex hull is degenerate")
    loop = foot + uv[hull, :1] * u + uv[hull, 1:] * w
    return loop


def _clip_loop(loop: np.ndarray, normal: np.ndarray, offset: float, keep_sign: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a 3D polygon against keep_sign*(n.x - d) >= 0."""
    dist = keep_sign * (loop @ normal - offset)
    out: list[np.ndarray] = []
    k = len(loop)
    for i in range(k):
        cur, nxt = i, (i + 1) % k
        if dist[cur] >= -_CLIP_TOL:
            out.append(loop[cur])
            if dist[nxt] < -_CLIP_TOL:
                t = dist[cur] / (dist[cur] - dist[nxt])
                out.append(loop[cur] + t * (loop[nxt] - loop[cur]))
        elif dist[nxt] >= -_CLIP_TOL:
            t = dist[cur] / (dist[cur] - dist[nxt])
            out.append(loop[cur] + t * (loop[nxt] - loop[cur]))
    return np.array(out) if len(out) >= 3 else np.zeros((0, 3))


def _clip_all(polygons: list[np.ndarray], planes: list[CartesianPlane],
              centroids: list[np.ndarray]) -> list[np.ndarray]:
    """Clipped loops aligned with the input; emptied polygons become (0, 3) arrays."""
    cos_thresh = np.cos(np.deg2rad(_DIHEDRAL_MIN_DEG))
    out = []
    for i, poly in enumerate(polygons):
        loop = poly
        for j, other in enumerate(planes):
            if i == j or len(loop) == 0:
                continue
            if abs(planes[i].normal @ other.normal) >= cos_thresh:
                continue  # near-parallel: no meaningful intersection line
            dist = loop @ other.normal - other.offset
            if dist.min() >= -_CLIP_TOL or dist.max() <= _CLIP_TOL:
                continue  # plane does not cut this polygon
            side = float(centroids[i] @ other.normal - other.offset)
            if abs(side) <= _CLIP_TOL:
                continue
            loop = _clip_loop(loop, other.normal, other.offset, np.sign(side))
        out.append(loop if len(loop) >= 3 else np.zeros((0, 3)))
    return out


def clip_mutual(polygons: list[np.ndarray], planes: list[CartesianPlane],
                confidences: list[float] | None = None,
                centroids: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Clip each polygon against intersecting neighbor planes (dihedral > 15 deg).

    The kept half-space is the side containing the polygon's inlier centroid
    (vertex centroid when none is given); polygons that clip away entirely are
    dropped.  Confidences ride along for symmetry with the selection output but
    do not alter the clipping itself.
    """
    del confidences
    if centroids is None:
        centroids = [poly.mean(axis=0) for poly in polygons]
    return [loop for loop in _clip_all(polygons, planes, centroids) if len(loop) >= 3]


@dataclass
class AssemblyReport:
    n_faces: int
    n_vertices: int
    n_triangles: int

    def as_dict(self) -> dict:
        return {"faces": self.n_faces, "vertices": self.n_vertices, "triangles": self.n_triangles}


def assemble_mesh(primitives: list[PlanePrimitive],
                  clip: bool = True) -> tuple[PolyMesh, AssemblyReport]:
    """Polygonize, mutually clip, weld, and index the selected primitives."""
    if not primitives:
        raise EmptySelection("no primitives selected")
    polygons = []
    planes = []
    centroids = []
    for p in primitives:
        try:
            poly = polygonize_primitive(p)
        except DegenerateFootprint:
            continue
        polygons.append(poly)
        planes.append(polar_to_cartesian(p.plane))
        centroids.append(np.asarray(p.points, dtype=np.float64).mean(axis=0))
    if not polygons:
        raise EmptySelection("every selected primitive had a degenerate footprint")
    if clip and len(polygons) > 1:
        aligned = _clip_all(polygons, planes, centroids)
        polygons = [l for l in aligned if len(l) >= 3]
        planes = [p for l, p in zip(aligned, planes) if len(l) >= 3]
        if not polygons:
            raise EmptySelection("mutual clipping removed every polygon")

    verts: list[np.ndarray] = []
    vert_keys: dict[tuple, int] = {}
    faces: list[np.ndarray] = []
    face_planes: list[CartesianPlane] = []
    for poly, plane in zip(polygons, planes):
        idx = []
        for v in poly:
            key = tuple(np.round(v / _WELD_TOL).astype(np.int64))
            if key not in vert_keys:
                vert_keys[key] = len(verts)
                verts.append(v)
            vi = vert_keys[key]
            if vi not in idx:  # welding can collapse consecutive vertices
                idx.append(vi)
        if len(idx) >= 3:
            faces.append(np.array(idx, dtype=np.intp))
            face_planes.append(plane)
    if not faces:
        raise EmptySelection("all polygons collapsed during welding")
    mesh = PolyMesh(vertices=np.array(verts), faces=faces, face_planes=face_planes)
    n_tris = int(sum(len(f) - 2 for f in faces))
    return mesh, AssemblyReport(n_faces=len(faces), n_vertices=len(verts), n_triangles=n_tris)


def triangulated_faces(mesh: PolyMesh) -> list[list[int]]:
    tris, _ = mesh.triangulate()
    return [list(map(int, t)) for t in tris]
