"""Procedural plane-only benchmark shapes: generation, sampling, occlusion, normalization.

Shapes are convex polytopes built by shaving corners and edge wedges off a box
with half-space cuts, so every face is a convex planar polygon and the mesh is
watertight by construction.  Occlusion removes a contiguous depth range along a
view direction, mimicking self-occlusion of a one-sided scan.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import fileio
from .geom import CartesianPlane, PlanePrimitive, PolarPlane, cartesian_to_polar
from .pointops import farthest_point_sample

LEVELS = {"simple": 0.25, "moderate": 0.5, "hard": 0.75}
INPUT_SIZE = 2048
GT_SIZE = 8192

_VERTEX_TOL = 1e-9
_ONPLANE_TOL = 1e-9


class GenerationFailed(RuntimeError):
    """Shape cuts degenerated repeatedly; no valid polytope produced."""


class DegenerateExtent(ValueError):
    """Input has zero bounding-box diagonal; cannot normalize."""


@dataclass
class PolyMesh:
    """Watertight polygonal mesh with one plane per face."""

    vertices: np.ndarray  # (V, 3)
    faces: list[np.ndarray]  # per face: ordered vertex indices (CCW from outside)
    face_planes: list[CartesianPlane]

    def n_faces(self) -> int:
        return len(self.faces)

    def triangulate(self) -> tuple[np.ndarray, np.ndarray]:
        """Fan triangulation: (T, 3) vertex indices plus (T,) source-face indices."""
        tris = []
        owner = []
        for fi, face in enumerate(self.faces):
            for k in range(1, len(face) - 1):
                tris.append((face[0], face[k], face[k + 1]))
                owner.append(fi)
        return np.array(tris, dtype=np.intp), np.array(owner, dtype=np.intp)

    def face_areas(self) -> np.ndarray:
        tris, owner = self.triangulate()
        v = self.vertices
        cross = np.cross(v[tris[:, 1]] - v[tris[:, 0]], v[tris[:, 2]] - v[tris[:, 0]])
        tri_area = 0.5 * np.linalg.norm(cross, axis=1)
        areas = np.zeros(len(self.faces))
        np.add.at(areas, owner, tri_area)
        return areas

    def is_watertight(self) -> bool:
        directed = set()
        undirected: dict[tuple[int, int], int] = {}
        for face in self.faces:
            m = len(face)
            if m < 3:
                return False
            for i in range(m):
                a, b = int(face[i]), int(face[(i + 1) % m])
                if (a, b) in directed:
                    return False
                directed.add((a, b))
                key = (min(a, b), max(a, b))
                undirected[key] = undirected.get(key, 0) + 1
        return all(c == 2 for c in undirected.values())

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _polytope_from_halfspaces(normals: np.ndarray, offsets: np.ndarray) -> PolyMesh | None:
    """Build the convex polytope {x : n_i . x <= d_i} as a PolyMesh; None if degenerate."""
    n_planes = normals.shape[0]
    verts: list[np.ndarray] = []
    for i, j, k in combinations(range(n_planes), 3):
        a = normals[[i, j, k]]
        if abs(np.linalg.det(a)) < 1e-10:
            continue
        x = np.linalg.solve(a, offsets[[i, j, k]])
        if np.all(normals @ x <= offsets + _VERTEX_TOL):
            verts.append(x)
    if len(verts) < 4:
        return None
    raw = np.array(verts)
    # merge duplicates (a vertex can arise from several triples only when planes
    # are concurrent, which cut placement avoids; dedup is still cheap insurance)
    kept: list[np.ndarray] = []
    for v in raw:
        if all(np.sum((v - u) ** 2) > (10 * _VERTEX_TOL) ** 2 for u in kept):
            kept.append(v)
    vertices = np.array(kept)

    faces: list[np.ndarray] = []
    planes: list[CartesianPlane] = []
    for p in range(n_planes):
        on = np.nonzero(np.abs(vertices @ normals[p] - offsets[p]) <= 10 * _VERTEX_TOL)[0]
        if len(on) < 3:
            return None  # a half-space stopped contributing a face
        center = vertices[on].mean(axis=0)
        n = normals[p]
        u = np.cross(n, [1.0, 0.0, 0.0])
        if np.linalg.norm(u) < 1e-6:
            u = np.cross(n, [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        w = np.cross(n, u)
        rel = vertices[on] - center
        ang = np.arctan2(rel @ w, rel @ u)
        order = on[np.argsort(ang, kind="stable")]
        # ensure CCW when viewed from outside (Newell normal along +n)
        loop = vertices[order]
        newell = np.zeros(3)
        for i in range(len(loop)):
            a, b = loop[i], loop[(i + 1) % len(loop)]
            newell += np.cross(a, b)
        if newell @ n < 0:
            order = order[::-1]
        faces.append(order.astype(np.intp))
        planes.append(CartesianPlane(normal=n.copy(), offset=float(offsets[p])))
    mesh = PolyMesh(vertices=vertices, faces=faces, face_planes=planes)
    if not mesh.is_watertight():
        return None
    return mesh


def gen_shape(seed: int, complexity: int) -> PolyMesh:
    """Generate a watertight plane-only shape with 6..complexity faces, unit diagonal.

    Starts from a box and applies (complexity - 6) corner / edge-wedge cuts.
    Deterministic in the seed; each cut retries internally up to 10 times before
    the whole generation fails.
    """
    if complexity < 6:
        raise ValueError(f"complexity must be >= 6, got {complexity}")
    rng = np.random.default_rng(np.random.SeedSequence([0x5AFE, int(seed)]))
    half = rng.uniform(0.25, 0.5, size=3)
    normals = np.vstack([np.eye(3), -np.eye(3)])
    offsets = np.concatenate([half, half])
    mesh = _polytope_from_halfspaces(normals, offsets)
    assert mesh is not None

    for _ in range(complexity - 6):
        accepted = False
        for _attempt in range(10):
            verts = mesh.vertices
            if rng.random() < 0.5:
                vi = int(rng.integers(len(verts)))
                target = verts[vi]
            else:
                face = mesh.faces[int(rng.integers(len(mesh.faces)))]
                ei = int(rng.integers(len(face)))
                target = 0.5 * (verts[face[ei]] + verts[face[(ei + 1) % len(face)]])
            direction = target + rng.normal(scale=0.05, size=3)
            norm = np.linalg.norm(direction)
            if norm < 1e-6:
                continue
            direction /= norm
            proj = verts @ direction
            hi = proj.max()
            # deepest allowed cut: just past the vertices it shaves off
            below = proj[proj < hi - 1e-7]
            lo = below.max() if below.size else 0.0
            lo = max(lo, 0.05)  # keep the origin inside with margin
            if hi - lo < 0.03:
                continue
            offset = lo + rng.uniform(0.35, 0.75) * (hi - lo)
            cand_normals = np.vstack([normals, direction])
            cand_offsets = np.concatenate([offsets, [offset]])
            cand = _polytope_from_halfspaces(cand_normals, cand_offsets)
            if cand is None or cand.n_faces() != mesh.n_faces() + 1:
                continue
            normals, offsets, mesh = cand_normals, cand_offsets, cand
            accepted = True
            break
        if not accepted:
            raise GenerationFailed(
                f"cut degenerated 10 times (seed={seed}, faces={mesh.n_faces()})"
            )
    return normalize_unit_diagonal_mesh(mesh)


def normalize_unit_diagonal(points: np.ndarray) -> np.ndarray:
    """Scale/translate so the axis-aligned bbox has diagonal 1 and center at origin."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise DegenerateExtent("empty input")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag < 1e-12:
        raise DegenerateExtent("bounding-box diagonal is zero")
    return (pts - (lo + hi) / 2.0) / diag


def normalize_unit_diagonal_mesh(mesh: PolyMesh) -> PolyMesh:
    lo, hi = mesh.bbox()
    diag = float(np.linalg.norm(hi - lo))
    if diag < 1e-12:
        raise DegenerateExtent("bounding-box diagonal is zero")
    center = (lo + hi) / 2.0
    verts = (mesh.vertices - center) / diag
    planes = [
        CartesianPlane(normal=p.normal, offset=float((p.offset - p.normal @ center) / diag))
        for p in mesh.face_planes
    ]
    return PolyMesh(vertices=verts, faces=[f.copy() for f in mesh.faces], face_planes=planes)


def sample_surface(mesh: PolyMesh, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform surface samples with per-point face-plane labels."""
    if n <= 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.intp)
    rng = np.random.default_rng(np.random.SeedSequence([0x5A3B, int(seed)]))
    tris, owner = mesh.triangulate()
    v = mesh.vertices
    cross = np.cross(v[tris[:, 1]] - v[tris[:, 0]], v[tris[:, 2]] - v[tris[:, 0]])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    probs = areas / areas.sum()
    pick = rng.choice(len(tris), size=n, p=probs)
    uv = rng.random((n, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    a, b, c = v[tris[pick, 0]], v[tris[pick, 1]], v[tris[pick, 2]]
    points = a + uv[:, :1] * (b - a) + uv[:, 1:] * (c - a)
    return points, owner[pick]


def occlusion_survivors(points: np.ndarray, view: np.ndarray, ratio: float) -> np.ndarray:
    """Indices of points kept after removing the ceil(ratio*n) farthest along -view."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] == 0:
        raise ValueError("cannot occlude an empty cloud")
    view = np.asarray(view, dtype=np.float64)
    view = view / np.linalg.norm(view)
    k = int(np.ceil(ratio * pts.shape[0]))
    order = np.argsort(pts @ view, kind="stable")
    return np.sort(order[k:])


def resample_to(points: np.ndarray, n: int) -> np.ndarray:
    """Exactly n points: farthest-point subsample when over, cyclic duplication when under."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] == n:
        return pts.copy()
    if pts.shape[0] > n:
        return pts[farthest_point_sample(pts, n)]
    reps = np.arange(n) % pts.shape[0]
    return pts[reps]


def occlude(points: np.ndarray, view: np.ndarray, ratio: float, target: int = INPUT_SIZE) -> np.ndarray:
    """Depth-cut occlusion along a view direction, resampled to exactly `target` points."""
    keep = occlusion_survivors(points, view, ratio)
    return resample_to(np.asarray(points, dtype=np.float64)[keep], target)


@dataclass
class Sample:
    """One benchmark instance: partial input, complete ground truth, primitive partition."""

    input_cloud: np.ndarray  # (2048, 3)
    gt_cloud: np.ndarray  # (8192, 3)
    gt_primitives: list[PlanePrimitive]
    level: str
    seed: int
    complexity: int = 0
    view: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def gt_labels(self) -> np.ndarray:
        labels = np.full(self.gt_cloud.shape[0], -1, dtype=np.intp)
        for k, prim in enumerate(self.gt_primitives):
            labels[prim.indices] = k
        return labels

    def validate(self) -> None:
        assert self.input_cloud.shape == (INPUT_SIZE, 3)
        assert self.gt_cloud.shape == (GT_SIZE, 3)
        assert self.level in LEVELS
        labels = self.gt_labels()
        assert np.all(labels >= 0), "gt_primitives must partition the gt cloud"
        total = sum(len(p.indices) for p in self.gt_primitives)
        assert total == GT_SIZE


def view_direction(seed: int, view_index: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([0x51E3, int(seed), int(view_index)]))
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def make_sample(seed: int, complexity: int, level: str, view_index: int = 0) -> Sample:
    """Deterministically build one Sample (same arguments, bit-identical output)."""
    if level not in LEVELS:
        raise ValueError(f"unknown level '{level}'")
    mesh = gen_shape(seed, complexity)
    gt_cloud, labels = sample_surface(mesh, GT_SIZE, seed=seed)
    view = view_direction(seed, view_index)
    input_cloud = occlude(gt_cloud, view, LEVELS[level])
    prims: list[PlanePrimitive] = []
    for fi in range(mesh.n_faces()):
        idx = np.nonzero(labels == fi)[0]
        if idx.size == 0:
            continue
        polar, _ = cartesian_to_polar(mesh.face_planes[fi])
        prims.append(PlanePrimitive(plane=polar, points=gt_cloud[idx], confidence=1.0, indices=idx))
    # unsampled faces leave the partition intact; relabel to the emitted list
    return Sample(
        input_cloud=input_cloud,
        gt_cloud=gt_cloud,
        gt_primitives=prims,
        level=level,
        seed=seed,
        complexity=complexity,
        view=view,
    )


def primitives_to_json(primitives: list[PlanePrimitive], extra: dict | None = None) -> dict:
    doc = {
        "format_version": fileio.FORMAT_VERSION,
        "primitives": [
            {
                "plane": [float(p.plane.r), float(p.plane.theta), float(p.plane.phi)],
                "point_indices": [int(i) for i in (p.indices if p.indices is not None else [])],
                "confidence": float(p.confidence),
            }
            for p in primitives
        ],
    }
    if extra:
        doc.update(extra)
    return doc


def primitives_from_json(doc: dict, cloud: np.ndarray) -> list[PlanePrimitive]:
    prims = []
    for rec in doc["primitives"]:
        r, theta, phi = rec["plane"]
        idx = np.asarray(rec["point_indices"], dtype=np.intp)
        prims.append(
            PlanePrimitive(
                plane=PolarPlane(r, theta, phi),
                points=cloud[idx],
                confidence=float(rec.get("confidence", 1.0)),
                indices=idx,
            )
        )
    return prims


def write_sample(directory, sample: Sample, binary_ply: bool = True) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fileio.write_ply(d / "input.ply", sample.input_cloud, binary=binary_ply)
    fileio.write_ply(d / "gt.ply", sample.gt_cloud, binary=binary_ply)
    doc = primitives_to_json(
        sample.gt_primitives,
        extra={
            "level": sample.level,
            "seed": int(sample.seed),
            "complexity": int(sample.complexity),
            "view": [float(x) for x in sample.view],
        },
    )
    fileio.dump_json(doc, d / "primitives.json")


def read_sample(directory) -> Sample:
    d = Path(directory)
    input_cloud = fileio.read_ply(d / "input.ply")
    gt_cloud = fileio.read_ply(d / "gt.ply")
    doc = fileio.load_json(d / "primitives.json")
    prims = primitives_from_json(doc, gt_cloud)
    return Sample(
        input_cloud=input_cloud,
        gt_cloud=gt_cloud,
        gt_primitives=prims,
        level=doc["level"],
        seed=int(doc["seed"]),
        complexity=int(doc.get("complexity", 0)),
        view=np.asarray(doc.get("view", [0.0, 0.0, 1.0]), dtype=np.float64),
    )


def generate_dataset(root, seeds, levels, complexity_range=(6, 12), views_per_shape: int = 1,
                     binary_ply: bool = True) -> dict:
    """Write samples plus a manifest; returns the manifest document."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for seed in seeds:
        span = complexity_range[1] - complexity_range[0] + 1
        complexity = complexity_range[0] + int(seed) % span
        for level in levels:
            for view_index in range(views_per_shape):
                sample = make_sample(int(seed), complexity, level, view_index)
                sid = f"s{int(seed):06d}_{level}_v{view_index}"
                write_sample(root / sid, sample, binary_ply=binary_ply)
                entries.append(
                    {
                        "id": sid,
                        "dir": sid,
                        "seed": int(seed),
                        "complexity": complexity,
                        "level": level,
                        "view_index": view_index,
                    }
                )
    manifest = {"format_version": fileio.FORMAT_VERSION, "samples": entries}
    fileio.dump_json(manifest, root / "manifest.json")
    return manifest
