"""Planar segment detection in partial point clouds via region growing.

Seeds regions at the lowest-curvature points and grows them over a k-NN graph
while point-to-plane distance and normal deviation stay within tolerance,
refitting the plane as the region grows.  The output maps every input point to
at most one segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import CartesianPlane, canonicalize_normal, signed_distances
from .pointops import knn_indices, pca_normals


class RankDeficient(ValueError):
    """Points are collinear or coincident; no unique plane fit exists."""


@dataclass
class PlaneSegment:
    plane: CartesianPlane
    indices: np.ndarray  # into the segmented cloud


@dataclass
class Segmentation:
    segments: list[PlaneSegment]
    unassigned: np.ndarray
    n_points: int

    def labels(self) -> np.ndarray:
        """Per-point segment index, -1 for unassigned."""
        out = np.full(self.n_points, -1, dtype=np.intp)
        for k, seg in enumerate(self.segments):
            out[seg.indices] = k
        return out

    def assigned_count(self) -> int:
        return int(sum(len(s.indices) for s in self.segments))


def refit_plane(points: np.ndarray) -> CartesianPlane:
    """Total-least-squares plane: smallest-eigenvector normal of the centered covariance."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 3:
        raise RankDeficient(f"need >= 3 points, got {pts.shape[0]}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered
    w, v = np.linalg.eigh(cov)
    scale = max(w[2], 1e-300)
    if w[1] / scale < 1e-12:
        raise RankDeficient("points are collinear or coincident")
    n = v[:, 0]
    n = n / np.linalg.norm(n)
    d = float(n @ centroid)
    n, d = canonicalize_normal(n, d)
    return CartesianPlane(normal=n, offset=d)


def detect_planes(points: np.ndarray, angle_tol: float = 10.0, dist_tol: float = 0.01,
                  min_support: int = 20, k: int = 16) -> Segmentation:
    """Region-growing plane detection.

    angle_tol is in degrees.  Defaults suit clouds normalized to unit diagonal.
    An empty segmentation is a valid result.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n < max(min_support, k + 1, 3):
        return Segmentation(segments=[], unassigned=np.arange(n, dtype=np.intp), n_points=n)

    normals, curvature = pca_normals(pts, k=k)
    nbrs = knn_indices(pts, pts, k + 1)[:, 1:]  # drop self
    cos_tol = np.cos(np.deg2rad(angle_tol))

    assigned = np.full(n, -1, dtype=np.intp)
    seed_order = np.argsort(curvature, kind="stable")
    segments: list[PlaneSegment] = []

    for seed in seed_order:
        if assigned[seed] >= 0:
            continue
        plane_n = normals[seed]
        plane_d = float(plane_n @ pts[seed])
        members = [int(seed)]
        member_mask = np.zeros(n, dtype=bool)
        member_mask[seed] = True
        queue = [int(seed)]
        next_refit = 8
        while queue:
            cur = queue.pop()
            for nb in nbrs[cur]:
                if member_mask[nb] or assigned[nb] >= 0:
                    continue
                if abs(pts[nb] @ plane_n - plane_d) >= dist_tol:
                    continue
                if abs(normals[nb] @ plane_n) <= cos_tol:
                    continue
                member_mask[nb] = True
                members.append(int(nb))
                queue.append(int(nb))
                if len(members) >= next_refit:
                    sel = pts[members]
                    try:
                        fit = refit_plane(sel)
                    except RankDeficient:
                        continue
                    plane_n, plane_d = fit.normal, fit.offset
                    next_refit *= 2
        if len(members) < min_support:
            continue
        idx = np.array(sorted(members), dtype=np.intp)
        seg = _finalize_segment(pts, idx, dist_tol, min_support)
        if seg is None:
            continue
        assigned[seg.indices] = len(segments)
        segments.append(seg)

    unassigned = np.nonzero(assigned < 0)[0].astype(np.intp)
    return Segmentation(segments=segments, unassigned=unassigned, n_points=n)


def _finalize_segment(pts: np.ndarray, idx: np.ndarray, dist_tol: float,
                      min_support: int) -> PlaneSegment | None:
    """Refit on acceptance, then drop members outside dist_tol until stable."""
    for _ in range(5):
        if len(idx) < max(3, min_support):
            return None
        try:
            plane = refit_plane(pts[idx])
        except RankDeficient:
            return None
        dist = np.abs(signed_distances(plane, pts[idx]))
        keep = dist < dist_tol
        if keep.all():
            return PlaneSegment(plane=plane, indices=idx)
        idx = idx[keep]
    return PlaneSegment(plane=plane, indices=idx) if len(idx) >= min_support else None


def segmentation_to_json(seg: Segmentation) -> dict:
    from . import fileio
    from .geom import cartesian_to_polar

    recs = []
    for s in seg.segments:
        polar, degenerate = cartesian_to_polar(s.plane)
        rec = {
            "plane": [float(polar.r), float(polar.theta), float(polar.phi)],
            "point_indices": [int(i) for i in s.indices],
        }
        if degenerate:
            rec["degenerate"] = True
        recs.append(rec)
    return {
        "format_version": fileio.FORMAT_VERSION,
        "segments": recs,
        "unassigned": [int(i) for i in seg.unassigned],
        "n_points": int(seg.n_points),
    }


def segmentation_from_json(doc: dict) -> Segmentation:
    from .geom import PolarPlane, polar_to_cartesian

    segments = []
    for rec in doc["segments"]:
        r, theta, phi = rec["plane"]
        plane = polar_to_cartesian(PolarPlane(r, theta, phi))
        segments.append(PlaneSegment(plane=plane, indices=np.asarray(rec["point_indices"], dtype=np.intp)))
    return Segmentation(
        segments=segments,
        unassigned=np.asarray(doc["unassigned"], dtype=np.intp),
        n_points=int(doc["n_points"]),
    )
