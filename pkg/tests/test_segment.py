import numpy as np
import pytest

from planecomp import synth
from planecomp.geom import signed_distances
from planecomp.segment import (
    RankDeficient,
    detect_planes,
    refit_plane,
    segmentation_from_json,
    segmentation_to_json,
)


def _box_cloud(seed=0, n=2048):
    mesh = synth.gen_shape(seed=3, complexity=6)
    pts, labels = synth.sample_surface(mesh, n, seed=seed)
    return mesh, pts, labels


def test_refit_plane_square():
    pts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    plane = refit_plane(pts)
    assert np.allclose(np.abs(plane.normal), [0, 0, 1], atol=1e-12)
    assert abs(plane.offset) < 1e-12


def test_refit_plane_oblique():
    # oracle: max residual below 1e-9 for points exactly on x+y+z=1
    rng = np.random.default_rng(0)
    uv = rng.random((100, 2))
    pts = np.stack([uv[:, 0], uv[:, 1], 1.0 - uv[:, 0] - uv[:, 1]], axis=1)
    plane = refit_plane(pts)
    s3 = 1 / np.sqrt(3)
    assert np.allclose(plane.normal, [s3, s3, s3], atol=1e-9)
    assert abs(plane.offset - s3) < 1e-9
    assert np.max(np.abs(signed_distances(plane, pts))) < 1e-9


def test_refit_plane_rank_deficient():
    with pytest.raises(RankDeficient):
        refit_plane(np.array([[0, 0, 0], [1, 1, 1]], dtype=float))
    with pytest.raises(RankDeficient):
        refit_plane(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float))


def test_refit_local_optimality():
    # sanity: TLS fit beats 100 randomly perturbed planes in residual SSE
    rng = np.random.default_rng(1)
    pts = rng.random((200, 3))
    pts[:, 2] = 0.3 * pts[:, 0] - 0.2 * pts[:, 1] + 0.1 + rng.normal(scale=0.01, size=200)
    plane = refit_plane(pts)
    best = np.sum(signed_distances(plane, pts) ** 2)
    for _ in range(100):
        dn = plane.normal + rng.normal(scale=0.02, size=3)
        dn /= np.linalg.norm(dn)
        dd = plane.offset + rng.normal(scale=0.002)
        sse = np.sum((pts @ dn - dd) ** 2)
        assert best <= sse + 1e-12


def test_detect_planes_on_box():
    mesh, pts, _ = _box_cloud()
    seg = detect_planes(pts)
    assert len(seg.segments) == 6
    face_normals = np.array([p.normal for p in mesh.face_planes])
    for s in seg.segments:
        cos = np.abs(face_normals @ s.plane.normal).max()
        assert cos > np.cos(np.deg2rad(1.0))


def test_detect_planes_single_plane():
    rng = np.random.default_rng(2)
    uv = rng.random((1000, 2))
    pts = np.stack([uv[:, 0], uv[:, 1], np.zeros(1000)], axis=1)
    seg = detect_planes(pts)
    assert len(seg.segments) == 1
    assert len(seg.segments[0].indices) == 1000
    assert len(seg.unassigned) == 0


def test_detect_planes_random_ball():
    # oracle: volumetric noise admits no sizable coplanar subset at this tolerance
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(2000, 3))
    pts /= np.linalg.norm(pts, axis=1)[:, None]
    pts *= rng.random(2000)[:, None] ** (1 / 3)
    seg = detect_planes(pts, dist_tol=0.01)
    assert len(seg.segments) <= 2
    assert seg.assigned_count() < 0.2 * 2000


def test_member_distance_invariant():
    _, pts, _ = _box_cloud(seed=5)
    seg = detect_planes(pts)
    for s in seg.segments:
        assert np.max(np.abs(signed_distances(s.plane, pts[s.indices]))) < 0.01


def test_coverage_monotone_in_dist_tol():
    _, pts, _ = _box_cloud(seed=6)
    counts = [detect_planes(pts, dist_tol=t).assigned_count() for t in (0.002, 0.01, 0.03)]
    assert counts[0] <= counts[1] <= counts[2]


def test_segmentation_partition_and_json_round_trip():
    _, pts, _ = _box_cloud(seed=7)
    seg = detect_planes(pts)
    labels = seg.labels()
    # disjoint membership: every point in exactly one segment or unassigned
    total = seg.assigned_count() + len(seg.unassigned)
    assert total == len(pts)
    assert np.all(labels[seg.unassigned] == -1)
    doc = segmentation_to_json(seg)
    back = segmentation_from_json(doc)
    assert len(back.segments) == len(seg.segments)
    for a, b in zip(seg.segments, back.segments):
        assert np.array_equal(a.indices, b.indices)
        assert np.allclose(np.abs(a.plane.normal @ b.plane.normal), 1.0, atol=1e-9)


def test_tiny_input_returns_empty():
    seg = detect_planes(np.zeros((5, 3)))
    assert seg.segments == []
    assert len(seg.unassigned) == 5
