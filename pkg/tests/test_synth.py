import numpy as np
import pytest

from planecomp import synth
from planecomp.fileio import read_ply
from planecomp.geom import polar_to_cartesian, signed_distances


def test_box_has_six_faces():
    mesh = synth.gen_shape(seed=3, complexity=6)
    assert mesh.n_faces() == 6
    assert len(mesh.vertices) == 8
    assert mesh.is_watertight()


def test_one_cut_adds_one_face():
    # oracle: watertightness + Euler bookkeeping of the chamfered box
    mesh = synth.gen_shape(seed=3, complexity=7)
    assert mesh.n_faces() == 7
    assert mesh.is_watertight()
    n_edges = sum(len(f) for f in mesh.faces) // 2
    assert len(mesh.vertices) - n_edges + mesh.n_faces() == 2  # Euler characteristic


def test_gen_shape_deterministic():
    a = synth.gen_shape(seed=11, complexity=9)
    b = synth.gen_shape(seed=11, complexity=9)
    assert np.array_equal(a.vertices, b.vertices)
    assert all(np.array_equal(fa, fb) for fa, fb in zip(a.faces, b.faces))


def test_gen_shape_unit_diagonal_and_validity():
    for seed in range(12):
        complexity = 6 + seed % 7
        mesh = synth.gen_shape(seed, complexity)
        lo, hi = mesh.bbox()
        assert abs(np.linalg.norm(hi - lo) - 1.0) < 1e-9
        assert 6 <= mesh.n_faces() <= complexity
        assert mesh.is_watertight()
        for face, plane in zip(mesh.faces, mesh.face_planes):
            assert np.max(np.abs(signed_distances(plane, mesh.vertices[face]))) < 1e-7


def test_sample_surface_counts_binomial():
    # statistical oracle: unit box, area-proportional allocation within 3 sigma
    mesh = synth.gen_shape(seed=3, complexity=6)
    areas = mesh.face_areas()
    n = 6000
    pts, labels = synth.sample_surface(mesh, n, seed=0)
    probs = areas / areas.sum()
    for fi in range(6):
        expected = n * probs[fi]
        sigma = np.sqrt(n * probs[fi] * (1 - probs[fi]))
        count = int(np.sum(labels == fi))
        assert abs(count - expected) <= 3 * sigma + 1


def test_sample_surface_on_plane_and_edge_cases():
    mesh = synth.gen_shape(seed=5, complexity=8)
    pts, labels = synth.sample_surface(mesh, 500, seed=1)
    for fi in range(mesh.n_faces()):
        sel = pts[labels == fi]
        if len(sel):
            assert np.max(np.abs(signed_distances(mesh.face_planes[fi], sel))) < 1e-9
    one, lab = synth.sample_surface(mesh, 1, seed=2)
    assert one.shape == (1, 3) and lab.shape == (1,)
    empty, lab0 = synth.sample_surface(mesh, 0, seed=2)
    assert empty.shape == (0, 3) and lab0.shape == (0,)


def test_occlusion_survivor_count():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(8192, 3))
    keep = synth.occlusion_survivors(pts, np.array([0.0, 0, 1.0]), 0.25)
    assert len(keep) == 8192 - int(np.ceil(0.25 * 8192))
    assert len(keep) == 6144


def test_occlusion_removes_bottom_face():
    # oracle: at ratio 0.5 along +z view, no survivor may sit on the box bottom
    mesh = synth.gen_shape(seed=3, complexity=6)
    pts, _ = synth.sample_surface(mesh, 8192, seed=0)
    keep = synth.occlusion_survivors(pts, np.array([0.0, 0.0, 1.0]), 0.5)
    zmin = pts[:, 2].min()
    survivors = pts[keep]
    assert survivors[:, 2].min() > zmin + 1e-6


def test_occlusion_idempotent_before_resampling():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(1000, 3))
    view = np.array([0.3, -0.5, 0.8])
    keep1 = synth.occlusion_survivors(pts, view, 0.25)
    keep2 = keep1[synth.occlusion_survivors(pts[keep1], view, 0.0)]
    assert np.array_equal(keep1, keep2)


def test_normalize_unit_diagonal():
    rng = np.random.default_rng(2)
    cube = rng.random((500, 3))  # inside the unit cube
    cube[0] = 0.0
    cube[1] = 1.0
    out = synth.normalize_unit_diagonal(cube)
    lo, hi = out.min(axis=0), out.max(axis=0)
    assert abs(np.linalg.norm(hi - lo) - 1.0) < 1e-9
    assert np.allclose((lo + hi) / 2, 0.0, atol=1e-9)
    # oracle: the unit cube shrinks by 1/sqrt(3)
    assert np.allclose(hi - lo, 1 / np.sqrt(3), atol=1e-9)
    again = synth.normalize_unit_diagonal(out)
    assert np.allclose(again, out, atol=1e-9)


def test_normalize_degenerate_extent():
    with pytest.raises(synth.DegenerateExtent):
        synth.normalize_unit_diagonal(np.ones((5, 3)))


def test_sample_invariants_and_determinism():
    s1 = synth.make_sample(seed=7, complexity=8, level="moderate", view_index=1)
    s1.validate()
    s2 = synth.make_sample(seed=7, complexity=8, level="moderate", view_index=1)
    assert np.array_equal(s1.input_cloud, s2.input_cloud)
    assert np.array_equal(s1.gt_cloud, s2.gt_cloud)
    # labeled points lie on their primitive planes
    for prim in s1.gt_primitives:
        c = polar_to_cartesian(prim.plane)
        assert np.max(np.abs(signed_distances(c, prim.points))) < 1e-7


def test_sample_level_sizes():
    for level in ("simple", "moderate", "hard"):
        s = synth.make_sample(seed=4, complexity=6, level=level)
        assert s.input_cloud.shape == (2048, 3)
        assert s.gt_cloud.shape == (8192, 3)


def test_dataset_round_trip(tmp_path):
    manifest = synth.generate_dataset(tmp_path, seeds=[1, 2], levels=["hard"], views_per_shape=1)
    assert len(manifest["samples"]) == 2
    entry = manifest["samples"][0]
    sample = synth.read_sample(tmp_path / entry["dir"])
    sample.validate()
    rebuilt = synth.make_sample(entry["seed"], entry["complexity"], entry["level"], entry["view_index"])
    assert np.allclose(sample.input_cloud, rebuilt.input_cloud)
    assert np.allclose(sample.gt_cloud, rebuilt.gt_cloud)


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(100, 3))
    for binary in (True, False):
        p = tmp_path / f"pts_{binary}.ply"
        from planecomp.fileio import write_ply

        write_ply(p, pts, binary=binary)
        back = read_ply(p)
        assert np.array_equal(back, pts)
