import numpy as np
import pytest

from planecomp import diffkit as dk
from planecomp import synth
from planecomp.diffkit import Tensor, backward
from planecomp.geom import polar_to_cartesian, signed_distances, unit_direction
from planecomp.model import CompletionModel, ModelConfig
from planecomp.segment import detect_planes


@pytest.fixture(scope="module")
def sample():
    return synth.make_sample(seed=3, complexity=8, level="moderate")


@pytest.fixture(scope="module")
def seg(sample):
    return detect_planes(sample.input_cloud)


@pytest.fixture(scope="module")
def model():
    return CompletionModel(ModelConfig(seed=1))


def test_encode_shapes(model, sample):
    centers, feats = model.encode_point_proxies(sample.input_cloud)
    assert centers.shape == (128,)
    assert feats.values.shape == (128, 64)
    assert np.all(np.isfinite(feats.values))


def test_encode_centers_translate_with_cloud(model, sample):
    # rerun oracle: FPS picks the same indices on a rigidly translated cloud
    centers, _ = model.encode_point_proxies(sample.input_cloud)
    shifted = sample.input_cloud + np.array([0.37, -1.2, 0.05])
    centers2, _ = model.encode_point_proxies(shifted)
    assert np.array_equal(centers, centers2)


def test_encode_duplicate_points_no_nan(model):
    cloud = np.tile(np.array([[0.1, 0.2, 0.3]]), (2048, 1))
    cloud[:4] += 0.01  # a few distinct points so FPS has something to pick
    centers, feats = model.encode_point_proxies(cloud)
    assert np.all(np.isfinite(feats.values))


def test_encode_rejects_wrong_size(model):
    with pytest.raises(ValueError):
        model.encode_point_proxies(np.zeros((100, 3)))


def test_plane_proxies_padding(model, sample, seg):
    centers, feats = model.encode_point_proxies(sample.input_cloud)
    v, slot_normals = model.build_plane_proxies(centers, feats, seg)
    assert v.values.shape == (20, 64)
    n_real = len(seg.segments)
    # padded rows beyond the used slots stay exactly zero
    used = n_real + (1 if np.any(seg.labels()[centers] < 0) else 0)
    assert np.allclose(v.values[used:], 0.0)
    assert np.allclose(slot_normals[n_real:], 0.0)


def test_plane_proxy_sum_pooling_formula(model):
    # single segment: proxy = sum of member point-proxy features + normal MLP
    from planecomp.segment import PlaneSegment, Segmentation
    from planecomp.geom import CartesianPlane

    cfg = model.config
    rng = np.random.default_rng(0)
    fvals = rng.normal(size=(cfg.n_point_proxies, cfg.feature_dim))
    feats = Tensor(fvals)
    centers = np.arange(cfg.n_point_proxies)
    plane = CartesianPlane(np.array([0.0, 0.0, 1.0]), 0.4)
    seg = Segmentation(
        segments=[PlaneSegment(plane=plane, indices=np.arange(cfg.n_point_proxies))],
        unassigned=np.array([], dtype=np.intp),
        n_points=cfg.n_point_proxies,
    )
    v, _ = model.build_plane_proxies(centers, feats, seg)
    s = model.store
    h = np.maximum(np.array([0, 0, 1.0]) @ s["plane.normal_embed0.w"].values
                   + s["plane.normal_embed0.b"].values, 0)
    phi = h @ s["plane.normal_embed1.w"].values + s["plane.normal_embed1.b"].values
    assert np.allclose(v.values[0], fvals.sum(axis=0) + phi, atol=1e-9)
    # sum pooling is sensitive to membership duplication (unlike mean pooling)
    feats2 = Tensor(np.concatenate([fvals, fvals], axis=0))
    seg2 = Segmentation(
        segments=[PlaneSegment(plane=plane, indices=np.arange(2 * cfg.n_point_proxies))],
        unassigned=np.array([], dtype=np.intp),
        n_points=2 * cfg.n_point_proxies,
    )
    v2, _ = model.build_plane_proxies(np.arange(2 * cfg.n_point_proxies), feats2, seg2)
    assert not np.allclose(v2.values[0], v.values[0])
    mean1 = fvals.mean(axis=0)
    mean2 = np.concatenate([fvals, fvals], axis=0).mean(axis=0)
    assert np.allclose(mean1, mean2)  # mean pooling would not have noticed


def test_generate_queries_counts_and_ranking(model, sample, seg):
    centers, feats = model.encode_point_proxies(sample.input_cloud)
    v, _ = model.build_plane_proxies(centers, feats, seg)
    q, scores, selected = model.generate_queries(v)
    assert q.values.shape == (40, 64)
    assert np.all(np.isfinite(scores))
    # sort oracle: exact top-M by score, ties by lower index
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    assert list(selected) == order[:40]


def test_generate_queries_zero_input(model):
    v = Tensor(np.zeros((20, 64)))
    q, scores, _ = model.generate_queries(v)
    assert q.values.shape == (40, 64)
    assert np.all(np.isfinite(q.values))


def test_decoder_attention_rows_sum_to_one(model, sample, seg):
    centers, feats = model.encode_point_proxies(sample.input_cloud)
    v, _ = model.build_plane_proxies(centers, feats, seg)
    q, _, _ = model.generate_queries(v)
    _, attn_maps = model.decode_proxies(v, q)
    for weights in attn_maps:
        assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-9)


def test_decoder_zero_proxies_finite(model):
    v = Tensor(np.zeros((20, 64)))
    q, _, _ = model.generate_queries(v)
    out, _ = model.decode_proxies(v, q)
    assert np.all(np.isfinite(out.values))


def test_decoder_key_permutation_invariance(model, sample, seg):
    rng = np.random.default_rng(5)
    centers, feats = model.encode_point_proxies(sample.input_cloud)
    v, _ = model.build_plane_proxies(centers, feats, seg)
    q, _, _ = model.generate_queries(v)
    base, _ = model.decode_proxies(v, q)
    perm = rng.permutation(v.values.shape[0])
    v_perm = Tensor(v.values[perm])
    out, _ = model.decode_proxies(v_perm, q)
    assert np.allclose(out.values, base.values, atol=1e-9)


def test_estimate_parameters_zero_logits():
    cfg = ModelConfig.tiny()
    m = CompletionModel(cfg)
    m.store["head.params.w"].values[...] = 0.0
    m.store["head.params.b"].values[...] = 0.0
    h = Tensor(np.random.default_rng(0).normal(size=(cfg.n_queries, cfg.feature_dim)))
    r, theta, phi = m.estimate_parameters(h)
    assert np.allclose(r.values, np.log(2.0))
    assert np.allclose(theta.values, np.pi / 2)
    assert np.allclose(phi.values, 0.0)


def test_estimate_parameters_ranges(model, sample, seg):
    out = model.forward(sample.input_cloud, seg)
    assert np.all(out.r.values >= 0)
    assert np.all((out.theta.values >= 0) & (out.theta.values <= np.pi))
    assert np.all((out.phi.values > -np.pi) & (out.phi.values < np.pi))
    for p in out.planes():  # constructor revalidates the invariants
        assert p.r >= 0


def test_parameter_head_gradients_flow():
    cfg = ModelConfig.tiny()
    m = CompletionModel(cfg)
    h = Tensor(np.random.default_rng(1).normal(size=(cfg.n_queries, cfg.feature_dim)))
    r, theta, phi = m.estimate_parameters(h)
    loss = dk.add(dk.asum(r), dk.add(dk.asum(theta), dk.asum(phi)))
    m.store.zero_grad()
    backward(loss)
    g = m.store["head.params.w"].grad
    assert g is not None
    # all three output channels received gradient
    assert np.all(np.abs(g).sum(axis=0) > 0)


def test_distribute_points_on_plane(model, sample, seg):
    out = model.forward(sample.input_cloud, seg)
    t = model.config.points_per_primitive
    pts = out.points.values.reshape(-1, t, 3)
    assert pts.shape[0] == 40 and pts.shape[1] == 128
    for j, plane in enumerate(out.planes()):
        c = polar_to_cartesian(plane)
        assert np.max(np.abs(signed_distances(c, pts[j]))) < 1e-6


def test_distribute_points_gradient_wrt_radius():
    cfg = ModelConfig.tiny()
    m = CompletionModel(cfg)
    rng = np.random.default_rng(2)
    h = Tensor(rng.normal(size=(cfg.n_queries, cfg.feature_dim)))
    r = Tensor(rng.uniform(0.3, 0.6, size=cfg.n_queries), requires_grad=True)
    theta = Tensor(rng.uniform(0.5, 2.5, size=cfg.n_queries))
    phi = Tensor(rng.uniform(-2.0, 2.0, size=cfg.n_queries))
    pts = m.distribute_points(h, r, theta, phi)
    backward(dk.asum(pts))
    assert r.grad is not None and np.all(np.abs(r.grad) > 0)
    err = dk.grad_check(lambda t: dk.asum(m.distribute_points(h, t, theta, phi)), r, eps=1e-6)
    assert err < 1e-4


def test_confidences_in_unit_interval(model, sample, seg):
    out = model.forward(sample.input_cloud, seg)
    assert np.all((out.kappa.values > 0) & (out.kappa.values < 1))
    selected = out.primitives(tau=0.5)
    assert len(selected) <= 40
    m = CompletionModel(ModelConfig(seed=2))
    m.store["head.confidence.w"].values[...] = 0.0
    m.store["head.confidence.b"].values[...] = 0.0
    out0 = m.forward(sample.input_cloud, seg)
    assert np.allclose(out0.kappa.values, 0.5)


def test_forward_deterministic(model, sample, seg):
    a = model.forward(sample.input_cloud, seg)
    b = model.forward(sample.input_cloud, seg)
    assert np.array_equal(a.points.values, b.points.values)
    assert np.array_equal(a.kappa.values, b.kappa.values)


def test_forward_output_contract(model, sample, seg):
    out = model.forward(sample.input_cloud, seg)
    prims = out.all_primitives()
    assert len(prims) == 40
    assert all(p.points.shape == (128, 3) for p in prims)
    ps = out.prediction_set()
    assert len(ps) == 40
    # prediction-set normals match the polar planes
    for j in range(0, 40, 7):
        n = unit_direction(out.theta.values[j], out.phi.values[j])
        assert np.allclose(ps.normal_stack.values[j], n, atol=1e-12)


def test_weights_round_trip(tmp_path, model, sample, seg):
    out1 = model.forward(sample.input_cloud, seg)
    path = tmp_path / "weights.bin"
    model.save_weights(path)
    clone = CompletionModel(ModelConfig(seed=99))
    clone.load_weights(path)
    out2 = clone.forward(sample.input_cloud, seg)
    assert np.array_equal(out1.points.values, out2.points.values)
