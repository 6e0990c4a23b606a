import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planecomp.geom import (
    CartesianPlane,
    ParallelDirection,
    PolarPlane,
    cartesian_to_polar,
    point_from_angles,
    polar_to_cartesian,
    radius_from_angles,
    signed_distance,
    unit_direction,
)


def test_polar_to_cartesian_axis_aligned():
    c = polar_to_cartesian(PolarPlane(1.0, np.pi / 2, 0.0))
    assert np.allclose(c.normal, [1, 0, 0], atol=1e-15)
    assert c.offset == 1.0


def test_polar_to_cartesian_pole():
    c = polar_to_cartesian(PolarPlane(0.5, 0.0, 0.0))
    assert np.allclose(c.normal, [0, 0, 1], atol=1e-15)
    assert c.offset == 0.5


def test_polar_to_cartesian_oblique():
    # oracle: evaluate u(theta, phi) numerically and verify unit norm
    c = polar_to_cartesian(PolarPlane(1.0, np.pi / 4, np.pi / 2))
    s2 = np.sqrt(2) / 2
    assert np.allclose(c.normal, [0, s2, s2], atol=1e-12)
    assert abs(np.linalg.norm(c.normal) - 1.0) < 1e-12
    assert c.offset == 1.0


def test_cartesian_to_polar_basic():
    p, deg = cartesian_to_polar(CartesianPlane(np.array([1.0, 0, 0]), 1.0))
    assert not deg
    assert np.allclose([p.r, p.theta, p.phi], [1.0, np.pi / 2, 0.0], atol=1e-12)


def test_cartesian_to_polar_pole_phi_zero():
    p, deg = cartesian_to_polar(CartesianPlane(np.array([0.0, 0, 1.0]), 0.3))
    assert not deg
    assert np.allclose([p.r, p.theta, p.phi], [0.3, 0.0, 0.0], atol=1e-12)


def test_cartesian_to_polar_degenerate_through_origin():
    p, deg = cartesian_to_polar(CartesianPlane(np.array([0.0, 1.0, 0]), 0.0))
    assert deg
    assert np.allclose([p.r, p.theta, p.phi], [0.0, np.pi / 2, np.pi / 2], atol=1e-12)
    # round-trip oracle: converting back reproduces the canonical plane
    c = polar_to_cartesian(p)
    assert np.allclose(c.normal, [0, 1, 0], atol=1e-12)
    assert abs(c.offset) < 1e-12


def test_radius_identity_case_is_exact():
    plane = PolarPlane(1.0, np.pi / 2, 0.0)
    assert radius_from_angles(plane, np.pi / 2, 0.0) == 1.0


def test_radius_oblique_case():
    # oracle: substitute the materialized point into the plane equation
    plane = PolarPlane(1.0, np.pi / 2, 0.0)
    r = radius_from_angles(plane, np.pi / 2, np.pi / 4)
    assert abs(r - np.sqrt(2)) < 1e-12
    pt = r * unit_direction(np.pi / 2, np.pi / 4)
    assert np.allclose(pt, [1, 1, 0], atol=1e-12)
    c = polar_to_cartesian(plane)
    assert abs(signed_distance(c, pt)) < 1e-9


def test_radius_parallel_direction_raises():
    plane = PolarPlane(1.0, np.pi / 2, 0.0)
    with pytest.raises(ParallelDirection):
        radius_from_angles(plane, np.pi / 2, np.pi / 2)


def test_point_from_angles_examples():
    plane = PolarPlane(1.0, np.pi / 2, 0.0)
    assert np.allclose(point_from_angles(plane, np.pi / 2, 0.0), [1, 0, 0], atol=1e-12)
    assert np.allclose(point_from_angles(plane, np.pi / 2, np.pi / 4), [1, 1, 0], atol=1e-12)
    pole = PolarPlane(0.5, 0.0, 0.0)
    assert np.allclose(point_from_angles(pole, 0.0, 0.0), [0, 0, 0.5], atol=1e-12)


def test_signed_distance_examples():
    c = CartesianPlane(np.array([1.0, 0, 0]), 1.0)
    assert signed_distance(c, np.array([1.0, 5.0, -2.0])) == 0.0
    assert signed_distance(c, np.zeros(3)) == -1.0
    s2 = np.sqrt(2) / 2
    c2 = CartesianPlane(np.array([0.0, s2, s2]), 1.0)
    p = np.array([0.0, np.sqrt(2), 0.0])
    # oracle: plain dot product
    assert abs(signed_distance(c2, p) - (np.dot(c2.normal, p) - 1.0)) < 1e-15
    assert abs(signed_distance(c2, p)) < 1e-12


@given(
    r=st.floats(0.01, 2.0),
    theta=st.floats(0.0, np.pi),
    phi=st.floats(-np.pi, np.pi, exclude_max=True),
)
@settings(max_examples=200, deadline=None)
def test_round_trip_polar_cartesian(r, theta, phi):
    p = PolarPlane(r, theta, phi)
    c = polar_to_cartesian(p)
    p2, deg = cartesian_to_polar(c)
    assert not deg
    c2 = polar_to_cartesian(p2)
    assert np.allclose(c.normal, c2.normal, atol=1e-9)
    assert abs(c.offset - c2.offset) < 1e-9


@given(data=st.data())
@settings(max_examples=200, deadline=None)
def test_on_plane_property(data):
    r = data.draw(st.floats(0.05, 2.0))
    theta = data.draw(st.floats(0.0, np.pi))
    phi = data.draw(st.floats(-np.pi, np.pi, exclude_max=True))
    plane = PolarPlane(r, theta, phi)
    tij = data.draw(st.floats(0.0, np.pi))
    pij = data.draw(st.floats(-np.pi, np.pi, exclude_max=True))
    c = polar_to_cartesian(plane)
    try:
        pt = point_from_angles(plane, tij, pij)
    except ParallelDirection:
        return
    assert abs(signed_distance(c, pt)) < 1e-9 * max(1.0, abs(plane.r / 1e-6))


def test_range_invariant_random_normals():
    rng = np.random.default_rng(7)
    for _ in range(500):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        d = float(rng.uniform(-1, 1))
        nn, dd = (n, d) if d >= 0 else (-n, -d)
        p, _ = cartesian_to_polar(CartesianPlane(nn, dd))
        assert p.r >= 0
        assert 0 <= p.theta <= np.pi
        assert -np.pi <= p.phi < np.pi


def test_invalid_polar_plane_rejected():
    with pytest.raises(ValueError):
        PolarPlane(-0.1, 0.5, 0.0)
    with pytest.raises(ValueError):
        PolarPlane(1.0, 4.0, 0.0)
    with pytest.raises(ValueError):
        PolarPlane(1.0, 0.5, np.pi)
