"""Plane representations and the spherical-angle radius recovery used to put points on planes.

A plane is stored either in polar form (distance ``r`` from the origin plus the
spherical angles of its unit normal) or in Cartesian form ``n . x = d``.  The
polar form avoids the degeneracies of ``z = ax + by + c`` style parametrizations
for planes parallel to coordinate axes.

Convention: the unit direction for angles (theta, phi) is

    u(theta, phi) = (sin(theta) cos(phi), sin(theta) sin(phi), cos(theta))

with theta in [0, pi] measured from +z and phi in [-pi, pi).  The plane described
by (r, theta, phi) is {x : u(theta, phi) . x = r}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Object geometry is normalized to unit bounding-box diagonal, so these are
# ~1e-6 of object scale.
EPS_RADIUS = 1e-6
EPS_DENOM = 1e-6

Point3 = np.ndarray  # shape (3,), finite components


class ParallelDirection(ValueError):
    """Ray direction parallel to the plane: the radius formula has no solution."""


def unit_direction(theta: float, phi: float) -> np.ndarray:
    """Unit vector for spherical angles (theta from +z, phi azimuth)."""
    st = np.sin(theta)
    return np.array([st * np.cos(phi), st * np.sin(phi), np.cos(theta)])


@dataclass(frozen=True)
class PolarPlane:
    """Plane as distance from origin plus normal direction angles.

    r >= 0, theta in [0, pi], phi in [-pi, pi).
    """

    r: float
    theta: float
    phi: float

    def __post_init__(self):
        if not (np.isfinite(self.r) and np.isfinite(self.theta) and np.isfinite(self.phi)):
            raise ValueError("plane parameters must be finite")
        if self.r < 0:
            raise ValueError(f"r must be nonnegative, got {self.r}")
        if not (0.0 <= self.theta <= np.pi):
            raise ValueError(f"theta must be in [0, pi], got {self.theta}")
        if not (-np.pi <= self.phi < np.pi):
            raise ValueError(f"phi must be in [-pi, pi), got {self.phi}")

    def direction(self) -> np.ndarray:
        return unit_direction(self.theta, self.phi)

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.theta, self.phi])


@dataclass(frozen=True)
class CartesianPlane:
    """Plane {x : normal . x = offset} with unit normal.

    Canonical form keeps offset >= 0; for planes through the origin the normal
    sign is fixed so its first nonzero component is positive.
    """

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if n.shape != (3,):
            raise ValueError(f"normal must have shape (3,), got {n.shape}")
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ValueError("normal must be unit length within 1e-12")
        object.__setattr__(self, "normal", n)

    def __eq__(self, other):
        if not isinstance(other, CartesianPlane):
            return NotImplemented
        return bool(np.array_equal(self.normal, other.normal) and self.offset == other.offset)

    def __hash__(self):
        return hash((self.normal.tobytes(), self.offset))


@dataclass
class PlanePrimitive:
    """A plane with its inlier points and a confidence score.

    ``indices`` optionally records where the inliers live in an owning cloud
    (ground-truth partitions, completion outputs written next to a PLY).
    """

    plane: PolarPlane
    points: np.ndarray  # (n, 3)
    confidence: float = 1.0
    indices: np.ndarray | None = field(default=None)

    def normal(self) -> np.ndarray:
        return self.plane.direction()


def canonicalize_normal(n: np.ndarray, d: float) -> tuple[np.ndarray, float]:
    """Flip (n, d) so that d >= 0; for d ~ 0 make the first nonzero component of n positive."""
    if d < -EPS_RADIUS:
        return -n, -d
    if abs(d) <= EPS_RADIUS:
        for c in n:
            if abs(c) > EPS_RADIUS:
                if c < 0:
                    return -n, -d
                break
        return n, d
    return n, d


def polar_to_cartesian(p: PolarPlane) -> CartesianPlane:
    """Convert (r, theta, phi) to {x : n . x = d} with n = u(theta, phi), d = r."""
    return CartesianPlane(normal=unit_direction(p.theta, p.phi), offset=float(p.r))


def cartesian_to_polar(c: CartesianPlane) -> tuple[PolarPlane, bool]:
    """Convert a Cartesian plane to polar form.

    Returns (plane, degenerate): ``degenerate`` is True for planes passing
    through the origin (offset < EPS_RADIUS), where the normal orientation is
    ambiguous; the canonical sign (first nonzero component positive) is used
    and r is clamped to 0.
    """
    n = np.asarray(c.normal, dtype=float)
    d = float(c.offset)
    n, d = canonicalize_normal(n, d)
    degenerate = abs(d) < EPS_RADIUS
    if degenerate:
        d = 0.0
    theta = float(np.arccos(np.clip(n[2], -1.0, 1.0)))
    if np.sin(theta) < EPS_RADIUS:
        phi = 0.0  # azimuth undefined at the poles
    else:
        phi = float(np.arctan2(n[1], n[0]))
        if phi >= np.pi:  # atan2 returns (-pi, pi]; canonical range is [-pi, pi)
            phi = -np.pi
    return PolarPlane(r=d, theta=theta, phi=phi), degenerate


def radius_from_angles(plane: PolarPlane, theta_ij: float, phi_ij: float) -> float:
    """Radius at which the ray u(theta_ij, phi_ij) meets the plane.

    The denominator equals u(theta_i, phi_i) . u(theta_ij, phi_ij), so the
    returned radius satisfies the plane equation exactly in real arithmetic.
    """
    denom = (
        np.cos(phi_ij - plane.phi) * np.sin(theta_ij) * np.sin(plane.theta)
        + np.cos(theta_ij) * np.cos(plane.theta)
    )
    if abs(denom) <= EPS_DENOM:
        raise ParallelDirection(
            f"direction (theta={theta_ij}, phi={phi_ij}) is parallel to the plane (|D|={abs(denom):.2e})"
        )
    return float(plane.r / denom)


def point_from_angles(plane: PolarPlane, theta_ij: float, phi_ij: float) -> Point3:
    """Materialize the on-plane point at ray angles (theta_ij, phi_ij)."""
    r = radius_from_angles(plane, theta_ij, phi_ij)
    return r * unit_direction(theta_ij, phi_ij)


def signed_distance(c: CartesianPlane, p: Point3) -> float:
    """n . p - d; positive on the side the normal points toward."""
    return float(np.dot(c.normal, np.asarray(p, dtype=float)) - c.offset)


def signed_distances(c: CartesianPlane, points: np.ndarray) -> np.ndarray:
    """Vectorized signed_distance over an (n, 3) array."""
    return np.asarray(points, dtype=float) @ c.normal - c.offset
