"""planecomp: parametric plane-primitive completion for incomplete point clouds.

Recovers plane primitives (parameters plus inlier points) from partial point
clouds with a trainable set-prediction pipeline, assembles the selected
primitives into a polygonal mesh, and evaluates the result (chamfer/Hausdorff
distance, normal consistency, failure rate).  Ships with a procedural
generator for plane-only benchmark shapes.
"""

__version__ = "0.1.0"

from .geom import (  # noqa: F401
    CartesianPlane,
    PlanePrimitive,
    PolarPlane,
    cartesian_to_polar,
    point_from_angles,
    polar_to_cartesian,
    radius_from_angles,
    signed_distance,
)
