"""Shared point-cloud primitives: farthest point sampling, k-NN, nearest-neighbor scans."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def farthest_point_sample(points: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Indices of n farthest-point-sampled points, deterministic given the start index.

    Greedy max-min; ties resolve to the lowest index.  Selection is equivariant
    under rigid motion of the cloud because only pairwise distances enter.
    """
    pts = np.asarray(points, dtype=np.float64)
    m = pts.shape[0]
    if n >= m:
        return np.arange(m)
    chosen = np.empty(n, dtype=np.intp)
    chosen[0] = start
    d2 = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        cand = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(d2, cand, out=d2)
    return chosen


def knn_indices(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """(len(queries), k) indices of the k nearest points for each query."""
    tree = cKDTree(np.asarray(points, dtype=np.float64))
    _, idx = tree.query(np.asarray(queries, dtype=np.float64), k=k)
    if k == 1:
        idx = idx[:, None]
    return idx.astype(np.intp)


def nearest_neighbor(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbor in b for every row of a: (distances, indices).

    Brute force (argmin ties to the lowest index) below ~2e7 pairs, a k-d tree
    above it; both exact in double precision.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] * b.shape[0] > 20_000_000:
        tree = cKDTree(b)
        d, idx = tree.query(a)
        return d, idx.astype(np.intp)
    from ._kernels import nn_sqdist

    d2, idx = nn_sqdist(a, b)
    return np.sqrt(np.maximum(d2, 0.0)), idx.astype(np.intp)


def pca_normals(points: np.ndarray, k: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Per-point unit normals and curvature proxies from k-NN covariance.

    Curvature is the smallest-eigenvalue fraction of the local covariance trace.
    Normal signs are arbitrary (callers treat them as unoriented).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    k = min(k, n - 1)
    nbrs = knn_indices(pts, pts, k + 1)  # includes self
    local = pts[nbrs]  # (n, k+1, 3)
    centered = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    w, v = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = v[:, :, 0]
    norms = np.linalg.norm(normals, axis=1)
    norms[norms == 0] = 1.0
    normals = normals / norms[:, None]
    trace = w.sum(axis=1)
    trace[trace <= 0] = 1.0
    curvature = w[:, 0] / trace
    return normals, curvature
