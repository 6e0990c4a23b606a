"""Hot numeric kernels with a numba fast path and pure-numpy fallbacks.

The parallel kernels partition their output by the outer loop index, so every
element is written by exactly one thread and results are bit-deterministic
regardless of scheduling.
"""

from __future__ import annotations

import numpy as np

try:  # pragma: no cover - exercised implicitly everywhere
    from numba import njit, prange

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap

    prange = range


@njit(parallel=True, cache=True)
def _group_min_sqdist(gt, starts, pred):  # pragma: no cover - compiled
    """gt: (nG, 3) rows grouped contiguously by `starts`; pred: (M, T, 3).

    Returns (A, A_idx, B, B_idx):
    A[i, j]      = min_t ||gt_i - pred_{j,t}||^2, A_idx the winning t;
    B[g, j, t]   = min over gt rows of group g of ||gt_i - pred_{j,t}||^2,
    B_idx the winning global gt row.  Ties resolve to the lowest index.
    """
    n_g = gt.shape[0]
    m, t = pred.shape[0], pred.shape[1]
    n_groups = starts.shape[0] - 1
    a = np.empty((n_g, m))
    a_idx = np.empty((n_g, m), dtype=np.int64)
    b = np.empty((n_groups, m, t))
    b_idx = np.empty((n_groups, m, t), dtype=np.int64)
    for j in prange(m):
        px = np.empty(t)
        py = np.empty(t)
        pz = np.empty(t)
        for tt in range(t):
            px[tt] = pred[j, tt, 0]
            py[tt] = pred[j, tt, 1]
            pz[tt] = pred[j, tt, 2]
        d2row = np.empty(t)
        for g in range(n_groups):
            brow = b[g, j]
            birow = b_idx[g, j]
            for tt in range(t):
                brow[tt] = np.inf
                birow[tt] = starts[g]
            for i in range(starts[g], starts[g + 1]):
                gx, gy, gz = gt[i, 0], gt[i, 1], gt[i, 2]
                best = np.inf
                best_t = 0
                for tt in range(t):
                    dx = gx - px[tt]
                    dy = gy - py[tt]
                    dz = gz - pz[tt]
                    d2row[tt] = dx * dx + dy * dy + dz * dz
                for tt in range(t):
                    if d2row[tt] < best:
                        best = d2row[tt]
                        best_t = tt
                    if d2row[tt] < brow[tt]:
                        brow[tt] = d2row[tt]
                        birow[tt] = i
                a[i, j] = best
                a_idx[i, j] = best_t
    return a, a_idx, b, b_idx


@njit(parallel=True, cache=True)
def _nn_sqdist(a, b):  # pragma: no cover - compiled
    """Per row of a: (min squared distance to b, argmin index, ties to lowest index)."""
    n = a.shape[0]
    m = b.shape[0]
    bx = np.empty(m)
    by = np.empty(m)
    bz = np.empty(m)
    for j in range(m):
        bx[j] = b[j, 0]
        by[j] = b[j, 1]
        bz[j] = b[j, 2]
    dist = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    for i in prange(n):
        ax, ay, az = a[i, 0], a[i, 1], a[i, 2]
        best = np.inf
        best_j = 0
        for j in range(m):
            dx = ax - bx[j]
            dy = ay - by[j]
            dz = az - bz[j]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
                best_j = j
        dist[i] = best
        idx[i] = best_j
    return dist, idx


def group_min_sqdist(gt: np.ndarray, starts: np.ndarray, pred: np.ndarray):
    """Dispatch to the compiled kernel; numpy fallback mirrors its semantics."""
    gt = np.ascontiguousarray(gt, dtype=np.float64)
    pred = np.ascontiguousarray(pred, dtype=np.float64)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    if _HAVE_NUMBA:
        return _group_min_sqdist(gt, starts, pred)
    m, t = pred.shape[0], pred.shape[1]
    n_groups = len(starts) - 1
    flat = pred.reshape(m * t, 3)
    d2 = (
        np.sum(gt * gt, axis=1)[:, None]
        + np.sum(flat * flat, axis=1)[None, :]
        - 2.0 * gt @ flat.T
    )
    np.maximum(d2, 0.0, out=d2)
    cube = d2.reshape(len(gt), m, t)
    a_idx = cube.argmin(axis=2)
    a = np.take_along_axis(cube, a_idx[:, :, None], axis=2)[:, :, 0]
    b = np.empty((n_groups, m, t))
    b_idx = np.empty((n_groups, m, t), dtype=np.int64)
    for g in range(n_groups):
        block = d2[starts[g]:starts[g + 1]]
        rows = block.argmin(axis=0)
        b[g] = np.take_along_axis(block, rows[None, :], axis=0)[0].reshape(m, t)
        b_idx[g] = (rows + starts[g]).reshape(m, t)
    return a, a_idx.astype(np.int64), b, b_idx


@njit(parallel=True, cache=True)
def _rep_neighbors_kernel(pts, k):  # pragma: no cover - compiled
    """pts: (M, T, 3); per point, indices of its k nearest neighbors (self excluded)."""
    m, t = pts.shape[0], pts.shape[1]
    nbr = np.empty((m, t, k), dtype=np.int64)
    for j in prange(m):
        for i in range(t):
            xi, yi, zi = pts[j, i, 0], pts[j, i, 1], pts[j, i, 2]
            heap_d = np.full(k, np.inf)
            heap_i = np.zeros(k, dtype=np.int64)
            for o in range(t):
                if o == i:
                    continue
                dx = xi - pts[j, o, 0]
                dy = yi - pts[j, o, 1]
                dz = zi - pts[j, o, 2]
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < heap_d[k - 1]:
                    pos = k - 1
                    while pos > 0 and heap_d[pos - 1] > d2:
                        heap_d[pos] = heap_d[pos - 1]
                        heap_i[pos] = heap_i[pos - 1]
                        pos -= 1
                    heap_d[pos] = d2
                    heap_i[pos] = o
            for q in range(k):
                nbr[j, i, q] = heap_i[q]
    return nbr


def rep_neighbors(pts: np.ndarray, k: int) -> np.ndarray:
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if _HAVE_NUMBA:
        return _rep_neighbors_kernel(pts, k)
    sq = np.einsum("mtd,mtd->mt", pts, pts)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * np.einsum("mtd,msd->mts", pts, pts)
    np.maximum(d2, 0.0, out=d2)
    t = pts.shape[1]
    eye = np.arange(t)
    d2[:, eye, eye] = np.inf
    part = np.argpartition(d2, k - 1, axis=2)[:, :, :k]
    order = np.take_along_axis(d2, part, axis=2).argsort(axis=2, kind="stable")
    return np.take_along_axis(part, order, axis=2)


def nn_sqdist(a: np.ndarray, b: np.ndarray):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if _HAVE_NUMBA and a.shape[0] * b.shape[0] > 200_000:
        return _nn_sqdist(a, b)
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    j = np.argmin(d2, axis=1)
    best = np.sum((a - b[j]) ** 2, axis=1)
    return best, j.astype(np.int64)
