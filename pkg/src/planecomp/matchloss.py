"""Bipartite matching of predicted vs padded ground-truth primitives, and the training losses.

Matching assigns every ground-truth slot (real primitives padded with
no-primitive slots) to a distinct prediction by minimum total cost; the cost of
a real pair combines a classification term with normal-, chamfer- and
repulsion-based geometric terms, while a no-primitive slot costs only its
down-weighted classification term.  The assignment is computed on detached
values (it is piecewise constant); losses are then evaluated on the matched
pairs with gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import diffkit as dk
from .diffkit import Tensor
from .geom import PlanePrimitive
from .pointops import nearest_neighbor

_KAPPA_EPS = 1e-7


class EmptySet(ValueError):
    """A point set that must be nonempty is empty."""


class NonUnit(ValueError):
    """A vector that must be unit length is not."""


class TooFewPoints(ValueError):
    """Repulsion needs more points than neighbors."""


@dataclass
class LossWeights:
    """Weights for the matching cost and total objective.

    beta_cp and beta_co default to 20 and beta_rep to 2; the no-primitive
    classification term is down-weighted by 0.4.  The normal-loss scale inside
    the term is lam; omega and rep_k shape the repulsion kernel.
    """

    beta_norm: float = 1.0
    beta_cp: float = 20.0
    beta_rep: float = 2.0
    beta_co: float = 20.0
    null_weight: float = 0.4
    lam: float = 1.0
    omega: float = 100.0
    rep_k: int = 4


@dataclass
class MatchResult:
    """Optimal assignment of predictions to (padded) ground-truth slots."""

    sigma: np.ndarray  # sigma[i] = prediction index assigned to gt slot i
    is_real: np.ndarray  # (M,) bool, True where the slot holds a real primitive
    cost: np.ndarray  # (M, M) cost matrix the assignment was computed on

    def total_cost(self) -> float:
        return float(self.cost[np.arange(len(self.sigma)), self.sigma].sum())


@dataclass
class LossBreakdown:
    cls: float
    norm: float
    cp: float
    co: float
    rep: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "cls": self.cls, "norm": self.norm, "cp": self.cp,
            "co": self.co, "rep": self.rep, "total": self.total,
        }


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _is_grad(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def chamfer(a, b):
    """Symmetric chamfer distance: 0.5 * (mean min ||a-b|| + mean min ||b-a||).

    Accepts numpy arrays or diffkit tensors of shape (n, 3); returns a float
    for plain arrays, a scalar graph node if either side carries gradients.
    Gradients route to the unique nearest neighbor (ties to the lowest index).
    """
    av, bv = _values(a), _values(b)
    if av.shape[0] == 0 or bv.shape[0] == 0:
        raise EmptySet("chamfer requires nonempty point sets")
    d_ab, i_ab = nearest_neighbor(av, bv)
    d_ba, i_ba = nearest_neighbor(bv, av)
    value = 0.5 * (d_ab.mean() + d_ba.mean())
    if not (_is_grad(a) or _is_grad(b)):
        return float(value)

    na, nb = av.shape[0], bv.shape[0]

    def backward(g):
        g = float(g)
        ga = gb = None
        with np.errstate(invalid="ignore", divide="ignore"):
            dir_ab = np.where(d_ab[:, None] > 0, (av - bv[i_ab]) / np.where(d_ab[:, None] > 0, d_ab[:, None], 1.0), 0.0)
            dir_ba = np.where(d_ba[:, None] > 0, (bv - av[i_ba]) / np.where(d_ba[:, None] > 0, d_ba[:, None], 1.0), 0.0)
        if _is_grad(a):
            ga = 0.5 * g / na * dir_ab
            back = np.zeros_like(av)
            np.add.at(back, i_ba, -0.5 * g / nb * dir_ba)
            ga = ga + back
        if _is_grad(b):
            gb = 0.5 * g / nb * dir_ba
            back = np.zeros_like(bv)
            np.add.at(back, i_ab, -0.5 * g / na * dir_ab)
            gb = gb + back
        return ga, gb

    return dk.custom("chamfer", np.asarray(value), (a, b), backward)


def _clamp_unit_interval(kappa):
    """Clamp a confidence into [eps, 1-eps]; differentiable with slope 1 inside."""
    if isinstance(kappa, Tensor):
        lo = dk.relu(dk.sub(kappa, _KAPPA_EPS))
        inner = dk.add(lo, _KAPPA_EPS)
        over = dk.relu(dk.sub(inner, 1.0 - _KAPPA_EPS))
        return dk.sub(inner, over)
    return np.clip(kappa, _KAPPA_EPS, 1.0 - _KAPPA_EPS)


def loss_cls(kappa, is_real: bool, null_weight: float = 0.4):
    """-log kappa for real matches; down-weighted -log(1 - kappa) for no-primitive slots."""
    k = _clamp_unit_interval(kappa)
    if isinstance(k, Tensor):
        if is_real:
            return dk.mul(dk.log(k), -1.0)
        return dk.mul(dk.log(dk.sub(1.0, k)), -null_weight)
    if is_real:
        return float(-np.log(k))
    return float(-null_weight * np.log(1.0 - k))


def _check_unit(v: np.ndarray, name: str) -> None:
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise NonUnit(f"{name} must be unit length within 1e-9, |{name}|={np.linalg.norm(v)}")


def loss_norm(n, n_hat, lam: float = 1.0):
    """lam * (1 - cos angle(n, n_hat)) + ||n - n_hat||^2 for unit normals."""
    _check_unit(_values(n), "n")
    _check_unit(_values(n_hat), "n_hat")
    if _is_grad(n) or _is_grad(n_hat):
        cosang = dk.asum(dk.mul(n, n_hat))
        return dk.add(dk.mul(dk.sub(1.0, cosang), lam), dk.square_norm(dk.sub(n, n_hat)))
    nv, hv = _values(n), _values(n_hat)
    return float(lam * (1.0 - nv @ hv) + np.sum((nv - hv) ** 2))


def loss_cp(p: PlanePrimitive, p_hat):
    """Chamfer between the inlier sets of a matched primitive pair."""
    pts = p.points if isinstance(p, PlanePrimitive) else p
    hat = p_hat.points if isinstance(p_hat, PlanePrimitive) else p_hat
    return chamfer(pts, hat)


def loss_rep(points, k: int = 4, omega: float = 100.0):
    """Repulsion energy over the k nearest neighbors of each point (<= 0 for distinct points)."""
    vals = _values(points)
    t = vals.shape[0]
    if t <= k:
        raise TooFewPoints(f"repulsion needs more than k={k} points, got {t}")
    sq = np.sum(vals * vals, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (vals @ vals.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)
    nbr = np.argpartition(d2, k - 1, axis=1)[:, :k]
    np.fill_diagonal(d2, 0.0)
    if not _is_grad(points):
        sel = d2[np.arange(t)[:, None], nbr]
        d = np.sqrt(sel)
        return float(-np.sum(d * np.exp(-omega * sel)))
    flat_idx = (np.arange(t)[:, None] * t + nbr).ravel()
    sqd = _pairwise_sqdist_t(points, points)
    sel = dk.gather(dk.reshape(sqd, (t * t,)), flat_idx)
    d = dk.sqrt(sel)
    return dk.mul(dk.asum(dk.mul(d, dk.exp(dk.mul(sel, -omega)))), -1.0)


def _pairwise_sqdist_t(a: Tensor, b) -> Tensor:
    sqa = dk.square_norm(a, axis=1)
    sqb = dk.square_norm(b, axis=1) if isinstance(b, Tensor) else Tensor(np.sum(_values(b) ** 2, axis=1))
    cross = dk.matmul(a, dk.transpose(b) if isinstance(b, Tensor) else Tensor(_values(b).T))
    return dk.relu(dk.add(dk.outer_add(sqa, sqb), dk.mul(cross, -2.0)))


def chamfer_matrix(gt_groups: list[np.ndarray], pred_groups: list[np.ndarray]) -> np.ndarray:
    """(len(gt_groups), len(pred_groups)) chamfer distances."""
    lengths = {len(p) for p in pred_groups}
    if len(lengths) == 1 and next(iter(lengths)) > 0:
        return _chamfer_matrix_uniform(gt_groups, np.stack(pred_groups))
    return _chamfer_matrix_ragged(gt_groups, pred_groups)


@dataclass
class _GroupNN:
    """Grouped nearest-neighbor scan shared between matching and the loss terms."""

    gt_concat: np.ndarray  # (nG, 3)
    starts: np.ndarray  # (n_real + 1,)
    a: np.ndarray  # (nG, M) min sqdist gt -> prediction
    a_idx: np.ndarray  # winning prediction-local point index
    b: np.ndarray  # (n_real, M, T) min sqdist prediction point -> gt group
    b_idx: np.ndarray  # winning global gt row

    def chamfer_entries(self) -> np.ndarray:
        row_dist = np.sqrt(np.maximum(self.a, 0.0))
        sums = np.add.reduceat(row_dist, self.starts[:-1], axis=0)
        term1 = sums / np.diff(self.starts)[:, None]
        term2 = np.sqrt(np.maximum(self.b, 0.0)).mean(axis=2)
        return 0.5 * (term1 + term2)


def _group_nn(gt_groups: list[np.ndarray], pred: np.ndarray) -> _GroupNN:
    from ._kernels import group_min_sqdist

    gt_concat = np.ascontiguousarray(np.concatenate(gt_groups, axis=0))
    starts = np.concatenate([[0], np.cumsum([len(g) for g in gt_groups])]).astype(np.int64)
    a, a_idx, b, b_idx = group_min_sqdist(gt_concat, starts, pred)
    return _GroupNN(gt_concat=gt_concat, starts=starts, a=a, a_idx=a_idx, b=b, b_idx=b_idx)


def _chamfer_matrix_uniform(gt_groups: list[np.ndarray], pred: np.ndarray) -> np.ndarray:
    return _group_nn(gt_groups, pred).chamfer_entries()


def _chamfer_matrix_ragged(gt_groups: list[np.ndarray], pred_groups: list[np.ndarray]) -> np.ndarray:
    pred_concat = np.concatenate(pred_groups, axis=0)
    lengths = np.array([len(p) for p in pred_groups])
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    sq_pred = np.sum(pred_concat * pred_concat, axis=1)
    out = np.empty((len(gt_groups), len(pred_groups)))
    for gi, g in enumerate(gt_groups):
        d2 = np.sum(g * g, axis=1)[:, None] + sq_pred[None, :] - 2.0 * (g @ pred_concat.T)
        np.maximum(d2, 0.0, out=d2)
        # gt -> pred direction: min within each prediction segment, mean over gt points
        per_pred_min = np.minimum.reduceat(d2, starts, axis=1)
        term1 = np.sqrt(per_pred_min).mean(axis=0)
        # pred -> gt direction: min over this group's rows, mean per segment
        col_min = np.sqrt(d2.min(axis=0))
        seg_sums = np.add.reduceat(col_min, starts)
        term2 = seg_sums / lengths
        out[gi] = 0.5 * (term1 + term2)
    return out


def cost_matrix(gt_padded: list[PlanePrimitive | None], pred: list[PlanePrimitive],
                weights: LossWeights | None = None) -> np.ndarray:
    """Matching cost between padded ground-truth slots (rows) and predictions (columns).

    Real rows combine classification, normal, chamfer, and repulsion terms; for
    no-primitive rows only the down-weighted classification term is active.
    """
    w = weights or LossWeights()
    m = len(pred)
    if len(gt_padded) != m:
        raise ValueError(f"padded ground truth ({len(gt_padded)}) must match predictions ({m})")
    kappas = np.clip(np.array([p.confidence for p in pred], dtype=np.float64),
                     _KAPPA_EPS, 1.0 - _KAPPA_EPS)
    cls_real = -np.log(kappas)
    cls_null = -w.null_weight * np.log(1.0 - kappas)
    rep = np.array([loss_rep(p.points, k=w.rep_k, omega=w.omega) for p in pred])
    pred_normals = np.stack([p.normal() for p in pred])

    real_rows = [i for i, g in enumerate(gt_padded) if g is not None]
    cost = np.tile(cls_null, (m, 1))
    if real_rows:
        gt_groups = [np.asarray(gt_padded[i].points, dtype=np.float64) for i in real_rows]
        gt_normals = np.stack([gt_padded[i].normal() for i in real_rows])
        cp = chamfer_matrix(gt_groups, [np.asarray(p.points, dtype=np.float64) for p in pred])
        dots = gt_normals @ pred_normals.T
        norm_term = w.lam * (1.0 - dots) + (2.0 - 2.0 * dots)  # ||n - n_hat||^2 = 2 - 2 cos
        geo = w.beta_norm * norm_term + w.beta_cp * cp + w.beta_rep * rep[None, :]
        cost[real_rows] = cls_real[None, :] + geo
    if not np.all(np.isfinite(cost)):
        raise dk.NonFinite("cost matrix contains non-finite entries")
    return cost


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of rows to distinct columns (rows <= columns).

    Returns the lexicographically smallest optimal assignment: each row in
    order takes the lowest column index consistent with global optimality.
    """
    c = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise dk.NonFinite("cost matrix contains non-finite entries")
    n, m = c.shape
    if n > m:
        raise ValueError(f"rows ({n}) must not exceed columns ({m})")
    rows, cols = linear_sum_assignment(c)
    best = float(c[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))

    avail = list(range(m))
    sigma = np.empty(n, dtype=np.intp)
    remaining = best
    for i in range(n):
        for j in avail:
            if i + 1 < n:
                others = [x for x in avail if x != j]
                sub = c[np.ix_(range(i + 1, n), others)]
                rr, cc = linear_sum_assignment(sub)
                sub_total = float(sub[rr, cc].sum())
            else:
                sub_total = 0.0
            if c[i, j] + sub_total <= remaining + tol:
                sigma[i] = j
                avail.remove(j)
                remaining = sub_total
                break
        else:  # numerically impossible, but fail loudly rather than return garbage
            raise RuntimeError("no feasible column found during canonical assignment")
    return sigma


def match(gt_primitives: list[PlanePrimitive], pred_points: list[np.ndarray],
          pred_kappas: np.ndarray, pred_normals: np.ndarray,
          weights: LossWeights | None = None,
          precomputed_rep: np.ndarray | None = None) -> MatchResult:
    """Optimal slot assignment for training: real slots first, no-primitive padding after.

    Exploits the padded structure: the real block is solved as a rectangular
    assignment against columns rebated by their no-primitive cost, which is
    equivalent to the full square problem; remaining columns fill the padding
    slots in ascending order.
    """
    result, _ = _match_impl(gt_primitives, pred_points, pred_kappas, pred_normals,
                            weights or LossWeights(), precomputed_rep)
    return result


def _match_impl(gt_primitives, pred_points, pred_kappas, pred_normals,
                w: LossWeights, precomputed_rep=None) -> tuple[MatchResult, _GroupNN | None]:
    m = len(pred_points)
    n_real = len(gt_primitives)
    if n_real > m:
        raise ValueError(f"more ground-truth primitives ({n_real}) than predictions ({m})")
    for g in gt_primitives:
        if len(g.points) == 0:
            raise EmptySet("ground-truth primitive with no inliers")

    kappas = np.clip(np.asarray(pred_kappas, dtype=np.float64), _KAPPA_EPS, 1.0 - _KAPPA_EPS)
    cls_real = -np.log(kappas)
    cls_null = -w.null_weight * np.log(1.0 - kappas)
    if precomputed_rep is not None:
        rep = np.asarray(precomputed_rep, dtype=np.float64)
    else:
        rep = np.array([loss_rep(p, k=w.rep_k, omega=w.omega) for p in pred_points])

    cost = np.tile(cls_null, (m, 1))
    nn = None
    if n_real:
        gt_groups = [np.asarray(g.points, dtype=np.float64) for g in gt_primitives]
        gt_normals = np.stack([g.normal() for g in gt_primitives])
        if len({len(p) for p in pred_points}) == 1:
            nn = _group_nn(gt_groups, np.stack(pred_points))
            cp = nn.chamfer_entries()
        else:
            cp = _chamfer_matrix_ragged(gt_groups, pred_points)
        dots = gt_normals @ np.asarray(pred_normals, dtype=np.float64).T
        real_cost = (
            cls_real[None, :]
            + w.beta_norm * (w.lam * (1.0 - dots) + (2.0 - 2.0 * dots))
            + w.beta_cp * cp
            + w.beta_rep * rep[None, :]
        )
        cost[:n_real] = real_cost
    if not np.all(np.isfinite(cost)):
        raise dk.NonFinite("cost matrix contains non-finite entries")

    sigma = np.empty(m, dtype=np.intp)
    if n_real:
        rows, cols = linear_sum_assignment(cost[:n_real] - cls_null[None, :])
        sigma[:n_real][rows] = cols
        taken = set(int(x) for x in sigma[:n_real])
    else:
        taken = set()
    leftover = [j for j in range(m) if j not in taken]
    sigma[n_real:] = leftover
    is_real = np.zeros(m, dtype=bool)
    is_real[:n_real] = True
    return MatchResult(sigma=sigma, is_real=is_real, cost=cost), nn


@dataclass
class PredictionSet:
    """Predictions in loss-ready form: per-primitive points, confidences, unit normals.

    Entries may be plain arrays or diffkit tensors; gradients flow wherever a
    tensor requires them.
    """

    points: list  # each (T_j, 3)
    kappas: list  # scalars
    normals: list  # each (3,)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_primitives(cls, prims: list[PlanePrimitive]) -> "PredictionSet":
        return cls(
            points=[np.asarray(p.points, dtype=np.float64) for p in prims],
            kappas=[float(p.confidence) for p in prims],
            normals=[p.normal() for p in prims],
        )

    def detached(self) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
        pts = [_values(p) for p in self.points]
        kap = np.array([float(_values(k)) for k in self.kappas])
        nrm = np.stack([_values(n) for n in self.normals])
        return pts, kap, nrm


@dataclass
class StackedPredictions:
    """Uniform-size predictions kept as whole tensors (the model-output layout).

    Loss evaluation on this layout builds a compact graph: one vectorized node
    chain per term instead of per-primitive subgraphs.
    """

    points_stack: Tensor  # (M*T, 3), T consecutive rows per primitive
    kappa_stack: Tensor  # (M,)
    normal_stack: Tensor  # (M, 3)
    m: int
    t: int

    def __len__(self) -> int:
        return self.m


def loss_co(gt_primitives: list[PlanePrimitive], pred: PredictionSet, result: MatchResult):
    """Chamfer between the union of real ground-truth points and the matched predictions."""
    n_real = int(result.is_real.sum())
    if n_real == 0 or len(gt_primitives) == 0:
        raise EmptySet("overall chamfer needs at least one real pair")
    gt_union = np.concatenate([np.asarray(g.points, dtype=np.float64) for g in gt_primitives])
    matched = [pred.points[result.sigma[i]] for i in range(n_real)]
    if any(_is_grad(p) for p in matched):
        union = dk.concat(matched, axis=0)
    else:
        union = np.concatenate([_values(p) for p in matched], axis=0)
    return chamfer(gt_union, union)


def total_loss(gt_primitives: list[PlanePrimitive], pred,
               weights: LossWeights | None = None) -> tuple[LossBreakdown, MatchResult]:
    """Matched objective: sum of per-slot cls/norm/cp terms, repulsion over all
    predictions, and the overall chamfer term.

    Matching runs on detached values; the returned breakdown carries the graph
    node in ``tensor`` when predictions require gradients.
    """
    if isinstance(pred, StackedPredictions):
        return _total_loss_stacked(gt_primitives, pred, weights or LossWeights())
    w = weights or LossWeights()
    pts, kap, nrm = pred.detached()
    rep_terms = [loss_rep(p, k=w.rep_k, omega=w.omega) for p in pred.points]
    rep_vals = np.array([float(_values(t)) for t in rep_terms])
    result = match(gt_primitives, pts, kap, nrm, weights=w, precomputed_rep=rep_vals)

    m = len(pred)
    n_real = len(gt_primitives)
    cls_terms = []
    norm_terms = []
    cp_terms = []
    for i in range(m):
        j = int(result.sigma[i])
        cls_terms.append(loss_cls(pred.kappas[j], is_real=bool(result.is_real[i]),
                                  null_weight=w.null_weight))
        if result.is_real[i]:
            g = gt_primitives[i]
            norm_terms.append(loss_norm(g.normal(), pred.normals[j], lam=w.lam))
            cp_terms.append(loss_cp(g, pred.points[j]))
    co_term = loss_co(gt_primitives, pred, result) if n_real else 0.0

    def _accumulate(terms):
        if not terms:
            return 0.0
        if any(isinstance(t, Tensor) for t in terms):
            acc = None
            for t in terms:
                t = t if isinstance(t, Tensor) else Tensor(t)
                acc = t if acc is None else dk.add(acc, t)
            return acc
        return float(sum(terms))

    cls_s = _accumulate(cls_terms)
    norm_s = _accumulate(norm_terms)
    cp_s = _accumulate(cp_terms)
    rep_s = _accumulate(rep_terms)

    parts = [cls_s, norm_s, cp_s, rep_s, co_term]
    if any(isinstance(p, Tensor) for p in parts):
        def lift(x):
            return x if isinstance(x, Tensor) else Tensor(np.asarray(float(x)))

        total_t = dk.add(
            dk.add(lift(cls_s), dk.mul(lift(norm_s), w.beta_norm)),
            dk.add(
                dk.add(dk.mul(lift(cp_s), w.beta_cp), dk.mul(lift(rep_s), w.beta_rep)),
                dk.mul(lift(co_term), w.beta_co),
            ),
        )
        breakdown = LossBreakdown(
            cls=float(_values(cls_s)), norm=float(_values(norm_s)), cp=float(_values(cp_s)),
            co=float(_values(co_term)), rep=float(_values(rep_s)),
            total=float(total_t.values), tensor=total_t,
        )
    else:
        total = cls_s + w.beta_norm * norm_s + w.beta_cp * cp_s + w.beta_rep * rep_s + w.beta_co * co_term
        breakdown = LossBreakdown(cls=cls_s, norm=norm_s, cp=cp_s, co=float(co_term),
                                  rep=rep_s, total=total)
    return breakdown, result


def _safe_unit(diff: np.ndarray, dist: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(dist[:, None] > 0, diff / np.where(dist[:, None] > 0, dist[:, None], 1.0), 0.0)


def _cp_node_from_nn(stack: Tensor, pts_vals: np.ndarray, nn: _GroupNN, slot: int,
                     j: int, t: int):
    """Per-pair chamfer as a graph node, reusing the matching scan's argmins."""
    lo, hi = nn.starts[slot], nn.starts[slot + 1]
    d_ab = np.sqrt(np.maximum(nn.a[lo:hi, j], 0.0))
    t_ab = nn.a_idx[lo:hi, j]
    d_ba = np.sqrt(np.maximum(nn.b[slot, j], 0.0))
    r_ba = nn.b_idx[slot, j]
    value = 0.5 * (d_ab.mean() + d_ba.mean())
    gt_rows = nn.gt_concat[lo:hi]
    m_total = stack.values.shape[0]

    def backward(g):
        g = float(g)
        grad = np.zeros((m_total, 3))
        unit_ab = _safe_unit(pts_vals[j][t_ab] - gt_rows, d_ab)
        np.add.at(grad, j * t + t_ab, 0.5 * g / len(d_ab) * unit_ab)
        unit_ba = _safe_unit(pts_vals[j] - nn.gt_concat[r_ba], d_ba)
        grad[j * t:(j + 1) * t] += 0.5 * g / t * unit_ba
        return (grad,)

    return dk.custom("chamfer", np.asarray(value), (stack,), backward)


def _co_node_from_nn(stack: Tensor, pts_vals: np.ndarray, nn: _GroupNN,
                     matched: np.ndarray, t: int):
    """Overall chamfer (gt union vs matched-prediction union) from the shared scan."""
    a_sub = nn.a[:, matched]  # (nG, n_real)
    jm = np.argmin(a_sub, axis=1)
    rows = np.arange(a_sub.shape[0])
    d_ab = np.sqrt(np.maximum(a_sub[rows, jm], 0.0))
    win_j = matched[jm]
    win_t = nn.a_idx[rows, win_j]
    b_sub = nn.b[:, matched, :]  # (n_real_groups, n_matched, T)
    gm = np.argmin(b_sub, axis=0)  # (n_matched, T)
    d_ba = np.sqrt(np.maximum(np.take_along_axis(b_sub, gm[None], axis=0)[0], 0.0))
    row_ba = np.take_along_axis(nn.b_idx[:, matched, :], gm[None], axis=0)[0]
    value = 0.5 * (d_ab.mean() + d_ba.mean())
    m_total = stack.values.shape[0]
    n_union = d_ba.size

    def backward(g):
        g = float(g)
        grad = np.zeros((m_total, 3))
        pred_rows = win_j * t + win_t
        unit_ab = _safe_unit(stack.values[pred_rows] - nn.gt_concat, d_ab)
        np.add.at(grad, pred_rows, 0.5 * g / len(d_ab) * unit_ab)
        for mi, j in enumerate(matched):
            unit_ba = _safe_unit(pts_vals[j] - nn.gt_concat[row_ba[mi]], d_ba[mi])
            grad[j * t:(j + 1) * t] += 0.5 * g / n_union * unit_ba
        return (grad,)

    return dk.custom("chamfer", np.asarray(value), (stack,), backward)


def _total_loss_stacked(gt_primitives: list[PlanePrimitive], sp: StackedPredictions,
                        w: LossWeights) -> tuple[LossBreakdown, MatchResult]:
    from ._kernels import rep_neighbors

    m, t = sp.m, sp.t
    if t <= w.rep_k:
        raise TooFewPoints(f"repulsion needs more than k={w.rep_k} points per primitive, got {t}")
    pts_vals = sp.points_stack.values.reshape(m, t, 3)
    kap_vals = sp.kappa_stack.values
    nrm_vals = sp.normal_stack.values
    n_real = len(gt_primitives)

    # repulsion: neighbor selection detached, one vectorized graph chain for all primitives
    nbr = rep_neighbors(pts_vals, w.rep_k)
    rows_global = np.repeat(np.arange(m * t), w.rep_k)
    nbr_global = (nbr + (np.arange(m) * t)[:, None, None]).reshape(-1)
    pa = dk.gather(sp.points_stack, rows_global)
    pb = dk.gather(sp.points_stack, nbr_global)
    sqd = dk.square_norm(dk.sub(pa, pb), axis=1)
    rep_t = dk.mul(dk.asum(dk.mul(dk.sqrt(sqd), dk.exp(dk.mul(sqd, -w.omega)))), -1.0)
    per_pair = sqd.values.reshape(m, t * w.rep_k)
    rep_vals = -np.sum(np.sqrt(per_pair) * np.exp(-w.omega * per_pair), axis=1)

    pts_list = [pts_vals[j] for j in range(m)]
    result, nn = _match_impl(gt_primitives, pts_list, kap_vals, nrm_vals, w,
                             precomputed_rep=rep_vals)

    # classification, vectorized by prediction index
    real_mask = np.zeros(m)
    real_mask[result.sigma[:n_real]] = 1.0
    kc = _clamp_unit_interval(sp.kappa_stack)
    cls_t = dk.add(
        dk.asum(dk.mul(dk.log(kc), -real_mask)),
        dk.asum(dk.mul(dk.log(dk.sub(1.0, kc)), -w.null_weight * (1.0 - real_mask))),
    )

    if n_real:
        gt_norms = np.stack([g.normal() for g in gt_primitives])
        for i, g in enumerate(gt_norms):
            _check_unit(g, f"gt normal {i}")
        matched_rows = dk.gather(sp.normal_stack, result.sigma[:n_real])
        dots = dk.asum(dk.mul(matched_rows, gt_norms), axis=1)
        norm_t = dk.add(
            dk.mul(dk.sub(float(n_real), dk.asum(dots)), w.lam),
            dk.asum(dk.square_norm(dk.sub(matched_rows, gt_norms), axis=1)),
        )
        cp_t = None
        for i in range(n_real):
            term = _cp_node_from_nn(sp.points_stack, pts_vals, nn, i,
                                    int(result.sigma[i]), t)
            cp_t = term if cp_t is None else dk.add(cp_t, term)
        co_t = _co_node_from_nn(sp.points_stack, pts_vals, nn,
                                np.asarray(result.sigma[:n_real]), t)
    else:
        norm_t = Tensor(np.asarray(0.0))
        cp_t = Tensor(np.asarray(0.0))
        co_t = Tensor(np.asarray(0.0))

    total_t = dk.add(
        dk.add(cls_t, dk.mul(norm_t, w.beta_norm)),
        dk.add(
            dk.add(dk.mul(cp_t, w.beta_cp), dk.mul(rep_t, w.beta_rep)),
            dk.mul(co_t, w.beta_co),
        ),
    )
    breakdown = LossBreakdown(
        cls=float(cls_t.values), norm=float(_values(norm_t)), cp=float(_values(cp_t)),
        co=float(_values(co_t)), rep=float(rep_t.values), total=float(total_t.values),
        tensor=total_t,
    )
    return breakdown, result
