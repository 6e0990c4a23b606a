"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Small by design: explicit shapes only (no broadcasting beyond scalar-with-tensor),
2D matmul, and a fixed set of elementwise / reduction / gather kernels.  Every
forward op validates finiteness, and every kernel's gradient is exercised
against central differences in the test suite.

A ``Tensor`` wraps a numpy array plus an accumulated gradient and its link into
the computation graph.  Gradients accumulate across ``backward`` calls until
explicitly zeroed.  Graphs are single-writer; independent graphs may live on
different threads.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFinite(FloatingPointError):
    """A forward op produced NaN or Inf values."""


class NotScalar(ValueError):
    """backward() requires a scalar loss tensor."""


class FormatError(ValueError):
    """Parameter file is malformed or incompatible."""


def _as_values(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFinite(f"op '{op}' produced non-finite values")


class Tensor:
    """Dense real array with an accumulated gradient and graph linkage."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}{tag})"

    # operator sugar; all route through the module-level kernels
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def _node(op: str, values: np.ndarray, parents: Sequence, backward: Callable | None) -> Tensor:
    _check_finite(values, op)
    tracked = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
    if tracked:
        return Tensor(values, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(values)


def _is_scalar_operand(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape or a.ndim == 0 or b.ndim == 0


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # collapse a gradient onto a scalar operand
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    raise ShapeMismatch(f"cannot reduce grad {g.shape} to {shape}")


def _binary(op: str, a, b, fwd, bwd_a, bwd_b) -> Tensor:
    av, bv = _as_values(a), _as_values(b)
    if not _is_scalar_operand(av, bv):
        raise ShapeMismatch(f"{op}: shapes {av.shape} and {bv.shape} do not conform")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = fwd(av, bv)

    def backward(g):
        ga = _reduce_to(bwd_a(g, av, bv), av.shape) if isinstance(a, Tensor) and a.requires_grad else None
        gb = _reduce_to(bwd_b(g, av, bv), bv.shape) if isinstance(b, Tensor) and b.requires_grad else None
        return ga, gb

    return _node(op, out, (a, b), backward)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def matmul(a, b) -> Tensor:
    av, bv = _as_values(a), _as_values(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {av.shape} and {bv.shape} do not conform")
    out = av @ bv

    def backward(g):
        ga = g @ bv.T if isinstance(a, Tensor) and a.requires_grad else None
        gb = av.T @ g if isinstance(b, Tensor) and b.requires_grad else None
        return ga, gb

    return _node("matmul", out, (a, b), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    vals = [_as_values(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(
            pieces[i] if isinstance(p, Tensor) and p.requires_grad else None
            for i, p in enumerate(parts)
        )

    return _node("concat", out, tuple(parts), backward)


def gather(x, idx) -> Tensor:
    """Select rows along axis 0; indices are fixed (not differentiated)."""
    xv = _as_values(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = xv[idx]

    def backward(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node("index-gather", out, (x,), backward)


def group_sum(x, groups, num_groups: int) -> Tensor:
    """Sum rows of x into num_groups buckets given per-row group ids."""
    xv = _as_values(x)
    groups = np.asarray(groups, dtype=np.intp)
    if groups.shape[0] != xv.shape[0]:
        raise ShapeMismatch(f"group ids {groups.shape} do not match rows {xv.shape}")
    if groups.size and (groups.min() < 0 or groups.max() >= num_groups):
        raise ShapeMismatch("group id out of range")
    out = np.zeros((num_groups,) + xv.shape[1:])
    np.add.at(out, groups, xv)

    def backward(g):
        return (g[groups],)

    return _node("sum-pool-over-groups", out, (x,), backward)


def asum(x, axis: int | None = None) -> Tensor:
    xv = _as_values(x)
    out = xv.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full_like(xv, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return _node("sum", np.asarray(out), (x,), backward)


def mean(x, axis: int | None = None) -> Tensor:
    xv = _as_values(x)
    count = xv.size if axis is None else xv.shape[axis]
    out = xv.mean(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full_like(xv, float(g) / count),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape) / count,)

    return _node("mean", np.asarray(out), (x,), backward)


def _unary(op: str, x, fwd, bwd) -> Tensor:
    xv = _as_values(x)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = fwd(xv)

    def backward(g):
        return (bwd(g, xv, out),)

    return _node(op, out, (x,), backward)


def relu(x) -> Tensor:
    return _unary("relu", x, lambda v: np.maximum(v, 0.0),
                  lambda g, v, o: g * (v > 0))


def sigmoid(x) -> Tensor:
    return _unary("sigmoid", x, lambda v: 1.0 / (1.0 + np.exp(-np.clip(v, -500, 500))),
                  lambda g, v, o: g * o * (1.0 - o))


def tanh(x) -> Tensor:
    return _unary("tanh", x, np.tanh, lambda g, v, o: g * (1.0 - o * o))


def exp(x) -> Tensor:
    return _unary("exp", x, np.exp, lambda g, v, o: g * o)


def log(x) -> Tensor:
    return _unary("log", x, np.log, lambda g, v, o: g / v)


def sin(x) -> Tensor:
    return _unary("sin", x, np.sin, lambda g, v, o: g * np.cos(v))


def cos(x) -> Tensor:
    return _unary("cos", x, np.cos, lambda g, v, o: -g * np.sin(v))


def sqrt(x) -> Tensor:
    # subgradient 0 at x == 0 (distance kernels hit exact zeros)
    def bwd(g, v, o):
        with np.errstate(divide="ignore"):
            d = np.where(o > 0, 0.5 / np.where(o > 0, o, 1.0), 0.0)
        return g * d

    return _unary("sqrt", x, np.sqrt, bwd)


def softplus(x) -> Tensor:
    return _unary("softplus", x, lambda v: np.logaddexp(0.0, v),
                  lambda g, v, o: g / (1.0 + np.exp(-np.clip(v, -500, 500))))


def atan2(y, x) -> Tensor:
    yv, xv = _as_values(y), _as_values(x)
    if not _is_scalar_operand(yv, xv):
        raise ShapeMismatch(f"atan2: shapes {yv.shape} and {xv.shape} do not conform")
    out = np.arctan2(yv, xv)

    def backward(g):
        den = xv * xv + yv * yv
        gy = _reduce_to(g * xv / den, yv.shape) if isinstance(y, Tensor) and y.requires_grad else None
        gx = _reduce_to(-g * yv / den, xv.shape) if isinstance(x, Tensor) and x.requires_grad else None
        return gy, gx

    return _node("atan2", out, (y, x), backward)


def softmax(x, axis: int = -1) -> Tensor:
    xv = _as_values(x)
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node("softmax", out, (x,), backward)


def scale_shift(x, gamma, beta) -> Tensor:
    """Per-feature affine: out = x * gamma + beta, gamma/beta shaped like x's last axis."""
    xv, gv, bv = _as_values(x), _as_values(gamma), _as_values(beta)
    if gv.shape != xv.shape[-1:] or bv.shape != xv.shape[-1:]:
        raise ShapeMismatch(
            f"scale-shift: gamma {gv.shape} / beta {bv.shape} must match last axis of {xv.shape}"
        )
    out = xv * gv + bv
    lead = tuple(range(xv.ndim - 1))

    def backward(g):
        gx = g * gv if isinstance(x, Tensor) and x.requires_grad else None
        gg = (g * xv).sum(axis=lead) if isinstance(gamma, Tensor) and gamma.requires_grad else None
        gb = g.sum(axis=lead) if isinstance(beta, Tensor) and beta.requires_grad else None
        return gx, gg, gb

    return _node("layer-scale-shift", out, (x, gamma, beta), backward)


def add_bias(x, b) -> Tensor:
    """out = x + b with b shaped like x's last axis."""
    xv, bv = _as_values(x), _as_values(b)
    if bv.shape != xv.shape[-1:]:
        raise ShapeMismatch(f"add-bias: bias {bv.shape} must match last axis of {xv.shape}")
    out = xv + bv
    lead = tuple(range(xv.ndim - 1))

    def backward(g):
        gx = g if isinstance(x, Tensor) and x.requires_grad else None
        gb = g.sum(axis=lead) if isinstance(b, Tensor) and b.requires_grad else None
        return gx, gb

    return _node("add-bias", out, (x, b), backward)


def min_reduce(x, axis: int | None = None) -> Tensor:
    """Minimum along an axis; the gradient flows to the unique argmin, ties to the lowest index."""
    xv = _as_values(x)
    if axis is None:
        out = xv.min()
        flat_idx = int(xv.argmin())

        def backward(g):
            gx = np.zeros_like(xv)
            gx.flat[flat_idx] = float(g)
            return (gx,)

        return _node("min-reduce", np.asarray(out), (x,), backward)

    out = xv.min(axis=axis)
    idx = xv.argmin(axis=axis)

    def backward(g):
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _node("min-reduce", out, (x,), backward)


def max_reduce(x, axis: int | None = None) -> Tensor:
    """Maximum along an axis; same argmax routing convention as min_reduce."""
    neg = mul(x, -1.0)
    return mul(min_reduce(neg, axis=axis), -1.0)


def square_norm(x, axis: int | None = None) -> Tensor:
    """Sum of squares, over everything or along one axis."""
    xv = _as_values(x)
    out = (xv * xv).sum(axis=axis)

    def backward(g):
        if axis is None:
            return (2.0 * xv * float(g),)
        return (2.0 * xv * np.expand_dims(g, axis),)

    return _node("square-norm", np.asarray(out), (x,), backward)


def outer_add(u, v) -> Tensor:
    """out[i, j] = u[i] + v[j] for 1D u, v (also the row/column tiling primitive)."""
    uv, vv = _as_values(u), _as_values(v)
    if uv.ndim != 1 or vv.ndim != 1:
        raise ShapeMismatch(f"outer-add: expected 1D operands, got {uv.shape}, {vv.shape}")
    out = uv[:, None] + vv[None, :]

    def backward(g):
        gu = g.sum(axis=1) if isinstance(u, Tensor) and u.requires_grad else None
        gv = g.sum(axis=0) if isinstance(v, Tensor) and v.requires_grad else None
        return gu, gv

    return _node("outer-add", out, (u, v), backward)


def reshape(x, shape) -> Tensor:
    xv = _as_values(x)
    out = xv.reshape(shape)

    def backward(g):
        return (g.reshape(xv.shape),)

    return _node("reshape", out, (x,), backward)


def transpose(x) -> Tensor:
    xv = _as_values(x)
    if xv.ndim != 2:
        raise ShapeMismatch(f"transpose: expected 2D, got {xv.shape}")

    def backward(g):
        return (g.T,)

    return _node("transpose", xv.T.copy(), (x,), backward)


def normalize_rows(x, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization along the last axis (fused kernel)."""
    xv = _as_values(x)
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = (xv - mu) * inv
    n = xv.shape[-1]

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    _ = n
    return _node("normalize-rows", out, (x,), backward)


def custom(op: str, values: np.ndarray, parents: Sequence, backward: Callable) -> Tensor:
    """Create a graph node with a hand-written backward (fused kernels elsewhere)."""
    return _node(op, values, tuple(parents), backward)


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "concat": concat,
    "index-gather": gather,
    "sum-pool-over-groups": group_sum,
    "mean": mean,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
    "atan2": atan2,
    "softmax": softmax,
    "layer-scale-shift": scale_shift,
    "min-reduce": min_reduce,
    "square-norm": square_norm,
    # extensions used by the model and losses
    "sum": asum,
    "max-reduce": max_reduce,
    "sqrt": sqrt,
    "softplus": softplus,
    "outer-add": outer_add,
    "reshape": reshape,
    "transpose": transpose,
    "add-bias": add_bias,
    "normalize-rows": normalize_rows,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch a forward op by kind; records the graph edge for backward."""
    if kind not in _OPS:
        raise ValueError(f"unknown op kind '{kind}'")
    return _OPS[kind](*inputs, **attrs)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable requires_grad tensor."""
    if loss.values.ndim != 0:
        raise NotScalar(f"backward requires a scalar loss, got shape {loss.values.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.accumulate_grad(g)
        if node._backward is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central-difference gradients.

    Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    if not isinstance(x, Tensor):
        x = Tensor(x, requires_grad=True)
    loss = f(x)
    if loss.values.ndim != 0:
        raise NotScalar("grad_check target must be scalar-valued")
    x.zero_grad()
    backward(loss)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.values)

    numeric = np.zeros_like(x.values)
    flat = x.values.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).values)
        flat[i] = orig - eps
        lo = float(f(x).values)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2 * eps)

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if numeric.size else 0.0


_MAGIC = b"PCPS"
_FORMAT_VERSION = 1


class ParamStore:
    """Named parameters with persistent identity across training steps."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def save(self, path) -> None:
        entries = []
        offset = 0
        blobs = []
        for name, t in self._params.items():
            raw = np.ascontiguousarray(t.values, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(t.values.shape), "offset": offset})
            offset += len(raw)
            blobs.append(raw)
        header = json.dumps(
            {"format_version": _FORMAT_VERSION, "entries": entries},
            sort_keys=True, separators=(",", ":"),
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)

    @staticmethod
    def read_arrays(path) -> dict[str, np.ndarray]:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _MAGIC:
                raise FormatError(f"bad magic {magic!r} in {path}")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            try:
                header = json.loads(fh.read(hlen).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise FormatError(f"corrupt header in {path}: {e}") from e
            if header.get("format_version") != _FORMAT_VERSION:
                raise FormatError(f"unsupported format_version {header.get('format_version')}")
            data = fh.read()
        out: dict[str, np.ndarray] = {}
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            end = start + count * 8
            if end > len(data):
                raise FormatError(f"data for parameter '{entry['name']}' out of bounds")
            out[entry["name"]] = np.frombuffer(data[start:end], dtype="<f8").reshape(shape).copy()
        return out

    def load(self, path) -> None:
        """Load values into existing parameters; shapes must match exactly."""
        arrays = self.read_arrays(path)
        for name, t in self._params.items():
            if name not in arrays:
                raise FormatError(f"missing parameter '{name}' in {path}")
            if arrays[name].shape != t.values.shape:
                raise FormatError(
                    f"shape mismatch for parameter '{name}': "
                    f"file {arrays[name].shape} vs model {t.values.shape}"
                )
        for name, t in self._params.items():
            t.values[...] = arrays[name]
