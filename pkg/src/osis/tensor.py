"""Minimal dense float64 tensor with reverse-mode automatic differentiation.

Covers exactly what the trainable pipeline needs: row-major numpy storage,
a dynamic tape built op by op, and exact analytic gradients verified against
central differences by :func:`grad_check`. No broadcasting beyond rows+rowvec,
no higher-order derivatives, no GPU.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "affine",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "exp",
    "log",
    "tsum",
    "tmean",
    "tabs",
    "clamp_min",
    "power_const",
    "matmul",
    "transpose",
    "add_rowvec",
    "gather_rows",
    "gather_items",
    "gather_cols",
    "scale_columns",
    "sincos_interleave",
    "add_column_max",
    "div_rows",
    "concat_cols",
    "grad_check",
    "assert_finite",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional gradient accumulator.

    Intermediate tensors carry the parents and backward closure that built
    them; calling :meth:`backward` on a scalar walks the tape in reverse
    topological order and accumulates into every reachable ``.grad``.
    Accumulation is additive: backward twice doubles leaf gradients.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: np.ndarray | None = (
            np.zeros_like(self.data) if self.requires_grad else None
        )
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar output."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _add(self, _mul(other, -1.0))

    def __rsub__(self, other):
        return _add(_mul(self, -1.0), other)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __neg__(self):
        return _mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return _mul(self, 1.0 / other)
        return _div(self, other)


class Parameter:
    """A named trainable tensor; names are unique within a model."""

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        # Trainability must survive no_grad() blocks used at build time.
        self.tensor.requires_grad = True
        if self.tensor.grad is None:
            self.tensor.grad = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


# -- op plumbing -----------------------------------------------------------


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _unwrap(x) -> Tensor:
    return x.tensor if isinstance(x, Parameter) else _as_tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_of) -> Tensor:
    """Build an output node; records the tape only when a parent needs grad."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_of(out)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise and reductions ---------------------------------------------


def _add(a, b) -> Tensor:
    a = _unwrap(a)
    if isinstance(b, (int, float)):
        def bw(out):
            def run():
                if a.requires_grad:
                    a._accum(out.grad)
            return run
        return _make(a.data + b, [a], bw)
    b = _unwrap(b)
    if a.shape != b.shape:
        if b.data.size == 1:
            def bw(out):
                def run():
                    if a.requires_grad:
                        a._accum(out.grad)
                    if b.requires_grad:
                        b._accum(out.grad.sum().reshape(b.data.shape))
                return run
            return _make(a.data + b.data.reshape(()), [a, b], bw)
        if a.data.size == 1:
            def bw(out):
                def run():
                    if a.requires_grad:
                        a._accum(out.grad.sum().reshape(a.data.shape))
                    if b.requires_grad:
                        b._accum(out.grad)
                return run
            return _make(a.data.reshape(()) + b.data, [a, b], bw)
        _check_same_shape(a, b, "add")
    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad)
            if b.requires_grad:
                b._accum(out.grad)
        return run
    return _make(a.data + b.data, [a, b], bw)


def _mul(a, b) -> Tensor:
    a = _unwrap(a)
    if isinstance(b, (int, float)):
        def bw(out):
            def run():
                if a.requires_grad:
                    a._accum(out.grad * b)
            return run
        return _make(a.data * b, [a], bw)
    b = _unwrap(b)
    _check_same_shape(a, b, "mul")
    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad * b.data)
            if b.requires_grad:
                b._accum(out.grad * a.data)
        return run
    return _make(a.data * b.data, [a, b], bw)


def _div(a, b) -> Tensor:
    a, b = _unwrap(a), _unwrap(b)
    _check_same_shape(a, b, "div")
    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad / b.data)
            if b.requires_grad:
                b._accum(-out.grad * a.data / (b.data * b.data))
        return run
    return _make(a.data / b.data, [a, b], bw)


def relu(x) -> Tensor:
    x = _unwrap(x)
    mask = x.data > 0
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(out.grad * mask)
        return run
    return _make(np.where(mask, x.data, 0.0), [x], bw)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # Piecewise form avoids overflow warnings for large |z|.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = _unwrap(x)
    s = _sigmoid_np(x.data)
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(out.grad * s * (1.0 - s))
        return run
    return _make(s, [x], bw)


def exp(x) -> Tensor:
    x = _unwrap(x)
    e = np.exp(x.data)
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(out.grad * e)
        return run
    return _make(e, [x], bw)


def log(x) -> Tensor:
    x = _unwrap(x)
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(out.grad / x.data)
        return run
    return _make(np.log(x.data), [x], bw)


def tabs(x) -> Tensor:
    """|x| with sign subgradient (0 at 0)."""
    x = _unwrap(x)
    s = np.sign(x.data)
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(out.grad * s)
        return run
    return _make(np.abs(x.data), [x], bw)


def clamp_min(x, lo: float) -> Tensor:
    """max(x, lo); gradient passes only where x > lo."""
    x = _unwrap(x)
    mask = x.data > lo
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(out.grad * mask)
        return run
    return _make(np.where(mask, x.data, lo), [x], bw)


def power_const(x, p: float) -> Tensor:
    """x**p for constant p >= 1 (and p == 0), on non-negative inputs."""
    x = _unwrap(x)
    if p == 0:
        return _make(np.ones_like(x.data), [x], lambda out: (lambda: None))
    y = np.power(x.data, p)
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(out.grad * p * np.power(x.data, p - 1.0))
        return run
    return _make(y, [x], bw)


def tsum(x, axis: int | None = None) -> Tensor:
    x = _unwrap(x)
    if axis is None:
        def bw(out):
            def run():
                if x.requires_grad:
                    x._accum(np.full_like(x.data, out.grad.reshape(())))
            return run
        return _make(np.asarray(x.data.sum()), [x], bw)
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(np.expand_dims(out.grad, axis) * np.ones_like(x.data))
        return run
    return _make(x.data.sum(axis=axis), [x], bw)


def tmean(x) -> Tensor:
    x = _unwrap(x)
    n = x.data.size
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(np.full_like(x.data, out.grad.reshape(()) / n))
        return run
    return _make(np.asarray(x.data.mean()), [x], bw)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _unwrap(a), _unwrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ out.grad)
        return run
    return _make(a.data @ b.data, [a, b], bw)


def transpose(x) -> Tensor:
    x = _unwrap(x)
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(out.grad.T)
        return run
    return _make(x.data.T.copy(), [x], bw)


def add_rowvec(x, v) -> Tensor:
    """x (n,m) + v (m,) broadcast over rows."""
    x, v = _unwrap(x), _unwrap(v)
    if x.data.ndim != 2 or v.data.shape != (x.shape[1],):
        raise ValueError(f"add_rowvec: shape mismatch {x.shape} vs {v.shape}")
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(out.grad)
            if v.requires_grad:
                v._accum(out.grad.sum(axis=0))
        return run
    return _make(x.data + v.data[None, :], [x, v], bw)


def affine(x, w, b) -> Tensor:
    """x @ w + b with exact gradients to all three operands."""
    xt, wt, bt = _unwrap(x), _unwrap(w), _unwrap(b)
    if xt.data.ndim != 2 or wt.data.ndim != 2 or xt.shape[1] != wt.shape[0]:
        raise ValueError(f"affine: shape mismatch x{xt.shape} vs W{wt.shape}")
    if bt.data.shape != (wt.shape[1],):
        raise ValueError(f"affine: bias shape {bt.shape} vs W{wt.shape}")
    return add_rowvec(matmul(xt, wt), bt)


def softmax(x, axis: int = -1) -> Tensor:
    """Row-stable softmax; rows sum to 1 within 1e-12."""
    x = _unwrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    def bw(out):
        def run():
            if x.requires_grad:
                dot = (out.grad * s).sum(axis=axis, keepdims=True)
                x._accum(s * (out.grad - dot))
        return run
    return _make(s, [x], bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _unwrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    ls = z - lse
    sm = np.exp(ls)
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(out.grad - sm * out.grad.sum(axis=axis, keepdims=True))
        return run
    return _make(ls, [x], bw)


# -- gathers / structured ops -----------------------------------------------


def gather_rows(x, idx) -> Tensor:
    """out[i] = x[idx[i]]; backward scatter-adds (duplicate indices allowed)."""
    x = _unwrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ValueError(f"gather_rows: index out of range for {x.shape[0]} rows")
    def bw(out):
        def run():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                np.add.at(g, idx, out.grad)
                x._accum(g)
        return run
    return _make(x.data[idx], [x], bw)


def gather_items(x, rows, cols) -> Tensor:
    """out[t] = x[rows[t], cols[t]] (1-D result)."""
    x = _unwrap(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    def bw(out):
        def run():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                np.add.at(g, (rows, cols), out.grad)
                x._accum(g)
        return run
    return _make(x.data[rows, cols], [x], bw)


def gather_cols(x, cols) -> Tensor:
    x = _unwrap(x)
    cols = np.asarray(cols, dtype=np.int64)
    def bw(out):
        def run():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                np.add.at(g.T, cols, out.grad.T)
                x._accum(g)
        return run
    return _make(x.data[:, cols], [x], bw)


def scale_columns(x, factors: np.ndarray) -> Tensor:
    """x * factors[None, :] with constant (non-trained) column factors."""
    x = _unwrap(x)
    f = np.asarray(factors, dtype=np.float64)
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(out.grad * f[None, :])
        return run
    return _make(x.data * f[None, :], [x], bw)


def sincos_interleave(x) -> Tensor:
    """(n,m) -> (n,2m) with out[:,2j]=sin(x_j), out[:,2j+1]=cos(x_j)."""
    x = _unwrap(x)
    n, m = x.shape
    s, c = np.sin(x.data), np.cos(x.data)
    y = np.empty((n, 2 * m))
    y[:, 0::2] = s
    y[:, 1::2] = c
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(out.grad[:, 0::2] * c - out.grad[:, 1::2] * s)
        return run
    return _make(y, [x], bw)


def add_column_max(x) -> Tensor:
    """out[j] = x[j] + colmax(x); max routes grad to the first argmax row."""
    x = _unwrap(x)
    arg = x.data.argmax(axis=0)
    cmax = x.data[arg, np.arange(x.shape[1])]
    def bw(out):
        def run():
            if x.requires_grad:
                g = out.grad.copy()
                np.add.at(g, (arg, np.arange(x.shape[1])), out.grad.sum(axis=0))
                x._accum(g)
        return run
    return _make(x.data + cmax[None, :], [x], bw)


def div_rows(x, z) -> Tensor:
    """x (k,d) / z (k,) rowwise; differentiable in both."""
    x, z = _unwrap(x), _unwrap(z)
    if z.data.shape != (x.shape[0],):
        raise ValueError(f"div_rows: shape mismatch {x.shape} vs {z.shape}")
    def bw(out):
        def run():
            if x.requires_grad:
                x._accum(out.grad / z.data[:, None])
            if z.requires_grad:
                z._accum(-(out.grad * x.data).sum(axis=1) / (z.data * z.data))
        return run
    return _make(x.data / z.data[:, None], [x, z], bw)


def concat_cols(parts: Iterable) -> Tensor:
    parts = [_unwrap(p) for p in parts]
    widths = [p.shape[1] for p in parts]
    offs = np.concatenate([[0], np.cumsum(widths)])
    def bw(out):
        def run():
            for p, a, b in zip(parts, offs[:-1], offs[1:]):
                if p.requires_grad:
                    p._accum(out.grad[:, a:b])
        return run
    return _make(np.concatenate([p.data for p in parts], axis=1), parts, bw)


# -- verification ------------------------------------------------------------


def assert_finite(x: Tensor, what: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError(f"non-finite values in {what}")


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Per coordinate the error is |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8). ``coords`` restricts probing to a flat-index subset
    (defaults to every coordinate). Raises on a non-finite probe value.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not x.requires_grad:
        raise ValueError("grad_check requires x.requires_grad")
    x.grad = np.zeros_like(x.data)
    y = f(x)
    if y.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued f")
    if not np.isfinite(y.data.reshape(())):
        raise FloatingPointError("non-finite f(x) in grad_check")
    y.backward()
    analytic = x.grad.copy().ravel()

    flat = x.data.ravel()
    idxs = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64)
    max_err = 0.0
    for i in idxs:
        saved = flat[i]
        with no_grad():
            flat[i] = saved + eps
            f_plus = f(x).item()
            flat[i] = saved - eps
            f_minus = f(x).item()
        flat[i] = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError("non-finite f at finite-difference probe")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        max_err = max(max_err, abs(analytic[i] - numeric) / denom)
    return max_err
