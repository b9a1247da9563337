"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough operator coverage to express a windowed-attention encoder,
an MLP decoder and a focal-style loss, with exact-shape semantics (no
broadcasting beyond a trailing bias add). Graphs are single-owner and
single-threaded; distinct graphs may live on distinct threads.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimMismatch, NonFiniteInput, NonScalarLoss

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus optional gradient and provenance record."""

    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: np.ndarray | None = None
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; scalars only on the right where noted
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)

        def back(g):
            _accum(a, g)

        return _make(a.data + c, (a,), back)
    a = as_tensor(a)
    if a.data.shape != b.data.shape:
        raise DimMismatch(f"add: {a.data.shape} vs {b.data.shape}")

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if not isinstance(a, Tensor):
        c = float(a)

        def back(g):
            _accum(b, -g)

        return _make(c - b.data, (b,), back)
    if a.data.shape != b.data.shape:
        raise DimMismatch(f"sub: {a.data.shape} vs {b.data.shape}")

    def back(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, -g)

    return _make(-a.data, (a,), back)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)

        def back(g):
            _accum(a, g * c)

        return _make(a.data * c, (a,), back)
    a = as_tensor(a)
    if a.data.shape != b.data.shape:
        raise DimMismatch(f"mul: {a.data.shape} vs {b.data.shape}")

    def back(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimMismatch(f"div: {a.data.shape} vs {b.data.shape}")

    def back(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; N-d operands are stacks with equal leading dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimMismatch("matmul needs >= 2-d operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimMismatch(f"matmul inner dims: {a.data.shape} vs {b.data.shape}")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimMismatch(f"matmul leading dims: {a.data.shape} vs {b.data.shape}")

    def back(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over all leading dims (b is 1-d, last dim)."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise DimMismatch(f"add_bias: {x.data.shape} vs {b.data.shape}")

    def back(g):
        _accum(x, g)
        _accum(b, g.reshape(-1, b.data.shape[0]).sum(axis=0))

    return _make(x.data + b.data, (x, b), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    orig = x.data.shape

    def back(g):
        _accum(x, g.reshape(orig))

    return _make(x.data.reshape(shape), (x,), back)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        _accum(x, g.transpose(inv))

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), back)


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts = tuple(shifts)
    axes = tuple(axes)

    def back(g):
        _accum(x, np.roll(g, tuple(-s for s in shifts), axis=axes))

    return _make(np.roll(x.data, shifts, axis=axes), (x,), back)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        for p, piece in zip(parts, np.split(g, offsets, axis=axis)):
            _accum(p, piece)

    return _make(np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), back)


def narrow_lastdim(x: Tensor, start: int, length: int) -> Tensor:
    def back(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[..., start:start + length] = g
            _accum(x, full)

    return _make(np.ascontiguousarray(x.data[..., start:start + length]),
                 (x,), back)


def split_lastdim(x: Tensor, parts: int) -> list[Tensor]:
    size = x.data.shape[-1]
    if size % parts != 0:
        raise DimMismatch(f"split_lastdim: {size} not divisible by {parts}")
    step = size // parts
    return [narrow_lastdim(x, i * step, step) for i in range(parts)]


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last dim; slices sum to 1."""
    if x.data.shape[-1] < 1:
        raise DimMismatch("softmax over empty dim")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteInput("softmax input contains NaN/inf")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    return _make(y, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dim to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimMismatch(f"layer_norm affine params must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gamma.data + beta.data

    def back(g):
        _accum(beta, g.reshape(-1, d).sum(axis=0))
        _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gg = g * gamma.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (gg - m1 - xhat * m2) * inv)

    return _make(y, (x, gamma, beta), back)


def gelu(x: Tensor) -> Tensor:
    """Elementwise GELU, tanh approximation (fixed variant for determinism)."""
    sq = x.data * x.data
    inner = _GELU_K * (x.data + _GELU_C * sq * x.data)
    t = np.tanh(inner)
    y = 0.5 * x.data * (1.0 + t)

    def back(g):
        dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * sq)
        dy = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * dinner
        _accum(x, g * dy)

    return _make(y, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def back(g):
        _accum(x, g * y * (1.0 - y))

    return _make(y, (x,), back)


def log(x: Tensor) -> Tensor:
    def back(g):
        _accum(x, g / x.data)

    return _make(np.log(x.data), (x,), back)


def power(x: Tensor, exponent: float) -> Tensor:
    """x ** exponent elementwise; exponent 0 yields ones with zero gradient."""
    exponent = float(exponent)
    y = x.data ** exponent

    def back(g):
        if exponent == 0.0:
            return
        _accum(x, g * exponent * x.data ** (exponent - 1.0))

    return _make(y, (x,), back)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through unclipped entries."""
    inside = (x.data >= lo) & (x.data <= hi)

    def back(g):
        _accum(x, g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), back)


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape

    def back(g):
        _accum(x, np.full(shape, float(g)))

    return _make(np.asarray(x.data.sum()), (x,), back)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.data.shape

    def back(g):
        _accum(x, np.full(shape, float(g) / n))

    return _make(np.asarray(x.data.mean()), (x,), back)


@lru_cache(maxsize=64)
def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """1-d bilinear interpolation matrix, align-corners-false, edge clamped."""
    m = np.zeros((dst, src))
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    i0 = np.clip(np.floor(pos).astype(int), 0, src - 1)
    i1 = np.clip(np.floor(pos).astype(int) + 1, 0, src - 1)
    frac = pos - np.floor(pos)
    for r in range(dst):
        m[r, i0[r]] += 1.0 - frac[r]
        m[r, i1[r]] += frac[r]
    m.setflags(write=False)
    return m


def _resize_apply(a_r: np.ndarray, a_c: np.ndarray,
                  arr: np.ndarray) -> np.ndarray:
    """Separable application of row/col interpolation matrices to (h, w, c)."""
    y = np.tensordot(a_r, arr, axes=(1, 0))         # (H, w, c)
    y = np.tensordot(a_c, y, axes=(1, 1))           # (W, H, c)
    return np.ascontiguousarray(np.swapaxes(y, 0, 1))


def upsample2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an (h, w) or (h, w, c) grid; target dims >= source."""
    h, w = x.data.shape[0], x.data.shape[1]
    if out_h < h or out_w < w:
        raise DimMismatch(f"upsample target ({out_h},{out_w}) below source ({h},{w})")
    a_r = _interp_matrix(h, out_h)
    a_c = _interp_matrix(w, out_w)
    y = _resize_apply(a_r, a_c, x.data.reshape(h, w, -1))
    y = y.reshape((out_h, out_w) + x.data.shape[2:])

    def back(g):
        gc = g.reshape(out_h, out_w, -1)
        gx = _resize_apply(a_r.T, a_c.T, gc)
        _accum(x, gx.reshape(x.data.shape))

    return _make(y, (x,), back)


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-numpy bilinear resize (any scale), same convention as upsample2d."""
    h, w = arr.shape[0], arr.shape[1]
    a_r = _interp_matrix(h, out_h)
    a_c = _interp_matrix(w, out_w)
    y = _resize_apply(a_r, a_c,
                      arr.reshape(h, w, -1).astype(np.float64))
    return y.reshape((out_h, out_w) + arr.shape[2:])


def backward(loss: Tensor) -> None:
    """Reverse-accumulate gradients of a scalar loss into .grad buffers.

    Gradients add to any existing .grad: the caller zeroes between steps.
    """
    if loss.data.shape != () and loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class GradReport:
    """Worst analytic-vs-numeric gradient discrepancy over all parameters."""

    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float
    param_index: int = 0


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-5) -> GradReport:
    """Compare backward() gradients of f against central finite differences.

    f rebuilds its graph on every call and returns a scalar tensor; params
    are the leaves perturbed in place. Relative error uses denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    zero_grads(params)
    loss = f()
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.data.shape}")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    report = GradReport(0.0, 0, 0.0, 0.0)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                lp = float(f().data)
                flat[i] = orig - h
                lm = float(f().data)
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            ana = float(analytic[pi].reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            if rel > report.max_rel_error:
                report = GradReport(rel, i, ana, num, pi)
    return report
