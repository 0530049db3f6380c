"""Small reverse-mode differentiation engine over dense float64 arrays.

Operations record themselves on the active :class:`Tape` (if any) when at
least one input requires a gradient::

    with Tape() as tape:
        y = square(matmul(x, w)).sum()
    grads = tape.gradient(y, [w])

Outside a tape every op is a plain forward computation.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


_local = threading.local()


def _active() -> Optional["Tape"]:
    return getattr(_local, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple = ()
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records op outputs in creation (hence topological) order."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._prev = None

    def __enter__(self):
        self._prev = _active()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def backward(self, out: Tensor, seed=None) -> None:
        for node in self.nodes:
            node.grad = None
        out.grad = np.ones_like(out.data) if seed is None else np.asarray(seed, dtype=float)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    def gradient(self, out: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        for p in params:
            p.grad = None
        self.backward(out)
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    tape = _active()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward
        tape.nodes.append(out)
    return out


def scatter_add(idx: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``vals`` into ``n`` buckets given by ``idx`` (sequential order)."""
    vals = np.asarray(vals, dtype=np.float64)
    if vals.ndim == 1:
        return np.bincount(idx, weights=vals, minlength=n)[:n]
    d = int(np.prod(vals.shape[1:]))
    flat = (idx[:, None] * d + np.arange(d)).ravel()
    out = np.bincount(flat, weights=vals.reshape(-1), minlength=n * d)[: n * d]
    return out.reshape((n,) + vals.shape[1:])


def _check(cond: bool, op: str, *tensors) -> None:
    if not cond:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"{op}: incompatible shapes {shapes}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0], "matmul", a, b)

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a single row broadcast over ``a``'s rows."""
    a, b = as_tensor(a), as_tensor(b)
    bias = b.shape != a.shape
    _check(not bias or (a.data.ndim == 2 and b.shape in ((1, a.shape[1]), (a.shape[1],))), "add", a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0).reshape(b.shape) if bias else g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, "sub", a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, "mul", a, b)

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: _accum(a, g * c))


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data + float(c), (a,), lambda g: _accum(a, g))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``k`` of ``x`` (n, d) by ``w[k]`` where ``w`` is (n, 1)."""
    x, w = as_tensor(x), as_tensor(w)
    _check(x.data.ndim == 2 and w.shape == (x.shape[0], 1), "scale_rows", x, w)

    def backward(g):
        _accum(x, g * w.data)
        _accum(w, np.sum(g * x.data, axis=1, keepdims=True))

    return _make(x.data * w.data, (x, w), backward)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = [p.data for p in parts]
    try:
        out = np.concatenate(data, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {', '.join(str(p.shape) for p in parts)}") from None
    bounds = np.cumsum([0] + [d.shape[axis] for d in data])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(p, g[tuple(idx)])

    return _make(out, tuple(parts), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    _check(x.data.ndim == 2 and 0 <= start <= stop <= x.shape[1], "slice_cols", x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accum(x, full)

    return _make(x.data[:, start:stop], (x,), backward)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows ``x[idx]``; the backward pass scatters-adds."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        _accum(x, scatter_add(idx, g, x.shape[0]))

    return _make(x.data[idx], (x,), backward)


def segment_sum(x: Tensor, seg, n: int) -> Tensor:
    """Row sums grouped by ``seg``: ``out[s] = sum_{k: seg[k]=s} x[k]``."""
    x = as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    _check(len(seg) == x.shape[0], "segment_sum", x)
    out = scatter_add(seg, x.data, n)
    return _make(out, (x,), lambda g: _accum(x, g[seg]))


def mean_over_segments(x: Tensor, seg, n: int) -> Tensor:
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n).astype(float)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    s = segment_sum(x, seg, n)
    return scale_rows(s, Tensor(inv[:, None])) if s.data.ndim == 2 else mul(s, Tensor(inv))


def softmax_over_segments(logits: Tensor, seg, n: int) -> Tensor:
    """Softmax of (E, 1) logits within each segment (e.g. a node's in-edges)."""
    logits = as_tensor(logits)
    seg = np.asarray(seg, dtype=np.int64)
    _check(logits.data.ndim == 2 and logits.shape[1] == 1 and len(seg) == logits.shape[0],
           "softmax_over_segments", logits)
    z = logits.data[:, 0]
    mx = np.full(n, -np.inf)
    np.maximum.at(mx, seg, z)
    e = np.exp(z - mx[seg])
    den = scatter_add(seg, e, n)
    a = (e / den[seg])[:, None]

    def backward(g):
        dot = scatter_add(seg, (g * a)[:, 0], n)
        _accum(logits, a * (g - dot[seg][:, None]))

    return _make(a, (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[1]
    _check(x.data.ndim == 2 and gain.shape == (1, d) and bias.shape == (1, d), "layer_norm", x, gain, bias)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        _accum(gain, np.sum(g * xhat, axis=0, keepdims=True))
        _accum(bias, np.sum(g, axis=0, keepdims=True))
        if x.requires_grad:
            gx = g * gain.data
            _accum(x, inv * (gx - gx.mean(axis=1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=1, keepdims=True)))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: _accum(x, g * mask))


def hinge(x: Tensor) -> Tensor:
    """[x]_+ = max(x, 0)."""
    return relu(x)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: _accum(x, 2.0 * g * x.data))


def abs_(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: _accum(x, g * np.sign(x.data)))


def sin(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.sin(x.data), (x,), lambda g: _accum(x, g * np.cos(x.data)))


def cos(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.cos(x.data), (x,), lambda g: _accum(x, -g * np.sin(x.data)))


def sum_(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: _accum(x, np.broadcast_to(g, x.shape)))
    out = x.data.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: _accum(x, np.broadcast_to(g, x.shape)))


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-6, atol: float = 1e-8,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max coordinate-wise relative error of taped vs central-difference gradients.

    ``x`` is a Tensor or a list of Tensors (all treated as inputs). The error
    at each coordinate is ``|a - b| / max(|a|, |b|, atol)``. With ``max_coords``
    only that many seeded random coordinates of each tensor are probed.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
    with Tape() as tape:
        out = f(x) if isinstance(x, Tensor) else f(*xs)
    analytic = tape.gradient(out, xs)

    def value() -> float:
        return float((f(x) if isinstance(x, Tensor) else f(*xs)).data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(xs, analytic):
        coords = list(np.ndindex(t.shape))
        if max_coords is not None and len(coords) > max_coords:
            coords = [coords[i] for i in rng.choice(len(coords), max_coords, replace=False)]
        for k in coords:
            orig = t.data[k]
            t.data[k] = orig + eps
            fp = value()
            t.data[k] = orig - eps
            fm = value()
            t.data[k] = orig
            num = (fp - fm) / (2 * eps)
            den = max(abs(num), abs(ga[k]), atol)
            worst = max(worst, abs(num - ga[k]) / den)
    return worst
