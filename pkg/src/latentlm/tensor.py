"""Dense float64 tensors with reverse-mode automatic differentiation.

Small op surface, just enough for a decoder-only transformer: matmul
(2-D and batched 3-D), softmax with optional masking, layer norm, GELU,
cross entropy, concatenation, basic indexing. Everything is float64 so
finite-difference gradient checks are reliable.

Rules of the road:
  - scalars are shape-[1] tensors, never 0-d
  - no broadcasting except bias-add along the last dimension and
    size-1 (scalar tensor) multiply/divide
  - gradients accumulate across backward() calls until zero_grad()
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

# GELU tanh approximation constants: 0.5*x*(1 + tanh(GELU_C0*(x + GELU_C1*x^3)))
GELU_C0 = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_C1 = 0.044715

# per-thread so concurrent generations/graphs never share recording state
_state = threading.local()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class Tensor:
    """N-d float64 array, optionally recording into a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            raise ValueError("scalar tensors must use shape [1]")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev: tuple[Tensor, ...] = ()
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}, op={self._op!r})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """View of the same storage, cut out of the graph."""
        return Tensor(self.data)

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() requires a single element, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    # -- graph plumbing ------------------------------------------------------

    def _accumulate(self, g: np.ndarray, own: bool = False):
        """Add a gradient contribution. own=True promises g is a fresh array
        nobody else references, letting the first contribution be adopted
        without a copy (the hot path in backward)."""
        if self.grad is None:
            self.grad = g if own else np.array(g)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar; accumulates into .grad of ancestors.

        The swept graph is released afterwards (closures hold reference
        cycles that would otherwise sit on large arrays until a gc pass);
        accumulating further gradients means running a fresh forward pass.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar tensor, got shape {list(self.shape)}")
        if self._op == "<freed>":
            raise RuntimeError("graph already released by a previous backward; rebuild the forward pass")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        for node in topo:
            if node._prev:
                node._backward = None
                node._prev = ()
                node._op = "<freed>"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64).reshape(-1) if np.ndim(x) == 0 else x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad or p._prev for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._prev = parents
        out._op = op
    return out


def _recording(out: Tensor) -> bool:
    return bool(out._prev)


# -- constructors -------------------------------------------------------------


def _check_shape(shape):
    shape = list(shape)
    if len(shape) == 0:
        raise ValueError("scalar tensors must use shape [1]")
    for s in shape:
        if int(s) < 1:
            raise ValueError(f"shape entries must be >= 1, got {shape}")
    return tuple(int(s) for s in shape)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape)), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_check_shape(shape), float(value)), requires_grad=requires_grad)


def normal(shape, mean: float = 0.0, std: float = 1.0, seed: int = 0, requires_grad: bool = False) -> Tensor:
    """Gaussian init, bit-reproducible for a given seed."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    rng = np.random.Generator(np.random.PCG64(seed))
    data = rng.standard_normal(_check_shape(shape)) * std + mean
    return Tensor(data, requires_grad=requires_grad)


# -- arithmetic ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """a + b where b matches a's shape, is a [last-dim] bias, or is size-1."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    bias_mode = b.shape != a.shape and b.data.ndim == 1 and a.shape[-1] == b.shape[0]
    scalar_mode = b.size == 1 and b.shape != a.shape
    if not (a.shape == b.shape or bias_mode or scalar_mode):
        raise ValueError(f"add shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    out = _make(a.data + b.data, (a, b), "add")
    if _recording(out):

        def _bw():
            g = out.grad
            a._accumulate(g)
            if b.shape == a.shape:
                b._accumulate(g)
            elif bias_mode:
                b._accumulate(g.reshape(-1, b.shape[0]).sum(axis=0), own=True)
            else:
                b._accumulate(np.asarray([g.sum()]).reshape(b.shape), own=True)

        out._backward = _bw
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a python scalar or a size-1 tensor."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        out = _make(a.data * c, (a,), "mul_s")
        if _recording(out):
            out._backward = lambda: a._accumulate(out.grad * c, own=True)
        return out
    b = _as_tensor(b)
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ValueError(f"mul shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    out = _make(a.data * b.data, (a, b), "mul")
    if _recording(out):

        def _bw():
            g = out.grad
            ga = g * b.data
            gb = g * a.data
            a._accumulate(ga if a.shape == out.shape else np.asarray([ga.sum()]).reshape(a.shape), own=True)
            b._accumulate(gb if b.shape == out.shape else np.asarray([gb.sum()]).reshape(b.shape), own=True)

        out._backward = _bw
    return out


def div(a: Tensor, b) -> Tensor:
    """a / b for scalar b (python number or size-1 tensor) or same-shape b."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / float(b))
    b = _as_tensor(b)
    if a.shape != b.shape and b.size != 1:
        raise ValueError(f"div shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    out = _make(a.data / b.data, (a, b), "div")
    if _recording(out):

        def _bw():
            g = out.grad
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
            a._accumulate(ga, own=True)
            b._accumulate(gb if b.shape == out.shape else np.asarray([gb.sum()]).reshape(b.shape), own=True)

        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, or batched 3-D x 3-D with equal batch."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    ok = (
        (a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0])
        or (a.data.ndim == 3 and b.data.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])
    )
    if not ok:
        raise ValueError(f"matmul shape mismatch: {list(a.shape)} @ {list(b.shape)}")
    out = _make(a.data @ b.data, (a, b), "matmul")
    if _recording(out):

        def _bw():
            g = out.grad
            if a.data.ndim == 2:
                a._accumulate(g @ b.data.T, own=True)
                b._accumulate(a.data.T @ g, own=True)
            else:
                a._accumulate(g @ b.data.transpose(0, 2, 1), own=True)
                b._accumulate(a.data.transpose(0, 2, 1) @ g, own=True)

        out._backward = _bw
    return out


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data.reshape(shape), (a,), "reshape")
    if _recording(out):
        # adopting the reshaped view is safe: the graph is released after
        # backward, so out.grad has no readers once this node has run
        out._backward = lambda: a._accumulate(out.grad.reshape(a.shape), own=True)
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data.transpose(axes), (a,), "transpose")
    if _recording(out):
        inv = None if axes is None else np.argsort(axes)
        out._backward = lambda: a._accumulate(out.grad.transpose(inv), own=True)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if _recording(out):
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def _bw():
            for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
                t._accumulate(g, own=True)

        out._backward = _bw
    return out


def getitem(a: Tensor, idx) -> Tensor:
    a = _as_tensor(a)
    data = a.data[idx]
    if data.ndim == 0:
        data = data.reshape(1)
        scalarized = True
    else:
        scalarized = False
    out = _make(data, (a,), "getitem")
    if _recording(out):

        def _bw():
            g = np.zeros_like(a.data)
            np.add.at(g, np.index_exp[idx], out.grad.reshape(()) if scalarized else out.grad)
            a._accumulate(g, own=True)

        out._backward = _bw
    return out


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if data.ndim == 0:
        data = data.reshape(1)
    out = _make(data, (a,), "sum")
    if _recording(out):

        def _bw():
            g = out.grad
            if axis is None:
                a._accumulate(np.broadcast_to(g.reshape([1] * a.data.ndim), a.shape).copy(), own=True)
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis=axis)
                a._accumulate(np.broadcast_to(g, a.shape).copy(), own=True)

        out._backward = _bw
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- neural-net primitives ----------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax; masked entries (mask False) get exactly 0.

    The row max is taken over unmasked entries only, so masked inputs have
    no influence whatsoever on the output (bitwise causality).
    """
    x = _as_tensor(x)
    d = x.data
    if mask is not None:
        d = np.where(mask, d, -np.inf)
    m = np.max(d, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(d - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (x,), "softmax")
    if _recording(out):

        def _bw():
            g = out.grad
            inner = (g * y).sum(axis=axis, keepdims=True)
            x._accumulate(y * (g - inner), own=True)

        out._backward = _bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm gain/bias must have shape [{d}], got {list(gain.shape)} / {list(bias.shape)}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = _make(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")
    if _recording(out):

        def _bw():
            g = out.grad
            lead = tuple(range(g.ndim - 1))
            gain._accumulate((g * xhat).sum(axis=lead), own=True)
            bias._accumulate(g.sum(axis=lead), own=True)
            gx = g * gain.data
            x._accumulate(rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)), own=True)

        out._backward = _bw
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5*x*(1 + tanh(c0*(x + c1*x^3))) with the constants above."""
    x = _as_tensor(x)
    d = x.data
    d2 = d * d
    t = np.tanh(d * (GELU_C0 + (GELU_C0 * GELU_C1) * d2))
    out = _make(0.5 * d * (1.0 + t), (x,), "gelu")
    if _recording(out):

        def _bw():
            local = t * t
            np.subtract(1.0, local, out=local)          # 1 - t^2
            local *= GELU_C0 + (3.0 * GELU_C0 * GELU_C1) * d2
            local *= d
            local += 1.0 + t
            local *= 0.5
            local *= out.grad
            x._accumulate(local, own=True)

        out._backward = _bw
    return out


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood over unmasked rows of [T x V] logits.

    Gradient is (softmax - onehot)/n_unmasked on unmasked rows, zero elsewhere.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-D logits, got shape {list(logits.shape)}")
    t = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=bool)
    n_rows, vocab = logits.shape
    if t.shape != (n_rows,) or m.shape != (n_rows,):
        raise ValueError("targets and mask must align with the logits rows")
    if t.min(initial=0) < 0 or t.max(initial=0) >= vocab:
        raise ValueError(f"target ids must lie in [0, {vocab})")
    count = int(m.sum())
    if count == 0:
        raise ValueError("empty loss")
    d = logits.data
    mx = d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(d - mx).sum(axis=1)) + mx[:, 0]
    nll = lse - d[np.arange(n_rows), t]
    out = _make(np.asarray([float((nll * m).sum() / count)]), (logits,), "cross_entropy")
    if _recording(out):

        def _bw():
            p = np.exp(d - mx)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n_rows), t] -= 1.0
            p *= m[:, None] * (out.grad[0] / count)
            logits._accumulate(p, own=True)

        out._backward = _bw
    return out
