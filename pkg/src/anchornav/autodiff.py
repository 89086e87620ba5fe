"""Minimal reverse-mode autodiff on float64 numpy arrays.

Every operation that touches a gradient-requiring tensor records a node on
an implicit tape (closure-based, micrograd style).  ``backward`` on a scalar
walks the tape once and consumes it; calling it again without a fresh
forward pass is an error.  All arithmetic is 64-bit and single-threaded so
results are bitwise reproducible for fixed seeds.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "TapeError",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "zeros",
    "no_grad",
    "backward",
    "add",
    "mul",
    "div",
    "matmul",
    "exp",
    "log",
    "tanh",
    "softplus",
    "softmax",
    "log_sum_exp",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concatenate",
    "gather_rows",
    "layer_norm",
    "attention",
    "grad_check",
]


class TapeError(RuntimeError):
    """Backward called on a detached or already-consumed tape."""


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf from finite inputs."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (rollouts, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _asarray(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """Dense float64 array plus optional gradient buffer and tape node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, op={self._op})"

    # operator sugar; all routed through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite result produced by primitive '{op}'")
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    The tape is consumed: a second backward through any visited node raises.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise TapeError("backward on a detached tape: loss does not require gradients")
    if loss._consumed:
        raise TapeError("tape already consumed: run a new forward pass before backward")

    topo: list[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._consumed:
            raise TapeError("tape already consumed: run a new forward pass before backward")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        node._consumed = True
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] += pg
            else:
                # copy: backward closures may alias g or hand one buffer
                # to several parents
                grads[key] = np.array(pg)
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    def bw(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _make(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    def bw(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        with np.errstate(invalid="ignore", divide="ignore"):
            out = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    def bw(g):
        return (
            (a, _unbroadcast(g / b.data, a.data.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        )

    return _make(out, (a, b), bw, "div")


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = a.data**p

    def bw(g):
        return ((a, g * p * a.data ** (p - 1.0)),)

    return _make(out, (a,), bw, "pow")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ((a, _unbroadcast(ga, a.data.shape)), (b, _unbroadcast(gb, b.data.shape)))

    return _make(out, (a, b), bw, "matmul")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return ((a, g * out),)

    return _make(out, (a,), bw, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)

    def bw(g):
        return ((a, g / a.data),)

    return _make(out, (a,), bw, "log")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        return ((a, g * (1.0 - out * out)),)

    return _make(out, (a,), bw, "tanh")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def bw(g):
        # sigmoid via tanh keeps the derivative stable for large |x|
        sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
        return ((a, g * sig),)

    return _make(out, (a,), bw, "softplus")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input is interior."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(np.float64)

    def bw(g):
        return ((a, g * inside),)

    return _make(out, (a,), bw, "clamp")


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.minimum(a.data, b.data)
    take_a = (a.data <= b.data).astype(np.float64)

    def bw(g):
        return (
            (a, _unbroadcast(g * take_a, a.data.shape)),
            (b, _unbroadcast(g * (1.0 - take_a), b.data.shape)),
        )

    return _make(out, (a, b), bw, "minimum")


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction) over one axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((a, out * (g - dot)),)

    return _make(out, (a,), bw, "softmax")


def log_sum_exp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log(sum(exp(a))) over one axis."""
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return ((a, gk * (e / s)),)

    return _make(out, (a,), bw, "log_sum_exp")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.data.shape)),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gk, a.data.shape)),)

    return _make(np.asarray(out), (a,), bw, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {tuple(shape)}")

    def bw(g):
        return ((a, g.reshape(a.data.shape)),)

    return _make(out, (a,), bw, "reshape")


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return ((a, g.transpose(inv)),)

    return _make(out, (a,), bw, "transpose")


def tslice(a, key) -> Tensor:
    """Basic (int/slice) indexing; every output element maps to one input."""
    a = _as_tensor(a)
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return ((a, full),)

    return _make(np.ascontiguousarray(out), (a,), bw, "slice")


def concatenate(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            "concatenate: shapes " + ", ".join(str(p.data.shape) for p in parts) + " do not conform"
        )
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple((p, piece) for p, piece in zip(parts, pieces))

    return _make(out, tuple(parts), bw, "concatenate")


def gather_rows(a, idx) -> Tensor:
    """Pick ``a[i, idx[i], ...]`` for each batch row i (mode selection)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError(f"gather_rows: index shape {idx.shape} does not match batch {a.data.shape}")
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        return ((a, full),)

    return _make(np.ascontiguousarray(out), (a,), bw, "gather_rows")


# ---------------------------------------------------------------------------
# composites built from primitives (gradients come for free)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gain), bias)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    q: (..., L, d), k: (..., S, d), v: (..., S, d) -> (..., L, d).
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ShapeError(f"attention: shapes q={q.shape} k={k.shape} v={v.shape} do not conform")
    kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = mul(matmul(q, kt), 1.0 / np.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    inner = mul(add(x, mul(power(x, 3.0), 0.044715)), np.sqrt(2.0 / np.pi))
    return mul(mul(x, add(tanh(inner), 1.0)), 0.5)


def mean_pool(x: Tensor, axis: int) -> Tensor:
    return tmean(x, axis=axis)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f, tensors, eps: float = 1e-4) -> float:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``tensors`` are the requires_grad leaves ``f`` closes over.  Returns the
    worst relative error with denominator max(|analytic|, |numeric|, 1e-8).
    ``f`` must be deterministic; this is verified by evaluating it twice.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    tensors = list(tensors)

    with no_grad():
        y0 = f().item()
        y1 = f().item()
    if y0 != y1:
        raise RuntimeError("grad_check: f is not deterministic (repeated evaluation mismatch)")

    for t in tensors:
        t.zero_grad()
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    with no_grad():
        for t, ana in zip(tensors, analytic):
            t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                a = ana.reshape(-1)[i]
                rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
                if rel > worst:
                    worst = rel
    for t in tensors:
        t.zero_grad()
    return worst
