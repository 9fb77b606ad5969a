"""Dense tensors with tape-based reverse-mode automatic differentiation.

Tensors wrap numpy arrays (single precision by default; float64 inputs are
preserved so gradient oracles can run in double).  Inside a ``Tape``
context every op whose inputs require gradients records a backward
closure; ``Tape.backward`` replays the closures in exact reverse order of
recording, which is a reverse topological order of the computation.
Gradients accumulate additively on shared nodes.

Only the shapes the ranking models need are supported: 0-d scalars, 1-d
vectors and 2-d matrices, with row-vector broadcasting on add/sub.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericError

DEFAULT_DTYPE = np.float32

# When enabled, every op asserts its output is finite. Off by default for speed.
DEBUG_CHECKS = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """A dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.floating)) and data.dtype in (
            np.float32,
            np.float64,
        ):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Convenience operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class Tape:
    """Ordered record of backward closures for one forward computation.

    Use as a context manager around the forward pass, then call
    ``backward(loss)`` (inside or outside the block) to accumulate
    gradients into every tensor that requires them.
    """

    def __init__(self):
        self._records: list = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None

    def record(self, closure) -> None:
        self._records.append(closure)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for closure in reversed(self._records):
            closure()


def zero_grads(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        if t.grad.shape != t.data.shape:  # scalar grads broadcast up
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite output of {op}")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape()
    if requires and tape is not None:

        def closure():
            if out.grad is not None:
                backward(out.grad)

        tape.record(closure)
    return out


def _shape_check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ValueError(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also broadcasts a 1-d row vector over a 2-d matrix."""
    broadcast_b = a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]
    _shape_check(a.shape == b.shape or broadcast_b, "add", a.shape, b.shape)

    def backward(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0) if broadcast_b else g)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    broadcast_b = a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]
    _shape_check(a.shape == b.shape or broadcast_b, "sub", a.shape, b.shape)

    def backward(g):
        _accum(a, g)
        _accum(b, -(g.sum(axis=0) if broadcast_b else g))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _shape_check(a.shape == b.shape, "mul", a.shape, b.shape)

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), backward, "scale")


def add_const(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accum(a, g)

    return _make(a.data + c, (a,), backward, "add_const")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: (m,k)@(k,n), (m,k)@(k,) or (k,)@(k,) dot."""
    if a.ndim == 2 and b.ndim == 2:
        _shape_check(a.shape[1] == b.shape[0], "matmul", a.shape, b.shape)

        def backward(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

    elif a.ndim == 2 and b.ndim == 1:
        _shape_check(a.shape[1] == b.shape[0], "matmul", a.shape, b.shape)

        def backward(g):
            _accum(a, np.outer(g, b.data))
            _accum(b, a.data.T @ g)

    elif a.ndim == 1 and b.ndim == 1:
        _shape_check(a.shape == b.shape, "matmul", a.shape, b.shape)

        def backward(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

    else:
        _shape_check(False, "matmul", a.shape, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def dot(a: Tensor, b: Tensor) -> Tensor:
    return matmul(a, b)


def transpose(a: Tensor) -> Tensor:
    _shape_check(a.ndim == 2, "transpose", a.shape)

    def backward(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), backward, "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[index] += g

    return _make(a.data[index], (a,), backward, "narrow")


def split(a: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    size = a.shape[axis]
    _shape_check(size % sections == 0, "split", a.shape)
    width = size // sections
    return [narrow(a, axis, i * width, width) for i in range(sections)]


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    _shape_check(len(tensors) > 0, "concat")
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets, offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accum(t, g[tuple(index)])

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), backward, "concat")


def embed_rows(table: Tensor, ids: list[int] | np.ndarray) -> Tensor:
    """Gather rows of an embedding table; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64)

    def backward(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _make(table.data[idx], (table,), backward, "embed_rows")


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------

def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (cdf + x * pdf))

    return _make(x * cdf, (a,), backward, "gelu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - y * y))

    return _make(y, (a,), backward, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), backward, "sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - inner))

    return _make(y, (a,), backward, "softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then apply elementwise gain and bias."""
    dim = a.shape[-1]
    _shape_check(gain.shape == (dim,) and bias.shape == (dim,), "layer_norm",
                 a.shape, gain.shape, bias.shape)
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    norm = centered * inv_std

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * norm).reshape(-1, dim).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, dim).sum(axis=0))
        gx = g * gain.data
        gx_mean = gx.mean(axis=-1, keepdims=True)
        gxn_mean = (gx * norm).mean(axis=-1, keepdims=True)
        _accum(a, inv_std * (gx - gx_mean - norm * gxn_mean))

    return _make(norm * gain.data + bias.data, (a, gain, bias), backward, "layer_norm")


def dropout(a: Tensor, p: float, *, train: bool, seed: int = 0) -> Tensor:
    """Inverted dropout; identity in eval mode, deterministic per seed."""
    if not train or p <= 0.0:
        return a
    if p >= 1.0:
        raise ValueError(f"dropout probability {p} must be < 1")
    rng = np.random.default_rng(seed)
    mask = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)

    def backward(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), backward, "dropout")


def elementwise_max(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise maximum; at ties the gradient splits evenly."""
    _shape_check(a.shape == b.shape, "elementwise_max", a.shape, b.shape)
    take_a = a.data > b.data
    tie = a.data == b.data

    def backward(g):
        _accum(a, g * (take_a + 0.5 * tie))
        _accum(b, g * (~take_a & ~tie) + g * (0.5 * tie))

    return _make(np.maximum(a.data, b.data), (a, b), backward, "elementwise_max")


# ---------------------------------------------------------------------------
# Reductions and similarity measures
# ---------------------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.shape).copy())

    return _make(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), backward, "mean")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error; the target carries no gradient."""
    _shape_check(pred.shape == target.shape, "mse_loss", pred.shape, target.shape)
    diff = pred.data - target.data
    n = max(pred.data.size, 1)

    def backward(g):
        _accum(pred, g * 2.0 * diff / n)
        _accum(target, -g * 2.0 * diff / n)

    value = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)
    return _make(value, (pred, target), backward, "mse_loss")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine of two vectors; returns 0 with zero gradient if either norm < eps."""
    _shape_check(a.ndim == 1 and a.shape == b.shape, "cosine_similarity", a.shape, b.shape)
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na < eps or nb < eps:
        return _make(np.asarray(0.0, dtype=a.data.dtype), (a, b), lambda g: None,
                     "cosine_similarity")
    c = float(a.data @ b.data) / (na * nb)

    def backward(g):
        _accum(a, g * (b.data / (na * nb) - c * a.data / (na * na)))
        _accum(b, g * (a.data / (na * nb) - c * b.data / (nb * nb)))

    return _make(np.asarray(c, dtype=a.data.dtype), (a, b), backward, "cosine_similarity")


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    _shape_check(a.ndim == 1 and a.shape == b.shape, "euclidean_distance",
                 a.shape, b.shape)
    diff = a.data - b.data
    d = float(np.linalg.norm(diff))

    def backward(g):
        direction = diff / max(d, 1e-12)
        _accum(a, g * direction)
        _accum(b, -g * direction)

    return _make(np.asarray(d, dtype=a.data.dtype), (a, b), backward, "euclidean_distance")


def masked_mean_rows(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis-0 rows where mask is true."""
    m = np.asarray(mask, dtype=bool)
    _shape_check(a.ndim == 2 and m.shape == (a.shape[0],), "masked_mean_rows",
                 a.shape, m.shape)
    n = int(m.sum())
    _shape_check(n > 0, "masked_mean_rows", a.shape)

    def backward(g):
        out = np.zeros_like(a.data)
        out[m] = g / n
        _accum(a, out)

    return _make(a.data[m].mean(axis=0), (a,), backward, "masked_mean_rows")


def masked_max_rows(a: Tensor, mask: np.ndarray) -> Tensor:
    """Columnwise max over rows where mask is true; grad goes to first argmax."""
    m = np.asarray(mask, dtype=bool)
    _shape_check(a.ndim == 2 and m.shape == (a.shape[0],), "masked_max_rows",
                 a.shape, m.shape)
    rows = np.where(m)[0]
    _shape_check(rows.size > 0, "masked_max_rows", a.shape)
    arg = rows[a.data[rows].argmax(axis=0)]

    def backward(g):
        out = np.zeros_like(a.data)
        out[arg, np.arange(a.shape[1])] += g
        _accum(a, out)

    return _make(a.data[rows].max(axis=0), (a,), backward, "masked_max_rows")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates and the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction; no warmup or decay.

    Parameters with no accumulated gradient are treated as zero-gradient.
    Raises NumericError on non-finite gradients, reporting the step.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for '{name}' at step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
