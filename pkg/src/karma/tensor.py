"""Minimal differentiable-array engine.

A `Tensor` wraps a rank <= 3 numpy array (float64 by default) and records the
operations applied to it on a thread-local tape. `backward` replays the tape
in reverse creation order exactly once, accumulating gradients into every
leaf that requires them.

The op set is deliberately narrow: exactly the primitives the forecasting
model and its loss need. There is no general broadcasting; the few
broadcast-shaped products the state-space layer needs are dedicated fused ops
with hand-written adjoints.

Conventions:
  * matrices are row-major, 2-D unless stated otherwise;
  * "row vector" ops combine an (m, n) matrix with an (n,) vector;
  * every element of every tensor must be finite; NaN/Inf raises.
"""

from __future__ import annotations

import threading
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .rng import Rng

DEFAULT_DTYPE = np.float64

_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = None
        _state.grad_enabled = True
    return _state


class Tape:
    """Append-only record of one forward pass; consumed once by backward."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False


class TapeNode:
    __slots__ = ("op", "inputs", "output", "saved", "backward_fn")

    def __init__(self, op, inputs, output, saved, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.saved = saved
        self.backward_fn = backward_fn


class no_grad:
    """Context manager disabling tape recording in the current thread."""

    def __enter__(self):
        s = _tls()
        self._prev = s.grad_enabled
        s.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls().grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _tls().grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            # keep float32 buffers (low-precision benchmark path); promote
            # everything else to the fp64 default
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} exceeds the rank-3 cap (shape {arr.shape})")
        if not np.isfinite(arr).all():
            raise ContractError("tensor holds non-finite elements")
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._tape = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        """Accumulated gradient buffer, or None before any backward pass."""
        return self._grad

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """The underlying buffer. Treat as read-only."""
        return self.data

    def copy(self, requires_grad=None) -> "Tensor":
        return Tensor(self.data.copy(),
                      self.requires_grad if requires_grad is None else requires_grad)

    def zero_grad(self):
        if self.requires_grad:
            self._grad = np.zeros_like(self.data)

    def clear_grad(self):
        self._grad = None

    def _accum_grad(self, g: np.ndarray):
        if not self.requires_grad:
            raise ContractError("gradient accumulated into a non-grad tensor")
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self._grad is None:
            self._grad = g.copy()
        else:
            self._grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(op, inputs: Sequence[Tensor], data: np.ndarray, saved, backward_fn) -> Tensor:
    """Wrap an op result, recording a tape node when gradients are live."""
    data = np.asarray(data)
    out = Tensor(data, dtype=data.dtype)
    s = _tls()
    if s.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        if s.tape is None or s.tape.consumed:
            s.tape = Tape()
        node = TapeNode(op, tuple(inputs), out, saved, backward_fn)
        s.tape.nodes.append(node)
        out._tape = s.tape
    return out


def backward(loss: Tensor) -> None:
    """Populate d(loss)/d(leaf) for every requires_grad leaf on loss's tape.

    The tape is consumed: a second backward over the same tape raises.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not produced by a live tape")
    if tape.consumed:
        raise ContractError("backward already consumed this tape")
    tape.consumed = True
    loss._grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output._grad
        if g is None:
            continue
        grads = node.backward_fn(node, g)
        for inp, gi in zip(node.inputs, grads):
            if gi is not None and inp.requires_grad:
                inp._accum_grad(gi)
        node.output._grad = None if node.output._tape is tape else node.output._grad
        node.saved = None
    tape.nodes.clear()
    s = _tls()
    if s.tape is tape:
        s.tape = None


# -- elementwise arithmetic ----------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} != shape {b.shape}")


def _bw_add(node, g):
    return g, g


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result("add", (a, b), a.data + b.data, None, _bw_add)


def _bw_sub(node, g):
    return g, -g


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result("sub", (a, b), a.data - b.data, None, _bw_sub)


def _bw_mul(node, g):
    a, b = node.saved
    return g * b, g * a


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _result("mul", (a, b), a.data * b.data, (a.data, b.data), _bw_mul)


def _bw_scale(node, g):
    return (g * node.saved,)


def scale(x: Tensor, c: float) -> Tensor:
    return _result("scale", (x,), x.data * c, float(c), _bw_scale)


def _bw_exp(node, g):
    return (g * node.saved,)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", (x,), out, out, _bw_exp)


def _bw_reciprocal(node, g):
    out = node.saved
    return (-g * out * out,)


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return _result("reciprocal", (x,), out, out, _bw_reciprocal)


def _bw_softplus(node, g):
    x = node.saved
    return (g / (1.0 + np.exp(-x)),)


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x) without overflow for large |x|
    out = np.logaddexp(0.0, x.data)
    return _result("softplus", (x,), out, x.data, _bw_softplus)


def _bw_silu(node, g):
    s, x = node.saved
    return (g * s * (1.0 + x * (1.0 - s)),)


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _result("silu", (x,), x.data * s, (s, x.data), _bw_silu)


def _bw_hypot(node, g):
    a, b, out = node.saved
    safe = np.where(out == 0.0, 1.0, out)
    return g * a / safe, g * b / safe


def hypot(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sqrt(a^2 + b^2); subgradient 0 at the origin."""
    _same_shape(a, b, "hypot")
    out = np.hypot(a.data, b.data)
    return _result("hypot", (a, b), out, (a.data, b.data, out), _bw_hypot)


# -- linear algebra ------------------------------------------------------------


def _bw_matmul(node, g):
    a, b = node.saved
    return g @ b.T, a.T @ g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    return _result("matmul", (a, b), a.data @ b.data, (a.data, b.data), _bw_matmul)


def _bw_transpose(node, g):
    return (g.T,)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {x.shape}")
    return _result("transpose", (x,), x.data.T.copy(), None, _bw_transpose)


def _bw_reshape(node, g):
    return (g.reshape(node.saved),)


def reshape(x: Tensor, shape) -> Tensor:
    return _result("reshape", (x,), x.data.reshape(shape), x.shape, _bw_reshape)


def _bw_slice_cols(node, g):
    shape, start = node.saved
    gx = np.zeros(shape, dtype=g.dtype)
    gx[:, start:start + g.shape[1]] = g
    return (gx,)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got {x.shape}")
    return _result("slice_cols", (x,), x.data[:, start:stop].copy(),
                   (x.shape, start), _bw_slice_cols)


def _bw_concat_cols(node, g):
    widths = node.saved
    grads, at = [], 0
    for w in widths:
        grads.append(g[:, at:at + w])
        at += w
    return tuple(grads)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols of nothing")
    rows = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise ShapeError("concat_cols: row counts differ")
    data = np.concatenate([p.data for p in parts], axis=1)
    return _result("concat_cols", tuple(parts), data,
                   tuple(p.shape[1] for p in parts), _bw_concat_cols)


def _bw_sum_all(node, g):
    return (np.broadcast_to(g, node.saved).astype(g.dtype, copy=True),)


def sum_all(x: Tensor) -> Tensor:
    return _result("sum_all", (x,), np.asarray(x.data.sum()), x.shape, _bw_sum_all)


def _bw_mean_all(node, g):
    shape, n = node.saved
    return (np.broadcast_to(g / n, shape).astype(g.dtype, copy=True),)


def mean_all(x: Tensor) -> Tensor:
    return _result("mean_all", (x,), np.asarray(x.data.mean()),
                   (x.shape, x.size), _bw_mean_all)


def _bw_add_row_vec(node, g):
    return g, g.sum(axis=0)


def add_row_vec(x: Tensor, v: Tensor) -> Tensor:
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"add_row_vec: {x.shape} with {v.shape}")
    return _result("add_row_vec", (x, v), x.data + v.data[None, :], None, _bw_add_row_vec)


def _bw_mul_row_vec(node, g):
    x, v = node.saved
    return g * v[None, :], (g * x).sum(axis=0)


def mul_row_vec(x: Tensor, v: Tensor) -> Tensor:
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"mul_row_vec: {x.shape} with {v.shape}")
    return _result("mul_row_vec", (x, v), x.data * v.data[None, :],
                   (x.data, v.data), _bw_mul_row_vec)


# -- normalisation and structure ------------------------------------------------


def _bw_softmax_rows(node, g):
    out = node.saved
    dot = (g * out).sum(axis=1, keepdims=True)
    return (out * (g - dot),)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by row-max subtraction."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return _result("softmax_rows", (x,), out, out, _bw_softmax_rows)


def _bw_rmsnorm(node, g):
    x, gain, r, n = node.saved
    gg = g * gain[None, :]
    gx = gg / r - x * (gg * x).sum(axis=1, keepdims=True) / (n * r ** 3)
    ggain = (g * (x / r)).sum(axis=0)
    return gx, ggain


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each row by sqrt(mean(row^2) + eps), then scale by gain."""
    if x.ndim != 2 or gain.ndim != 1 or gain.shape[0] != x.shape[1]:
        raise ShapeError(f"rmsnorm: {x.shape} with gain {gain.shape}")
    if eps < 0:
        raise ConfigError("rmsnorm eps must be >= 0")
    n = x.shape[1]
    r = np.sqrt((x.data ** 2).mean(axis=1, keepdims=True) + eps)
    out = (x.data / r) * gain.data[None, :]
    return _result("rmsnorm", (x, gain), out, (x.data, gain.data, r, n), _bw_rmsnorm)


def _bw_flip(node, g):
    return (g[::-1].copy(),)


def flip_axis0(x: Tensor) -> Tensor:
    """Reverse the leading axis (row order for matrices)."""
    return _result("flip_axis0", (x,), x.data[::-1].copy(), None, _bw_flip)


def _bw_dropout(node, g):
    return (g * node.saved,)


def dropout(x: Tensor, p: float, rng: Rng, training: bool) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result("dropout", (x,), x.data * keep, keep, _bw_dropout)


# -- causal depthwise convolution ------------------------------------------------


def _bw_conv1d_causal(node, g):
    xpad, kern = node.saved
    t = g.shape[0]
    kw = kern.shape[1]
    gx_pad = np.zeros_like(xpad)
    gk = np.empty_like(kern)
    for j in range(kw):
        gx_pad[j:j + t] += g * kern[:, j][None, :]
        gk[:, j] = (g * xpad[j:j + t]).sum(axis=0)
    gb = g.sum(axis=0)
    return gx_pad[kw - 1:], gk, gb


def conv1d_causal(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal convolution with left zero padding.

    x: (tokens, channels); kernels: (channels, width); bias: (channels,).
    out[t, c] = bias[c] + sum_j kernels[c, j] * x[t - width + 1 + j, c]
    """
    if x.ndim != 2 or kernels.ndim != 2 or x.shape[1] != kernels.shape[0]:
        raise ShapeError(f"conv1d_causal: {x.shape} with kernels {kernels.shape}")
    t, c = x.shape
    kw = kernels.shape[1]
    xpad = np.concatenate([np.zeros((kw - 1, c), dtype=x.dtype), x.data], axis=0)
    out = np.tile(bias.data[None, :], (t, 1))
    for j in range(kw):
        out += kernels.data[:, j][None, :] * xpad[j:j + t]
    return _result("conv1d_causal", (x, kernels, bias), out, (xpad, kernels.data),
                   _bw_conv1d_causal)


# -- discrete Fourier transform ---------------------------------------------------


@lru_cache(maxsize=32)
def dft_matrices(n: int, dtype_name: str = "float64") -> tuple[np.ndarray, np.ndarray]:
    """(cos, -sin) matrices of shape (n//2 + 1, n) realising the one-sided
    real-input DFT as two matrix products."""
    dtype = np.dtype(dtype_name)
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    ang = 2.0 * np.pi * k * t / n
    return np.cos(ang).astype(dtype), (-np.sin(ang)).astype(dtype)


def dft_apply(x: Tensor) -> tuple[Tensor, Tensor]:
    """One-sided DFT of a length-n signal: bins 0..n//2 as (real, imag)."""
    if x.ndim != 1:
        raise ShapeError(f"dft_apply needs a rank-1 tensor, got {x.shape}")
    n = x.shape[0]
    cm, sm = dft_matrices(n, x.dtype.name)
    col = reshape(x, (n, 1))
    re = reshape(matmul(Tensor(cm, dtype=x.dtype), col), (n // 2 + 1,))
    im = reshape(matmul(Tensor(sm, dtype=x.dtype), col), (n // 2 + 1,))
    return re, im
