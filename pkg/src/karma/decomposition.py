"""Trend/seasonal and frequency/temporal decompositions.

Two stages:

  * ATCD: attention over the channel axis splits the normalized window into
    a trend part and a seasonal remainder inside an inner feature space,
    with the exact additivity x_in = x_trend + x_seasonal in that space.
  * HFTD: a single-level orthogonal wavelet transform applied per channel of
    the embedded seasonal component, alongside an RMS-normalized temporal
    residual and its channel-flipped copy.

The DWT uses periodic boundary extension and is realized as multiplication
by an orthogonal matrix, so synthesis is exactly the transposed analysis and
reconstruction is perfect for every even length.
"""

from dataclasses import dataclass
from math import comb, sqrt
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import (Tensor, add, add_row_vec, concat_cols, dropout,
                     flip_axis0, matmul, reshape, rmsnorm, scale, silu,
                     softmax_rows, sub, transpose)

# -- wavelet filters -------------------------------------------------------------


@dataclass(frozen=True)
class WaveletFilter:
    """Orthonormal analysis/synthesis filter pair.

    synthesis taps are the time-reversed analysis taps; with the periodized
    matrix form below, synthesis is just the transposed analysis operator.
    """
    name: str
    analysis_low: np.ndarray
    analysis_high: np.ndarray
    synthesis_low: np.ndarray
    synthesis_high: np.ndarray
    support: int


def _qmf_high(h: np.ndarray) -> np.ndarray:
    # g[j] = (-1)^j h[L-1-j]
    signs = (-1.0) ** np.arange(h.size)
    return signs * h[::-1]


def _daubechies_low(n_moments: int) -> np.ndarray:
    """Scaling filter with n_moments vanishing moments (2*n_moments taps).

    Spectral factorization of the Daubechies product filter: keep the roots
    inside the unit circle, attach the (1+z)^N factor, normalize to sum
    sqrt(2). Self-checked for orthonormality by the caller.
    """
    n = n_moments
    # P(y) = sum_k C(n-1+k, k) y^k evaluated at y = (2 - z - 1/z)/4,
    # cleared of negative powers: Q(z) = sum_k P_k (-(z-1)^2/4)^k z^(n-1-k)
    q = np.zeros(2 * n - 1)
    base = np.array([-0.25, 0.5, -0.25])  # -(z-1)^2/4, ascending powers
    for k in range(n):
        term = np.array([float(comb(n - 1 + k, k))])
        for _ in range(k):
            term = np.convolve(term, base)
        padded = np.zeros(2 * n - 1)
        padded[n - 1 - k:n - 1 - k + term.size] = term
        q += padded
    roots = np.roots(q[::-1])  # np.roots wants descending powers
    inside = roots[np.abs(roots) < 1.0]
    if inside.size != n - 1:
        raise ConfigError(f"wavelet factorization found {inside.size} interior "
                          f"roots, expected {n - 1}")
    h = np.array([1.0 + 0.0j])
    for r in inside:
        h = np.convolve(h, np.array([1.0, -r]))
    for _ in range(n):
        h = np.convolve(h, np.array([0.5, 0.5]))
    h = np.real(h)
    return h * (sqrt(2.0) / h.sum())


def _check_orthonormal(h: np.ndarray, name: str):
    for shift in range(0, h.size, 2):
        dot = float(np.dot(h[shift:], h[:h.size - shift]))
        want = 1.0 if shift == 0 else 0.0
        if abs(dot - want) > 1e-10:
            raise ConfigError(f"{name} taps are not orthonormal at shift {shift}")


_filters: dict[str, WaveletFilter] = {}


def make_wavelet(name: str) -> WaveletFilter:
    if name in _filters:
        return _filters[name]
    if name == "haar":
        low = np.array([1.0, 1.0]) / sqrt(2.0)
    elif name == "db4":
        low = _daubechies_low(4)
    else:
        raise ConfigError(f"unknown wavelet {name!r} (expected 'haar' or 'db4')")
    _check_orthonormal(low, name)
    high = _qmf_high(low)
    filt = WaveletFilter(name=name, analysis_low=low, analysis_high=high,
                         synthesis_low=low[::-1].copy(),
                         synthesis_high=high[::-1].copy(), support=low.size)
    _filters[name] = filt
    return filt


_dwt_matrices: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]] = {}


def dwt_matrices(filt: WaveletFilter, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Periodized analysis matrices (W_low, W_high), each (n/2, n).

    Row k holds the analysis taps laid down at offset 2k, wrapped modulo n
    (taps longer than n alias additively). Stacked they form an orthogonal
    n x n matrix, so the inverse transform is the transpose.
    """
    if n % 2 != 0 or n < 2:
        raise ConfigError(f"wavelet transform needs an even length >= 2, got {n}")
    key = (filt.name, n)
    if key in _dwt_matrices:
        return _dwt_matrices[key]
    m = n // 2
    wl = np.zeros((m, n))
    wh = np.zeros((m, n))
    for k in range(m):
        for j in range(filt.support):
            col = (2 * k + j) % n
            wl[k, col] += filt.analysis_low[j]
            wh[k, col] += filt.analysis_high[j]
    _dwt_matrices[key] = (wl, wh)
    return wl, wh


def dwt_analyze(x: Tensor, filt: WaveletFilter) -> tuple[Tensor, Tensor]:
    """Single-level DWT with periodic extension.

    x is one channel (rank 1, even length) or a stack of channels
    (rank 2, channels x length); coefficients halve the length.
    """
    n = x.shape[-1]
    wl, wh = dwt_matrices(filt, n)
    wlt = Tensor(wl.T.astype(x.dtype, copy=False))
    wht = Tensor(wh.T.astype(x.dtype, copy=False))
    if x.ndim == 1:
        row = reshape(x, (1, n))
        low = reshape(matmul(row, wlt), (n // 2,))
        high = reshape(matmul(row, wht), (n // 2,))
    elif x.ndim == 2:
        low = matmul(x, wlt)
        high = matmul(x, wht)
    else:
        raise ShapeError(f"dwt_analyze takes rank 1 or 2, got shape {x.shape}")
    return low, high


def dwt_synthesize(low: Tensor, high: Tensor, filt: WaveletFilter) -> Tensor:
    """Exact inverse of dwt_analyze (transposed orthogonal operator)."""
    if low.shape != high.shape:
        raise ShapeError(f"coefficient shapes differ: {low.shape} vs {high.shape}")
    m = low.shape[-1]
    wl, wh = dwt_matrices(filt, 2 * m)
    wlt = Tensor(wl.astype(low.dtype, copy=False))
    wht = Tensor(wh.astype(low.dtype, copy=False))
    if low.ndim == 1:
        lr = reshape(low, (1, m))
        hr = reshape(high, (1, m))
        out = add(matmul(lr, wlt), matmul(hr, wht))
        return reshape(out, (2 * m,))
    if low.ndim == 2:
        return add(matmul(low, wlt), matmul(high, wht))
    raise ShapeError(f"dwt_synthesize takes rank 1 or 2, got shape {low.shape}")


# -- ATCD ------------------------------------------------------------------------


@dataclass
class AtcdParams:
    """Attention-based trend extractor operating with channels as tokens.

    w_in lifts each channel's L samples into the inner width I (so time
    mixing happens here); attention then mixes the D channel tokens;
    w_out_t / w_out_s map trend and seasonal back to length L.
    """
    w_in: Tensor          # L x I
    b_in: Tensor          # I
    w_q: list             # per head, I x d_n
    w_k: list
    w_v: list
    w_o: Tensor           # I x I
    w_out_t: Tensor       # I x L
    w_out_s: Tensor       # I x L
    heads: int
    inner: int
    p_drop: float

    @property
    def d_n(self) -> int:
        return self.inner // self.heads

    def named(self, prefix: str = "atcd"):
        yield f"{prefix}.w_in", self.w_in
        yield f"{prefix}.b_in", self.b_in
        for i in range(self.heads):
            yield f"{prefix}.w_q.{i}", self.w_q[i]
            yield f"{prefix}.w_k.{i}", self.w_k[i]
            yield f"{prefix}.w_v.{i}", self.w_v[i]
        yield f"{prefix}.w_o", self.w_o
        yield f"{prefix}.w_out_t", self.w_out_t
        yield f"{prefix}.w_out_s", self.w_out_s


def init_atcd(lookback: int, inner: int, heads: int, p_drop: float, rng: Rng) -> AtcdParams:
    if inner % heads != 0:
        raise ConfigError(f"inner width {inner} not divisible by {heads} heads")
    d_n = inner // heads
    r_in, r_attn, r_out = rng.spawn(0), rng.spawn(1), rng.spawn(2)

    def uni(r, fan_in, shape):
        bound = 1.0 / sqrt(fan_in)
        return Tensor(r.uniform(-bound, bound, shape), requires_grad=True)

    w_q, w_k, w_v = [], [], []
    for i in range(heads):
        hr = r_attn.spawn(i)
        w_q.append(uni(hr.spawn(0), inner, (inner, d_n)))
        w_k.append(uni(hr.spawn(1), inner, (inner, d_n)))
        w_v.append(uni(hr.spawn(2), inner, (inner, d_n)))
    return AtcdParams(
        w_in=uni(r_in.spawn(0), lookback, (lookback, inner)),
        b_in=Tensor(np.zeros(inner), requires_grad=True),
        w_q=w_q, w_k=w_k, w_v=w_v,
        w_o=uni(r_attn.spawn(heads), inner, (inner, inner)),
        w_out_t=uni(r_out.spawn(0), inner, (inner, lookback)),
        w_out_s=uni(r_out.spawn(1), inner, (inner, lookback)),
        heads=heads, inner=inner, p_drop=p_drop)


def mha(x: Tensor, params: AtcdParams) -> Tensor:
    """Multi-head self-attention over the token rows of x (tokens x I)."""
    if x.shape[1] != params.inner:
        raise ShapeError(f"attention width {x.shape[1]} != params inner {params.inner}")
    inv = 1.0 / sqrt(params.d_n)
    heads = []
    for i in range(params.heads):
        q = matmul(x, params.w_q[i])
        k = matmul(x, params.w_k[i])
        v = matmul(x, params.w_v[i])
        weights = softmax_rows(scale(matmul(q, transpose(k)), inv))
        heads.append(matmul(weights, v))
    return matmul(concat_cols(heads), params.w_o)


def atcd_forward(x_norm: Tensor, params: AtcdParams, rng: Optional[Rng],
                 training: bool, return_inner: bool = False):
    """Split a normalized L x D window into trend and seasonal parts.

    Inner-space identity: trend_inner + seasonal_inner == x_inner exactly.
    Returns (x_t, x_s), both L x D; with return_inner, also the
    (x_inner, trend_inner, seasonal_inner) triple (each D x I).
    """
    if x_norm.ndim != 2 or x_norm.shape[0] != params.w_in.shape[0]:
        raise ShapeError(f"window shape {x_norm.shape} incompatible with "
                         f"lookback {params.w_in.shape[0]}")
    tokens = transpose(x_norm)                        # D x L
    x_inner = add_row_vec(matmul(tokens, params.w_in), params.b_in)
    x_inner = dropout(x_inner, params.p_drop, rng, training)
    trend_inner = silu(mha(x_inner, params))
    seasonal_inner = sub(x_inner, trend_inner)
    x_t = transpose(matmul(trend_inner, params.w_out_t))
    x_s = transpose(matmul(seasonal_inner, params.w_out_s))
    if return_inner:
        return x_t, x_s, (x_inner, trend_inner, seasonal_inner)
    return x_t, x_s


# -- HFTD ------------------------------------------------------------------------


@dataclass
class FreqComponents:
    """(F_h, F_l, T_f, T_b) quadruple threaded through the model blocks.

    f_h/f_l are None when the wavelet split is ablated away; t_b is always
    the channel-flip of t_f at construction.
    """
    f_h: Optional[Tensor]
    f_l: Optional[Tensor]
    t_f: Tensor
    t_b: Tensor
    m: int


def hftd_decompose(x_se: Tensor, filt: Optional[WaveletFilter],
                   rms_gain: Tensor, eps: float = 1e-8) -> FreqComponents:
    """Wavelet-split the embedded seasonal block (D x E_s) per channel and
    keep an RMS-normalized temporal residual plus its channel flip.

    filt=None skips the wavelet split (ablation), leaving only the residual.
    """
    if x_se.ndim != 2:
        raise ShapeError(f"expected a channels x width matrix, got {x_se.shape}")
    t_f = rmsnorm(x_se, rms_gain, eps)
    t_b = flip_axis0(t_f)
    if filt is None:
        return FreqComponents(None, None, t_f, t_b, 0)
    f_l, f_h = dwt_analyze(x_se, filt)
    return FreqComponents(f_h, f_l, t_f, t_b, x_se.shape[1] // 2)


def hftd_inverse(f: FreqComponents, filt: Optional[WaveletFilter]) -> Tensor:
    """Wavelet synthesis of the refined coefficients plus the temporal term."""
    if f.f_h is None:
        return f.t_f
    recon = dwt_synthesize(f.f_l, f.f_h, filt)
    if recon.shape != f.t_f.shape:
        raise ShapeError(f"reconstruction {recon.shape} vs residual {f.t_f.shape}")
    return add(recon, f.t_f)
