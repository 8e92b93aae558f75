"""Selective state-space sequence block.

One block maps (tokens x d_in) to (tokens x d_in): an input projection
splits into a stream and a gate; the stream passes a causal depthwise
convolution and silu; per-token Delta, B, C come from linear maps of the
stream (the selection mechanism); zero-order-hold discretization produces
the per-step transition, and a linear scan applies the recurrence

    h_t = abar_t * h_{t-1} + bbar_t * u_t,   y_t = <c_t, h_t> + d_skip * u_t

with a diagonal state (d_inner x d_state). The gated result is projected
back to d_in. Token axis here is the channel dimension of the series, so
cost is linear in both channels and lookback.

The rank-3 intermediates get dedicated fused tape ops; the scan itself
dispatches to the compiled or numpy kernel in backend.py.
"""

from dataclasses import dataclass
from math import ceil, log, sqrt

import numpy as np

from . import backend
from .errors import ConfigError, ContractError, ShapeError
from .rng import Rng
from .tensor import (Tensor, _result, add, add_row_vec, conv1d_causal, exp,
                     matmul, mul, mul_row_vec, scale, silu, slice_cols,
                     softplus)

_SERIES_CUTOFF = 1e-6


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1)/z with the removable singularity filled by its series."""
    small = np.abs(z) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    exact = np.expm1(safe) / safe
    series = 1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
    return np.where(small, series, exact)


def _phi_prime(z: np.ndarray) -> np.ndarray:
    """d/dz of _phi: (exp(z)(z-1) + 1)/z^2, series near zero."""
    small = np.abs(z) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    exact = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    series = 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    return np.where(small, series, exact)


def _bw_discretize_a(node, g):
    a, delta, out = node.saved
    gv = g * out
    gdelta = (gv * a[None, :, :]).sum(axis=2)
    ga = (gv * delta[:, :, None]).sum(axis=0)
    return gdelta, ga


def _discretize_a(delta: Tensor, a: Tensor) -> Tensor:
    out = np.exp(delta.data[:, :, None] * a.data[None, :, :])
    return _result("discretize_a", (delta, a), out, (a.data, delta.data, out),
                   _bw_discretize_a)


def _bw_discretize_b(node, g):
    delta, a, b, z, phi = node.saved
    d3 = delta[:, :, None]
    b3 = b[:, None, :]
    gphi = g * d3 * b3
    gz = gphi * _phi_prime(z)
    gdelta = (gz * a[None, :, :] + g * phi * b3).sum(axis=2)
    ga = (gz * d3).sum(axis=0)
    gb = (g * phi * d3).sum(axis=1)
    return gdelta, ga, gb


def _discretize_b(delta: Tensor, a: Tensor, b: Tensor) -> Tensor:
    z = delta.data[:, :, None] * a.data[None, :, :]
    phi = _phi(z)
    out = phi * delta.data[:, :, None] * b.data[:, None, :]
    return _result("discretize_b", (delta, a, b), out,
                   (delta.data, a.data, b.data, z, phi), _bw_discretize_b)


def discretize(delta: Tensor, a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold: abar = exp(delta*a); bbar = phi(delta*a)*delta*b.

    delta: (T, P) positive; a: (P, N) negative diagonal entries; b: (T, N).
    Outputs are rank 3, (T, P, N).
    """
    if delta.ndim != 2 or a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"discretize wants 2-D inputs, got {delta.shape}, "
                         f"{a.shape}, {b.shape}")
    if delta.shape[1] != a.shape[0] or delta.shape[0] != b.shape[0] \
            or a.shape[1] != b.shape[1]:
        raise ShapeError(f"discretize shapes disagree: delta {delta.shape}, "
                         f"a {a.shape}, b {b.shape}")
    if (delta.data <= 0).any():
        raise ContractError("discretize requires strictly positive step sizes")
    return _discretize_a(delta, a), _discretize_b(delta, a, b)


def _bw_mul_state(node, g):
    x3, u = node.saved
    return g * u[:, :, None], (g * x3).sum(axis=2)


def _mul_state(x3: Tensor, u: Tensor) -> Tensor:
    out = x3.data * u.data[:, :, None]
    return _result("mul_state", (x3, u), out, (x3.data, u.data), _bw_mul_state)


def _bw_sel_scan(node, g):
    abar, c, h = node.saved
    return backend.scan_backward(abar, c, h, g)


def _sel_scan(abar: Tensor, bu: Tensor, c: Tensor, chunk=None) -> Tensor:
    if chunk is None:
        y, h = backend.scan_forward(abar.data, bu.data, c.data)
    else:
        y, h = backend.scan_chunked_forward(abar.data, bu.data, c.data, chunk)
    return _result("sel_scan", (abar, bu, c), y, (abar.data, c.data, h),
                   _bw_sel_scan)


# -- parameters --------------------------------------------------------------------


@dataclass
class SsmParams:
    d_in: int
    d_state: int
    d_conv: int
    expand: int
    w_in_proj: Tensor   # d_in x 2*d_inner -> (stream, gate)
    conv_w: Tensor      # d_inner x d_conv, depthwise causal
    conv_b: Tensor      # d_inner
    w_bc: Tensor        # d_inner x 2*d_state -> (B, C)
    w_dt_down: Tensor   # d_inner x dt_rank
    w_dt_up: Tensor     # dt_rank x d_inner
    dt_bias: Tensor     # d_inner
    a_log: Tensor       # d_inner x d_state, stores log(-A)
    d_skip: Tensor      # d_inner
    w_out_proj: Tensor  # d_inner x d_in

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_in

    @property
    def dt_rank(self) -> int:
        return ceil(self.d_in / 16)

    def named(self, prefix: str):
        for field in ("w_in_proj", "conv_w", "conv_b", "w_bc", "w_dt_down",
                      "w_dt_up", "dt_bias", "a_log", "d_skip", "w_out_proj"):
            yield f"{prefix}.{field}", getattr(self, field)


def init_ssm(d_in: int, d_state: int, d_conv: int, expand: int, rng: Rng) -> SsmParams:
    if min(d_in, d_state, expand) < 1 or d_conv < 1:
        raise ConfigError("state-space extents must be positive")
    d_inner = expand * d_in
    dt_rank = ceil(d_in / 16)

    def uni(r, fan_in, shape):
        bound = 1.0 / sqrt(fan_in)
        return Tensor(r.uniform(-bound, bound, shape), requires_grad=True)

    # step-size bias: softplus(bias) log-uniform in [1e-3, 1e-1]
    dt = np.exp(rng.spawn(6).uniform(log(1e-3), log(1e-1), (d_inner,)))
    dt_bias = np.log(np.expm1(dt))
    # decay rates 1..N per inner channel, stored as logs
    a_log = np.log(np.tile(np.arange(1.0, d_state + 1.0)[None, :], (d_inner, 1)))
    return SsmParams(
        d_in=d_in, d_state=d_state, d_conv=d_conv, expand=expand,
        w_in_proj=uni(rng.spawn(0), d_in, (d_in, 2 * d_inner)),
        conv_w=uni(rng.spawn(1), d_conv, (d_inner, d_conv)),
        conv_b=Tensor(np.zeros(d_inner), requires_grad=True),
        w_bc=uni(rng.spawn(3), d_inner, (d_inner, 2 * d_state)),
        w_dt_down=uni(rng.spawn(4), d_inner, (d_inner, dt_rank)),
        w_dt_up=uni(rng.spawn(5), dt_rank, (dt_rank, d_inner)),
        dt_bias=Tensor(dt_bias, requires_grad=True),
        a_log=Tensor(a_log, requires_grad=True),
        d_skip=Tensor(np.ones(d_inner), requires_grad=True),
        w_out_proj=uni(rng.spawn(7), d_inner, (d_inner, d_in)))


# -- scans ---------------------------------------------------------------------------


def scan_sequential(u: Tensor, params: SsmParams, delta: Tensor, b: Tensor,
                    c: Tensor) -> Tensor:
    """Exact left-to-right recurrence; y_t = <c_t, h_t> + d_skip * u_t."""
    a = scale(exp(params.a_log), -1.0)
    abar, bbar = discretize(delta, a, b)
    y = _sel_scan(abar, _mul_state(bbar, u), c, chunk=None)
    return add(y, mul_row_vec(u, params.d_skip))


def scan_chunked(u: Tensor, params: SsmParams, delta: Tensor, b: Tensor,
                 c: Tensor, chunk: int) -> Tensor:
    """Chunk-composed scan; equals scan_sequential within 1e-10 in fp64."""
    if chunk < 1:
        raise ConfigError(f"chunk size must be >= 1, got {chunk}")
    a = scale(exp(params.a_log), -1.0)
    abar, bbar = discretize(delta, a, b)
    y = _sel_scan(abar, _mul_state(bbar, u), c, chunk=chunk)
    return add(y, mul_row_vec(u, params.d_skip))


def mamba_forward(x: Tensor, params: SsmParams, scan_mode: str = "sequential",
                  chunk: int = 64) -> Tensor:
    """Full selective block over token rows of x (tokens x d_in)."""
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ShapeError(f"input {x.shape} does not match block width {params.d_in}")
    d_inner, n = params.d_inner, params.d_state
    proj = matmul(x, params.w_in_proj)
    stream = slice_cols(proj, 0, d_inner)
    gate = slice_cols(proj, d_inner, 2 * d_inner)
    u = silu(conv1d_causal(stream, params.conv_w, params.conv_b))
    bc = matmul(u, params.w_bc)
    b = slice_cols(bc, 0, n)
    c = slice_cols(bc, n, 2 * n)
    delta = softplus(add_row_vec(matmul(matmul(u, params.w_dt_down),
                                        params.w_dt_up), params.dt_bias))
    if scan_mode == "sequential":
        y = scan_sequential(u, params, delta, b, c)
    elif scan_mode == "chunked":
        y = scan_chunked(u, params, delta, b, c, chunk)
    else:
        raise ConfigError(f"unknown scan mode {scan_mode!r}")
    return matmul(mul(y, silu(gate)), params.w_out_proj)
