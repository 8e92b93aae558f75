"""Kernels for the diagonal state-space scan.

The recurrence h_t = abar_t * h_{t-1} + bu_t (elementwise over a
(d_inner, d_state) state), read out as y_t[p] = sum_n c_t[n] * h_t[p, n],
is the only part of the model that cannot be expressed as matrix products.
Two interchangeable implementations are provided:

  * a compiled extension (built from _scan.pyx at install time);
  * a pure-numpy fallback.

One is chosen at import; KARMA_BACKEND=numpy|cython overrides the choice.
Both return the full state history h so the reverse pass can run without
recomputation. The chunked forward is always numpy: its point is to bound
python-level loop iterations by chunk + ceil(T/chunk) instead of T.
"""

import os

import numpy as np

from .errors import ConfigError


def _np_scan_forward(abar, bu, c):
    """Sequential scan. abar, bu: (T, P, N); c: (T, N) -> y (T, P), h (T, P, N)."""
    t_len = abar.shape[0]
    h = np.empty_like(bu)
    state = np.zeros_like(bu[0])
    for t in range(t_len):
        state = abar[t] * state + bu[t]
        h[t] = state
    y = np.matmul(h, c[:, :, None])[:, :, 0]
    return y, h


def _np_scan_backward(abar, c, h, gy):
    """Adjoint of the scan given saved states h and output cotangent gy.

    Returns (g_abar, g_bu, g_c). Uses the reverse recurrence
    gh_t = gy_t c_t + abar_{t+1} * gh_{t+1}.
    """
    t_len = abar.shape[0]
    gabar = np.empty_like(abar)
    gbu = np.empty_like(abar)
    gc = np.matmul(gy[:, None, :], h)[:, 0, :]
    gh = np.zeros_like(abar[0])
    for t in range(t_len - 1, -1, -1):
        gh = gy[t][:, None] * c[t][None, :] + gh
        gbu[t] = gh
        if t > 0:
            gabar[t] = gh * h[t - 1]
        else:
            gabar[0] = 0.0  # h before the first step is zero
        gh = abar[t] * gh
    return gabar, gbu, gc


def _np_scan_chunked_forward(abar, bu, c, chunk):
    """Chunked scan: same outputs as _np_scan_forward within fp rounding.

    Splits time into ceil(T/chunk) chunks. Within-chunk partial states and
    cumulative decay products sweep the offset axis (chunk iterations,
    vectorised across chunks); entry states then propagate across chunk
    boundaries (ceil(T/chunk) iterations). chunk=1 and chunk=T reduce to the
    sequential recurrence operation-for-operation.
    """
    if chunk < 1:
        raise ConfigError(f"chunk size must be >= 1, got {chunk}")
    t_len, p, n = abar.shape
    n_chunks = -(-t_len // chunk)
    pad = n_chunks * chunk - t_len
    if pad:
        z = np.zeros((pad, p, n), dtype=abar.dtype)
        abar = np.concatenate([abar, z], axis=0)
        bu = np.concatenate([bu, z], axis=0)
    a = abar.reshape(n_chunks, chunk, p, n)
    b = bu.reshape(n_chunks, chunk, p, n)

    hloc = np.empty_like(b)            # states assuming zero entry state
    cp = np.empty_like(a)              # running products of abar within chunk
    state = b[:, 0]
    prod = a[:, 0]
    hloc[:, 0] = state
    cp[:, 0] = prod
    for j in range(1, chunk):
        state = a[:, j] * state + b[:, j]
        prod = a[:, j] * prod
        hloc[:, j] = state
        cp[:, j] = prod

    carry = np.empty_like(b[:, 0])     # true entry state of each chunk
    run = np.zeros((p, n), dtype=abar.dtype)
    for k in range(n_chunks):
        carry[k] = run
        run = cp[k, -1] * run + hloc[k, -1]

    h = (cp * carry[:, None] + hloc).reshape(n_chunks * chunk, p, n)[:t_len]
    y = np.matmul(h, c[:, :, None])[:, :, 0]
    return y, h


_ext = None
_forced = os.environ.get("KARMA_BACKEND", "").strip().lower()
if _forced not in ("", "numpy", "cython"):
    raise ConfigError(f"KARMA_BACKEND must be 'numpy' or 'cython', got {_forced!r}")
if _forced != "numpy":
    try:
        from . import _scan as _ext  # compiled at install time; optional
    except ImportError:
        _ext = None
    if _forced == "cython" and _ext is None:
        raise ConfigError("KARMA_BACKEND=cython but the compiled scan kernel "
                          "is not importable; reinstall with Cython available")

BACKEND = "cython" if _ext is not None else "numpy"


def available_backends():
    names = ["numpy"]
    if _ext is not None:
        names.insert(0, "cython")
    return names


def get_kernels(name: str):
    """(scan_forward, scan_backward) pair for an explicit backend name."""
    if name == "numpy":
        return _np_scan_forward, _np_scan_backward
    if name == "cython":
        if _ext is None:
            raise ConfigError("compiled scan kernel not available")
        return _ext.scan_forward, _ext.scan_backward
    raise ConfigError(f"unknown backend {name!r}")


def _c64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def scan_forward(abar, bu, c):
    if _ext is not None and abar.dtype == np.float64:
        return _ext.scan_forward(_c64(abar), _c64(bu), _c64(c))
    return _np_scan_forward(abar, bu, c)


def scan_backward(abar, c, h, gy):
    if _ext is not None and abar.dtype == np.float64 and gy.dtype == np.float64:
        return _ext.scan_backward(_c64(abar), _c64(c), _c64(h), _c64(gy))
    return _np_scan_backward(abar, c, h, gy)


scan_chunked_forward = _np_scan_chunked_forward
