"""Selective state-space block: discretization, scans, and the full block."""

import numpy as np
import pytest

from karma import backend
from karma.errors import ConfigError, ContractError, ShapeError
from karma.gradcheck import fd_check
from karma.rng import Rng
from karma.ssm import (SsmParams, _SERIES_CUTOFF, discretize, init_ssm,
                       mamba_forward, scan_chunked, scan_sequential)
from karma.tensor import Tensor, backward, mean_all, mul, no_grad, sum_all

import reference


# -- discretization ----------------------------------------------------------------


def test_closed_form_halving():
    delta = Tensor(np.full((1, 1), np.log(2.0)))
    a = Tensor(np.full((1, 1), -1.0))
    b = Tensor(np.full((1, 1), 3.0))
    abar, bbar = discretize(delta, a, b)
    assert abs(abar.data[0, 0, 0] - 0.5) < 1e-12
    assert abs(bbar.data[0, 0, 0] - 1.5) < 1e-12  # 0.5 * b


def test_small_step_limit():
    delta = Tensor(np.full((1, 1), 1e-9))
    a = Tensor(np.full((1, 1), -1.0))
    b = Tensor(np.full((1, 1), 2.0))
    abar, bbar = discretize(delta, a, b)
    assert abs(abar.data[0, 0, 0] - 1.0) < 1e-8
    assert abs(bbar.data[0, 0, 0] - 1e-9 * 2.0) < 1e-12


def test_series_branch_matches_taylor():
    # |delta * a| = 1e-8 < cutoff: phi should be within 1e-10 of 1 + z/2
    delta = Tensor(np.full((1, 1), 1.0))
    a = Tensor(np.full((1, 1), -1e-8))
    b = Tensor(np.full((1, 1), 1.0))
    _, bbar = discretize(delta, a, b)
    want = 1.0 - 1e-8 / 2.0  # phi(z) ~ 1 + z/2 at z = -1e-8, times delta*b=1
    assert abs(bbar.data[0, 0, 0] - want) < 1e-10


def test_branches_agree_at_cutoff():
    # the exact and series formulas must agree where the switch happens
    for z in (_SERIES_CUTOFF * 0.99, _SERIES_CUTOFF * 1.01):
        delta = Tensor(np.full((1, 1), z))
        a = Tensor(np.full((1, 1), -1.0))
        b = Tensor(np.ones((1, 1)))
        _, bbar = discretize(delta, a, b)
        exact = np.expm1(-z) / (-z) * z
        assert abs(bbar.data[0, 0, 0] - exact) < 1e-12


def test_nonpositive_delta_rejected():
    delta = Tensor(np.zeros((1, 1)))
    with pytest.raises(ContractError):
        discretize(delta, Tensor(np.full((1, 1), -1.0)),
                   Tensor(np.ones((1, 1))))


def test_discretize_shape_mismatch():
    with pytest.raises(ShapeError):
        discretize(Tensor(np.ones((2, 3))), Tensor(np.full((4, 5), -1.0)),
                   Tensor(np.ones((2, 5))))


def test_stability_bound():
    r = Rng(31)
    delta = Tensor(np.exp(r.normal((6, 4))) + 1e-3)
    a = Tensor(-np.exp(r.normal((4, 5))))
    b = Tensor(r.normal((6, 5)))
    abar, _ = discretize(delta, a, b)
    assert (abar.data > 0).all() and (abar.data < 1).all()


def test_discretize_gradients():
    r = Rng(37)
    d0 = np.exp(r.normal((3, 4))) * 0.1 + 0.05
    a0 = -np.exp(r.normal((4, 5)))
    b0 = r.normal((3, 5))
    w = Rng(41).normal((3, 4))

    def through(delta_t, a_t, b_t):
        abar, bbar = discretize(delta_t, a_t, b_t)
        mixed = mul(sum3(abar), sum3(bbar))
        return mean_all(mixed)

    def sum3(t3):
        # collapse the state axis to reuse rank-2 ops
        from karma.tensor import _result
        data = t3.data.sum(axis=2)

        def bw(node, g):
            return (np.repeat(g[:, :, None], t3.shape[2], axis=2),)

        return _result("sum_state", (t3,), data, None, bw)

    assert fd_check(lambda t: through(t, Tensor(a0), Tensor(b0)),
                    Tensor(d0)) < 1e-4
    assert fd_check(lambda t: through(Tensor(d0), t, Tensor(b0)),
                    Tensor(a0)) < 1e-4
    assert fd_check(lambda t: through(Tensor(d0), Tensor(a0), t),
                    Tensor(b0)) < 1e-4


# -- scan kernels ------------------------------------------------------------------


def _random_scan(seed, t_len=32, p=6, n=4):
    r = Rng(seed)
    abar = np.exp(-np.abs(r.spawn(0).normal((t_len, p, n))) * 0.3)
    bu = r.spawn(1).normal((t_len, p, n))
    c = r.spawn(2).normal((t_len, n))
    return abar, bu, c


def test_integrator():
    # abar = 1, bu = c0 constant, c = 1: y_t = t * N * c0 (1-based steps)
    t_len, p, n = 5, 2, 3
    c0 = 0.25
    y, _ = backend._np_scan_forward(np.ones((t_len, p, n)),
                                    np.full((t_len, p, n), c0),
                                    np.ones((t_len, n)))
    steps = np.arange(1, t_len + 1)[:, None]
    assert np.abs(y - steps * n * c0).max() < 1e-12


def test_memoryless_when_abar_zero():
    abar, bu, c = _random_scan(43)
    abar = np.zeros_like(abar)
    y, _ = backend._np_scan_forward(abar, bu, c)
    want = np.einsum("tpn,tn->tp", bu, c)
    assert np.abs(y - want).max() < 1e-12


@pytest.mark.parametrize("chunk", [1, 2, 3, 7, 32])
def test_chunked_equals_sequential(chunk):
    abar, bu, c = _random_scan(47)
    ys, hs = backend._np_scan_forward(abar, bu, c)
    yc, hc = backend._np_scan_chunked_forward(abar, bu, c, chunk)
    assert np.abs(yc - ys).max() < 1e-10
    assert np.abs(hc - hs).max() < 1e-10


@pytest.mark.parametrize("chunk", [1, 32])
def test_degenerate_chunks_bitwise(chunk):
    abar, bu, c = _random_scan(53)
    ys, hs = backend._np_scan_forward(abar, bu, c)
    yc, hc = backend._np_scan_chunked_forward(abar, bu, c, chunk)
    assert np.array_equal(yc, ys) and np.array_equal(hc, hs)


def test_chunk_must_be_positive():
    abar, bu, c = _random_scan(59)
    with pytest.raises(ConfigError):
        backend.scan_chunked_forward(abar, bu, c, 0)


def test_backends_agree():
    abar, bu, c = _random_scan(61)
    gy = Rng(67).normal(abar.shape[:2])
    results = []
    for name in backend.available_backends():
        fwd, bwd = backend.get_kernels(name)
        y, h = fwd(abar, bu, c)
        results.append((y, h) + bwd(abar, c, h, gy))
    first = results[0]
    for other in results[1:]:
        for got, want in zip(other, first):
            assert np.abs(got - want).max() < 1e-12


def test_scan_backward_against_fd():
    abar0, bu0, c0 = _random_scan(71, t_len=6, p=3, n=2)
    from karma.ssm import _sel_scan
    w = Rng(73).normal((6, 3))

    def f_bu(t):
        return mean_all(mul(_sel_scan(Tensor(abar0), t, Tensor(c0)),
                            Tensor(w)))

    assert fd_check(f_bu, Tensor(bu0)) < 1e-4


# -- parameters and the full block -------------------------------------------------


def test_init_contracts():
    p = init_ssm(8, 16, 4, 2, Rng(0))
    assert p.d_inner == 16 and p.dt_rank == 1
    # decay spectrum: log(1..N) per inner channel
    assert np.abs(p.a_log.data - np.log(np.arange(1.0, 17.0))[None, :]).max() \
        == 0.0
    dt = np.logaddexp(0.0, p.dt_bias.data)
    assert (dt >= 1e-3 - 1e-12).all() and (dt <= 1e-1 + 1e-12).all()
    assert np.abs(p.conv_b.data).max() == 0.0
    assert np.abs(p.d_skip.data - 1.0).max() == 0.0


def test_init_bad_extents():
    with pytest.raises(ConfigError):
        init_ssm(0, 16, 4, 2, Rng(0))


def test_param_order_stable():
    p = init_ssm(4, 8, 4, 2, Rng(1))
    names = [n for n, _ in p.named("blk")]
    assert names == ["blk.w_in_proj", "blk.conv_w", "blk.conv_b", "blk.w_bc",
                     "blk.w_dt_down", "blk.w_dt_up", "blk.dt_bias",
                     "blk.a_log", "blk.d_skip", "blk.w_out_proj"]


def test_mamba_shape_preserved():
    p = init_ssm(8, 4, 4, 2, Rng(2))
    x = Rng(3).normal((5, 8))
    out = mamba_forward(Tensor(x), p)
    assert out.shape == (5, 8)


def test_mamba_width_mismatch():
    p = init_ssm(8, 4, 4, 2, Rng(2))
    with pytest.raises(ShapeError):
        mamba_forward(Tensor(np.zeros((5, 7))), p)


def test_mamba_zero_input_zero_output():
    p = init_ssm(8, 4, 4, 2, Rng(2))
    out = mamba_forward(Tensor(np.zeros((5, 8))), p)
    assert np.abs(out.data).max() == 0.0


def test_mamba_matches_straight_line_reference():
    p = init_ssm(6, 4, 4, 2, Rng(5))
    x = Rng(7).normal((9, 6))
    got = mamba_forward(Tensor(x), p).data
    want = reference.mamba(x, p)
    assert np.abs(got - want).max() < 1e-10


def test_mamba_single_token():
    p = init_ssm(6, 4, 4, 2, Rng(11))
    x = Rng(13).normal((1, 6))
    got = mamba_forward(Tensor(x), p).data
    assert np.abs(got - reference.mamba(x, p)).max() < 1e-12


def test_mamba_scan_modes_agree():
    p = init_ssm(6, 4, 4, 2, Rng(17))
    x = Rng(19).normal((11, 6))
    a = mamba_forward(Tensor(x), p, scan_mode="sequential").data
    b = mamba_forward(Tensor(x), p, scan_mode="chunked", chunk=3).data
    assert np.abs(a - b).max() < 1e-10
    with pytest.raises(ConfigError):
        mamba_forward(Tensor(x), p, scan_mode="parallel")


def test_mamba_causality():
    p = init_ssm(6, 4, 4, 2, Rng(23))
    x = Rng(29).normal((10, 6))
    with no_grad():
        base = mamba_forward(Tensor(x), p).data
        bumped_in = x.copy()
        bumped_in[7] += 10.0
        bumped = mamba_forward(Tensor(bumped_in), p).data
    assert np.array_equal(base[:7], bumped[:7])
    assert not np.array_equal(base[7:], bumped[7:])


def test_mamba_input_gradient():
    p = init_ssm(4, 3, 3, 2, Rng(31))
    w = Rng(37).normal((5, 4))

    def f(t):
        return mean_all(mul(mamba_forward(t, p), Tensor(w)))

    assert fd_check(f, Tensor(Rng(41).normal((5, 4)))) < 1e-4


@pytest.mark.parametrize("field", ["w_in_proj", "conv_w", "conv_b", "w_bc",
                                   "w_dt_down", "w_dt_up", "dt_bias", "a_log",
                                   "d_skip", "w_out_proj"])
def test_mamba_parameter_gradients(field):
    p = init_ssm(4, 3, 3, 2, Rng(43))
    x = Rng(47).normal((5, 4))
    w = Rng(53).normal((5, 4))
    target = getattr(p, field)

    def f(t):
        setattr(p, field, t)
        try:
            return mean_all(mul(mamba_forward(Tensor(x), p), Tensor(w)))
        finally:
            setattr(p, field, target)

    coords = range(min(target.data.size, 8))
    assert fd_check(f, Tensor(target.data.copy()), coords=coords) < 1e-4
