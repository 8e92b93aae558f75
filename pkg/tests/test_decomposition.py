"""Wavelet machinery and the attention trend/seasonal split."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from karma.decomposition import (atcd_forward, dwt_analyze, dwt_matrices,
                                 dwt_synthesize, hftd_decompose, hftd_inverse,
                                 init_atcd, make_wavelet)
from karma.errors import ConfigError, ShapeError
from karma.rng import Rng
from karma.tensor import Tensor, backward, sum_all

import reference

# Standard 8-tap least-asymmetric-family scaling coefficients for the
# 4-vanishing-moment filter, per the published tables.
_DB4_LOW = np.array([
    0.23037781330885523, 0.7148465705525415, 0.6308807679295904,
    -0.02798376941698385, -0.18703481171888114, 0.030841381835986965,
    0.032883011666982945, -0.010597401784997278])


# -- filters -----------------------------------------------------------------------


def test_haar_taps():
    f = make_wavelet("haar")
    s = 1.0 / np.sqrt(2.0)
    assert np.abs(f.analysis_low - [s, s]).max() < 1e-15
    assert np.abs(f.analysis_high - [s, -s]).max() < 1e-15


def test_db4_matches_published_taps():
    f = make_wavelet("db4")
    assert f.support == 8
    assert np.abs(f.analysis_low - _DB4_LOW).max() < 1e-8


def test_db4_high_is_quadrature_mirror():
    f = make_wavelet("db4")
    signs = (-1.0) ** np.arange(8)
    assert np.abs(f.analysis_high - signs * f.analysis_low[::-1]).max() < 1e-12
    assert abs(f.analysis_high.sum()) < 1e-10  # zero DC response


def test_unknown_wavelet():
    with pytest.raises(ConfigError):
        make_wavelet("sym5")


def test_wavelet_cache():
    assert make_wavelet("haar") is make_wavelet("haar")


# -- transform matrices ------------------------------------------------------------


@pytest.mark.parametrize("name", ["haar", "db4"])
@pytest.mark.parametrize("n", [8, 10, 16, 64, 128])
def test_stacked_matrix_is_orthogonal(name, n):
    wl, wh = dwt_matrices(make_wavelet(name), n)
    w = np.vstack([wl, wh])
    assert np.abs(w @ w.T - np.eye(n)).max() < 1e-10


def test_odd_length_rejected():
    with pytest.raises(ConfigError):
        dwt_matrices(make_wavelet("haar"), 7)


def test_matrix_matches_direct_correlation():
    f = make_wavelet("db4")
    r = np.random.default_rng(5)
    x = r.normal(size=12)
    lo, hi = dwt_analyze(Tensor(x), f)
    rlo, rhi = reference.dwt_direct(x, f.analysis_low, f.analysis_high)
    assert np.abs(lo.data - rlo).max() < 1e-12
    assert np.abs(hi.data - rhi).max() < 1e-12


# -- analysis / synthesis ----------------------------------------------------------


def test_haar_frozen_values():
    lo, hi = dwt_analyze(Tensor([1.0, 2.0, 3.0, 4.0]), make_wavelet("haar"))
    assert np.abs(lo.data - [2.121320343559643, 4.949747468305833]).max() < 1e-12
    assert np.abs(hi.data - [-0.7071067811865476, -0.7071067811865476]).max() < 1e-12


def test_haar_constant_has_zero_detail():
    lo, hi = dwt_analyze(Tensor([5.0, 5.0, 5.0, 5.0]), make_wavelet("haar"))
    assert np.abs(hi.data).max() < 1e-12
    assert np.abs(lo.data - 7.0710678118654755).max() < 1e-10


@pytest.mark.parametrize("name", ["haar", "db4"])
def test_perfect_reconstruction_rows(name):
    f = make_wavelet(name)
    r = np.random.default_rng(7)
    x = r.normal(size=(3, 32))
    lo, hi = dwt_analyze(Tensor(x), f)
    back = dwt_synthesize(lo, hi, f)
    assert np.abs(back.data - x).max() < 1e-10


def test_haar_energy_conservation():
    r = np.random.default_rng(9)
    x = r.normal(size=64)
    lo, hi = dwt_analyze(Tensor(x), make_wavelet("haar"))
    energy = (lo.data ** 2).sum() + (hi.data ** 2).sum()
    assert abs(energy - (x ** 2).sum()) < 1e-10


def test_analyze_rank_cap():
    with pytest.raises(ShapeError):
        dwt_analyze(Tensor(np.zeros((2, 2, 2))), make_wavelet("haar"))


def test_synthesize_shape_mismatch():
    f = make_wavelet("haar")
    with pytest.raises(ShapeError):
        dwt_synthesize(Tensor(np.zeros(4)), Tensor(np.zeros(3)), f)


def test_gradient_flows_through_roundtrip():
    f = make_wavelet("db4")
    x = Tensor(np.random.default_rng(1).normal(size=(2, 16)),
               requires_grad=True)
    lo, hi = dwt_analyze(x, f)
    backward(sum_all(dwt_synthesize(lo, hi, f)))
    # synthesis(analysis) is the identity, so the gradient of the sum is 1
    assert np.abs(x.grad - 1.0).max() < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(4, 100), st.integers(0, 2 ** 32 - 1))
def test_perfect_reconstruction_property(half, seed):
    n = 2 * half
    x = np.random.default_rng(seed).normal(size=n)
    for name in ("haar", "db4"):
        f = make_wavelet(name)
        lo, hi = dwt_analyze(Tensor(x), f)
        back = dwt_synthesize(lo, hi, f)
        assert np.abs(back.data - x).max() < 1e-10


# -- ATCD --------------------------------------------------------------------------


def _atcd_setup(lookback=12, channels=5, inner=8, heads=2, seed=3):
    params = init_atcd(lookback, inner, heads, p_drop=0.0, rng=Rng(seed))
    x = Rng(seed).spawn(99).normal((lookback, channels))
    return params, x


def test_atcd_indivisible_heads():
    with pytest.raises(ConfigError):
        init_atcd(8, 10, 4, 0.0, Rng(0))


def test_atcd_output_shapes():
    params, x = _atcd_setup()
    x_t, x_s = atcd_forward(Tensor(x), params, None, training=False)
    assert x_t.shape == x.shape and x_s.shape == x.shape


def test_atcd_inner_additivity():
    params, x = _atcd_setup()
    _, _, (x_inner, trend_inner, seasonal_inner) = atcd_forward(
        Tensor(x), params, None, training=False, return_inner=True)
    scale = np.abs(x_inner.data).max()
    gap = np.abs(trend_inner.data + seasonal_inner.data - x_inner.data).max()
    assert gap <= 1e-15 * max(scale, 1.0)


def test_atcd_matches_straight_line_reference():
    params, x = _atcd_setup()
    x_t, x_s, inner = atcd_forward(Tensor(x), params, None, training=False,
                                   return_inner=True)
    r_t, r_s, r_inner = reference.atcd(x, params)
    assert np.abs(x_t.data - r_t).max() < 1e-10
    assert np.abs(x_s.data - r_s).max() < 1e-10
    for got, want in zip(inner, r_inner):
        assert np.abs(got.data - want).max() < 1e-10


def test_atcd_zero_wo_passes_input_through():
    params, x = _atcd_setup()
    params.w_o = Tensor(np.zeros_like(params.w_o.data), requires_grad=True)
    _, _, (x_inner, trend_inner, seasonal_inner) = atcd_forward(
        Tensor(x), params, None, training=False, return_inner=True)
    assert np.abs(trend_inner.data).max() == 0.0  # silu(0) = 0
    assert np.array_equal(seasonal_inner.data, x_inner.data)


def test_mha_single_token_is_identity_weight():
    from karma.decomposition import mha
    params, _ = _atcd_setup(inner=8, heads=2)
    x = Rng(21).normal((1, 8))
    out = mha(Tensor(x), params)
    # softmax over one token is the scalar 1, so attention passes W_V through
    per_head = [x @ params.w_v[i].data for i in range(2)]
    want = np.concatenate(per_head, axis=1) @ params.w_o.data
    assert np.abs(out.data - want).max() < 1e-12


def test_mha_zero_logits_average_tokens():
    from karma.decomposition import mha
    params, _ = _atcd_setup(lookback=12, inner=4, heads=1)
    eye = np.eye(4)
    params.w_q[0] = Tensor(np.zeros((4, 4)))
    params.w_k[0] = Tensor(np.zeros((4, 4)))
    params.w_v[0] = Tensor(eye.copy())
    params.w_o = Tensor(eye.copy())
    x = Rng(23).normal((6, 4))
    out = mha(Tensor(x), params)
    assert np.abs(out.data - x.mean(axis=0)[None, :]).max() < 1e-12


def test_mha_matches_brute_force():
    from karma.decomposition import mha
    params, _ = _atcd_setup(inner=8, heads=2)
    x = Rng(29).normal((4, 8))
    out = mha(Tensor(x), params)
    heads = []
    for i in range(2):
        q, k, v = (x @ params.w_q[i].data, x @ params.w_k[i].data,
                   x @ params.w_v[i].data)
        heads.append(reference.softmax_rows(q @ k.T / np.sqrt(4)) @ v)
    want = np.concatenate(heads, axis=1) @ params.w_o.data
    assert np.abs(out.data - want).max() < 1e-12


def test_atcd_eval_deterministic():
    params, x = _atcd_setup()
    a = atcd_forward(Tensor(x), params, None, training=False)
    b = atcd_forward(Tensor(x), params, None, training=False)
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)


def test_atcd_wrong_lookback():
    params, _ = _atcd_setup(lookback=12)
    with pytest.raises(ShapeError):
        atcd_forward(Tensor(np.zeros((10, 5))), params, None, training=False)


def test_atcd_zero_bias_maps_zero_to_zero():
    params, _ = _atcd_setup()
    x_t, x_s = atcd_forward(Tensor(np.zeros((12, 5))), params, None,
                            training=False)
    assert np.abs(x_t.data).max() == 0.0
    assert np.abs(x_s.data).max() == 0.0


def test_atcd_dropout_is_seeded():
    params, x = _atcd_setup()
    params.p_drop = 0.3
    a = atcd_forward(Tensor(x), params, Rng(5), training=True)[0].data
    b = atcd_forward(Tensor(x), params, Rng(5), training=True)[0].data
    c = atcd_forward(Tensor(x), params, Rng(6), training=True)[0].data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_atcd_gradient():
    from karma.gradcheck import fd_check
    params, x = _atcd_setup(lookback=6, channels=3, inner=4, heads=2)

    def f(t):
        x_t, x_s = atcd_forward(t, params, None, training=False)
        return sum_all(silu_mix(x_t, x_s))

    def silu_mix(a, b):
        from karma.tensor import add, mul, silu
        return mul(silu(a), b)

    assert fd_check(f, Tensor(x)) < 1e-4


# -- HFTD --------------------------------------------------------------------------


def test_hftd_shapes_and_flip():
    r = np.random.default_rng(11)
    x_se = r.normal(size=(5, 16))
    gain = Tensor(np.ones(16))
    f = hftd_decompose(Tensor(x_se), make_wavelet("haar"), gain)
    assert f.f_h.shape == (5, 8) and f.f_l.shape == (5, 8)
    assert f.t_f.shape == (5, 16)
    assert np.array_equal(f.t_b.data, f.t_f.data[::-1])
    assert f.m == 8


def test_hftd_residual_is_rmsnormed_input():
    r = np.random.default_rng(13)
    x_se = r.normal(size=(4, 8))
    gain = np.abs(r.normal(size=8)) + 0.5
    f = hftd_decompose(Tensor(x_se), make_wavelet("haar"), Tensor(gain))
    assert np.abs(f.t_f.data - reference.rmsnorm(x_se, gain)).max() < 1e-12


def test_hftd_ablated_has_no_frequency_parts():
    x_se = Tensor(np.random.default_rng(17).normal(size=(4, 8)))
    f = hftd_decompose(x_se, None, Tensor(np.ones(8)))
    assert f.f_h is None and f.f_l is None
    assert hftd_inverse(f, None) is f.t_f


def test_hftd_inverse_combines_synthesis_and_residual():
    filt = make_wavelet("db4")
    r = np.random.default_rng(19)
    x_se = r.normal(size=(3, 16))
    f = hftd_decompose(Tensor(x_se), filt, Tensor(np.ones(16)))
    out = hftd_inverse(f, filt)
    # untouched coefficients synthesize back to x_se; residual adds on top
    assert np.abs(out.data - (x_se + f.t_f.data)).max() < 1e-10


def test_hftd_inverse_zero_residual_reconstructs_input():
    from karma.decomposition import FreqComponents
    filt = make_wavelet("haar")
    r = np.random.default_rng(23)
    x_se = r.normal(size=(3, 16))
    f = hftd_decompose(Tensor(x_se), filt, Tensor(np.ones(16)))
    zeroed = FreqComponents(f.f_h, f.f_l, Tensor(np.zeros((3, 16))),
                            Tensor(np.zeros((3, 16))), f.m)
    assert np.abs(hftd_inverse(zeroed, filt).data - x_se).max() < 1e-10


def test_hftd_inverse_zeros_and_linearity():
    from karma.decomposition import FreqComponents
    filt = make_wavelet("haar")
    zero = FreqComponents(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))),
                          Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 8))), 4)
    assert np.abs(hftd_inverse(zero, filt).data).max() == 0.0
    r = np.random.default_rng(29)
    parts = [r.normal(size=(2, 4)), r.normal(size=(2, 4)),
             r.normal(size=(2, 8))]
    f1 = FreqComponents(Tensor(parts[0]), Tensor(parts[1]), Tensor(parts[2]),
                        Tensor(parts[2][::-1].copy()), 4)
    f3 = FreqComponents(Tensor(3.0 * parts[0]), Tensor(3.0 * parts[1]),
                        Tensor(3.0 * parts[2]),
                        Tensor(3.0 * parts[2][::-1]), 4)
    a = hftd_inverse(f1, filt).data
    b = hftd_inverse(f3, filt).data
    assert np.abs(b - 3.0 * a).max() < 1e-12


def test_synthesize_frozen_inverse():
    filt = make_wavelet("haar")
    out = dwt_synthesize(Tensor([2.121320343559643, 4.949747468305833]),
                         Tensor([-0.7071067811865476, -0.7071067811865476]),
                         filt)
    assert np.abs(out.data - [1.0, 2.0, 3.0, 4.0]).max() < 1e-4


def test_synthesize_zeros():
    out = dwt_synthesize(Tensor(np.zeros(4)), Tensor(np.zeros(4)),
                         make_wavelet("db4"))
    assert np.abs(out.data).max() == 0.0
