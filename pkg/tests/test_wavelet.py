import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wfm.wavelet import (
    WAVELETS,
    WaveletPyramid,
    bank_residuals,
    dwt2_level,
    dwt_multiscale,
    idwt2_level,
    idwt_multiscale,
    load_pyramid,
    make_filter_bank,
    pyramid_gaussianity_check,
    save_pyramid,
)

R2 = 1 / np.sqrt(2)


def analysis_matrix(taps, n):
    """Dense periodic filter-and-keep-even matrix, built independently of the module."""
    m = np.zeros((n // 2, n))
    for row in range(n // 2):
        for k, h in enumerate(taps):
            m[row, (2 * row + k) % n] += h
    return m


def oracle_dwt2(x, bank):
    H, W = x.shape
    lh_, hh_ = analysis_matrix(bank.lo_analysis, H), analysis_matrix(bank.hi_analysis, H)
    lw, hw = analysis_matrix(bank.lo_analysis, W), analysis_matrix(bank.hi_analysis, W)
    # LH: low along W, high along H; HL: high along W, low along H
    return lh_ @ x @ lw.T, hh_ @ x @ lw.T, lh_ @ x @ hw.T, hh_ @ x @ hw.T


def test_haar_taps():
    b = make_filter_bank(1)
    np.testing.assert_allclose(b.lo_analysis, [R2, R2], rtol=0, atol=1e-15)
    np.testing.assert_allclose(np.abs(b.hi_analysis), [R2, R2], rtol=0, atol=1e-15)
    assert b.hi_analysis[0] * b.hi_analysis[1] < 0


def test_db2_taps_satisfy_constraints():
    b = make_filter_bank(2)
    assert b.lo_analysis.size == 4
    assert abs(np.sum(b.lo_analysis**2) - 1) < 1e-14
    assert abs(np.sum(np.arange(4) * b.hi_analysis)) < 1e-14
    # known closed form (1 + sqrt3, 3 + sqrt3, 3 - sqrt3, 1 - sqrt3) / (4 sqrt2)
    s3 = np.sqrt(3)
    np.testing.assert_allclose(b.lo_analysis, np.array([1 + s3, 3 + s3, 3 - s3, 1 - s3]) / (4 * np.sqrt(2)),
                               atol=1e-15)


@pytest.mark.parametrize("p", [1, 2, 4, 6])
def test_bank_invariants(p):
    b = make_filter_bank(p)
    assert b.length == 2 * p
    res = bank_residuals(b)
    assert res["orthonormality"] < 1e-10 and res["vanishing_moments"] < 1e-10
    for f in (b.lo_analysis, b.hi_analysis):
        assert abs(np.sum(f**2) - 1) < 1e-12
    np.testing.assert_array_equal(b.lo_synthesis, b.lo_analysis[::-1])
    np.testing.assert_array_equal(b.hi_synthesis, b.hi_analysis[::-1])
    # shift orthogonality checked independently of bank_residuals
    L = 2 * p
    for k in range(-p + 1, p):
        pad = np.zeros(3 * L)
        lo = pad.copy(); lo[L:2 * L] = b.lo_analysis
        hi = pad.copy(); hi[L:2 * L] = b.hi_analysis
        shifted_lo, shifted_hi = np.roll(lo, 2 * k), np.roll(hi, 2 * k)
        assert abs(lo @ shifted_lo - (k == 0)) < 1e-12
        assert abs(lo @ shifted_hi) < 1e-12


@pytest.mark.parametrize("bad", [3, 5, 0, "db3", "sym4"])
def test_unsupported_orders(bad):
    with pytest.raises(ValueError):
        make_filter_bank(bad)


def test_constant_field_haar():
    x = np.full((1, 4, 6), 2.5)
    ll, det = dwt2_level(x, make_filter_bank("haar"))
    np.testing.assert_allclose(ll, 5.0, atol=1e-14)
    assert np.max(np.abs(det)) < 1e-14


def test_haar_2x2_hand_case():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    ll, det = dwt2_level(np.array([[a, b], [c, d]]), make_filter_bank("haar"))
    assert ll[0, 0] == pytest.approx((a + b + c + d) / 2, abs=1e-15)
    # LH: high-pass across rows (top - bottom), HL: across columns (left - right)
    np.testing.assert_allclose(det[:, 0, 0], [(a + b - c - d) / 2, (a - b + c - d) / 2, (a - b - c + d) / 2],
                               atol=1e-15)


def test_haar_impulse_inverse():
    out = idwt2_level(np.ones((1, 1)), np.zeros((3, 1, 1)), make_filter_bank("haar"))
    np.testing.assert_allclose(out, 0.5, atol=1e-15)


def test_zero_in_zero_out():
    b = make_filter_bank("db4")
    assert np.all(idwt2_level(np.zeros((4, 4)), np.zeros((3, 4, 4)), b) == 0)


@pytest.mark.parametrize("name", WAVELETS)
def test_level_matches_dense_oracle(rng, name):
    b = make_filter_bank(name)
    x = rng.standard_normal((16, 8))
    ll, det = dwt2_level(x, b)
    o_ll, o_lh, o_hl, o_hh = oracle_dwt2(x, b)
    for got, want in zip([ll, det[0], det[1], det[2]], [o_ll, o_lh, o_hl, o_hh]):
        np.testing.assert_allclose(got, want, atol=1e-13)


@pytest.mark.parametrize("name", WAVELETS)
def test_level_round_trip_and_energy(rng, name):
    b = make_filter_bank(name)
    x = rng.standard_normal((2, 3, 16, 32))
    ll, det = dwt2_level(x, b)
    assert np.max(np.abs(idwt2_level(ll, det, b) - x)) < 1e-10
    assert abs(np.sum(x**2) - np.sum(ll**2) - np.sum(det**2)) < 1e-10 * np.sum(x**2)


@pytest.mark.parametrize("name", WAVELETS)
@pytest.mark.parametrize("J", [1, 2, 3])
@pytest.mark.parametrize("shape", [(32, 32), (64, 32)])
def test_multiscale_reconstruction_and_parseval(rng, name, J, shape):
    b = make_filter_bank(name)
    x = rng.standard_normal((2,) + shape)
    pyr = dwt_multiscale(x, b, J)
    assert np.max(np.abs(idwt_multiscale(pyr, b) - x)) < 1e-9
    assert abs(pyr.energy() - np.sum(x**2)) < 1e-9 * np.sum(x**2)
    for j, s in enumerate(pyr.scales, start=1):
        assert s.shape == (2, 4, shape[0] >> j, shape[1] >> j)


def test_shape_law_paper_grid():
    pyr = dwt_multiscale(np.zeros((1, 384, 128)), make_filter_bank("db2"), 3)
    assert pyr.scales[-1].shape[-2:] == (48, 16)


def test_j1_equals_single_level(rng):
    b = make_filter_bank("db2")
    x = rng.standard_normal((1, 8, 8))
    ll, det = dwt2_level(x, b)
    s = dwt_multiscale(x, b, 1).scales[0]
    np.testing.assert_array_equal(s[:, 0], ll)
    np.testing.assert_array_equal(s[:, 1:], det)


def test_intermediate_ll_is_excluded_from_reconstruction(rng):
    b = make_filter_bank("haar")
    x = rng.standard_normal((1, 16, 16))
    pyr = dwt_multiscale(x, b, 2)
    pyr.scales[0][:, 0] = 1e6
    assert np.max(np.abs(idwt_multiscale(pyr, b) - x)) < 1e-9


def test_divisibility_and_size_errors():
    b = make_filter_bank("haar")
    with pytest.raises(ValueError, match="divisible by 2"):
        dwt_multiscale(np.zeros((1, 20, 16)), b, 3)
    with pytest.raises(ValueError):
        dwt2_level(np.zeros((3, 4)), b)
    with pytest.raises(ValueError):
        dwt2_level(np.zeros((1, 4)), b)
    with pytest.raises(ValueError):
        idwt2_level(np.zeros((2, 2)), np.zeros((3, 2, 3)), b)


def test_bank_mismatch_rejected(rng):
    pyr = dwt_multiscale(rng.standard_normal((8, 8)), make_filter_bank("haar"), 1)
    with pytest.raises(ValueError):
        idwt_multiscale(pyr, make_filter_bank("db2"))


@pytest.mark.parametrize("name", WAVELETS)
def test_constants_have_no_detail(name):
    pyr = dwt_multiscale(np.full((16, 16), -1.75), make_filter_bank(name), 3)
    for s in pyr.scales:
        assert np.max(np.abs(s[..., 1:, :, :])) < 1e-10


@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3), st.sampled_from(WAVELETS),
       st.integers(1, 3))
def test_linearity(seed, alpha, beta, name, J):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 16, 16))
    b = make_filter_bank(name)
    lhs = dwt_multiscale(alpha * x + beta * y, b, J)
    px, py = dwt_multiscale(x, b, J), dwt_multiscale(y, b, J)
    for s, sx, sy in zip(lhs.scales, px.scales, py.scales):
        assert np.max(np.abs(s - (alpha * sx + beta * sy))) < 1e-10


@given(st.integers(0, 2**31), st.sampled_from(WAVELETS), st.integers(1, 3),
       st.sampled_from([(8, 8), (16, 8), (8, 32)]))
def test_round_trip_property(seed, name, J, shape):
    x = np.random.default_rng(seed).standard_normal(shape)
    b = make_filter_bank(name)
    assert np.max(np.abs(idwt_multiscale(dwt_multiscale(x, b, J), b) - x)) < 1e-9


def test_pyramid_arithmetic_and_io(tmp_path, rng):
    b = make_filter_bank("db2")
    p = dwt_multiscale(rng.standard_normal((1, 16, 16)), b, 2)
    q = p + p - p
    for s, t in zip(p.scales, q.scales):
        np.testing.assert_allclose(s, t, atol=1e-15)
    save_pyramid(p, tmp_path / "pyr")
    r = load_pyramid(tmp_path / "pyr")
    assert r.filter_id == p.filter_id and r.J == 2
    for s, t in zip(p.scales, r.scales):
        assert s.tobytes() == t.tobytes()
    with pytest.raises(ValueError):
        p.check_compatible(WaveletPyramid([s.copy() for s in p.scales], "haar"))


@pytest.mark.parametrize("name", ["haar", "db6"])
def test_gaussianity_small(name):
    rep = pyramid_gaussianity_check(make_filter_bank(name), 2, n_samples=200_000, seed=3, grid=64)
    for lab in rep["bands"]:
        assert rep["count"][lab] >= 200_000
        assert abs(rep["variance"][lab] - 1) < 0.02
        assert abs(rep["mean"][lab]) < 0.01
    assert rep["max_abs_cross_correlation"] < 0.02
