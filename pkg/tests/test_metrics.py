import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import band_loops, gaussian_crps_quadrature, coherence_loops, crps_loops, dft_loops, vrmse_loops
from wfm.forecast import EnsembleForecast
from wfm.metrics import (
    BandSpec,
    band_rmse,
    coherence,
    coherence_band_rmse,
    crps_fair,
    dft2,
    evaluate,
    load_report_csv,
    parse_windows,
    radial_psd,
    ring_index,
    vrmse,
)


# ---------------------------------------------------------------- VRMSE

def test_vrmse_examples(rng):
    assert vrmse([[0.0, 2.0]], [[1.0, 1.0]]) == math.sqrt(1 / (1 + 1e-6))
    u = rng.standard_normal((16, 16))
    assert vrmse(u, u) == 0.0
    u = (u - u.mean()) / u.std()
    assert vrmse(u, np.full_like(u, u.mean())) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        vrmse(np.zeros((2, 2)), np.zeros((2, 3)))


def test_vrmse_oracle_and_permutation(rng):
    u, v = rng.standard_normal((2, 4, 4))
    assert abs(vrmse(u, v) - vrmse_loops(u, v)) < 1e-12
    perm = rng.permutation(16)
    up, vp = u.ravel()[perm].reshape(4, 4), v.ravel()[perm].reshape(4, 4)
    assert vrmse(up, vp) == pytest.approx(vrmse(u, v), rel=1e-13)
    batched = vrmse(np.stack([u, v]), np.stack([v, u]))
    assert batched.shape == (2,) and batched[0] == vrmse(u, v)


# ---------------------------------------------------------------- CRPS

def test_crps_examples(rng):
    zero = np.zeros((3, 3))
    assert crps_fair(zero, np.stack([-np.ones((3, 3)), np.ones((3, 3))])) == 0.0
    assert crps_fair(zero, np.stack([np.ones((3, 3)), np.ones((3, 3))])) == 1.0
    u = rng.standard_normal((4, 4))
    assert crps_fair(u, np.stack([u, u, u])) == 0.0
    with pytest.raises(ValueError):
        crps_fair(u, u[None])
    with pytest.raises(ValueError):
        crps_fair(u, np.zeros((2, 4, 3)))


@pytest.mark.parametrize("M", [2, 3, 5, 8])
def test_crps_oracle(rng, M):
    u = rng.standard_normal((4, 4))
    members = list(rng.standard_normal((M, 4, 4)))
    assert abs(crps_fair(u, np.stack(members)) - crps_loops(u, members)) < 1e-12


@given(st.floats(-5, 5), st.floats(0.1, 10), st.integers(0, 2**31))
def test_crps_invariances(shift, alpha, seed):
    r = np.random.default_rng(seed)
    u, m = r.standard_normal((4, 4)), r.standard_normal((4, 4, 4))
    base = crps_fair(u, m)
    assert crps_fair(u + shift, m + shift) == pytest.approx(base, abs=1e-12)
    assert crps_fair(alpha * u, alpha * m) == pytest.approx(alpha * base, rel=1e-12, abs=1e-12)
    same = np.stack([m[0]] * 3)
    assert crps_fair(u, same) == pytest.approx(np.mean(np.abs(m[0] - u)), abs=1e-14)


def test_crps_unbiased():
    ref = gaussian_crps_quadrature()
    assert ref == pytest.approx(1 / math.sqrt(math.pi), rel=1e-6)
    r = np.random.default_rng(2024)
    for M in (2, 4, 8):
        u = r.standard_normal((512, 256))
        members = r.standard_normal((M, 512, 256))
        assert abs(crps_fair(u, members) / ref - 1) < 0.01, M


# ---------------------------------------------------------------- spectra

def test_dft_routes_agree(rng):
    for shape in [(4, 4), (8, 8), (16, 8), (6, 10)]:
        x = rng.standard_normal(shape)
        assert np.max(np.abs(dft2(x, "direct") - dft2(x, "fft"))) < 1e-10
    x = rng.standard_normal((4, 4))
    assert np.max(np.abs(dft2(x, "direct") - dft_loops(x))) < 1e-12
    with pytest.raises(ValueError):
        dft2(x, "radix3")


def test_parseval(rng):
    x = rng.standard_normal((8, 8))
    X = dft2(x, "direct")
    assert np.sum(np.abs(X) ** 2) == pytest.approx(64 * np.sum(x**2), rel=1e-12)


def test_psd_constant_and_cosine():
    rings, P = radial_psd(np.full((16, 16), 3.0))
    assert np.all(P == 0) and list(rings) == list(range(1, 9))
    y, x = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    for r in (1, 5, 11):
        _, P = radial_psd(np.cos(2 * np.pi * r * x / 32), "direct")
        assert P[r - 1] > 0
        others = np.delete(P, r - 1)
        assert np.all(others < 1e-20 * P[r - 1])


def test_ring_index():
    r = ring_index(4, 4)
    expect = np.array([[0, 1, 2, 1], [1, 1, 2, 1], [2, 2, 3, 2], [1, 1, 2, 1]])
    np.testing.assert_array_equal(r, expect)
    with pytest.raises(ValueError):
        radial_psd(np.zeros((2, 8)))


def test_coherence_identities(rng):
    u = rng.standard_normal((16, 16))
    c = coherence(u, u)
    np.testing.assert_array_equal(c.gamma, 1.0)
    c = coherence(u, 3.7 * u)
    assert np.max(np.abs(c.gamma - 1)) < 1e-5
    c = coherence(u, rng.standard_normal((16, 16)))
    assert np.all((c.gamma >= 0) & (c.gamma <= 1)) and c.max_excursion < 1e-9
    with pytest.raises(ValueError):
        coherence(u, u[:8])


def test_coherence_oracle(rng):
    for _ in range(3):
        u, v = rng.standard_normal((2, 4, 4))
        got = coherence(u, v, method="direct").gamma
        assert np.max(np.abs(got - coherence_loops(u, v))) < 1e-12
        assert np.max(np.abs(coherence(u, v).gamma - got)) < 1e-12


# ---------------------------------------------------------------- bands

def test_band_rmse_examples():
    bands = BandSpec((0, 3))
    assert band_rmse(np.array([1.0, 0.5, 0.0]), np.arange(1, 4), bands)[0] == math.sqrt(1.25 / 3)
    assert round(math.sqrt(1.25 / 3), 4) == 0.6455
    three = BandSpec.log_spaced(16)
    assert np.all(band_rmse(np.zeros(16), np.arange(1, 17), three) == 1.0)
    with pytest.raises(ValueError, match="no rings"):
        band_rmse(np.ones(3), np.arange(1, 4), BandSpec((0, 1, 1.5, 3)))
    with pytest.raises(ValueError):
        BandSpec((0, 2, 1))


def test_log_spaced_bands():
    b = BandSpec.log_spaced(16)
    groups = [np.nonzero(s)[0] + 1 for s in b.members(np.arange(1, 17))]
    assert [list(g) for g in groups] == [[1, 2], [3, 4, 5, 6], list(range(7, 17))]
    assert b.names == ("low", "mid", "high")
    assert sum(len(g) for g in groups) == 16


def test_coherence_band_rmse(rng):
    u = rng.standard_normal((32, 32))
    np.testing.assert_array_equal(coherence_band_rmse(u, u), 0.0)
    out = coherence_band_rmse(u, rng.standard_normal((32, 32)))
    assert out.shape == (3,) and np.all((out >= 0) & (out <= 1))


# ---------------------------------------------------------------- reports

def test_parse_windows():
    assert parse_windows("1:8,9:16", 16) == [(1, 8), (9, 16)]
    for bad in ("0:4", "3:2", "1:17", "5"):
        with pytest.raises(ValueError):
            parse_windows(bad, 16)


def test_perfect_forecast(rng):
    truth = rng.standard_normal((4, 2, 16, 16))
    fc = EnsembleForecast(np.stack([truth] * 3), truth)
    rep = evaluate(fc)
    # a mean of three equal members can differ from them by one rounding
    assert np.max(rep.vrmse) < 1e-14 and np.all(rep.crps == 0) and np.max(rep.coherence_rmse) < 1e-14
    assert rep.coherence_rmse.shape == (4, 3, 2)


def test_window_aggregate(rng):
    truth = rng.standard_normal((5, 1, 8, 8))
    fc = EnsembleForecast(truth + rng.standard_normal((4, 5, 1, 8, 8)), truth)
    rep = evaluate(fc)
    np.testing.assert_allclose(rep.aggregates[("vrmse", "1:5")], rep.vrmse.mean(axis=0), rtol=0, atol=0)
    np.testing.assert_array_equal(rep.aggregates[("crps", "1:5")], rep.crps.mean(axis=0))
    two = evaluate(fc, windows=[(1, 2), (3, 5)])
    assert {k[1] for k in two.aggregates} == {"1:2", "3:5"}
    with pytest.raises(ValueError):
        evaluate(fc, windows=[(1, 6)])


def test_report_brute_force(rng):
    M, T, H = 2, 2, 4
    truth = rng.standard_normal((T, 1, H, H))
    members = rng.standard_normal((M, T, 1, H, H))
    bands = BandSpec((0, 1, 2))
    rep = evaluate(EnsembleForecast(members, truth), bands=bands)
    for t in range(T):
        u = truth[t, 0]
        mean = (members[0, t, 0] + members[1, t, 0]) / 2
        assert abs(rep.vrmse[t, 0] - vrmse_loops(u, mean)) < 1e-12
        assert abs(rep.crps[t, 0] - crps_loops(u, [members[0, t, 0], members[1, t, 0]])) < 1e-12
        expect = band_loops(coherence_loops(u, mean), [[1], [2]])
        assert np.max(np.abs(rep.coherence_rmse[t, :, 0] - expect)) < 1e-12


def test_per_member_coherence(rng):
    truth = rng.standard_normal((2, 1, 8, 8))
    members = rng.standard_normal((3, 2, 1, 8, 8))
    rep = evaluate(EnsembleForecast(members, truth), per_member_coherence=True)
    expect = np.mean([coherence_band_rmse(truth[1, 0], members[m, 1, 0]) for m in range(3)], axis=0)
    assert np.max(np.abs(rep.coherence_rmse[1, :, 0] - expect)) < 1e-12


def test_single_member_report(rng):
    truth = rng.standard_normal((2, 1, 8, 8))
    rep = evaluate(EnsembleForecast(truth[None] + 0.1, truth))
    assert rep.crps is None and all(r["metric"] != "crps" for r in rep.rows())


def test_report_serialization(tmp_path, rng):
    truth = rng.standard_normal((4, 1, 8, 8))
    fc = EnsembleForecast(truth + rng.standard_normal((2, 4, 1, 8, 8)), truth)
    rep = evaluate(fc, windows=[(1, 2), (3, 4)])
    rep.write_csv(tmp_path / "m.csv")
    rep.write_json(tmp_path / "m.json")
    rows = load_report_csv(tmp_path / "m.csv")
    assert list(rows[0]) == ["metric", "channel", "lead", "band", "window", "value"]
    assert len(rows) == len(rep.rows())
    row = next(r for r in rows if r["metric"] == "vrmse" and r["window"] == "3:4")
    assert float(row["value"]) == rep.aggregates[("vrmse", "3:4")][0]
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["windows"] == ["1:2", "3:4"] and len(doc["rows"]) == len(rows)


def test_evaluate_needs_truth(rng):
    with pytest.raises(ValueError):
        evaluate(EnsembleForecast(rng.standard_normal((2, 1, 1, 8, 8))))
