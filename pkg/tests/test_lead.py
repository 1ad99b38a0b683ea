import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lift import lead, normalize, spectral
from lift.data import Dataset
from lift.errors import InvalidInputError, StaleCacheError


def zrows(x):
    return normalize.apply(x, normalize.fit(x))


def brute_leads(window_norm, k):
    # independent reference: explicit loops over targets and indicators
    C, L = window_norm.shape
    out = []
    for j in range(C):
        cands = []
        for i in range(C):
            r = spectral.brute_force_cross_correlation(window_norm[j], window_norm[i])
            best = None
            for tau in range(1, L - 1):
                a = abs(r[tau])
                if abs(r[tau - 1]) + 1e-12 < a > abs(r[tau + 1]) + 1e-12 and (best is None or a > abs(r[best]) + 1e-12):
                    best = tau
            if best is not None:
                cands.append((-abs(r[best]), i, best, 1 if r[best] >= 0 else -1))
        cands.sort(key=lambda c: (c[0], c[1]))
        out.append(cands[:k])
    return out


# -- peak_argmax ---------------------------------------------------------


def test_unique_interior_peak():
    assert lead.peak_argmax([1.0, 0.2, 0.9, 0.3, 0.1]) == (2, 0.9, 1)


def test_monotone_curve_has_no_peak():
    assert lead.peak_argmax(np.linspace(0.1, 0.9, 9)) is None


def test_tie_resolves_to_smallest_lag():
    r = np.array([1.0, 0.5, 0.8, 0.5, -0.8, 0.5])
    assert lead.peak_argmax(r) == (2, 0.8, 1)


def test_negative_peak_reports_sign():
    assert lead.peak_argmax([0.0, 0.1, -0.7, 0.2]) == (2, 0.7, -1)


def test_short_input_rejected():
    with pytest.raises(InvalidInputError):
        lead.peak_argmax([1.0, 0.5])


def test_rounding_level_tie_goes_to_smaller_lag():
    r = np.array([0.0, 0.2, 0.6, 0.1, 0.6 + 1e-15, 0.0])
    assert lead.peak_argmax(r)[0] == 2
    assert lead._peaks(r[None])[0][0] == 2


def test_self_correlation_mirror_peaks_pick_smaller_lag():
    w = zrows(np.random.default_rng(12).normal(size=(1, 40)))
    t = lead.estimate_window(w, 1)
    r = spectral.cross_correlation_all_lags(w[0], w[0])
    assert t.steps[0, 0] <= 20
    assert abs(abs(r[t.steps[0, 0]]) - abs(r[40 - t.steps[0, 0]])) < 1e-12


def test_boundary_lag_is_never_selected():
    r = np.array([0.1, 0.2, 0.3, 0.2, 0.4, 0.9])
    assert lead.peak_argmax(r) == (2, 0.3, 1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=40))
def test_vectorized_peaks_match_scan(r):
    r = np.array(r)
    ref = lead.peak_argmax(r)
    step, best, found = lead._peaks(r[None])
    assert bool(found[0]) == (ref is not None)
    if ref is not None:
        assert (int(step[0]), float(best[0])) == ref[:2]


# -- estimate_leads --------------------------------------------------------


def test_clean_circular_copy_is_found():
    v1 = np.random.default_rng(0).normal(size=64)
    w = zrows(np.stack([v1, np.roll(v1, 3)]))
    e = lead.estimate_leads(w, 2)[1].entries[0]
    assert (e.indicator, e.step, e.sign, e.valid) == (0, 3, 1, True)
    assert abs(e.raw_abs_corr - 1.0) < 1e-9


def test_negated_copy_flips_sign_only():
    v1 = np.random.default_rng(0).normal(size=64)
    pos = lead.estimate_leads(zrows(np.stack([v1, np.roll(v1, 3)])), 2)[1].entries[0]
    neg = lead.estimate_leads(zrows(np.stack([v1, -np.roll(v1, 3)])), 2)[1].entries[0]
    assert (neg.indicator, neg.step, neg.sign) == (pos.indicator, pos.step, -1)
    assert abs(neg.raw_abs_corr - pos.raw_abs_corr) < 1e-12


def test_single_perfect_lead_coefficient_is_half():
    np.testing.assert_allclose(lead.normalized_coefficients([1.0], [True]), [0.5], atol=1e-15)


def test_coefficients_clamp_and_ignore_invalid():
    c = lead.normalized_coefficients([1.0004, 0.3, 0.9], [True, True, False])
    e = math.e
    np.testing.assert_allclose(c, [e / (2 * e + math.exp(0.3)), math.exp(0.3) / (2 * e + math.exp(0.3)), 0.0])


def test_matches_brute_force_reference():
    rng = np.random.default_rng(5)
    for _ in range(20):
        C, L, K = int(rng.integers(1, 6)), int(rng.integers(5, 40)), int(rng.integers(1, 7))
        w = zrows(rng.normal(size=(C, L)))
        ref = brute_leads(w, K)
        t = lead.estimate_window(w, K)
        for j in range(C):
            n = len(ref[j])
            assert t.valid[j].sum() == n
            for r, (negabs, i, tau, sgn) in enumerate(ref[j]):
                assert (t.indicators[j, r], t.steps[j, r], t.signs[j, r]) == (i, tau, sgn)
                assert abs(t.raw_abs_corr[j, r] + negabs) < 1e-9
            assert np.all(t.norm_coeffs[j, n:] == 0) and np.all(t.signs[j, n:] == 1) and np.all(t.steps[j, n:] == 1)


def test_leadset_invariants():
    rng = np.random.default_rng(6)
    w = zrows(rng.normal(size=(6, 48)))
    for s in lead.estimate_leads(w, 4):
        a = s.raw_abs_corr[s.valid]
        assert np.all(np.diff(a) <= 0)
        assert np.all(s.steps >= 1) and np.all(s.steps <= w.shape[1] - 2)
        assert np.all((s.norm_coeffs[s.valid] > 0) & (s.norm_coeffs[s.valid] < 1))
        assert s.norm_coeffs.sum() < 1


def test_k_larger_than_channel_count_pads_invalid():
    w = zrows(np.random.default_rng(7).normal(size=(2, 30)))
    t = lead.estimate_window(w, 5)
    assert t.shape == (2, 5)
    assert not t.valid[:, 2:].any()


def test_constant_channel_is_excluded_with_warning():
    rng = np.random.default_rng(8)
    x = np.vstack([rng.normal(size=(2, 32)), np.full((1, 32), 3.0)])
    with pytest.warns(lead.DegenerateChannelWarning):
        t = lead.estimate_window(zrows(x), 3)
    assert not t.valid[2].any()
    assert not np.any((t.indicators == 2) & t.valid)


def test_self_lead_only_at_positive_step():
    t = np.arange(60)
    x = np.sin(2 * np.pi * t / 10.0)[None]
    s = lead.estimate_leads(zrows(x), 1)[0]
    assert s.valid[0] and s.indicators[0] == 0 and s.steps[0] >= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20))
def test_joint_circular_shift_keeps_magnitudes(seed, offset):
    w = zrows(np.random.default_rng(seed).normal(size=(4, 40)))
    a = lead.estimate_window(w, 3)
    b = lead.estimate_window(np.roll(w, offset, axis=1), 3)
    np.testing.assert_allclose(np.sort(a.raw_abs_corr, axis=None), np.sort(b.raw_abs_corr, axis=None), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-5, 5))
def test_affine_invariance(seed, a, b):
    x = np.random.default_rng(seed).normal(size=(4, 40))
    ref = lead.estimate_window(zrows(x), 3)
    y = x.copy()
    y[1] = a * y[1] + b
    got = lead.estimate_window(zrows(y), 3)
    np.testing.assert_array_equal(got.indicators, ref.indicators)
    np.testing.assert_array_equal(got.steps, ref.steps)
    np.testing.assert_allclose(got.norm_coeffs, ref.norm_coeffs, atol=1e-9)
    y[1] = -y[1]
    flip = lead.estimate_window(zrows(y), 3)
    np.testing.assert_array_equal(flip.indicators, ref.indicators)
    np.testing.assert_array_equal(flip.steps, ref.steps)
    # the sign flips for pairs that involve exactly one copy of channel 1
    mixed = (np.arange(4)[:, None] == 1) ^ (ref.indicators == 1)
    np.testing.assert_array_equal(flip.signs, np.where(mixed & ref.valid, -ref.signs, ref.signs))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=16))
def test_softmax_identity(raw):
    raw = np.array(raw)
    c = lead.normalized_coefficients(raw, np.ones(len(raw), bool))
    assert abs(c.sum() + math.e / (math.e + np.exp(raw).sum()) - 1) <= 1e-12


# -- cache -------------------------------------------------------------------


def small_dataset(T=60, C=3, seed=0):
    return Dataset(np.random.default_rng(seed).normal(size=(T, C)).cumsum(axis=0), tuple(f"c{i}" for i in range(C)))


def test_cache_position_count():
    ds = small_dataset(T=40)
    assert len(lead.precompute_leads(ds, 30, 2)) == 11


def test_cache_entries_equal_recomputation():
    ds = small_dataset()
    cache = lead.precompute_leads(ds, 20, 2, stride=3)
    for t in cache.positions:
        w = ds.values[t : t + 20].T
        assert cache.lookup(t).equals(lead.estimate_window(zrows(w), 2))
    assert 1 not in cache
    with pytest.raises(KeyError):
        cache.lookup(1)


def test_threaded_cache_is_identical():
    ds = small_dataset()
    a = lead.precompute_leads(ds, 20, 2, threads=1)
    b = lead.precompute_leads(ds, 20, 2, threads=3)
    assert lead.encode_cache(a) == lead.encode_cache(b)


def test_cache_round_trip(tmp_path):
    ds = small_dataset()
    cache = lead.precompute_leads(ds, 20, 3, stride=2)
    p = tmp_path / "c.cache"
    lead.save_cache(cache, p)
    back = lead.load_cache(p, ds.fingerprint)
    assert lead.encode_cache(back) == p.read_bytes()
    assert back.table.equals(cache.table)
    assert (back.L, back.K, back.stride) == (20, 3, 2)


def test_stale_cache_detected(tmp_path):
    cache = lead.precompute_leads(small_dataset(seed=0), 20, 2)
    lead.save_cache(cache, tmp_path / "c.cache")
    with pytest.raises(StaleCacheError):
        lead.load_cache(tmp_path / "c.cache", small_dataset(seed=1).fingerprint)


def test_count_tables():
    ds = small_dataset()
    cache = lead.precompute_leads(ds, 20, 2)
    pair, steps = lead.lead_count_tables(cache.table)
    assert pair.sum() == cache.table.valid.sum() == sum(steps.values())
    for (j, i, s), n in steps.items():
        got = np.sum(cache.table.valid & (cache.table.indicators == i) & (cache.table.steps == s)
                     & (np.arange(3)[None, :, None] == j))
        assert got == n
