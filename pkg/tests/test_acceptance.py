"""Acceptance criteria, one test each; every test records a PASS/FAIL line."""

import math
import statistics
import time

import numpy as np

from lift import lead, normalize, spectral, training
from lift.data import LeadPair, SyntheticSpec, gen_synthetic, random_pairs, split
from lift.lead import LeadTable
from lift.model import LiftModel, ModelConfig
from lift.training import TrainConfig


def zrows(x):
    return normalize.apply(x, normalize.fit(x))


def roll_oracle(v, u):
    # O(L^2): every lag evaluated as its own full dot product
    L = len(v)
    return np.array([np.dot(np.roll(u, d), v) / L for d in range(L)])


def test_cross_correlation_oracle_equivalence(acceptance_report):
    rng = np.random.default_rng(2024)
    worst, t0 = 0.0, time.perf_counter()
    for _ in range(200):
        C, L = int(rng.integers(1, 5)), int(rng.integers(8, 129))
        x = zrows(rng.normal(size=(C, L)))
        for j in range(C):
            for i in range(C):
                got = spectral.cross_correlation_all_lags(x[j], x[i])
                worst = max(worst, float(np.max(np.abs(got - roll_oracle(x[j], x[i])))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10
    acceptance_report("oracle equivalence", ok, f"max abs err {worst:.2e} (<= 1e-9), {elapsed:.2f} s (< 10 s)")
    assert ok


def recovery_rate(noise, n_datasets=10, per_dataset=50, L=128):
    window_hits = pair_hits = windows = 0
    for s in range(n_datasets):
        pairs = random_pairs(10, 5, (4, 16), np.random.default_rng(500 + s))
        ds, truth = gen_synthetic(SyntheticSpec(10, 5000, pairs, noise=noise, seed=s))
        for t0 in np.linspace(0, ds.T - L, per_dataset).astype(int):
            sets = lead.estimate_leads(zrows(ds.values[t0 : t0 + L].T), 8)
            ok = [bool(sets[p.lagged].valid[0]) and sets[p.lagged].indicators[0] == p.leader
                  and sets[p.lagged].steps[0] == p.lag for p in truth]
            window_hits += all(ok)
            pair_hits += sum(ok)
            windows += 1
    return window_hits / windows, pair_hits / (5 * windows), windows


def test_planted_lead_recovery(acceptance_report):
    noisy, noisy_pairs, n = recovery_rate(0.05)
    clean, clean_pairs, _ = recovery_rate(0.0)
    ok = noisy >= 0.95 and clean == 1.0
    acceptance_report("planted-lead recovery", ok,
                      f"sigma=0.05: {noisy:.1%} of {n} windows with all 5 pairs exact (>= 95%, per pair {noisy_pairs:.1%}); "
                      f"sigma=0: {clean:.1%} (= 100%)")
    assert ok


def test_peak_constraint_guard(acceptance_report):
    L = 32
    bad = 0
    nones = 0
    for s in range(100):
        ds, _ = gen_synthetic(SyntheticSpec(2, 4 * (L + 2) + 40, (LeadPair(1, 0, L + 2),), seed=s))
        w = zrows(ds.values[40 : 40 + L].T)
        r = spectral.cross_correlation_all_lags(w[1], w[0])
        res = lead.peak_argmax(r)
        if res is None:
            nones += 1
            continue
        tau = res[0]
        a = np.abs(r)
        genuine = 1 <= tau <= L - 2 and a[tau - 1] < a[tau] > a[tau + 1]
        bad += (not genuine) or tau == L - 1
    ok = bad == 0
    acceptance_report("peak-constraint guard", ok,
                      f"{bad} boundary/non-peak selections over 100 seeds ({nones} returned none)")
    assert ok


def test_gradient_verification(acceptance_report):
    C, L, H, K, N, B = 4, 16, 8, 2, 2, 3
    worst, checks, t0 = 0.0, 0, time.perf_counter()
    for s in range(20):
        rng = np.random.default_rng(s)
        look = rng.normal(size=(B, C, L)).cumsum(axis=-1)
        target = rng.normal(size=(B, C, H))
        leads = LeadTable.stack([lead.estimate_window(zrows(w), K) for w in look])
        for shift in (False, True):
            model = LiftModel.create(ModelConfig(C=C, L=L, H=H, K=K, N=N, grad_through_shift=shift), seed=s)
            model = model.with_params({k: v + 0.1 * rng.normal(size=v.shape) for k, v in model.params.items()})
            for mode in ("joint", "frozen-backbone"):
                for r in training.gradient_check(model, look, target, leads, mode, h=1e-5):
                    worst = max(worst, r.rel_error)
                    checks += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60
    acceptance_report("gradient verification", ok,
                      f"worst rel err {worst:.2e} over {checks} tensor checks (<= 1e-4), {elapsed:.1f} s (< 60 s)")
    assert ok


def test_pass_through_identity(acceptance_report):
    worst = 0.0
    for s in range(50):
        rng = np.random.default_rng(s)
        C, L = int(rng.integers(1, 8)), int(rng.integers(8, 64))
        H = int(rng.integers(2, L + 1))
        K, N = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        model = LiftModel.create(ModelConfig(C=C, L=L, H=H, K=K, N=N), seed=s)
        raw = rng.normal(size=(C, L)).cumsum(axis=1) * rng.uniform(0.1, 10) + rng.uniform(-50, 50)
        got = model.forward(raw, lead.estimate_window(zrows(raw), K))
        worst = max(worst, float(np.max(np.abs(got - model.backbone_forecast(raw)))))
    ok = worst <= 1e-9
    acceptance_report("pass-through identity", ok, f"max abs diff {worst:.2e} over 50 seeds (<= 1e-9)")
    assert ok


def e2e_run(seed):
    C, T, L, H, K = 10, 5000, 96, 24, 8
    pairs = random_pairs(C, 5, (4, 20), np.random.default_rng(seed))
    ds, _ = gen_synthetic(SyntheticSpec(C, T, pairs, noise=0.05, seed=seed))
    t0 = time.perf_counter()
    cache = lead.precompute_leads(ds, L, K)
    _, _, test_span = split(ds)
    mse = {}
    for use_refiner in (False, True):
        cfg = TrainConfig(L=L, H=H, K=K, N=4, lr=3e-3, epochs=15, seed=seed, use_refiner=use_refiner)
        model = LiftModel.create(cfg.model_config(C), seed=seed)
        trained, _ = training.train(model, ds, cache, cfg)
        wins = training.make_windows(ds, test_span, L, H, K, cache, with_leads=use_refiner)
        mse[use_refiner] = training.evaluate(trained, wins)[0]
    return mse[True] / mse[False], mse, time.perf_counter() - t0


def test_end_to_end_improvement(acceptance_report):
    ratios, slowest = [], 0.0
    for seed in range(5):
        ratio, mse, secs = e2e_run(seed)
        ratios.append(ratio)
        slowest = max(slowest, secs)
        print(f"  seed {seed}: backbone {mse[False]:.4f}  lift {mse[True]:.4f}  ratio {ratio:.3f}  {secs:.0f} s")
    med = statistics.median(ratios)
    ok = med <= 0.90 and slowest < 300
    acceptance_report("end-to-end improvement", ok,
                      f"median test-MSE ratio {med:.3f} (<= 0.90; runs {', '.join(f'{r:.3f}' for r in ratios)}), "
                      f"slowest run {slowest:.0f} s (< 300 s)")
    assert ok


def test_round_trips(acceptance_report):
    rng = np.random.default_rng(7)
    norm_err = fft_err = pars_err = 0.0
    for _ in range(200):
        C, n = int(rng.integers(1, 6)), int(rng.integers(2, 300))
        x = rng.normal(size=(C, n)) * rng.uniform(0.1, 10) + rng.uniform(-10, 10)
        s = normalize.fit(x)
        norm_err = max(norm_err, float(np.max(np.abs(normalize.invert(normalize.apply(x, s), s) - x))))
        row = x[0]
        back = spectral.irfft(spectral.rfft(row), n)
        fft_err = max(fft_err, float(np.max(np.abs(back - row)) / np.max(np.abs(row))))
        full = spectral.hermitian_extend(spectral.rfft(row).bins, n)
        e = np.sum(row ** 2)
        pars_err = max(pars_err, abs(e - np.sum(np.abs(full) ** 2) / n) / e)
    ok = norm_err <= 1e-12 and fft_err <= 1e-12 and pars_err <= 1e-9
    acceptance_report("normalization / FFT round-trip / Parseval", ok,
                      f"normalize {norm_err:.1e} (<= 1e-12), FFT rel {fft_err:.1e} (<= 1e-12), Parseval rel {pars_err:.1e} (<= 1e-9)")
    assert ok


def test_training_determinism(acceptance_report):
    pairs = random_pairs(6, 3, (3, 10), np.random.default_rng(1))
    ds, _ = gen_synthetic(SyntheticSpec(6, 1200, pairs, noise=0.05, seed=1))
    cfg = TrainConfig(L=48, H=12, K=4, N=2, epochs=3, seed=11, mode="pretrain-then-joint", pretrain_epochs=1)
    blobs = []
    for _ in range(2):
        cache = lead.precompute_leads(ds, 48, 4)
        trained, _ = training.train(LiftModel.create(cfg.model_config(6), seed=11), ds, cache, cfg)
        blobs.append(trained.encode())
    ok = blobs[0] == blobs[1]
    acceptance_report("determinism", ok, f"checkpoints byte-identical: {ok} ({len(blobs[0])} bytes)")
    assert ok


def test_softmax_identity(acceptance_report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 17))
        raw = rng.uniform(0, 1, size=k)
        coeffs = lead.normalized_coefficients(raw, np.ones(k, bool))
        worst = max(worst, abs(coeffs.sum() + math.e / (math.e + np.exp(raw).sum()) - 1.0))
    ok = worst <= 1e-12
    acceptance_report("softmax identity", ok, f"max deviation {worst:.1e} over 1000 vectors (<= 1e-12)")
    assert ok
