import itertools

import numpy as np
import pytest
from scipy.stats import ks_2samp

from ionideal.detect_long import (
    CriticalValues,
    balance_quantiles,
    calibrate,
    dyadic_scales,
    fit,
    fit_unpruned,
    jsmurf_stat,
    null_maxima_long,
    robust_sd,
)
from ionideal.errors import CalibrationError, InputError
from ionideal.model import PiecewiseSignal, StationaryNoise, Trace, simulate

FS = 10000.0


@pytest.fixture(scope="module")
def q4096(kernel):
    return calibrate(4096, kernel, alpha=0.01, R=2000, seed=1)


def test_jsmurf_zero_when_level_matches():
    y = np.full(30, 0.4)
    assert jsmurf_stat(y, 1, 30, 0.4, 11) == 0.0


def test_jsmurf_hand_case():
    m = 11
    y = np.zeros(m + 3)
    y[m:] = [0.0, 1.0, 2.0]
    assert jsmurf_stat(y, 1, m + 3, 0.0, m) == pytest.approx(1.5)


def test_jsmurf_degenerate_variance_is_infinite():
    assert jsmurf_stat(np.ones(20), 1, 20, 0.0, 5) == np.inf


def test_jsmurf_rejects_short_interval():
    with pytest.raises(InputError):
        jsmurf_stat(np.arange(12.0), 1, 12, 0.0, 11)


def test_jsmurf_null_distribution_matches_direct_simulation(kernel):
    # circulant sampler used for calibration versus the fine-grid simulator
    L, m = 64, kernel.m
    gen = StationaryNoise(kernel, 1_000_000)
    rng = np.random.default_rng(0)
    direct = simulate(PiecewiseSignal([], [0.0], [1.0], 1e3), kernel, 2_000_000, seed=1).samples

    def stats(y):
        starts = np.arange(0, y.size - L, L + m)
        return np.array([jsmurf_stat(y, a + 1, a + L, 0.0, m) for a in starts])

    t1 = np.concatenate([stats(y) for y in gen.pair(rng)])
    t2 = stats(direct)
    assert ks_2samp(t1, t2).pvalue > 1e-3


def test_dyadic_scales():
    assert dyadic_scales(100, 11).tolist() == [16, 32, 64]
    assert dyadic_scales(10, 11).size == 0


def test_robust_sd_consistent(kernel):
    y = simulate(PiecewiseSignal([], [3.0], [0.2], 100.0), kernel, 200_000, seed=2).samples
    assert robust_sd(y, kernel.m) == pytest.approx(0.2, rel=0.02)


def test_balance_single_scale_quantile(rng):
    M = rng.standard_normal((1000, 1))
    q, achieved = balance_quantiles(M, np.ones(1), 0.05)
    assert q[0] == np.sort(M[:, 0])[949]
    assert achieved <= 0.05


def test_balance_small_alpha_exceeds_all(rng):
    M = rng.standard_normal((500, 3))
    q, achieved = balance_quantiles(M, np.full(3, 1 / 3), 1 / 500)
    assert achieved == pytest.approx(1 / 500)
    # below the resolution 1/R the limiting thresholds are the sample maxima
    with pytest.raises(CalibrationError) as err:
        balance_quantiles(M, np.full(3, 1 / 3), 1e-4)
    assert err.value.achieved == 0.0
    assert np.all(err.value.q >= M.max(axis=0))


def test_balance_ties_reported(rng):
    # duplicated rows move the level in steps of 2/R, so 1/R accuracy fails
    M = np.repeat(rng.standard_normal((250, 4)), 2, axis=0)
    with pytest.raises(CalibrationError):
        balance_quantiles(M, np.full(4, 0.25), 0.011)


def test_balance_level_not_exceeded(rng):
    M = rng.gamma(2.0, size=(3000, 6))
    q, achieved = balance_quantiles(M, np.full(6, 1 / 6), 0.04)
    assert achieved <= 0.04
    assert achieved > 0.03


def test_critical_values_validation():
    with pytest.raises(InputError):
        CriticalValues([16, 16], [1, 2], 0.1, [0.5, 0.5])
    with pytest.raises(InputError):
        CriticalValues([16, 32], [1, 2], 0.1, [0.5, 0.4])


def test_calibrate_deterministic(kernel):
    a = calibrate(512, kernel, R=300, seed=3)
    b = calibrate(512, kernel, R=300, seed=3)
    assert np.array_equal(a.q, b.q)
    assert a.mc_meta["kernel"] == kernel.fingerprint


def test_calibrate_seed_stability(kernel):
    R = 10000
    a = calibrate(4096, kernel, R=R, seed=11)
    b = calibrate(4096, kernel, R=R, seed=12)
    gen = StationaryNoise(kernel, 4096)
    M = np.array([null_maxima_long(y, a.scales, kernel.m) for y in gen.draw(np.random.default_rng(13), R)])
    # half-samples without replacement avoid ties; their spread around the
    # full-sample estimate matches the standard error at R replications
    rng = np.random.default_rng(0)
    half = [balance_quantiles(M[rng.permutation(R)[: R // 2]], a.weights, a.alpha)[0] for _ in range(60)]
    se = np.std(half, axis=0)
    # a.q - b.q has sd sqrt(2) se per scale
    assert np.all(np.abs(a.q - b.q) <= 3.5 * np.sqrt(2) * se)


def test_fit_noiseless_constant(kernel, q4096):
    tr = Trace(np.full(4096, 0.25), FS)
    ide = fit(tr, kernel, q4096)
    assert ide.n_changes == 0
    assert ide.signal.levels[0] == 0.25


def test_fit_two_long_segments(kernel, q4096):
    sig = PiecewiseSignal([2048.37 / FS], [0.0, 0.32], np.sqrt([6.1e-5, 1e-3]), 4096 / FS)
    hits = 0
    for seed in range(200):
        ide = fit(simulate(sig, kernel, 4096, seed=seed), kernel, q4096)
        t = ide.signal.change_times * FS
        hits += t.size == 1 and abs(t[0] - 2048.37) < kernel.m
    assert hits >= 198


def test_fit_null_false_positive_rate(kernel, q4096):
    gen = StationaryNoise(kernel, 4096)
    rng = np.random.default_rng(99)
    R = 1000
    fp = sum(fit(Trace(y, FS), kernel, q4096).n_changes > 0 for y in gen.draw(rng, R))
    p = fp / R
    assert p <= 0.01 + 2 * np.sqrt(0.01 * 0.99 / R)


def _feasibility_table(y, m, scales, qs, tol):
    """feas[s, e]: some level passes every dyadic test inside the 0-based segment [s, e]."""
    n = y.size
    lo = np.full((n, n), -np.inf)
    hi = np.full((n, n), np.inf)
    for L, q in zip(scales, qs):
        for a in range(n - L + 1):
            obs = y[a + m : a + L]
            mean = obs.mean()
            rad = np.sqrt(2 * obs.var(ddof=1) * q / obs.size)
            # every segment [s, e] with s <= a and e >= a + L - 1 contains this interval
            sub_lo = lo[: a + 1, a + L - 1 :]
            np.maximum(sub_lo, mean - rad, out=sub_lo)
            sub_hi = hi[: a + 1, a + L - 1 :]
            np.minimum(sub_hi, mean + rad, out=sub_hi)
    return lo <= hi + tol


def _segmentations(n, K):
    for cuts in itertools.combinations(range(1, n), K):
        yield (0,) + cuts + (n,)


@pytest.fixture(scope="module")
def q128(kernel):
    return calibrate(128, kernel, alpha=0.05, R=2000, seed=21)


@pytest.mark.parametrize("seed", range(6))
def test_fit_minimality_brute_force(kernel, q128, seed):
    m, n = kernel.m, 128
    sig = PiecewiseSignal([40.5 / FS, 85.2 / FS], [0.0, 1.0, 0.3], [0.05, 0.08, 0.05], n / FS)
    tr = simulate(sig, kernel, n, seed=seed)
    ide = fit(tr, kernel, q128)
    K = ide.n_changes
    assert 1 <= K <= 3
    y = tr.samples - np.median(tr.samples)
    feas = _feasibility_table(y, m, q128.scales, q128.q, 1e-9 * np.abs(y).max())
    for bounds in _segmentations(n, K - 1):
        if all(feas[bounds[r], bounds[r + 1] - 1] for r in range(K)):
            pytest.fail(f"feasible candidate with {K - 1} changes: {bounds}")
    starts = np.concatenate([[0], np.rint(ide.signal.change_times * FS).astype(int), [n]])
    assert all(feas[starts[r], starts[r + 1] - 1] for r in range(K + 1))


def test_pruned_equals_unpruned(kernel):
    cv = calibrate(1024, kernel, R=300, seed=5)
    rng = np.random.default_rng(1)
    for seed in range(3):
        taus = np.sort(rng.choice(np.arange(100, 900), 3, replace=False)) + 0.4
        sig = PiecewiseSignal(taus / FS, [0.0, 0.5, 0.1, 0.6], [0.1, 0.2, 0.1, 0.25], 1024 / FS)
        tr = simulate(sig, kernel, 1024, seed=seed)
        a, b = fit(tr, kernel, cv), fit_unpruned(tr, kernel, cv)
        assert np.array_equal(a.signal.change_times, b.signal.change_times)
        assert np.allclose(a.signal.levels, b.signal.levels, rtol=0, atol=1e-12)
        assert a.diagnostics["cost"] == pytest.approx(b.diagnostics["cost"], rel=1e-12)


def test_raising_thresholds_never_adds_changes(kernel, q4096):
    sig = PiecewiseSignal(np.array([1000.5, 1060.2, 3000.1]) / FS, [0, 0.05, 0.0, 0.03], [0.03] * 4, 4096 / FS)
    tr = simulate(sig, kernel, 4096, seed=4)
    counts = []
    for f in (0.5, 1.0, 2.0, 4.0, 16.0):
        cv = CriticalValues(q4096.scales, q4096.q * f, q4096.alpha, q4096.weights, q4096.mc_meta)
        counts.append(fit(tr, kernel, cv).n_changes)
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_fit_rejects_foreign_kernel(q4096):
    from ionideal.filter import make_bessel

    other = make_bessel(cutoff=2000.0)
    with pytest.raises(InputError):
        fit(Trace(np.zeros(4096), FS), other, q4096)
