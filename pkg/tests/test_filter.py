import numpy as np
import pytest
from scipy import integrate, signal

from ionideal.errors import InputError
from ionideal.filter import (
    acf,
    autocorr,
    kernel,
    kernel_from_record,
    kernel_to_record,
    make_bessel,
    step_response,
    untruncated_acf,
)


def test_default_truncation_length(kernel):
    assert kernel.m == 11


def test_truncation_rule_is_tight(kernel):
    lags = np.arange(200) / kernel.sample_rate
    rho = untruncated_acf(kernel.poles, kernel.residues, lags)
    rho /= rho[0]
    assert abs(rho[kernel.m - 1]) >= 1e-3
    assert np.all(np.abs(rho[kernel.m :]) < 1e-3)


def test_poles_match_scipy_bessel(kernel):
    z, p, _ = signal.bessel(4, 2 * np.pi * 1000.0, analog=True, norm="mag", output="zpk")
    assert z.size == 0
    ours = np.sort_complex(kernel.poles)
    ref = np.sort_complex(p)
    assert np.allclose(ours, ref, rtol=1e-12, atol=0)


def test_kernel_matches_state_space_ode(kernel):
    b, a = signal.bessel(4, 2 * np.pi * 1000.0, analog=True, norm="mag")
    A, B, C, _ = signal.tf2ss(b, a)
    T = kernel.duration
    ts = np.linspace(0, T, 57)
    sol = integrate.solve_ivp(lambda t, x: A @ x, (0, T), B[:, 0], t_eval=ts, rtol=1e-13, atol=1e-16, method="DOP853")
    h = (C @ sol.y)[0] * kernel.rescale
    assert np.max(np.abs(kernel_fn(kernel, ts) - h)) <= 1e-8 * np.max(np.abs(h))


def kernel_fn(k, t):
    return kernel(k, t)


def test_kernel_support(kernel):
    T = kernel.duration
    assert kernel_fn(kernel, -0.1) == 0
    assert kernel_fn(kernel, T + 1e-12) == 0
    assert kernel_fn(kernel, np.array([-1e-9, T * 1.5])).tolist() == [0.0, 0.0]


def test_kernel_integrates_to_one(kernel):
    val, _ = integrate.quad(lambda t: kernel_fn(kernel, t), 0, kernel.duration, epsabs=1e-14, epsrel=1e-14, limit=200)
    assert abs(val - 1) < 1e-12


def test_step_response_endpoints(kernel):
    T = kernel.duration
    assert step_response(kernel, 0.0) == 0
    assert step_response(kernel, -1.0) == 0
    assert step_response(kernel, T) == 1
    assert step_response(kernel, 10 * T) == 1


def test_step_response_matches_trapezoid(kernel):
    T = kernel.duration
    fine = np.linspace(0, T, 400001)
    cum = integrate.cumulative_trapezoid(kernel_fn(kernel, fine), fine, initial=0)
    mids = np.linspace(0, T, 23)[1:-1]
    assert np.allclose(step_response(kernel, mids), np.interp(mids, fine, cum), atol=1e-9, rtol=0)


def test_step_response_rises_where_kernel_nonnegative(kernel):
    # a 4-pole Bessel step overshoots by under 1 %, so it decreases exactly where the kernel is negative
    t = np.linspace(0, kernel.duration, 5001)
    s = step_response(kernel, t)
    rising = kernel_fn(kernel, t[:-1]) >= 0
    rising &= kernel_fn(kernel, t[1:]) >= 0
    assert np.all(np.diff(s)[rising] >= -1e-12)
    assert 1.0 < s.max() < 1.01


def test_autocorr_trivial_cases(kernel):
    T = kernel.duration
    lags = np.linspace(-T, T, 9)
    assert np.all(autocorr(kernel, 0.0, lags) == 0)
    assert autocorr(kernel, np.inf, T) == 0
    assert autocorr(kernel, np.inf, -T) == 0
    assert autocorr(kernel, -1.0, 0.0) == 0


def test_autocorr_lag_zero_quadrature(kernel):
    T = kernel.duration
    val, _ = integrate.quad(lambda s: kernel_fn(kernel, s) ** 2, 0, T, epsabs=1e-20, epsrel=1e-13, limit=200)
    assert abs(autocorr(kernel, T, 0.0) - val) <= 1e-10 * val


@pytest.mark.parametrize("t1,t2,lag", [(0.0, 3e-4, 1e-4), (2e-4, 9e-4, -3e-4), (1e-4, 2e-3, 5.5e-4), (0.0, 1.0, 0.0)])
def test_autocorr_increments_match_quadrature(kernel, t1, t2, lag):
    f = lambda s: kernel_fn(kernel, s) * kernel_fn(kernel, s + lag)  # noqa: E731
    hi = min(t2, kernel.duration)
    val, _ = integrate.quad(f, t1, hi, epsabs=1e-13, epsrel=1e-12, limit=400, points=[kernel.duration - lag] if 0 < kernel.duration - lag < hi else None)
    got = autocorr(kernel, t2, lag) - autocorr(kernel, t1, lag)
    assert abs(got - val) <= 1e-9 * kernel.variance0


def test_stationary_autocorr_symmetric(kernel):
    lags = np.linspace(0, kernel.duration, 31)
    assert np.allclose(autocorr(kernel, np.inf, lags), autocorr(kernel, np.inf, -lags), rtol=1e-13, atol=0)


def test_acf_normalized(kernel):
    assert acf(kernel, np.inf, 0.0) == pytest.approx(1.0, abs=1e-15)


def test_first_order_kernel_is_exponential():
    k = make_bessel(order=1, cutoff=500.0, sample_rate=10000.0)
    assert k.poles.size == 1 and abs(k.poles[0].imag) < 1e-12
    a = -k.poles[0].real
    assert a == pytest.approx(2 * np.pi * 500.0, rel=1e-12)
    t = np.linspace(0, k.duration, 17)
    assert np.allclose(kernel(k, t), k.rescale * a * np.exp(-a * t), rtol=1e-12)


def test_make_bessel_deterministic():
    a, b = make_bessel(), make_bessel()
    assert np.array_equal(a.poles, b.poles) and np.array_equal(a.residues, b.residues) and a.m == b.m
    assert a.fingerprint == b.fingerprint


@pytest.mark.parametrize("kw", [{"cutoff": 5000.0}, {"cutoff": 0.0}, {"order": 0}, {"acf_threshold": 1.5}])
def test_make_bessel_rejects_bad_input(kw):
    with pytest.raises(InputError):
        make_bessel(**kw)


def test_record_roundtrip(kernel):
    k2 = kernel_from_record(kernel_to_record(kernel))
    assert k2.m == kernel.m and np.array_equal(k2.poles, kernel.poles) and k2.rescale == kernel.rescale
    assert "normalization = -3dB" in kernel_to_record(kernel)
