"""Signal model, exact moments of filtered observations, and simulators.

Observations are ``Y_i = (F * (f + sigma * dW))(i / f_s)`` for ``i = 1..n``,
with ``f`` and ``sigma`` piecewise constant and ``F`` the truncated kernel.
Mean and covariance of ``Y`` follow from the step response and the
autocorrelation of ``F`` and are computed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError
from .filter import FilterKernel, acf, kernel, step_response

__all__ = [
    "PiecewiseSignal",
    "Trace",
    "HmmSpec",
    "PORB_HMM",
    "VioletNoise",
    "PinkNoise",
    "expectation",
    "covariance",
    "simulate",
    "moving_average",
    "simulate_hmm",
    "hmm_path",
    "add_contamination",
    "pink_noise",
    "StationaryNoise",
]


def _frozen_float(values) -> np.ndarray:
    a = np.array(values, dtype=float).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PiecewiseSignal:
    """Piecewise-constant conductance with piecewise-constant noise level.

    Segment ``k`` covers ``[tau_k, tau_{k+1})`` with ``tau_0 = -inf`` and
    ``tau_{K+1} = end_time``.

    Attributes
    ----------
    change_times : ndarray, shape (K,)
        Strictly increasing change times in seconds.
    levels : ndarray, shape (K + 1,)
        Conductance per segment (nS).
    sds : ndarray, shape (K + 1,)
        Noise standard deviation per segment (nS). Zero is allowed so that
        noiseless traces can be represented.
    end_time : float
        End of the observation period in seconds.
    distinct_levels : bool
        Require adjacent levels to differ. Disabled for variance-valued
        signals that share change times with a conductance signal.
    """

    change_times: np.ndarray
    levels: np.ndarray
    sds: np.ndarray
    end_time: float
    distinct_levels: bool = True

    def __post_init__(self):
        tau = _frozen_float(self.change_times)
        levels = _frozen_float(self.levels)
        sds = _frozen_float(self.sds)
        object.__setattr__(self, "change_times", tau)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "sds", sds)
        object.__setattr__(self, "end_time", float(self.end_time))
        if levels.size != tau.size + 1 or sds.size != tau.size + 1:
            raise InputError("need len(levels) == len(sds) == len(change_times) + 1")
        if np.any(np.diff(tau) <= 0):
            raise InputError("change times must be strictly increasing")
        if tau.size and tau[-1] >= self.end_time:
            raise InputError("change times must lie before end_time")
        if self.distinct_levels and np.any(levels[1:] == levels[:-1]):
            raise InputError("adjacent segments must have different levels")
        if np.any(sds < 0) or not np.all(np.isfinite(sds)) or not np.all(np.isfinite(levels)):
            raise InputError("levels must be finite and sds finite and non-negative")

    @property
    def n_changes(self) -> int:
        return int(self.change_times.size)

    def segment_index(self, t) -> np.ndarray:
        """Index of the segment containing time ``t`` (a change belongs to the new segment)."""
        return np.searchsorted(self.change_times, np.asarray(t, dtype=float), side="right")

    def level_at(self, t) -> np.ndarray:
        return self.levels[self.segment_index(t)]

    def sd_at(self, t) -> np.ndarray:
        return self.sds[self.segment_index(t)]


@dataclass(frozen=True, eq=False)
class Trace:
    """Equidistant samples ``Y_1..Y_n`` taken at times ``i / sample_rate``."""

    samples: np.ndarray
    sample_rate: float
    provenance: str = ""

    def __post_init__(self):
        y = _frozen_float(self.samples)
        if y.size < 1:
            raise InputError("a trace needs at least one sample")
        if not np.all(np.isfinite(y)):
            raise InputError("trace contains non-finite values")
        if not self.sample_rate > 0:
            raise InputError("sample_rate must be positive")
        object.__setattr__(self, "samples", y)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    @property
    def n(self) -> int:
        return int(self.samples.size)

    @property
    def times(self) -> np.ndarray:
        return np.arange(1, self.n + 1) / self.sample_rate


@dataclass(frozen=True, eq=False)
class HmmSpec:
    """Continuous-time Markov gating model.

    Attributes
    ----------
    state_means, state_sds : ndarray
        Conductance and noise level per state.
    dwell_rates : ndarray
        Exit rate (Hz) of each state.
    transition_probs : ndarray
        Jump probabilities, row-stochastic with zero diagonal.
    """

    state_means: np.ndarray
    state_sds: np.ndarray
    dwell_rates: np.ndarray
    transition_probs: np.ndarray

    def __post_init__(self):
        means = _frozen_float(self.state_means)
        sds = _frozen_float(self.state_sds)
        rates = _frozen_float(self.dwell_rates)
        P = np.array(self.transition_probs, dtype=float)
        s = means.size
        if P.size == 1 and s == 1:
            P = P.reshape(1, 1)
        if sds.size != s or rates.size != s or P.shape != (s, s):
            raise InputError("inconsistent HMM dimensions")
        if np.any(rates <= 0):
            raise InputError("dwell rates must be positive")
        if s > 1 and (np.any(P < 0) or np.any(np.diag(P) != 0) or not np.allclose(P.sum(axis=1), 1.0)):
            raise InputError("transition matrix must be row-stochastic with zero diagonal")
        P.setflags(write=False)
        for name, value in (("state_means", means), ("state_sds", sds), ("dwell_rates", rates)):
            object.__setattr__(self, name, value)
        object.__setattr__(self, "transition_probs", P)

    @property
    def n_states(self) -> int:
        return int(self.state_means.size)

    def stationary(self) -> np.ndarray:
        """Long-run fraction of time spent in each state."""
        s = self.n_states
        if s == 1:
            return np.ones(1)
        # embedded-chain stationary law, reweighted by mean dwell time
        A = np.vstack([self.transition_probs.T - np.eye(s), np.ones(s)])
        b = np.zeros(s + 1)
        b[-1] = 1.0
        nu = np.linalg.lstsq(A, b, rcond=None)[0]
        pi = nu / self.dwell_rates
        return pi / pi.sum()


PORB_HMM = HmmSpec(
    state_means=[0.0, 0.0, 0.32],
    state_sds=[0.0078, 0.0078, 0.0316],
    dwell_rates=[20.0, 400.0, 7.0],
    transition_probs=[[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [2.0 / 3.0, 1.0 / 3.0, 0.0]],
)


def _sample_times(k: FilterKernel, i) -> np.ndarray:
    return np.asarray(i, dtype=float) / k.sample_rate


def _nearby_changes(sig: PiecewiseSignal, t: np.ndarray, T: float):
    """Index ranges of changes in ``(t - T, t]`` for each time."""
    lo = np.searchsorted(sig.change_times, t - T, side="right")
    hi = np.searchsorted(sig.change_times, t, side="right")
    return lo, hi


def expectation(sig: PiecewiseSignal, k: FilterKernel, i) -> np.ndarray:
    """Mean of the observations at 1-based sample indices ``i``.

    Parameters
    ----------
    sig : PiecewiseSignal
    k : FilterKernel
    i : array_like of int
        Sample indices; sample ``i`` is taken at time ``i / f_s``.
    """
    t = _sample_times(k, i)
    lo, hi = _nearby_changes(sig, t, k.duration)
    out = np.array(sig.levels[hi], dtype=float)
    jumps = np.diff(sig.levels)
    for q in range(int((hi - lo).max(initial=0))):
        idx = lo + q
        mask = idx < hi
        j = np.where(mask, idx, 0)
        term = jumps[j] * (step_response(k, t - sig.change_times[j]) - 1.0)
        out += np.where(mask, term, 0.0)
    return out


def covariance(sig: PiecewiseSignal, k: FilterKernel, i, j_offset) -> np.ndarray:
    """Exact ``Cov(Y_i, Y_{i + j_offset})``.

    Both arguments broadcast. The result vanishes for ``|j_offset| > m``.
    """
    t, j = np.broadcast_arrays(_sample_times(k, i), np.asarray(j_offset, dtype=float))
    lag = j / k.sample_rate
    var = sig.sds**2
    lo, hi = _nearby_changes(sig, t, k.duration)
    stationary = acf(k, np.inf, lag)
    out = var[hi] * stationary
    dvar = np.diff(var)
    for q in range(int((hi - lo).max(initial=0))):
        idx = lo + q
        mask = idx < hi
        jj = np.where(mask, idx, 0)
        term = dvar[jj] * (acf(k, t - sig.change_times[jj], lag) - stationary)
        out = out + np.where(mask, term, 0.0)
    return np.where(np.abs(j) > k.m, 0.0, out)


def _fine_weights(k: FilterKernel, oversampling: int) -> np.ndarray:
    dt = 1.0 / (k.sample_rate * oversampling)
    w = kernel(k, (np.arange(k.m * oversampling) + 0.5) * dt)
    return w / w.sum()


def _decimate(rows_fn, n_rows: int, w: np.ndarray, m: int, ov: int, n: int, chunk: int) -> np.ndarray:
    """Kernel-weighted sums of fine-grid values, decimated to the sample grid.

    ``rows_fn(r0, r1)`` returns fine-grid values for rows ``r0..r1-1`` (each
    row holds ``ov`` consecutive fine cells). Output sample ``i`` (0-based)
    equals ``sum_q w_q z[(i + m) ov - 1 - q]``.
    """
    W = w.reshape(m, ov)[:, ::-1]
    P = np.empty((n_rows, m))
    for r0 in range(0, n_rows, chunk):
        r1 = min(n_rows, r0 + chunk)
        P[r0:r1] = rows_fn(r0, r1).reshape(r1 - r0, ov) @ W.T
    out = np.zeros(n)
    for a in range(m):
        out += P[m - 1 - a : m - 1 - a + n, a]
    return out


def moving_average(coef, xi: np.ndarray, tail: np.ndarray):
    """Apply ``e_t = sum_r coef[r] xi_{t-r}`` to a block of innovations.

    ``tail`` holds the last ``len(coef) - 1`` innovations of the previous
    block; the updated tail is returned with the output.
    """
    coef = np.asarray(coef, dtype=float)
    d = coef.size - 1
    if d == 0:
        return coef[0] * xi, tail
    full = np.concatenate([tail, xi])
    e = sum(coef[r] * full[d - r : d - r + xi.size] for r in range(d + 1))
    return e, full[-d:]


def simulate(
    sig: PiecewiseSignal,
    k: FilterKernel,
    n: int,
    oversampling: int = 100,
    seed=None,
    ma: Sequence[float] | None = None,
    provenance: str | None = None,
) -> Trace:
    """Simulate a filtered recording.

    The mean is exact. Noise is Gaussian on a grid ``oversampling`` times
    finer than the sampling grid, scaled by ``sigma``, convolved with the
    kernel sampled at fine-cell midpoints, decimated, and rescaled so that
    every sample has exactly the model variance.

    Parameters
    ----------
    sig : PiecewiseSignal
    k : FilterKernel
    n : int
        Number of samples.
    oversampling : int
        Fine cells per sampling interval.
    seed : int, SeedSequence or Generator
        Source of randomness; equal seeds give identical traces.
    ma : sequence of float, optional
        Moving-average coefficients applied to the fine-grid noise before
        filtering (coloured noise). ``None`` or ``(1,)`` gives white noise.
    provenance : str, optional
        Free-text note stored in the trace.
    """
    n = int(n)
    ov = int(oversampling)
    if n < 1:
        raise InputError("n must be positive")
    if ov < 1:
        raise InputError("oversampling must be >= 1")
    rng = np.random.default_rng(seed)
    m, fs = k.m, k.sample_rate
    idx = np.arange(1, n + 1)
    mean = expectation(sig, k, idx)
    if not np.any(sig.sds > 0):
        return Trace(mean, fs, provenance or f"simulated seed={seed!r}")

    coef = np.array([1.0] if ma is None else ma, dtype=float)
    while coef.size > 1 and coef[-1] == 0.0:
        coef = coef[:-1]
    d = coef.size - 1
    dt = 1.0 / (fs * ov)
    origin = 1.0 / fs - k.duration
    w = _fine_weights(k, ov)
    n_rows = n - 1 + m
    chunk = max(1, (1 << 21) // ov)

    # first fine cell whose centre lies at or after each change
    bounds = np.ceil((sig.change_times - origin) / dt - 0.5).astype(np.int64)

    def cell_sd(r0, r1, shift=0):
        c0, c1 = r0 * ov - shift, r1 * ov - shift
        cuts = np.clip(bounds, c0, c1)
        first = np.searchsorted(bounds, c0, side="right")
        last = np.searchsorted(bounds, c1, side="right")
        edges = np.concatenate([[c0], cuts[first:last], [c1]])
        return np.repeat(sig.sds[first : last + 1], np.diff(edges))

    state = {"tail": rng.standard_normal(d) if d else np.empty(0)}

    def noise_rows(r0, r1):
        e, state["tail"] = moving_average(coef, rng.standard_normal((r1 - r0) * ov), state["tail"])
        return cell_sd(r0, r1) * e

    noise = _decimate(noise_rows, n_rows, w, m, ov, n, chunk)

    # variance actually produced by the discrete scheme, per sample
    gamma = np.array([np.dot(coef[: coef.size - s], coef[s:]) for s in range(d + 1)])
    disc = np.zeros(n)
    for s in range(-d, d + 1):
        ws = w[: w.size - abs(s)] * w[abs(s) :]
        ws = np.concatenate([ws, np.zeros(abs(s))]) if s >= 0 else np.concatenate([np.zeros(-s), ws])

        def var_rows(r0, r1, s=s):
            return cell_sd(r0, r1) * cell_sd(r0, r1, shift=s)

        disc += gamma[abs(s)] * _decimate(var_rows, n_rows, ws, m, ov, n, chunk)
    exact = covariance(sig, k, idx, 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(disc > 0, np.sqrt(np.maximum(exact, 0.0) / disc), 0.0)
    return Trace(mean + factor * noise, fs, provenance or f"simulated seed={seed!r}")


def hmm_path(spec: HmmSpec, duration: float, seed=None):
    """Sample a state path of the continuous-time chain on ``[0, duration)``.

    Returns
    -------
    states : ndarray of int
        Visited states in order.
    starts : ndarray of float
        Entry time of each visit; the first entry is 0 (the initial state is
        drawn from the stationary law, so the first sojourn is left-censored).
    """
    if not duration > 0:
        raise InputError("duration must be positive")
    rng = np.random.default_rng(seed)
    s = int(rng.choice(spec.n_states, p=spec.stationary()))
    states, starts = [s], [0.0]
    t = rng.exponential(1.0 / spec.dwell_rates[s])
    while t < duration and spec.n_states > 1:
        s = int(rng.choice(spec.n_states, p=spec.transition_probs[s]))
        states.append(s)
        starts.append(t)
        t += rng.exponential(1.0 / spec.dwell_rates[s])
    return np.array(states), np.array(starts)


def simulate_hmm(spec: HmmSpec, duration: float, seed=None) -> PiecewiseSignal:
    """Piecewise-constant signal of a Markov gating path.

    Consecutive visits to states with equal mean are merged; the merged
    segment keeps the noise level of its first visit.
    """
    states, starts = hmm_path(spec, duration, seed)
    means = spec.state_means[states]
    keep = np.concatenate([[True], means[1:] != means[:-1]])
    states, starts = states[keep], starts[keep]
    return PiecewiseSignal(
        change_times=starts[1:],
        levels=spec.state_means[states],
        sds=spec.state_sds[states],
        end_time=duration,
    )


@dataclass(frozen=True)
class VioletNoise:
    """Coloured noise from a moving average on the fine grid.

    The trace is regenerated from ``signal`` with MA-filtered driving noise.
    """

    signal: PiecewiseSignal
    kernel: FilterKernel
    coefficients: tuple = (0.8, -0.6)
    oversampling: int = 100


@dataclass(frozen=True)
class PinkNoise:
    """Additive 1/f noise on top of a trace whose own noise is scaled down."""

    signal: PiecewiseSignal
    kernel: FilterKernel
    sd: float = 0.5 * np.sqrt(6.1e-5)
    background_factor: float = 0.5
    f_lo: float | None = None
    f_hi: float | None = None


def pink_noise(n: int, sample_rate: float, sd: float, rng, f_lo=None, f_hi=None) -> np.ndarray:
    """Spectral synthesis of 1/f noise with exact standard deviation ``sd``.

    Amplitudes are proportional to ``1/sqrt(f)`` between ``f_lo`` (default
    ``f_s / n``) and ``f_hi`` (default ``f_s / 2``); phases are uniform.
    """
    rng = np.random.default_rng(rng)
    f = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    lo = sample_rate / n if f_lo is None else f_lo
    hi = sample_rate / 2 if f_hi is None else f_hi
    band = (f >= lo) & (f <= hi) & (f > 0)
    amp = np.zeros_like(f)
    amp[band] = 1.0 / np.sqrt(f[band])
    phase = rng.uniform(0.0, 2 * np.pi, size=f.size)
    x = np.fft.irfft(amp * np.exp(1j * phase), n=n)
    std = x.std()
    return x * (sd / std) if std > 0 else x


def add_contamination(tr: Trace, kind: str, params, seed=None) -> Trace:
    """Apply one of the two robustness contaminations.

    ``kind="violet"``: resimulate with MA-coloured driving noise
    (``params`` is :class:`VioletNoise`); with the seed used for ``tr`` and
    coefficients ``(1, 0)`` the original trace is reproduced.
    ``kind="pink"``: halve the deviation from the mean and add 1/f noise
    (``params`` is :class:`PinkNoise`).
    """
    if kind == "violet":
        return simulate(params.signal, params.kernel, tr.n, params.oversampling, seed, ma=params.coefficients,
                        provenance=f"{tr.provenance}; violet {tuple(params.coefficients)} seed={seed!r}")
    if kind == "pink":
        mean = expectation(params.signal, params.kernel, np.arange(1, tr.n + 1))
        extra = pink_noise(tr.n, tr.sample_rate, params.sd, seed, params.f_lo, params.f_hi)
        y = mean + params.background_factor * (tr.samples - mean) + extra
        return Trace(y, tr.sample_rate, f"{tr.provenance}; pink sd={params.sd!r} seed={seed!r}")
    raise InputError(f"unknown contamination kind {kind!r}")


class StationaryNoise:
    """Exact Gaussian sampler for homogeneous filtered noise with unit sd.

    The autocovariance of the filtered noise vanishes beyond lag ``m``, so
    circulant embedding of size ``M >= n + m`` has a non-negative spectrum
    and every length-``n`` window of the circulant process has exactly the
    model covariance. Each FFT yields two independent series.
    """

    def __init__(self, k: FilterKernel, n: int):
        from scipy.fft import next_fast_len

        self.n = int(n)
        size = next_fast_len(self.n + k.m + 1, real=False)
        size += size % 2
        row = np.zeros(size)
        row[: k.m + 1] = k.lag_acf
        row[size - k.m :] = k.lag_acf[1:][::-1]
        eig = np.fft.fft(row).real
        self._scale = np.sqrt(np.clip(eig, 0.0, None) / size)
        self._size = size

    def pair(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Two independent realizations of length ``n``."""
        z = rng.standard_normal(self._size) + 1j * rng.standard_normal(self._size)
        x = np.fft.fft(self._scale * z)
        return x.real[: self.n], x.imag[: self.n]

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """``count`` independent realizations as rows of an array."""
        out = np.empty((count, self.n))
        for r in range(0, count, 2):
            a, b = self.pair(rng)
            out[r] = a
            if r + 1 < count:
                out[r + 1] = b
        return out
