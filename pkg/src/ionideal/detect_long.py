"""Multiresolution detection of long events.

A candidate piecewise-constant fit is acceptable when, on every constant
stretch, every dyadic interval passes a local t-type test of its level.
The first ``m`` observations of each interval are dropped so the filter
transient of the preceding change does not bias the test. The estimator
uses the smallest number of changes admitting an acceptable candidate
and, among those, maximizes the Gaussian likelihood with a separate
variance per segment, i.e. minimizes ``sum_k n_k log(ssq_k / n_k)``. It
is computed exactly by dynamic programming over prefix lengths.

Interval convention used internally: 0-based inclusive ``[a, b]``; its
test uses observations ``a + m .. b``. A segment starting at 0-based
sample ``s`` corresponds to the change time ``s / f_s``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy.stats import norm

from .errors import CalibrationError, InputError
from .filter import FilterKernel
from .model import PiecewiseSignal, StationaryNoise, Trace

log = logging.getLogger(__name__)

__all__ = [
    "CriticalValues",
    "Idealization",
    "dyadic_scales",
    "jsmurf_stat",
    "balance_quantiles",
    "calibrate",
    "fit",
    "fit_unpruned",
    "robust_sd",
    "MULTIRESOLUTION",
    "LOCAL_TEST",
]

MULTIRESOLUTION = "multiresolution"
LOCAL_TEST = "local_test"
IQR_FACTOR = 2.0 * norm.ppf(0.75) * np.sqrt(2.0)


@dataclass(frozen=True, eq=False)
class CriticalValues:
    """Per-scale thresholds with their Monte-Carlo provenance.

    Attributes
    ----------
    scales : ndarray of int
        Interval (or window) lengths in samples, strictly increasing.
    q : ndarray
        Threshold per scale.
    alpha : float
        Target family-wise level.
    weights : ndarray
        Level split across scales, sums to one.
    mc_meta : dict
        ``R``, ``n``, ``seed``, ``kernel`` fingerprint, ``statistic`` name and
        the ``achieved`` Monte-Carlo level.
    """

    scales: np.ndarray
    q: np.ndarray
    alpha: float
    weights: np.ndarray
    mc_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=np.int64)
        q = np.asarray(self.q, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if scales.ndim != 1 or q.shape != scales.shape or w.shape != scales.shape:
            raise InputError("scales, q and weights must have equal length")
        if np.any(np.diff(scales) <= 0):
            raise InputError("scales must be strictly increasing")
        if abs(w.sum() - 1.0) > 1e-9:
            raise InputError("weights must sum to one")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "weights", w)

    def threshold(self, scale: int) -> float:
        idx = np.searchsorted(self.scales, scale)
        if idx >= self.scales.size or self.scales[idx] != scale:
            raise KeyError(scale)
        return float(self.q[idx])


@dataclass(frozen=True, eq=False)
class Idealization:
    """Fitted signal plus per-change provenance.

    Attributes
    ----------
    signal : PiecewiseSignal
        Change times, levels and standard deviations.
    origins : tuple of str
        ``"multiresolution"`` or ``"local_test"`` for every change.
    anchors : ndarray
        Sample position (``tau * f_s``) at which each change was detected.
        Deconvolution search grids are built around these positions.
    diagnostics : dict
        Free-form fit information (flags, counts, per-segment sds).
    """

    signal: PiecewiseSignal
    origins: tuple = ()
    anchors: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        K = self.signal.n_changes
        origins = tuple(self.origins) if self.origins else (MULTIRESOLUTION,) * K
        if len(origins) != K:
            raise InputError("one origin per change required")
        if any(o not in (MULTIRESOLUTION, LOCAL_TEST) for o in origins):
            raise InputError(f"unknown origin in {origins}")
        anchors = self.anchors
        if anchors is None:
            anchors = self.signal.change_times * self.diagnostics.get("sample_rate", np.nan)
        anchors = np.asarray(anchors, dtype=float).reshape(-1)
        if anchors.size != K:
            raise InputError("one anchor per change required")
        object.__setattr__(self, "origins", origins)
        object.__setattr__(self, "anchors", anchors)

    @property
    def n_changes(self) -> int:
        return self.signal.n_changes

    def change_samples(self, sample_rate: float) -> np.ndarray:
        """Change positions rounded to the sample grid."""
        return np.rint(self.signal.change_times * sample_rate).astype(np.int64)


def dyadic_scales(n: int, m: int) -> np.ndarray:
    """All lengths ``2**l <= n`` with ``2**l > m + 1``."""
    out = []
    L = 1
    while L <= n:
        if L > m + 1:
            out.append(L)
        L *= 2
    return np.array(out, dtype=np.int64)


def jsmurf_stat(tr: Trace | np.ndarray, i: int, j: int, level: float, m: int) -> float:
    """Local test statistic of ``level`` on the 1-based interval ``[i, j]``.

    Uses observations ``Y_{i+m} .. Y_j``:
    ``T = n' (mean - level)**2 / (2 var)`` with ``n' = j - i + 1 - m`` and the
    unbiased sample variance. A vanishing variance (up to rounding) gives
    ``inf`` unless the mean equals ``level`` up to rounding.
    """
    y = tr.samples if isinstance(tr, Trace) else np.asarray(tr, dtype=float)
    if j - i + 1 <= m + 1:
        raise InputError("interval needs more than m + 1 observations")
    obs = y[i + m - 1 : j]
    mean = obs.mean()
    var = obs.var(ddof=1)
    num = obs.size * (mean - level) ** 2
    # rounding noise of a constant stretch must not count as variance
    tol = (64.0 * np.finfo(float).eps * max(np.abs(obs).max(), abs(level))) ** 2
    if var <= tol:
        return 0.0 if num <= obs.size * tol else np.inf
    return float(num / (2.0 * var))


def robust_sd(y: np.ndarray, m: int) -> float:
    """Difference-based IQR estimate of the noise sd of filtered data.

    Lag-``m`` differences of the filtered noise are uncorrelated with
    variance ``2 s**2`` under the normalized autocorrelation.
    """
    y = np.asarray(y, dtype=float)
    if y.size <= m + 1:
        return float("nan")
    d = y[m:] - y[:-m]
    q75, q25 = np.percentile(d, [75, 25])
    return float((q75 - q25) / IQR_FACTOR)


# --------------------------------------------------------------------------
# calibration


def balance_quantiles(M: np.ndarray, weights: np.ndarray, alpha: float):
    """Per-scale empirical quantiles with a common level multiplier.

    Parameters
    ----------
    M : ndarray, shape (R, S)
        Per-replication maxima for each scale.
    weights : ndarray, shape (S,)
        Level split ``beta``; scale ``s`` uses the ``1 - lam * beta_s`` quantile.
    alpha : float
        Target probability that any scale exceeds its threshold.

    Returns
    -------
    q : ndarray
        Thresholds at the largest ``lam`` whose joint exceedance is ``<= alpha``,
        then lowered by at most one rank per scale while the exceedance stays
        ``<= alpha``.
    achieved : float
        Joint exceedance frequency of ``q`` on ``M``.
    """
    M = np.asarray(M, dtype=float)
    R, S = M.shape
    srt = np.sort(M, axis=0)
    if alpha * R < 1:
        raise CalibrationError(f"alpha={alpha} cannot be resolved with R={R} replications", achieved=0.0, q=srt[-1])
    cols = np.arange(S)

    def ranks(lam):
        p = np.clip(lam * weights, 0.0, 1.0)
        return np.clip(np.ceil((1.0 - p) * R - 1e-9).astype(int), 1, R)

    def level(k):
        return float(np.mean(np.any(M > srt[k - 1, cols], axis=1)))

    lo, hi = 0.0, 1.0 / weights.max()
    if level(ranks(hi)) <= alpha:
        lo = hi
    else:
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if level(ranks(mid)) <= alpha:
                lo = mid
            else:
                hi = mid
    k = ranks(lo)
    # one bisection step moves every scale by a rank at once, which can change
    # the level by up to S/R; lower single scales by one rank, largest weight
    # first, to land within 1/R of alpha
    for s in np.argsort(-weights, kind="stable"):
        if k[s] > 1:
            k[s] -= 1
            if level(k) > alpha:
                k[s] += 1
    achieved = level(k)
    if achieved < alpha - 1.0 / R - 1e-12:
        raise CalibrationError(
            f"level {alpha} not reachable with R={R} replications (achieved {achieved:.4g})",
            achieved=achieved, q=srt[k - 1, cols],
        )
    return srt[k - 1, cols], achieved


def null_maxima_long(y: np.ndarray, scales: np.ndarray, m: int) -> np.ndarray:
    """Max over start positions of the level-0 statistic, per scale."""
    cs = np.concatenate([[0.0], np.cumsum(y)])
    cs2 = np.concatenate([[0.0], np.cumsum(y * y)])
    out = np.empty(scales.size)
    n = y.size
    for s, L in enumerate(scales):
        npr = L - m
        a = np.arange(n - L + 1)
        s1 = cs[a + L] - cs[a + m]
        s2 = cs2[a + L] - cs2[a + m]
        mean = s1 / npr
        var = np.maximum((s2 - npr * mean * mean) / (npr - 1), 1e-300)
        out[s] = np.max(npr * mean * mean / (2.0 * var))
    return out


def calibrate(
    n: int,
    k: FilterKernel,
    alpha: float = 0.01,
    scales=None,
    R: int = 10000,
    seed=0,
    weights=None,
) -> CriticalValues:
    """Monte-Carlo critical values for :func:`fit`.

    Each replication draws standard filtered noise of length ``n`` exactly
    (circulant embedding) and records the maximal statistic at the true
    level 0 for every scale. Replications use one generator seeded by
    ``seed`` so results are reproducible.
    """
    if not 0 < alpha < 1:
        raise InputError("alpha must lie in (0, 1)")
    scales = dyadic_scales(n, k.m) if scales is None else np.asarray(scales, dtype=np.int64)
    if scales.size == 0:
        raise InputError(f"no admissible scale for n={n}, m={k.m}")
    if np.any(scales <= k.m + 1) or np.any(scales > n):
        raise InputError("scales must satisfy m + 1 < L <= n")
    weights = np.full(scales.size, 1.0 / scales.size) if weights is None else np.asarray(weights, float)
    rng = np.random.default_rng(seed)
    gen = StationaryNoise(k, n)
    M = np.empty((R, scales.size))
    for r in range(0, R, 2):
        pair = gen.pair(rng)
        for j, y in enumerate(pair):
            if r + j < R:
                M[r + j] = null_maxima_long(y, scales, k.m)
    q, achieved = balance_quantiles(M, weights, alpha)
    meta = {"R": int(R), "n": int(n), "seed": seed, "kernel": k.fingerprint, "statistic": "long",
            "achieved": achieved}
    log.info("long-scale calibration n=%d R=%d achieved level %.4f", n, R, achieved)
    return CriticalValues(scales, q, float(alpha), weights, meta)


# --------------------------------------------------------------------------
# dynamic program


@nb.njit(cache=True)
def _interval_bounds(S1, S2, a, b, m, q):
    npr = b - a + 1 - m
    s1 = S1[b + 1] - S1[a + m]
    mean = s1 / npr
    var = (S2[b + 1] - S2[a + m] - s1 * mean) / (npr - 1)
    if var < 0.0:
        var = 0.0
    rad = np.sqrt(2.0 * var * q / npr)
    return mean - rad, mean + rad


@nb.njit(cache=True)
def _segment_cost(S1, S2, s, e, lo, hi, floor):
    """Profile Gaussian likelihood cost ``n log(ssq / n)`` of segment ``[s, e]``.

    The level is the mean clamped to the feasible band ``[lo, hi]``.
    """
    cnt = e - s + 1
    t1 = S1[e + 1] - S1[s]
    t2 = S2[e + 1] - S2[s]
    c = t1 / cnt
    if c < lo:
        c = lo
    elif c > hi:
        c = hi
    var = (t2 - 2.0 * c * t1 + cnt * c * c) / cnt
    if var < floor:
        var = floor
    return cnt * np.log(var), c, var


@nb.njit(cache=True)
def _dp_pruned(S1, S2, n, m, scales, qv, tol, floor):
    LOs = np.full(n, -np.inf)
    HIs = np.full(n, np.inf)
    blo = np.empty(n)
    bhi = np.empty(n)
    nseg = np.zeros(n + 1, np.int64)
    cost = np.zeros(n + 1)
    back = np.zeros(n + 1, np.int64)
    lev = np.zeros(n + 1)
    var = np.zeros(n + 1)
    for e in range(n):
        for t in range(scales.size):
            a = e - scales[t] + 1
            if a >= 0:
                lo, hi = _interval_bounds(S1, S2, a, e, m, qv[t])
                if lo > LOs[a]:
                    LOs[a] = lo
                if hi < HIs[a]:
                    HIs[a] = hi
        lo_run = -np.inf
        hi_run = np.inf
        s = e
        while s >= 0:
            if LOs[s] > lo_run:
                lo_run = LOs[s]
            if HIs[s] < hi_run:
                hi_run = HIs[s]
            if lo_run > hi_run + tol:
                break
            blo[s] = lo_run
            bhi[s] = hi_run
            s -= 1
        s_min = s + 1
        target = nseg[s_min]
        p = e + 1
        nseg[p] = target + 1
        best = np.inf
        for s in range(s_min, e + 1):
            if nseg[s] != target:
                break
            c_seg, c, v = _segment_cost(S1, S2, s, e, blo[s], bhi[s], floor)
            tot = cost[s] + c_seg
            if tot < best:
                best = tot
                back[p] = s
                lev[p] = c
                var[p] = v
        cost[p] = best
    return nseg, cost, back, lev, var


def _prepare(y: np.ndarray, m: int):
    shift = float(np.median(y))
    yc = y - shift
    S1 = np.concatenate([[0.0], np.cumsum(yc)])
    S2 = np.concatenate([[0.0], np.cumsum(yc * yc)])
    sd = robust_sd(y, m)
    if not np.isfinite(sd) or sd <= 0:
        sd = float(np.std(y)) if y.size > 1 else 0.0
    scale = float(np.max(np.abs(yc))) if y.size else 0.0
    tol = 1e-9 * max(scale, 1e-300)
    floor = max(1e-6 * sd * sd, 1e-300)
    return shift, S1, S2, tol, floor


def _scales_for(q: CriticalValues, n: int, m: int):
    keep = (q.scales > m + 1) & (q.scales <= n)
    return q.scales[keep].astype(np.int64), q.q[keep].astype(float)


def _backtrack(back, lev, var, n):
    starts, levels, variances = [], [], []
    p = n
    while p > 0:
        s = back[p]
        starts.append(s)
        levels.append(lev[p])
        variances.append(var[p])
        p = s
    return starts[::-1], levels[::-1], variances[::-1]


def _to_idealization(tr: Trace, starts, levels, variances, shift, extra) -> Idealization:
    fs = tr.sample_rate
    levels = np.asarray(levels) + shift
    # merge accidental equal neighbours (possible only with clamped levels)
    keep = np.concatenate([[True], levels[1:] != levels[:-1]])
    starts = np.asarray(starts)[keep]
    levels = levels[keep]
    sds = np.sqrt(np.asarray(variances)[keep])
    tau = starts[1:] / fs
    sig = PiecewiseSignal(tau, levels, sds, tr.n / fs)
    diag = {"sample_rate": fs, "segment_sd": sds.copy(), **extra}
    return Idealization(sig, (MULTIRESOLUTION,) * tau.size, starts[1:].astype(float), diag)


def fit(tr: Trace, k: FilterKernel, q: CriticalValues) -> Idealization:
    """Multiresolution fit with the minimal number of changes.

    Parameters
    ----------
    tr : Trace
    k : FilterKernel
        Supplies ``m``; must match the kernel used for calibration.
    q : CriticalValues
        Thresholds for the dyadic interval lengths.

    Returns
    -------
    Idealization
        All changes carry origin ``"multiresolution"``.
    """
    if q.mc_meta.get("kernel") not in (None, k.fingerprint):
        raise InputError("critical values were calibrated for a different kernel")
    if q.mc_meta.get("n") not in (None, tr.n):
        log.warning("critical values calibrated for n=%s, trace has n=%d", q.mc_meta.get("n"), tr.n)
    y = tr.samples
    shift, S1, S2, tol, floor = _prepare(y, k.m)
    scales, qv = _scales_for(q, tr.n, k.m)
    nseg, cost, back, lev, var = _dp_pruned(S1, S2, tr.n, k.m, scales, qv, tol, floor)
    starts, levels, variances = _backtrack(back, lev, var, tr.n)
    return _to_idealization(tr, starts, levels, variances, shift, {"cost": float(cost[tr.n])})


def fit_unpruned(tr: Trace, k: FilterKernel, q: CriticalValues) -> Idealization:
    """Reference implementation of :func:`fit` with an explicit O(n^2) table.

    Bounds for every segment ``[s, e]`` are assembled by the recursion
    ``B[s, e] = max(B[s + 1, e], B[s, e - 1], own(s, e))``. Intended for
    validation on short traces.
    """
    y = tr.samples
    n, m = tr.n, k.m
    shift, S1, S2, tol, floor = _prepare(y, m)
    scales, qv = _scales_for(q, n, m)
    own_lo = np.full((n, n), -np.inf)
    own_hi = np.full((n, n), np.inf)
    for L, qq in zip(scales, qv):
        for a in range(n - L + 1):
            own_lo[a, a + L - 1], own_hi[a, a + L - 1] = _interval_bounds(S1, S2, a, a + L - 1, m, qq)
    LO = np.full((n, n), -np.inf)
    HI = np.full((n, n), np.inf)
    idx = np.arange(n)
    LO[idx, idx] = own_lo[idx, idx]
    HI[idx, idx] = own_hi[idx, idx]
    for d in range(1, n):
        s = np.arange(n - d)
        e = s + d
        LO[s, e] = np.maximum(np.maximum(LO[s + 1, e], LO[s, e - 1]), own_lo[s, e])
        HI[s, e] = np.minimum(np.minimum(HI[s + 1, e], HI[s, e - 1]), own_hi[s, e])
    nseg = np.zeros(n + 1, dtype=np.int64)
    cost = np.zeros(n + 1)
    back = np.zeros(n + 1, dtype=np.int64)
    lev = np.zeros(n + 1)
    var = np.zeros(n + 1)
    for e in range(n):
        p = e + 1
        feas = [s for s in range(e + 1) if not LO[s, e] > HI[s, e] + tol]
        target = min(nseg[s] for s in feas)
        nseg[p] = target + 1
        best = np.inf
        for s in feas:
            if nseg[s] != target:
                continue
            c_seg, c, v = _segment_cost(S1, S2, s, e, LO[s, e], HI[s, e], floor)
            if cost[s] + c_seg < best:
                best = cost[s] + c_seg
                back[p], lev[p], var[p] = s, c, v
        cost[p] = best
    starts, levels, variances = _backtrack(back, lev, var, n)
    return _to_idealization(tr, starts, levels, variances, shift, {"cost": float(cost[n])})
