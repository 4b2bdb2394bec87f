"""Local tests for short events below the resolution of the long-scale fit.

For every window ``[i, j]`` on the sample grid (``j - i = l``, ``1 <= l <=
l_max``) the current idealization provides a null model with at most one
change near the window. The alternative inserts a short segment of free
level ``c`` and free noise level ``s`` on ``[i, j)``. Level and variance are
estimated in closed form and compared with the null by a Gaussian
log-likelihood type statistic over observations ``i + 1 .. j + m - 1``.
Rejections are grouped into clusters; each cluster yields the set of
non-interacting windows with the largest summed statistic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from math import ceil

import numba as nb
import numpy as np

from .detect_long import (
    LOCAL_TEST,
    MULTIRESOLUTION,
    CriticalValues,
    Idealization,
    balance_quantiles,
    robust_sd,
)
from .errors import InputError, NumericalError
from .filter import FilterKernel
from .localfit import peak_design, variance_coefficients
from .model import PiecewiseSignal, StationaryNoise, Trace

log = logging.getLogger(__name__)

__all__ = [
    "LocalHypothesis",
    "ShortEvent",
    "search_range",
    "segment_observations",
    "refit_long_segments",
    "build_hypothesis",
    "estimate_c",
    "estimate_s2",
    "local_stat",
    "lr_stat_homogeneous",
    "calibrate_short",
    "scan",
    "insert_events",
    "VARIANCE_FLOOR",
]

VARIANCE_FLOOR = 1e-6
_TINY = 1e-300


@dataclass(frozen=True)
class LocalHypothesis:
    """Null model around the window ``[i, j]`` (sample units).

    ``tau`` is the sample position of the single change within the extended
    window, or ``None``. ``c_L, s_L`` describe the signal left of that
    change, ``c_R, s_R`` right of it; without a change both sides agree.
    """

    i: int
    j: int
    tau: int | None
    c_L: float
    c_R: float
    s_L: float
    s_R: float
    replaced: int | None = None

    def __post_init__(self):
        if self.j <= self.i:
            raise InputError("window needs j > i")
        if self.s_L < 0 or self.s_R < 0:
            raise InputError("standard deviations must be non-negative")


@dataclass(frozen=True)
class ShortEvent:
    """A detected short event on the sample grid.

    Attributes
    ----------
    start, end : int
        Window ``[start, end]`` in samples; ``tau_L = start / f_s``.
    statistic, threshold : float
    level : float
        Provisional level estimate ``c_hat``.
    replaced : int or None
        Index (in the tested idealization) of the change the event replaces.
    cluster : int
    """

    start: int
    end: int
    statistic: float
    threshold: float
    level: float
    replaced: int | None
    cluster: int

    @property
    def length(self) -> int:
        return self.end - self.start


# --------------------------------------------------------------------------
# idealization bookkeeping shared with deconvolution


def search_range(anchor: float, origin: str, m: int) -> tuple[float, float]:
    """Deconvolution search range (samples) for a change detected at ``anchor``.

    Long-scale changes lag the true change, so their range extends ``m``
    samples to the left only; local-test changes get a symmetric range.
    """
    if origin == MULTIRESOLUTION:
        return anchor - m, anchor
    half = ceil(m / 2)
    return anchor - half, anchor + half


def segment_observations(lo: np.ndarray, hi: np.ndarray, n: int, m: int):
    """1-based observation ranges unaffected by any admissible change position.

    Parameters
    ----------
    lo, hi : ndarray
        Search ranges of the changes (samples).
    n, m : int

    Returns
    -------
    first, last : ndarray of int
        Segment ``k`` may use observations ``first[k] .. last[k]`` (empty if
        ``first > last``).
    """
    first = np.concatenate([[1], np.ceil(np.asarray(hi) + m).astype(np.int64)])
    last = np.concatenate([np.floor(np.asarray(lo)).astype(np.int64), [n]])
    return np.maximum(first, 1), np.minimum(last, n)


def _rebuild(positions, levels, sds, origins, anchors, fs, end_time, diagnostics) -> Idealization:
    positions = np.asarray(positions, dtype=float)
    levels = np.asarray(levels, dtype=float)
    sds = np.asarray(sds, dtype=float)
    keep = np.nonzero(levels[1:] != levels[:-1])[0]
    if keep.size != positions.size:
        seg = np.concatenate([[0], keep + 1])
        positions, levels, sds = positions[keep], levels[seg], sds[seg]
        origins = tuple(origins[q] for q in keep)
        anchors = np.asarray(anchors)[keep]
    sig = PiecewiseSignal(positions / fs, levels, sds, end_time)
    diagnostics = {**diagnostics, "sample_rate": fs}
    return Idealization(sig, origins, anchors, diagnostics)


def refit_long_segments(
    tr: Trace,
    ideal: Idealization,
    k: FilterKernel,
    long_segment_min: int = 25,
    gamma2: float = 1.0,
) -> Idealization:
    """Robust re-estimation of the long-scale fit before local testing.

    Changes flanked by two long segments are relocated on the sample grid
    by the deconvolution search. Levels are medians and noise levels are
    difference-based IQR estimates, both over the observations of each
    segment that no admissible change position can affect. Segments with
    fewer than ``m + 2`` such observations inherit the sd of the nearest
    segment that has one (recorded in ``diagnostics["sd_inherited"]``).
    """
    from .deconv import search_single_change

    fs, m, n, y = tr.sample_rate, k.m, tr.n, tr.samples
    pos = ideal.signal.change_times * fs
    ranges = [search_range(a, o, m) for a, o in zip(ideal.anchors, ideal.origins)]
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    first, last = segment_observations(lo, hi, n, m)
    K = pos.size
    bounds = np.concatenate([[0.0], pos, [float(n)]])
    seg_len = np.diff(bounds)
    levels = np.empty(K + 1)
    sds = np.full(K + 1, np.nan)
    for s in range(K + 1):
        obs = y[first[s] - 1 : last[s]] if first[s] <= last[s] else np.empty(0)
        if obs.size == 0:
            a = int(np.ceil(bounds[s])) + m
            b = int(np.floor(bounds[s + 1]))
            obs = y[a - 1 : b] if a <= b else y[max(int(bounds[s]), 0) : max(int(bounds[s + 1]), 1)]
        levels[s] = np.median(obs)
        if obs.size >= m + 2:
            sds[s] = robust_sd(obs, m)
    inherited = np.nonzero(np.isnan(sds))[0]
    have = np.nonzero(~np.isnan(sds))[0]
    if have.size == 0:
        glob = robust_sd(y, m)
        sds[:] = glob if np.isfinite(glob) else 0.0
    else:
        for s in inherited:
            sds[s] = sds[have[np.argmin(np.abs(have - s) * 2 + (have > s))]]

    new_pos = pos.copy()
    relocated = []
    for c in range(K):
        if seg_len[c] >= long_segment_min and seg_len[c + 1] >= long_segment_min:
            left = 0.5 * (bounds[c] + bounds[c + 1]) if c > 0 else -np.inf
            right = 0.5 * (bounds[c + 1] + bounds[c + 2]) if c + 1 < K else np.inf
            a = max(np.ceil(lo[c]), np.ceil(left), 1.0)
            b = min(np.floor(hi[c]), np.floor(right), n - 1.0)
            if a > b:
                continue
            res = search_single_change(y, k, a, b, levels[c], levels[c + 1], gamma2, refinements=0)
            new_pos[c] = res.position
            relocated.append(c)
    # relocation never moves a change past a neighbour's midpoint, so order is kept
    diag = {"sd_inherited": [int(s) for s in inherited], "relocated": relocated}
    return _rebuild(new_pos, levels, sds, ideal.origins, ideal.anchors, fs, ideal.signal.end_time, diag)


# --------------------------------------------------------------------------
# hypothesis and closed-form estimators (reference implementation)


def build_hypothesis(ideal: Idealization, i: int, j: int, m: int, sample_rate: float | None = None):
    """Null model for window ``[i, j]`` or ``None`` when it must be skipped.

    Changes are counted in the extended window ``[i - m + 1, j + m - 1]``.
    """
    fs = sample_rate or ideal.diagnostics.get("sample_rate")
    if fs is None:
        raise InputError("sample rate unknown")
    pos = np.rint(ideal.signal.change_times * fs).astype(np.int64)
    a = int(np.searchsorted(pos, i - m + 1, side="left"))
    b = int(np.searchsorted(pos, j + m - 1, side="right"))
    lev, sd = ideal.signal.levels, ideal.signal.sds
    if b - a >= 2:
        return None
    if b - a == 1:
        return LocalHypothesis(i, j, int(pos[a]), lev[a], lev[a + 1], sd[a], sd[a + 1], replaced=a)
    return LocalHypothesis(i, j, None, lev[a], lev[a], sd[a], sd[a])


def _window(tr: Trace, hyp: LocalHypothesis, k: FilterKernel):
    p = np.arange(hyp.i + 1, hyp.j + k.m)
    if p[-1] > tr.n:
        raise InputError("window extends beyond the trace")
    fs = k.sample_rate
    dL = (p - hyp.i) / fs
    dR = (p - hyp.j) / fs
    return p, tr.samples[p - 1], dL, dR


def estimate_c(tr: Trace, hyp: LocalHypothesis, k: FilterKernel) -> float:
    """Least-squares level of the inserted segment."""
    _, yw, dL, dR = _window(tr, hyp, k)
    d = peak_design(k, dL, dR)
    v = d.v
    vv = float(v @ v)
    if vv <= 0:
        raise NumericalError("degenerate window: sum of v^2 vanishes")
    return float(v @ (yw - d.c_lr(hyp.c_L, hyp.c_R)) / vv)


def estimate_s2(tr: Trace, hyp: LocalHypothesis, k: FilterKernel, c_hat: float, truncate: bool = True) -> float:
    """Moment estimator of the inserted segment's variance.

    ``truncate=False`` returns the unbiased value before clipping at zero.
    """
    _, yw, dL, dR = _window(tr, hyp, k)
    d, A, BL, BR = variance_coefficients(k, dL, dR)
    if A <= 0:
        raise NumericalError("window too short: A <= 0")
    r = yw - d.v * c_hat - d.c_lr(hyp.c_L, hyp.c_R)
    s2 = (float(d.w0 @ (r * r)) - hyp.s_L**2 * BL - hyp.s_R**2 * BR) / A
    return max(s2, 0.0) if truncate else s2


def _null_moments(hyp: LocalHypothesis, k: FilterKernel, p: np.ndarray):
    if hyp.tau is None:
        return np.full(p.size, hyp.c_L), np.full(p.size, hyp.s_L**2)
    d = peak_design(k, (p - hyp.tau) / k.sample_rate, np.full(p.size, -1.0))
    c0 = hyp.c_L + (hyp.c_R - hyp.c_L) * d.FL
    s0 = hyp.s_L**2 * (1.0 - d.AL0) + hyp.s_R**2 * d.AL0
    return c0, s0


def local_stat(tr: Trace, hyp: LocalHypothesis, k: FilterKernel, eps: float = VARIANCE_FLOOR) -> float:
    """Log-likelihood type statistic of the inserted segment against the null."""
    p, yw, dL, dR = _window(tr, hyp, k)
    d = peak_design(k, dL, dR)
    c_hat = estimate_c(tr, hyp, k)
    s2 = estimate_s2(tr, hyp, k, c_hat)
    c1 = d.v * c_hat + d.c_lr(hyp.c_L, hyp.c_R)
    s1 = d.w0 * s2 + d.s2_lr(hyp.s_L, hyp.s_R)
    c0, s0 = _null_moments(hyp, k, p)
    s0 = np.maximum(s0, _TINY)
    s1 = np.maximum(s1, eps * s0)
    return float(np.sum(np.log(s0 / s1) + (yw - c0) ** 2 / s0 - (yw - c1) ** 2 / s1))


def lr_stat_homogeneous(tr: Trace, hyp: LocalHypothesis, k: FilterKernel, sigma0_2: float, gamma2: float) -> float:
    """Mahalanobis likelihood-ratio statistic under homogeneous noise.

    The covariance is ``sigma0_2 * R + gamma2 * I`` with ``R`` the stationary
    correlation of the filtered noise; the level ``c`` of the inserted
    segment is profiled out by generalized least squares.
    """
    p, yw, dL, dR = _window(tr, hyp, k)
    d = peak_design(k, dL, dR)
    size = p.size
    lag = np.abs(np.arange(size)[None, :] - np.arange(size)[:, None])
    acf_lags = np.concatenate([k.lag_acf, np.zeros(max(0, size - k.lag_acf.size))])
    S = sigma0_2 * acf_lags[lag] + gamma2 * np.eye(size)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("regularized covariance is singular") from exc
    c0, _ = _null_moments(hyp, k, p)
    z0 = np.linalg.solve(L, yw - c0)
    zl = np.linalg.solve(L, yw - d.c_lr(hyp.c_L, hyp.c_R))
    zv = np.linalg.solve(L, d.v)
    return float(z0 @ z0 - zl @ zl + (zv @ zl) ** 2 / (zv @ zv))


# --------------------------------------------------------------------------
# tabulated fast path


class _Tables:
    """Per-window-length coefficients for windows on the sample grid."""

    def __init__(self, k: FilterKernel, l_max: int, gamma2_rel: float = 1.0):
        m, fs = k.m, k.sample_rate
        width = l_max + m - 1
        shape = (l_max + 1, width)
        self.FL, self.FR, self.AL0, self.AR0 = (np.zeros(shape) for _ in range(4))
        self.A, self.BL, self.BR, self.sumv2, self.sumw0v2 = (np.zeros(l_max + 1) for _ in range(5))
        self.band = np.zeros((l_max + 1, width, m))
        self.zv = np.zeros(shape)
        self.zvv = np.zeros(l_max + 1)
        for l in range(1, l_max + 1):
            size = l + m - 1
            o = np.arange(size)
            dL = (o + 1) / fs
            dR = (o + 1 - l) / fs
            d, A, BL, BR = variance_coefficients(k, dL, dR)
            if A <= 0:
                raise NumericalError(f"A <= 0 for window length {l}")
            self.FL[l, :size], self.FR[l, :size] = d.FL, d.FR
            self.AL0[l, :size], self.AR0[l, :size] = d.AL0, d.AR0
            self.A[l], self.BL[l], self.BR[l] = A, BL, BR
            self.sumv2[l] = d.v @ d.v
            self.sumw0v2[l] = d.w0 @ (d.v * d.v)
            lag = np.abs(o[None, :] - o[:, None])
            acf_lags = np.concatenate([k.lag_acf, np.zeros(max(0, size - k.lag_acf.size))])
            Lc = np.linalg.cholesky(acf_lags[lag] + gamma2_rel * np.eye(size))
            for b in range(min(m, size)):
                self.band[l, b:size, b] = np.diagonal(Lc, -b)
            zv = np.linalg.solve(Lc, d.v)
            self.zv[l, :size] = zv
            self.zvv[l] = zv @ zv
        self.Fint = np.array(k.step_table)
        self.Aint = np.array(k.acf_table[:, m])
        self.m = m
        self.l_max = l_max


_TABLE_CACHE: dict = {}


def _tables(k: FilterKernel, l_max: int, gamma2_rel: float = 1.0) -> _Tables:
    key = (k.fingerprint, int(l_max), float(gamma2_rel))
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = _Tables(k, l_max, gamma2_rel)
    return _TABLE_CACHE[key]


@nb.njit(cache=True, inline="always")
def _null_at(o, d, has, cL, cR, sL2, sR2, Fint, Aint, m):
    if not has:
        return cL, sL2
    jj = o + 1 - d
    if jj < 0:
        jj = 0
    elif jj > m:
        jj = m
    F0 = Fint[jj]
    A0 = Aint[jj]
    return cL + (cR - cL) * F0, sL2 * (1.0 - A0) + sR2 * A0


@nb.njit(cache=True)
def _het_stat(y, i, l, m, cL, cR, sL2, sR2, d, has, FL, FR, AL0, AR0, A, BL, BR, sumv2, sumw0v2,
              Fint, Aint, eps):
    size = l + m - 1
    sve = 0.0
    sw0e2 = 0.0
    sw0ve = 0.0
    for o in range(size):
        fl = FL[l, o]
        fr = FR[l, o]
        e = y[i + o] - (cL * (1.0 - fl) + cR * fr)
        v = fl - fr
        w = AL0[l, o] - AR0[l, o]
        sve += v * e
        sw0e2 += w * e * e
        sw0ve += w * v * e
    ch = sve / sumv2[l]
    Q = sw0e2 - 2.0 * ch * sw0ve + ch * ch * sumw0v2[l]
    s2 = (Q - sL2 * BL[l] - sR2 * BR[l]) / A[l]
    if s2 < 0.0:
        s2 = 0.0
    T = 0.0
    prod = 1.0
    cnt = 0
    for o in range(size):
        fl = FL[l, o]
        fr = FR[l, o]
        al = AL0[l, o]
        ar = AR0[l, o]
        c1 = (fl - fr) * ch + cL * (1.0 - fl) + cR * fr
        s1 = (al - ar) * s2 + sL2 * (1.0 - al) + sR2 * ar
        c0, s0 = _null_at(o, d, has, cL, cR, sL2, sR2, Fint, Aint, m)
        if s0 < 1e-300:
            s0 = 1e-300
        if s1 < eps * s0:
            s1 = eps * s0
        yy = y[i + o]
        T += (yy - c0) * (yy - c0) / s0 - (yy - c1) * (yy - c1) / s1
        prod *= s0 / s1
        cnt += 1
        if cnt == 8:
            T += np.log(prod)
            prod = 1.0
            cnt = 0
    T += np.log(prod)
    return T, ch


@nb.njit(cache=True)
def _hom_stat(y, i, l, m, cL, cR, d, has, FL, FR, band, zv, zvv, Fint, Aint, inv_s2):
    size = l + m - 1
    z0 = np.empty(size)
    zl = np.empty(size)
    q0 = 0.0
    ql = 0.0
    vz = 0.0
    for o in range(size):
        yy = y[i + o]
        c0, _ = _null_at(o, d, has, cL, cR, 0.0, 0.0, Fint, Aint, m)
        a0 = yy - c0
        al = yy - (cL * (1.0 - FL[l, o]) + cR * FR[l, o])
        top = o if o < m - 1 else m - 1
        for b in range(1, top + 1):
            a0 -= band[l, o, b] * z0[o - b]
            al -= band[l, o, b] * zl[o - b]
        a0 /= band[l, o, 0]
        al /= band[l, o, 0]
        z0[o] = a0
        zl[o] = al
        q0 += a0 * a0
        ql += al * al
        vz += zv[l, o] * al
    return (q0 - ql + vz * vz / zvv[l]) * inv_s2, vz / zvv[l]


@nb.njit(cache=True)
def _scan_block(y, i0, i1, l_max, m, cpos, clev, csd2, homog, inv_s2, FL, FR, AL0, AR0, A, BL, BR,
                sumv2, sumw0v2, band, zv, zvv, Fint, Aint, eps, out_T, out_c, out_rep):
    n = y.size
    for i in range(i0, i1):
        for l in range(1, l_max + 1):
            r = i - i0
            out_T[r, l - 1] = np.nan
            if i + l + m - 2 >= n:
                continue
            a = np.searchsorted(cpos, i - m + 1)
            b = np.searchsorted(cpos, i + l + m - 1, side="right")
            if b - a >= 2:
                continue
            if b - a == 1:
                cL = clev[a]
                cR = clev[a + 1]
                sL2 = csd2[a]
                sR2 = csd2[a + 1]
                d = cpos[a] - i
                has = True
                out_rep[r, l - 1] = a
            else:
                cL = clev[a]
                cR = cL
                sL2 = csd2[a]
                sR2 = sL2
                d = 0
                has = False
                out_rep[r, l - 1] = -1
            if homog:
                T, ch = _hom_stat(y, i, l, m, cL, cR, d, has, FL, FR, band, zv, zvv, Fint, Aint, inv_s2)
            else:
                T, ch = _het_stat(y, i, l, m, cL, cR, sL2, sR2, d, has, FL, FR, AL0, AR0, A, BL, BR,
                                  sumv2, sumw0v2, Fint, Aint, eps)
            out_T[r, l - 1] = T
            out_c[r, l - 1] = ch


@nb.njit(cache=True, fastmath=True)
def _null_maxima_het(y, l_max, m, FL, FR, AL0, AR0, A, BL, BR, sumv2, sumw0v2, eps):
    # c_L = c_R = 0, s_L = s_R = 1 and no change: the null terms reduce to y^2
    n = y.size
    out = np.full(l_max, -np.inf)
    for l in range(1, l_max + 1):
        size = l + m - 1
        v = FL[l, :size] - FR[l, :size]
        w = AL0[l, :size] - AR0[l, :size]
        wv = w * v
        base = 1.0 - AL0[l, :size] + AR0[l, :size]
        inv_a = 1.0 / A[l]
        b = BL[l] + BR[l]
        inv_v2 = 1.0 / sumv2[l]
        wv2 = sumw0v2[l]
        best = -np.inf
        for i in range(0, n - size + 1):
            sve = 0.0
            sw0e2 = 0.0
            sw0ve = 0.0
            q0 = 0.0
            for o in range(size):
                e = y[i + o]
                sve += v[o] * e
                sw0e2 += w[o] * e * e
                sw0ve += wv[o] * e
                q0 += e * e
            ch = sve * inv_v2
            s2 = (sw0e2 - 2.0 * ch * sw0ve + ch * ch * wv2 - b) * inv_a
            if s2 < 0.0:
                s2 = 0.0
            T = q0
            prod = 1.0
            for o in range(size):
                s1 = w[o] * s2 + base[o]
                if s1 < eps:
                    s1 = eps
                r = y[i + o] - v[o] * ch
                T -= r * r / s1
                prod *= s1
                if (o & 7) == 7:
                    T -= np.log(prod)
                    prod = 1.0
            T -= np.log(prod)
            if T > best:
                best = T
        out[l - 1] = best
    return out


@nb.njit(cache=True)
def _null_maxima_hom(y, l_max, m, FL, FR, band, zv, zvv, Fint, Aint):
    n = y.size
    out = np.full(l_max, -np.inf)
    for l in range(1, l_max + 1):
        best = -np.inf
        for i in range(0, n - l - m + 2):
            T, _ = _hom_stat(y, i, l, m, 0.0, 0.0, 0, False, FL, FR, band, zv, zvv, Fint, Aint, 1.0)
            if T > best:
                best = T
        out[l - 1] = best
    return out


def _table_args(t: _Tables):
    return (t.FL, t.FR, t.AL0, t.AR0, t.A, t.BL, t.BR, t.sumv2, t.sumw0v2, t.band, t.zv, t.zvv, t.Fint, t.Aint)


def null_maxima_short(y: np.ndarray, k: FilterKernel, l_max: int, homogeneous: bool = False,
                      gamma2_rel: float = 1.0, eps: float = VARIANCE_FLOOR) -> np.ndarray:
    """Per-length maxima of the local statistic on standard null noise ``y``."""
    t = _tables(k, l_max, gamma2_rel)
    y = np.ascontiguousarray(y, dtype=float)
    if homogeneous:
        return _null_maxima_hom(y, l_max, k.m, t.FL, t.FR, t.band, t.zv, t.zvv, t.Fint, t.Aint)
    return _null_maxima_het(y, l_max, k.m, t.FL, t.FR, t.AL0, t.AR0, t.A, t.BL, t.BR, t.sumv2, t.sumw0v2, eps)


def calibrate_short(
    n: int,
    k: FilterKernel,
    alpha2: float = 0.04,
    l_max: int = 65,
    R: int = 1000,
    seed=0,
    homogeneous: bool = False,
    gamma2_rel: float = 1.0,
) -> CriticalValues:
    """Monte-Carlo critical values for the local tests.

    The null is standard filtered noise with known flanking parameters
    (``c_L = c_R = 0``, ``s_L = s_R = 1``); all window positions of a trace
    with ``n`` samples are tested. Weights are uniform over lengths.
    """
    if not 0 < alpha2 < 1:
        raise InputError("alpha2 must lie in (0, 1)")
    if l_max < 1 or n < l_max + k.m:
        raise InputError("need l_max >= 1 and n >= l_max + m")
    rng = np.random.default_rng(seed)
    gen = StationaryNoise(k, n)
    M = np.empty((R, l_max))
    for r in range(0, R, 2):
        for j, y in enumerate(gen.pair(rng)):
            if r + j < R:
                M[r + j] = null_maxima_short(y, k, l_max, homogeneous, gamma2_rel)
    weights = np.full(l_max, 1.0 / l_max)
    q, achieved = balance_quantiles(M, weights, alpha2)
    meta = {"R": int(R), "n": int(n), "seed": seed, "kernel": k.fingerprint,
            "statistic": "short_homogeneous" if homogeneous else "short", "gamma2_rel": float(gamma2_rel),
            "achieved": achieved}
    log.info("short-window calibration n=%d R=%d achieved level %.4f", n, R, achieved)
    return CriticalValues(np.arange(1, l_max + 1), q, float(alpha2), weights, meta)


def scan(
    tr: Trace,
    ideal: Idealization,
    k: FilterKernel,
    q_short: CriticalValues,
    homogeneous: bool = False,
    sigma0_2: float | None = None,
    eps: float = VARIANCE_FLOOR,
    block: int = 16384,
) -> list[ShortEvent]:
    """Test all windows and return the detected short events.

    Two rejected windows belong to the same cluster when the union of
    rejected windows covers every sample position between them. The window
    with the largest statistic of a cluster is its event, unless a set of
    non-interacting rejections of the cluster (disjoint spans
    ``[i, j + m - 1]``, so no window holds another's changes in its extended
    range) has a larger summed statistic; then each window of that set is an
    event. Long windows that cover a whole event otherwise chain nearby
    events into one cluster, and a window spanning two events can outscore
    either of them alone.

    Parameters
    ----------
    tr : Trace
    ideal : Idealization
        Refitted idealization providing the null models.
    k : FilterKernel
    q_short : CriticalValues
        Thresholds for window lengths ``1..l_max``.
    homogeneous : bool
        Use the Mahalanobis likelihood-ratio statistic instead.
    sigma0_2 : float, optional
        Global noise variance for the homogeneous statistic; estimated by
        the difference-based IQR estimator when omitted.
    """
    fs, m, y = tr.sample_rate, k.m, np.ascontiguousarray(tr.samples)
    l_max = int(q_short.scales.max())
    if not np.array_equal(q_short.scales, np.arange(1, l_max + 1)):
        raise InputError("short critical values must cover lengths 1..l_max")
    gamma2_rel = float(q_short.mc_meta.get("gamma2_rel", 1.0))
    t = _tables(k, l_max, gamma2_rel)
    if homogeneous and sigma0_2 is None:
        sigma0_2 = robust_sd(y, m) ** 2
    inv_s2 = 1.0 / sigma0_2 if homogeneous else 1.0
    cpos = np.rint(ideal.signal.change_times * fs).astype(np.int64)
    clev = np.ascontiguousarray(ideal.signal.levels)
    csd2 = np.ascontiguousarray(ideal.signal.sds**2)
    qv = q_short.q
    hits = []
    n_pos = max(tr.n - m + 1, 0)
    for i0 in range(0, n_pos, block):
        i1 = min(n_pos, i0 + block)
        T = np.empty((i1 - i0, l_max))
        C = np.zeros((i1 - i0, l_max))
        rep = np.full((i1 - i0, l_max), -1, dtype=np.int64)
        _scan_block(y, i0, i1, l_max, m, cpos, clev, csd2, homogeneous, inv_s2, *_table_args(t), eps, T, C, rep)
        with np.errstate(invalid="ignore"):
            r, c = np.nonzero(T > qv[None, :])
        for rr, cc in zip(r, c):
            if i0 + rr == 0:
                continue  # tau_L = 0 is the record start, not a change
            hits.append((i0 + rr, cc + 1, T[rr, cc], C[rr, cc], rep[rr, cc]))
    return _cluster(hits, qv, m)


def _best_set(group, m: int) -> list:
    """Non-interacting rejections of one cluster with the largest summed statistic.

    A window ``[i, j]`` is tested on observations ``i + 1 .. j + m - 1``, so
    two windows whose spans ``[i, j + m - 1]`` are disjoint neither contain
    each other's changes in their extended ranges nor share observations;
    their statistics then add to the statistic of the joint alternative.
    Weighted interval scheduling on these spans; ties keep fewer events.
    """
    hs = sorted(group, key=lambda h: (h[0] + h[1] + m - 1, h[0]))
    ends = np.array([h[0] + h[1] + m - 1 for h in hs])
    val = np.zeros(len(hs) + 1)
    take = np.zeros(len(hs), dtype=bool)
    prev = np.searchsorted(ends, [h[0] for h in hs], side="left")
    for t, h in enumerate(hs):
        with_t = h[2] + val[prev[t]]
        take[t] = with_t > val[t]
        val[t + 1] = with_t if take[t] else val[t]
    out = []
    t = len(hs) - 1
    while t >= 0:
        if take[t]:
            out.append(hs[t])
            t = prev[t] - 1
        else:
            t -= 1
    return out[::-1]


def _cluster(hits, qv, m: int) -> list[ShortEvent]:
    if not hits:
        return []
    hits = sorted(hits, key=lambda h: (h[0], h[1]))
    groups, cur, reach = [], [], -np.inf
    for h in hits:
        if cur and h[0] > reach + 1:
            groups.append(cur)
            cur = []
            reach = -np.inf
        cur.append(h)
        reach = max(reach, h[0] + h[1])
    groups.append(cur)
    events = []
    for g_no, group in enumerate(groups):
        for best in _best_set(group, m):
            rep = int(best[4]) if best[4] >= 0 else None
            events.append(ShortEvent(int(best[0]), int(best[0] + best[1]), float(best[2]), float(qv[best[1] - 1]),
                                     float(best[3]), rep, g_no))
    return events


def insert_events(ideal: Idealization, events: list[ShortEvent], sample_rate: float) -> Idealization:
    """Add detected short events to an idealization.

    Each event contributes changes at its window ends with origin
    ``"local_test"`` and removes the change it replaces. When two events
    claim the same change, only the one with the larger statistic is kept.
    """
    fs = sample_rate
    sig = ideal.signal
    pos = sig.change_times * fs
    claimed: dict[int, ShortEvent] = {}
    accepted = []
    for ev in sorted(events, key=lambda e: -e.statistic):
        if ev.replaced is not None:
            if ev.replaced in claimed:
                log.warning("event at %d dropped: change %d already replaced", ev.start, ev.replaced)
                continue
            claimed[ev.replaced] = ev
        accepted.append(ev)
    # breakpoints: (position, origin, anchor, level after, sd after)
    items = []
    for c in range(pos.size):
        if c not in claimed:
            items.append((pos[c], ideal.origins[c], ideal.anchors[c], sig.levels[c + 1], sig.sds[c + 1]))
    for ev in accepted:
        if ev.replaced is not None:
            right_level = sig.levels[ev.replaced + 1]
            left_sd, right_sd = sig.sds[ev.replaced], sig.sds[ev.replaced + 1]
        else:
            seg = int(np.searchsorted(pos, ev.start, side="right"))
            right_level = sig.levels[seg]
            left_sd = right_sd = sig.sds[seg]
        items.append((float(ev.start), LOCAL_TEST, float(ev.start), ev.level, 0.5 * (left_sd + right_sd)))
        items.append((float(ev.end), LOCAL_TEST, float(ev.end), right_level, right_sd))
    items.sort(key=lambda it: it[0])
    positions = np.array([it[0] for it in items], dtype=float)
    if np.any(np.diff(positions) <= 0):
        raise NumericalError("inserted events collide with existing changes")
    levels = np.concatenate([[sig.levels[0]], [it[3] for it in items]])
    sds = np.concatenate([[sig.sds[0]], [it[4] for it in items]])
    origins = tuple(it[1] for it in items)
    anchors = np.array([it[2] for it in items], dtype=float)
    diag = {**ideal.diagnostics, "events": len(accepted)}
    return _rebuild(positions, levels, sds, origins, anchors, fs, sig.end_time, diag)
