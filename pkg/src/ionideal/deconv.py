"""Sub-sample location and level estimation by local deconvolution.

Changes are refined one group at a time. A group is a run of changes
separated only by short segments; its neighbourhood is fitted with the
convolved candidate signal under the homogeneous correlation structure of
the filtered noise, regularized by ``gamma2`` on the diagonal. Flanking
long-segment levels are held fixed, levels of short segments are profiled
out by generalized least squares, and change locations are found by grid
search on successively finer grids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import ceil

import numpy as np

from .detect_long import LOCAL_TEST, MULTIRESOLUTION, Idealization, robust_sd
from .detect_short import ShortEvent, _rebuild, insert_events, search_range, segment_observations
from .errors import InputError, NumericalError
from .filter import FilterKernel, step_response
from .localfit import WhitenedWindow, variance_coefficients
from .model import PiecewiseSignal, Trace

log = logging.getLogger(__name__)

__all__ = ["DeconvConfig", "SearchResult", "search_single_change", "search_peak", "deconvolve", "idealize_variance"]


_RULES = {"left": MULTIRESOLUTION, "symmetric": LOCAL_TEST}


@dataclass(frozen=True)
class DeconvConfig:
    """Settings of the local deconvolution.

    Attributes
    ----------
    gamma2 : float
        Regularization added to the diagonal of the noise correlation matrix.
    long_segment_min : int
        Segments with at least this many samples count as long.
    refinements : int
        Number of refinement rounds after the sample-grid search.
    refinement_factor : int
        Spacing reduction per round.
    grids : dict
        Origin name to search-range rule: ``"left"`` searches the ``m``
        samples before the anchor, ``"symmetric"`` ``ceil(m/2)`` samples on
        either side.
    """

    gamma2: float = 1.0
    long_segment_min: int = 25
    refinements: int = 2
    refinement_factor: int = 10
    grids: dict = field(default_factory=lambda: {MULTIRESOLUTION: "left", LOCAL_TEST: "symmetric"})

    def __post_init__(self):
        if not self.gamma2 > 0:
            raise InputError("gamma2 must be positive")
        if self.refinements < 0 or self.refinement_factor < 2:
            raise InputError("refinements >= 0 and refinement_factor >= 2 required")
        bad = {o: r for o, r in self.grids.items() if r not in _RULES}
        if bad:
            raise InputError(f"unknown grid rule(s) {bad}; choose from {sorted(_RULES)}")

    def validate(self, k: FilterKernel) -> None:
        if self.long_segment_min < k.m + 2:
            raise InputError(f"long_segment_min must be at least m + 2 = {k.m + 2}")


@dataclass
class SearchResult:
    """Outcome of a grid search; positions in samples."""

    positions: np.ndarray
    levels: np.ndarray
    objective: float
    history: list

    @property
    def position(self) -> float:
        return float(self.positions[0])


def _window_for(lo: float, hi: float, m: int, n: int) -> tuple[int, int]:
    first = max(int(np.floor(lo)), 1)
    last = min(int(np.ceil(hi)) + m, n)
    if first > last:
        raise NumericalError("empty deconvolution window")
    return first, last


def _grid(center: float, spacing: float, lo: float, hi: float, half: int) -> np.ndarray:
    g = center + spacing * np.arange(-half, half + 1)
    g = g[(g >= lo - 1e-9) & (g <= hi + 1e-9)]
    return np.unique(np.concatenate([g, [center]]))


def _profile(win: WhitenedWindow, base, cols):
    """Residual norms after profiling the short levels out.

    ``base`` has shape (size, K) of fixed-part residuals per candidate and
    ``cols`` shape (size, K, q) the design columns of the free levels.
    """
    K = base.shape[1]
    zb = win.whiten(base)
    q = cols.shape[2]
    if q == 0:
        return np.sum(zb * zb, axis=0), np.zeros((K, 0))
    zc = win.whiten(cols.reshape(cols.shape[0], -1)).reshape(cols.shape)
    G = np.einsum("pkq,pkr->kqr", zc, zc)
    g = np.einsum("pkq,pk->kq", zc, zb)
    coef = np.linalg.solve(G, g[..., None])[..., 0]
    resid = zb - np.einsum("pkq,kq->pk", zc, coef)
    return np.sum(resid * resid, axis=0), coef


def _evaluate(y, k, win, cands, c_L, c_R):
    """Objective for candidate change vectors ``cands`` (K, q + 1)."""
    fs = k.sample_rate
    p = win.index
    F = step_response(k, (p[:, None, None] - cands[None, :, :]) / fs)  # size, K, q+1
    base = y[p - 1][:, None] - c_L * (1.0 - F[:, :, 0]) - c_R * F[:, :, -1]
    # free levels of the q short segments between consecutive changes
    cols = F[:, :, :-1] - F[:, :, 1:]
    return _profile(win, base, cols)


def _search(y, k, ranges, c_L, c_R, cfg: DeconvConfig, n: int) -> SearchResult:
    m = k.m
    lo = np.array([r[0] for r in ranges], dtype=float)
    hi = np.array([r[1] for r in ranges], dtype=float)
    win = WhitenedWindow(k, *_window_for(lo.min(), hi.max(), m, n), cfg.gamma2)
    min_gap = 1.0 / cfg.refinement_factor**cfg.refinements
    # coarse: full joint grid on samples
    axes = [np.arange(ceil(a - 1e-9), np.floor(b + 1e-9) + 1) for a, b in zip(lo, hi)]
    if any(ax.size == 0 for ax in axes):
        axes = [np.array([0.5 * (a + b)]) for a, b in zip(lo, hi)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(ranges))
    ok = np.all(np.diff(mesh, axis=1) >= min_gap - 1e-12, axis=1) if mesh.shape[1] > 1 else np.ones(len(mesh), bool)
    mesh = mesh[ok]
    if mesh.size == 0:
        raise NumericalError("no admissible candidate in the search range")
    obj, coef = _evaluate(y, k, win, mesh, c_L, c_R)
    b = int(np.argmin(obj))
    best, best_obj, best_coef = mesh[b], float(obj[b]), coef[b]
    history = [best_obj]
    spacing = 1.0
    for _ in range(cfg.refinements):
        spacing /= cfg.refinement_factor
        axes = [_grid(c, spacing, a, bb, cfg.refinement_factor) for c, a, bb in zip(best, lo, hi)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(ranges))
        if mesh.shape[1] > 1:
            mesh = mesh[np.all(np.diff(mesh, axis=1) >= min_gap - 1e-12, axis=1)]
        if not len(mesh):
            history.append(best_obj)
            continue
        obj, coef = _evaluate(y, k, win, mesh, c_L, c_R)
        b = int(np.argmin(obj))
        if obj[b] <= best_obj:
            best, best_obj, best_coef = mesh[b], float(obj[b]), coef[b]
        history.append(best_obj)
    return SearchResult(np.array(best, dtype=float), np.asarray(best_coef, dtype=float), best_obj, history)


def search_single_change(y, k: FilterKernel, lo: float, hi: float, c_L: float, c_R: float, gamma2: float = 1.0,
                         refinements: int = 2, refinement_factor: int = 10):
    """Locate one change between fixed levels within ``[lo, hi]`` (samples).

    Returns
    -------
    SearchResult
        ``position`` is the location.
    """
    cfg = DeconvConfig(gamma2=gamma2, refinements=refinements, refinement_factor=refinement_factor)
    return _search(np.asarray(y, dtype=float), k, [(lo, hi)], c_L, c_R, cfg, len(y))


def search_peak(y, k: FilterKernel, range_L, range_R, c_L: float, c_R: float, cfg: DeconvConfig | None = None):
    """Joint search for the two changes of a short segment with profiled level."""
    cfg = cfg or DeconvConfig()
    return _search(np.asarray(y, dtype=float), k, [range_L, range_R], c_L, c_R, cfg, len(y))


def _groups(pos: np.ndarray, n: int, long_min: int):
    """Runs of changes joined by short segments, with edge-flank flags."""
    bounds = np.concatenate([[0.0], pos, [float(n)]])
    length = np.diff(bounds)
    is_long = length >= long_min
    groups = []
    cur = []
    for c in range(pos.size):
        cur.append(c)
        if is_long[c + 1]:
            groups.append(cur)
            cur = []
    if cur:
        groups.append(cur)
    return groups, is_long


def deconvolve(
    tr: Trace,
    ideal: Idealization,
    events: list[ShortEvent],
    k: FilterKernel,
    cfg: DeconvConfig | None = None,
) -> Idealization:
    """Refine change locations and short-segment levels below the sample grid.

    Parameters
    ----------
    tr : Trace
    ideal : Idealization
        Idealization the local tests were run against.
    events : list of ShortEvent
        Detected short events; inserted before refinement.
    k : FilterKernel
    cfg : DeconvConfig, optional

    Returns
    -------
    Idealization
        ``diagnostics["flags"]`` maps change index to one of ``"coarse"``
        (not flanked by long segments), ``"unresolved"`` (three or more
        changes joined by short segments, locations kept) or
        ``"truncated"`` (search range cut at the midpoint to a change of another
        group).
    """
    cfg = cfg or DeconvConfig()
    cfg.validate(k)
    fs, m, n, y = tr.sample_rate, k.m, tr.n, tr.samples
    if events:
        ideal = insert_events(ideal, events, fs)
    sig = ideal.signal
    pos = sig.change_times * fs
    K = pos.size
    rules = [_RULES[cfg.grids.get(o, "symmetric")] for o in ideal.origins]
    ranges = [list(search_range(a, r, m)) for a, r in zip(ideal.anchors, rules)]
    flags: dict[int, str] = {}
    groups, is_long = _groups(pos, n, cfg.long_segment_min)
    gid = np.empty(K, dtype=int)
    for g_no, g in enumerate(groups):
        gid[g] = g_no
    # changes of one group are searched jointly, so only other groups bound a range
    for c in range(K):
        left = 0.5 * (pos[c - 1] + pos[c]) if c > 0 and gid[c - 1] != gid[c] else 0.0
        right = 0.5 * (pos[c] + pos[c + 1]) if c + 1 < K and gid[c + 1] != gid[c] else float(n)
        a, b = ranges[c]
        if a < left or b > right:
            flags[c] = "truncated"
        # a change on the first or last sample time is not a change inside the record
        ranges[c] = [max(a, left, 1.0), min(b, right, float(n - 1))]
        if ranges[c][0] > ranges[c][1]:
            ranges[c] = [pos[c], pos[c]]
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    first, last = segment_observations(lo, hi, n, m)
    levels = np.array(sig.levels, dtype=float)
    for s in range(K + 1):
        if is_long[s] and first[s] <= last[s]:
            levels[s] = float(np.mean(y[first[s] - 1 : last[s]]))
    new_pos = pos.copy()
    objective = {}
    for g in groups:
        a, b = g[0], g[-1]
        flanked = is_long[a] and is_long[b + 1]
        if not flanked:
            for c in g:
                flags[c] = "coarse"
            continue
        if len(g) > 2:
            for c in g:
                flags[c] = "unresolved"
            res = _search(y, k, [(pos[c], pos[c]) for c in g], levels[a], levels[b + 1],
                          DeconvConfig(cfg.gamma2, cfg.long_segment_min, 0, cfg.refinement_factor), n)
            levels[a + 1 : b + 1] = res.levels
            continue
        res = _search(y, k, [ranges[c] for c in g], levels[a], levels[b + 1], cfg, n)
        new_pos[a : b + 1] = res.positions
        if len(g) == 2:
            levels[a + 1] = res.levels[0]
        objective[a] = res.objective
    order_ok = np.all(np.diff(new_pos) > 0) and (K == 0 or (new_pos[0] > 0 and new_pos[-1] < n))
    if not order_ok:
        raise NumericalError("deconvolved changes are not strictly increasing")
    diag = {**ideal.diagnostics, "flags": flags, "objective": objective}
    out = _rebuild(new_pos, levels, sig.sds, ideal.origins, new_pos, fs, sig.end_time, diag)
    if out.n_changes != K:
        log.info("deconvolution merged %d equal-level neighbours", K - out.n_changes)
    return out


def idealize_variance(tr: Trace, ideal: Idealization, k: FilterKernel, long_segment_min: int = 25) -> PiecewiseSignal:
    """Piecewise-constant idealization of the noise variance.

    Long segments use the squared difference-based IQR estimate; short
    segments flanked by long ones use the moment estimator of the local
    tests evaluated at the deconvolved change locations. Anything else
    inherits the nearest estimate.

    Returns
    -------
    PiecewiseSignal
        Levels are variances; the ``sds`` field is zero.
    """
    fs, m, n, y = tr.sample_rate, k.m, tr.n, tr.samples
    sig = ideal.signal
    pos = sig.change_times * fs
    K = pos.size
    bounds = np.concatenate([[0.0], pos, [float(n)]])
    first = np.ceil(bounds[:-1]).astype(int) + m
    last = np.floor(bounds[1:]).astype(int)
    first[0] = 1
    last[-1] = n
    var = np.full(K + 1, np.nan)
    is_long = np.diff(bounds) >= long_segment_min
    for s in range(K + 1):
        if is_long[s] and last[s] - first[s] + 1 >= m + 2:
            var[s] = robust_sd(y[first[s] - 1 : last[s]], m) ** 2
    for s in range(1, K):
        if not is_long[s] and is_long[s - 1] and is_long[s + 1] and np.isfinite(var[s - 1]) and np.isfinite(var[s + 1]):
            tL, tR = pos[s - 1], pos[s]
            p = np.arange(int(np.floor(tL)) + 1, min(int(np.ceil(tR)) + m, n + 1))
            dL, dR = (p - tL) / fs, (p - tR) / fs
            d, A, BL, BR = variance_coefficients(k, dL, dR)
            v = d.v
            r0 = y[p - 1] - d.c_lr(sig.levels[s - 1], sig.levels[s + 1])
            c_hat = float(v @ r0 / (v @ v))
            r = r0 - v * c_hat
            var[s] = max((float(d.w0 @ (r * r)) - var[s - 1] * BL - var[s + 1] * BR) / A, 0.0)
    have = np.nonzero(np.isfinite(var))[0]
    if have.size == 0:
        var[:] = robust_sd(y, m) ** 2
    else:
        for s in np.nonzero(~np.isfinite(var))[0]:
            var[s] = var[have[np.argmin(np.abs(have - s))]]
    return PiecewiseSignal(sig.change_times, var, np.zeros_like(var), sig.end_time, distinct_levels=False)
