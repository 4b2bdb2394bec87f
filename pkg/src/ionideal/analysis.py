"""Gating analysis of an idealization.

Segments are classified as open or closed by their level, dwell times are
collected per class, amplitudes are summarized by the half-sample mode and
rates are fitted by maximum likelihood for exponentials observed only
inside a dwell-time window, which corrects for events too short (or too
long) to be seen.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

import numpy as np
from scipy.optimize import brentq

from .detect_long import Idealization
from .errors import InputError
from .model import PiecewiseSignal

__all__ = [
    "EventFilter",
    "EventTable",
    "RateFit",
    "half_sample_mode",
    "extract_events",
    "fit_exponential_truncated",
    "window_probability",
    "event_proportions",
    "gating_summary",
]

SHORT_WINDOW = (1e-4, 5e-3)
LONG_WINDOW = (2e-2, 2e-1)
GLOBAL_WINDOW = (1e-4, 2e-1)


def _check_window(w, name):
    lo, hi = float(w[0]), float(w[1])
    if not lo < hi:
        raise InputError(f"{name} window must satisfy lower < upper, got {w}")
    return lo, hi


@dataclass(frozen=True)
class EventFilter:
    """Classification windows (levels in nS, times in s)."""

    open_window: tuple = (0.15, 2.0)
    closed_window: tuple = (-0.05, 0.05)
    amplitude_window: tuple = (0.2, 0.5)
    dwell_window: tuple = GLOBAL_WINDOW

    def __post_init__(self):
        for name in ("open", "closed", "amplitude", "dwell"):
            object.__setattr__(self, f"{name}_window", _check_window(getattr(self, f"{name}_window"), name))
        if self.dwell_window[0] < 0:
            raise InputError("dwell window must start at a non-negative time")


@dataclass
class EventTable:
    """Dwell times and opening amplitudes extracted from one idealization."""

    open_dwells: np.ndarray = field(default_factory=lambda: np.empty(0))
    closed_dwells: np.ndarray = field(default_factory=lambda: np.empty(0))
    amplitudes: np.ndarray = field(default_factory=lambda: np.empty(0))
    n_artifacts: int = 0

    def extend(self, other: "EventTable") -> "EventTable":
        return EventTable(
            np.concatenate([self.open_dwells, other.open_dwells]),
            np.concatenate([self.closed_dwells, other.closed_dwells]),
            np.concatenate([self.amplitudes, other.amplitudes]),
            self.n_artifacts + other.n_artifacts,
        )


@dataclass(frozen=True)
class RateFit:
    """Truncated-exponential rate estimate.

    ``boundary`` is ``None`` for an interior maximum, otherwise ``"zero"``
    (mean too large for any positive rate) or ``"infinite"`` (all dwells at
    the lower window edge).
    """

    rate: float
    se: float
    n: int
    window: tuple
    boundary: str | None = None


def half_sample_mode(values) -> float:
    """Iterated half-sample mode; the leftmost shortest half wins ties.

    Examples
    --------
    >>> half_sample_mode([0, 0, 0, 0, 10])
    0.0
    """
    x = np.sort(np.asarray(values, dtype=float).ravel())
    if x.size == 0:
        raise InputError("half-sample mode of an empty sample")
    if not np.all(np.isfinite(x)):
        raise InputError("half-sample mode needs finite values")
    while x.size > 2:
        h = ceil(x.size / 2)
        width = x[h - 1 :] - x[: x.size - h + 1]
        j = int(np.argmin(width))
        x = x[j : j + h]
    return float(x.mean())


def _merged(sig: PiecewiseSignal, cls: np.ndarray):
    """Runs of consecutive segments with equal class (``-1`` marks artifacts)."""
    starts = np.concatenate([[0.0], sig.change_times])
    ends = np.concatenate([sig.change_times, [sig.end_time]])
    runs = []
    for s in range(cls.size):
        if runs and runs[-1][0] == cls[s] and cls[s] >= 0:
            runs[-1][2] = ends[s]
            runs[-1][4] = sig.levels[s]
        else:
            runs.append([cls[s], starts[s], ends[s], sig.levels[s], sig.levels[s]])
    return runs


def extract_events(ideal: Idealization | PiecewiseSignal, filt: EventFilter | None = None) -> EventTable:
    """Classify segments and collect dwell times and amplitudes.

    Adjacent segments of the same class form one dwell. Segments outside
    both level windows are artifacts: they are dropped and end the dwell
    around them. The first and last dwell of the record are censored and
    excluded. An opening is a closed dwell directly followed by an open
    one; its amplitude is the first open level minus the last closed level.
    Dwells outside ``filt.dwell_window`` are discarded.
    """
    filt = filt or EventFilter()
    sig = ideal.signal if isinstance(ideal, Idealization) else ideal
    lev = sig.levels
    cls = np.full(lev.size, -1)
    cls[(lev >= filt.closed_window[0]) & (lev <= filt.closed_window[1])] = 0
    cls[(lev >= filt.open_window[0]) & (lev <= filt.open_window[1])] = 1
    runs = _merged(sig, cls)
    lo, hi = filt.dwell_window
    open_d, closed_d, amps = [], [], []
    for r in range(1, len(runs) - 1):
        c, a, b, _, _ = runs[r]
        if c < 0:
            continue
        d = b - a
        if lo <= d <= hi:
            (open_d if c == 1 else closed_d).append(d)
    for r in range(1, len(runs)):
        if runs[r][0] == 1 and runs[r - 1][0] == 0:
            amp = runs[r][3] - runs[r - 1][4]
            if filt.amplitude_window[0] <= amp <= filt.amplitude_window[1]:
                amps.append(amp)
    return EventTable(np.array(open_d), np.array(closed_d), np.array(amps), int(np.sum(cls < 0)))


def _excess(lam: float, delta: float) -> float:
    # 1/lam - delta / (exp(lam delta) - 1), decreasing from delta/2 to 0
    if not np.isfinite(delta):
        return 1.0 / lam
    x = lam * delta
    if x < 1e-6:
        return delta * (0.5 - x / 12.0)
    if x > 700.0:
        return 1.0 / lam
    return 1.0 / lam - delta / np.expm1(x)


def fit_exponential_truncated(dwells, t_min: float = 0.0, t_max: float = np.inf) -> RateFit:
    """Maximum-likelihood rate of an exponential observed on ``[t_min, t_max]``.

    The score equation ``1/lam - D/(exp(lam D) - 1) = mean(t) - t_min`` with
    ``D = t_max - t_min`` has a unique root when the centred mean lies in
    ``(0, D/2)``; it is bracketed and solved by Brent's method. The standard
    error comes from the observed information.
    """
    t = np.asarray(dwells, dtype=float).ravel()
    if t.size < 2:
        raise InputError("need at least two dwell times")
    if not t_min < t_max or t_min < 0:
        raise InputError("need 0 <= t_min < t_max")
    if np.any(t < t_min) or np.any(t > t_max):
        raise InputError("all dwell times must lie inside [t_min, t_max]")
    n = t.size
    delta = t_max - t_min
    target = float(t.mean()) - t_min
    window = (float(t_min), float(t_max))
    if target <= 0:
        return RateFit(np.inf, np.nan, n, window, "infinite")
    if np.isfinite(delta) and target >= delta / 2:
        return RateFit(0.0, np.nan, n, window, "zero")
    f = lambda lam: _excess(lam, delta) - target  # noqa: E731
    lo = hi = 1.0 / target
    while f(lo) < 0:
        lo /= 2.0
    while f(hi) > 0:
        hi *= 2.0
    lam = brentq(f, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500) if lo != hi else lo
    if np.isfinite(delta):
        x = lam * delta
        info = n * (1.0 / lam**2 - delta**2 * np.exp(-x) / (-np.expm1(-x)) ** 2)
    else:
        info = n / lam**2
    se = 1.0 / np.sqrt(info) if info > 0 else np.nan
    return RateFit(float(lam), float(se), n, window)


def window_probability(rate: float, window) -> float:
    """``P(t_min <= T <= t_max)`` for an exponential with the given rate."""
    lo, hi = window
    return float(np.exp(-rate * lo) - (0.0 if not np.isfinite(hi) else np.exp(-rate * hi)))


def event_proportions(counts_short: int, counts_long: int, rate_short: float, rate_long: float,
                      windows=(SHORT_WINDOW, LONG_WINDOW)) -> float:
    """Share of short events after correcting both counts for the observation windows."""
    p_s = window_probability(rate_short, windows[0])
    p_l = window_probability(rate_long, windows[1])
    short = counts_short / p_s if p_s > 0 else np.nan
    long = counts_long / p_l if p_l > 0 else np.nan
    total = short + long
    if not np.isfinite(total) or total <= 0:
        raise InputError("corrected event total is zero or undefined")
    return float(short / total)


def gating_summary(table: EventTable, short_window=SHORT_WINDOW, long_window=LONG_WINDOW) -> dict:
    """Amplitude mode, three rates and the short-closed proportion.

    Fits that lack data are reported as ``None`` instead of raising.
    """
    out: dict = {"n_open": int(table.open_dwells.size), "n_closed": int(table.closed_dwells.size),
                 "n_amplitudes": int(table.amplitudes.size), "n_artifacts": table.n_artifacts}
    out["amplitude_hsm"] = half_sample_mode(table.amplitudes) if table.amplitudes.size else None
    fits = {}
    c = table.closed_dwells
    o = table.open_dwells
    for name, data, w in (
        ("closed_short", c[(c >= short_window[0]) & (c <= short_window[1])], short_window),
        ("closed_long", c[(c >= long_window[0]) & (c <= long_window[1])], long_window),
        ("open", o, GLOBAL_WINDOW),
    ):
        if data.size >= 2:
            lo = min(w[0], data.min())
            hi = max(w[1], data.max())
            fits[name] = fit_exponential_truncated(data, lo, hi)
        else:
            fits[name] = None
        out[f"rate_{name}"] = None if fits[name] is None else fits[name].rate
        out[f"se_{name}"] = None if fits[name] is None else fits[name].se
        out[f"count_{name}"] = int(data.size)
    fs, fl = fits["closed_short"], fits["closed_long"]
    if fs is not None and fl is not None and fs.boundary is None and fl.boundary is None:
        out["proportion_short"] = event_proportions(fs.n, fl.n, fs.rate, fl.rate, (short_window, long_window))
    else:
        out["proportion_short"] = None
    return out
