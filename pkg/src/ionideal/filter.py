"""Truncated analogue Bessel lowpass filter in closed form.

The impulse response of an all-pole filter is a sum of complex
exponentials, ``h(t) = Re sum_i r_i exp(p_i t)``. Every quantity needed by
the rest of the package (kernel, step response, autocorrelation of the
truncated kernel) is an integral of such sums and is evaluated exactly.

Times are in seconds, poles in rad/s.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from math import factorial

import numpy as np

from .errors import InputError, NumericalError

__all__ = [
    "FilterKernel",
    "make_bessel",
    "kernel",
    "step_response",
    "autocorr",
    "acf",
    "untruncated_acf",
    "kernel_to_record",
    "kernel_from_record",
]


@dataclass(frozen=True, eq=False)
class FilterKernel:
    """Truncated and rescaled lowpass kernel.

    Attributes
    ----------
    order : int
        Number of poles.
    cutoff : float
        -3 dB frequency in Hz.
    sample_rate : float
        Sampling rate in Hz.
    m : int
        Truncation length in samples; the kernel vanishes after ``m / sample_rate``.
    poles, residues : ndarray of complex
        Partial-fraction representation of the untruncated impulse response.
    rescale : float
        Factor making the truncated kernel integrate to one.
    acf_threshold : float
        Threshold used to choose ``m``.
    """

    order: int
    cutoff: float
    sample_rate: float
    m: int
    poles: np.ndarray
    residues: np.ndarray
    rescale: float
    acf_threshold: float = 1e-3

    @property
    def duration(self) -> float:
        """Support length ``m / f_s`` of the truncated kernel."""
        return self.m / self.sample_rate

    @cached_property
    def variance0(self) -> float:
        """Raw autocorrelation at infinity and lag zero, ``int F^2``."""
        return float(autocorr(self, np.inf, 0.0))

    @cached_property
    def step_table(self) -> np.ndarray:
        """Step response at ``j / f_s`` for ``j = 0..m``."""
        tab = step_response(self, np.arange(self.m + 1) / self.sample_rate)
        tab.setflags(write=False)
        return tab

    @cached_property
    def acf_table(self) -> np.ndarray:
        """Normalized autocorrelation at grid points.

        Entry ``[j, m + r]`` holds ``acf(j / f_s, r / f_s)`` for
        ``j = 0..m`` and ``r = -m..m``. Larger ``j`` equals row ``m``.
        """
        m, fs = self.m, self.sample_rate
        j = np.arange(m + 1)[:, None] / fs
        r = np.arange(-m, m + 1)[None, :] / fs
        tab = acf(self, j, r)
        tab.setflags(write=False)
        return tab

    @cached_property
    def lag_acf(self) -> np.ndarray:
        """Stationary normalized autocorrelation at lags ``0..m`` (samples)."""
        tab = np.array(self.acf_table[self.m, self.m:])
        tab.setflags(write=False)
        return tab

    @cached_property
    def fingerprint(self) -> str:
        """Short hash identifying the kernel, used as a cache key."""
        return hashlib.sha256(kernel_to_record(self).encode()).hexdigest()[:16]


def _bessel_coefficients(order: int) -> np.ndarray:
    """Coefficients a_0..a_n of the reversed Bessel polynomial (ascending)."""
    n = order
    return np.array(
        [factorial(2 * n - k) / (2 ** (n - k) * factorial(k) * factorial(n - k)) for k in range(n + 1)],
        dtype=float,
    )


def _polished_roots(asc: np.ndarray) -> np.ndarray:
    desc = asc[::-1]
    roots = np.roots(desc).astype(complex)
    deriv = np.polyder(desc)
    for _ in range(3):
        roots = roots - np.polyval(desc, roots) / np.polyval(deriv, roots)
    scale = np.polyval(np.abs(desc), np.abs(roots))
    residual = np.abs(np.polyval(desc, roots)) / scale
    if not np.all(np.isfinite(residual)) or residual.max() > 1e-12:
        raise NumericalError(f"Bessel root finding did not converge, relative residuals {residual}")
    return roots


def _gain2(poles: np.ndarray, omega: float) -> float:
    s = 1j * omega
    return float(np.prod(np.abs(poles)) ** 2 / np.prod(np.abs(s - poles)) ** 2)


def _half_power_frequency(poles: np.ndarray) -> float:
    lo, hi = 0.0, 1.0
    while _gain2(poles, hi) > 0.5:
        hi *= 2.0
    while hi - lo > 1e-12 * hi:
        mid = 0.5 * (lo + hi)
        if _gain2(poles, mid) > 0.5:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _residues(poles: np.ndarray) -> np.ndarray:
    b0 = np.prod(-poles)
    out = np.empty_like(poles)
    for i, p in enumerate(poles):
        others = np.delete(poles, i)
        out[i] = b0 / np.prod(p - others)
    return out


def untruncated_acf(poles: np.ndarray, residues: np.ndarray, lag) -> np.ndarray:
    """Autocorrelation ``int h(s) h(s + lag) ds`` of the untruncated response.

    Parameters
    ----------
    poles, residues : ndarray
        Partial-fraction representation of ``h``.
    lag : array_like
        Lags in seconds; the absolute value is used.
    """
    a = np.abs(np.asarray(lag, dtype=float))
    s = poles[:, None] + poles[None, :]
    coef = residues[:, None] * residues[None, :] / (-s)
    ex = np.exp(np.multiply.outer(a, poles))
    return np.real(np.einsum("...j,ij->...", ex, coef))


def make_bessel(
    order: int = 4,
    cutoff: float = 1000.0,
    sample_rate: float = 10000.0,
    acf_threshold: float = 1e-3,
) -> FilterKernel:
    """Construct the truncated Bessel kernel.

    Parameters
    ----------
    order : int
        Number of poles.
    cutoff : float
        -3 dB frequency in Hz; must lie below the Nyquist frequency.
    sample_rate : float
        Sampling rate in Hz.
    acf_threshold : float
        ``m`` is the smallest lag (in samples) from which on the normalized
        untruncated autocorrelation stays below this value in magnitude.

    Returns
    -------
    FilterKernel
    """
    if int(order) != order or order < 1:
        raise InputError(f"order must be a positive integer, got {order!r}")
    if not 0 < cutoff < sample_rate / 2:
        raise InputError(f"cutoff must lie in (0, sample_rate/2), got {cutoff} with sample_rate {sample_rate}")
    if not 0 < acf_threshold < 1:
        raise InputError(f"acf_threshold must lie in (0, 1), got {acf_threshold}")
    order = int(order)
    proto = _polished_roots(_bessel_coefficients(order))
    proto = proto * (1.0 / _half_power_frequency(proto))
    poles = proto * (2 * np.pi * cutoff)
    poles = poles[np.lexsort((poles.imag, poles.real))]
    residues = _residues(poles)

    # slowest decay rate bounds the tail; scan far enough for any threshold
    horizon = int(np.ceil(-np.log(acf_threshold * 1e-3) / (-poles.real.max()) * sample_rate)) + 2
    lags = np.arange(horizon + 1) / sample_rate
    rho = untruncated_acf(poles, residues, lags)
    rho = rho / rho[0]
    above = np.nonzero(np.abs(rho) >= acf_threshold)[0]
    m = int(above[-1]) + 1

    T = m / sample_rate
    integral = np.real(np.sum(residues * (np.exp(poles * T) - 1.0) / poles))
    return FilterKernel(
        order=order,
        cutoff=float(cutoff),
        sample_rate=float(sample_rate),
        m=m,
        poles=_frozen(poles),
        residues=_frozen(residues),
        rescale=float(1.0 / integral),
        acf_threshold=float(acf_threshold),
    )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


def kernel(k: FilterKernel, t) -> np.ndarray:
    """Truncated, rescaled impulse response at times ``t``."""
    t = np.asarray(t, dtype=float)
    inside = (t >= 0) & (t <= k.duration)
    tc = np.where(inside, t, 0.0)
    val = k.rescale * np.real(np.exp(np.multiply.outer(tc, k.poles)) @ k.residues)
    return np.where(inside, val, 0.0)


def step_response(k: FilterKernel, t) -> np.ndarray:
    """Antiderivative of :func:`kernel`, equal to 0 for ``t <= 0`` and 1 after the support."""
    t = np.asarray(t, dtype=float)
    tc = np.clip(np.where(np.isfinite(t), t, 0.0), 0.0, k.duration)
    val = k.rescale * np.real(np.expm1(np.multiply.outer(tc, k.poles)) @ (k.residues / k.poles))
    val = np.where(t <= 0, 0.0, val)
    return np.where(t >= k.duration, 1.0, val)


def autocorr(k: FilterKernel, t, lag) -> np.ndarray:
    """Exact ``int_0^t F(s) F(s + lag) ds`` for the truncated kernel ``F``.

    Parameters
    ----------
    k : FilterKernel
    t : array_like
        Upper integration limit in seconds; ``np.inf`` is allowed.
    lag : array_like
        Lag in seconds, any sign.

    Returns
    -------
    ndarray
        Broadcast shape of ``t`` and ``lag``.
    """
    t, lag = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(lag, dtype=float))
    T = k.duration
    a = np.abs(lag)
    valid = a < T
    a = np.where(valid, a, 0.0)
    shifted = np.where(lag >= 0, t, t - a)
    shifted = np.where(np.isnan(shifted), 0.0, shifted)
    u = np.clip(shifted, 0.0, T - a)
    p, r = k.poles, k.residues
    s = p[:, None] + p[None, :]
    coef = r[:, None] * r[None, :] / s
    # sum_ij coef_ij e^{p_j a} (e^{s_ij u} - 1)
    eja = np.exp(np.multiply.outer(a, p))
    grow = np.expm1(np.multiply.outer(u, s))
    val = np.real(np.einsum("...ij,ij,...j->...", grow, coef, eja))
    val = k.rescale**2 * val
    return np.where(valid, val, 0.0)


def acf(k: FilterKernel, t, lag) -> np.ndarray:
    """:func:`autocorr` divided by its value at ``t = inf, lag = 0``.

    With this normalization a stationary segment of standard deviation
    ``s`` has observation variance ``s**2``.
    """
    return autocorr(k, t, lag) / k.variance0


def kernel_to_record(k: FilterKernel) -> str:
    """Self-describing text record of a kernel."""

    def cplx(z: np.ndarray) -> str:
        return ";".join(f"{float(v.real)!r},{float(v.imag)!r}" for v in z)

    lines = [
        "format_version = 1",
        "kind = bessel_lowpass",
        "normalization = -3dB",
        f"order = {k.order}",
        f"cutoff = {float(k.cutoff)!r}",
        f"sample_rate = {float(k.sample_rate)!r}",
        f"acf_threshold = {float(k.acf_threshold)!r}",
        f"m = {k.m}",
        f"poles = {cplx(k.poles)}",
        f"residues = {cplx(k.residues)}",
        f"rescale = {float(k.rescale)!r}",
    ]
    return "\n".join(lines) + "\n"


def kernel_from_record(text: str) -> FilterKernel:
    """Inverse of :func:`kernel_to_record`."""
    fields = {}
    for line in text.splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    if fields.get("format_version") != "1":
        raise InputError("unsupported kernel record version")

    def cplx(s: str) -> np.ndarray:
        return np.array([complex(float(a), float(b)) for a, b in (z.split(",") for z in s.split(";"))])

    return FilterKernel(
        order=int(fields["order"]),
        cutoff=float(fields["cutoff"]),
        sample_rate=float(fields["sample_rate"]),
        m=int(fields["m"]),
        poles=_frozen(cplx(fields["poles"])),
        residues=_frozen(cplx(fields["residues"])),
        rescale=float(fields["rescale"]),
        acf_threshold=float(fields["acf_threshold"]),
    )
