"""Named simulation designs used by the CLI and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .errors import InputError
from .filter import FilterKernel
from .model import (
    PORB_HMM,
    PiecewiseSignal,
    PinkNoise,
    Trace,
    VioletNoise,
    add_contamination,
    simulate,
    simulate_hmm,
)

__all__ = ["PRESETS", "peak_signal", "two_peak_signal", "simulate_preset"]

OPEN_LEVEL = 0.32
CLOSED_VAR = 6.1e-5


def peak_signal(fs: float, length: int = 5, s1_sq: float = 1e-3, start: int = 2000, n: int = 4000):
    """Isolated peak ``0 | 0.32 | 0`` of ``length`` samples starting at sample ``start``."""
    if not 0 < start < start + length < n:
        raise InputError("peak must lie strictly inside the trace")
    sd0, sd1 = np.sqrt(CLOSED_VAR), np.sqrt(s1_sq)
    return PiecewiseSignal(np.array([start, start + length]) / fs, [0.0, OPEN_LEVEL, 0.0], [sd0, sd1, sd0], n / fs)


def two_peak_signal(fs: float, d: int, length: int = 5, start: int = 2000, n: int = 4000, sd: float = 1.4,
                    high: float = 40.0, low: float = 20.0):
    """Two downward peaks of ``length`` samples separated by ``d`` samples, homogeneous noise."""
    ch = np.array([start, start + length, start + length + d, start + 2 * length + d])
    if d < 1 or ch[-1] >= n:
        raise InputError("need d >= 1 and both peaks inside the trace")
    return PiecewiseSignal(ch / fs, [high, low, high, low, high], [sd] * 5, n / fs)


PRESETS = {
    "peak": {"length": 5, "s1_sq": 1e-3, "start": 2000, "n": 4000},
    "two-peak": {"d": 35, "length": 5, "start": 2000, "n": 4000},
    "hmm-porb": {"duration": 60.0},
    "contamination": {"kind": "violet", "length": 5, "s1_sq": 1e-3, "start": 2000, "n": 4000},
}


def simulate_preset(name: str, k: FilterKernel, seed: int = 0, **params) -> tuple[Trace, PiecewiseSignal]:
    """Simulate one trace of a named design.

    Returns
    -------
    trace : Trace
    truth : PiecewiseSignal
    """
    if name not in PRESETS:
        raise InputError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    unknown = set(params) - set(PRESETS[name])
    if unknown:
        raise InputError(f"preset {name!r} has no parameter(s) {sorted(unknown)}")
    p = {**PRESETS[name], **params}
    fs = k.sample_rate
    tag = f"preset={name} seed={seed} " + " ".join(f"{a}={p[a]}" for a in sorted(p))
    if name == "peak":
        sig = peak_signal(fs, int(p["length"]), float(p["s1_sq"]), int(p["start"]), int(p["n"]))
        return simulate(sig, k, int(p["n"]), seed=seed, provenance=tag), sig
    if name == "two-peak":
        sig = two_peak_signal(fs, int(p["d"]), int(p["length"]), int(p["start"]), int(p["n"]))
        return simulate(sig, k, int(p["n"]), seed=seed, provenance=tag), sig
    if name == "hmm-porb":
        duration = float(p["duration"])
        n = int(round(duration * fs))
        if n < 1:
            raise InputError("duration too short for a single sample")
        ss = np.random.SeedSequence(seed)
        path_seed, noise_seed = ss.spawn(2)
        sig = simulate_hmm(PORB_HMM, duration, np.random.default_rng(path_seed))
        return simulate(sig, k, n, seed=np.random.default_rng(noise_seed), provenance=tag), sig
    sig = peak_signal(fs, int(p["length"]), float(p["s1_sq"]), int(p["start"]), int(p["n"]))
    base = simulate(sig, k, int(p["n"]), seed=seed, provenance=tag)
    if p["kind"] == "violet":
        return add_contamination(base, "violet", VioletNoise(sig, k), seed=seed), sig
    if p["kind"] == "pink":
        return add_contamination(base, "pink", PinkNoise(sig, k), seed=seed + 10**6), sig
    raise InputError(f"unknown contamination kind {p['kind']!r}")
