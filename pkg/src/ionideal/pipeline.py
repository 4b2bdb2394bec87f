"""End-to-end idealization: long scales, short events, deconvolution."""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import detect_long, detect_short
from .deconv import DeconvConfig, deconvolve, idealize_variance
from .detect_long import CriticalValues, Idealization
from .errors import InputError
from .filter import FilterKernel, make_bessel
from .io import CalibrationCache
from .model import PiecewiseSignal, Trace

log = logging.getLogger(__name__)

__all__ = ["RunConfig", "PipelineResult", "default_cache", "long_critical_values", "short_critical_values", "idealize"]

BUNDLED = Path(__file__).with_name("data")


@dataclass(frozen=True)
class RunConfig:
    """All tuning parameters of a run.

    ``alpha`` must equal ``alpha1 + alpha2``. ``short_n`` is the number of
    window positions the short-event critical values are simulated for.
    """

    alpha: float = 0.05
    alpha1: float = 0.01
    alpha2: float = 0.04
    l_max: int = 65
    gamma2: float = 1.0
    order: int = 4
    cutoff: float = 1000.0
    sample_rate: float = 10000.0
    acf_threshold: float = 1e-3
    R_long: int = 5000
    R_short: int = 200
    short_n: int = 600000
    seed: int = 0
    homogeneous: bool = False
    long_segment_min: int = 25
    refinements: int = 2
    refinement_factor: int = 10
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise InputError("alpha must lie in (0, 1)")
        if self.alpha1 <= 0 or self.alpha2 <= 0 or abs(self.alpha1 + self.alpha2 - self.alpha) > 1e-12:
            raise InputError(f"alpha1 + alpha2 must equal alpha ({self.alpha1} + {self.alpha2} != {self.alpha})")
        if self.l_max < 1:
            raise InputError("l_max must be at least 1")
        if self.R_long < 1 or self.R_short < 1:
            raise InputError("replication counts must be positive")

    def kernel(self) -> FilterKernel:
        return make_bessel(self.order, self.cutoff, self.sample_rate, self.acf_threshold)

    def deconv(self) -> DeconvConfig:
        return DeconvConfig(self.gamma2, self.long_segment_min, self.refinements, self.refinement_factor)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        return d


def default_cache() -> CalibrationCache:
    root = os.environ.get("IONIDEAL_CACHE") or Path.home() / ".cache" / "ionideal"
    return CalibrationCache(root)


def _lookup(cache: CalibrationCache | None, params: dict, compute) -> CriticalValues:
    bundled = CalibrationCache(BUNDLED)
    from .io import calibration_key

    hit = bundled.get(calibration_key(**params), params)
    if hit is not None:
        return hit
    cache = cache or default_cache()
    return cache.get_or_compute(params, compute)


def long_params(n: int, k: FilterKernel, cfg: RunConfig) -> dict:
    return {"statistic": "long", "n": int(n), "alpha": cfg.alpha1, "R": cfg.R_long, "seed": cfg.seed,
            "kernel": k.fingerprint}


def short_params(k: FilterKernel, cfg: RunConfig) -> dict:
    return {"statistic": "short_homogeneous" if cfg.homogeneous else "short", "n": cfg.short_n,
            "alpha": cfg.alpha2, "l_max": cfg.l_max, "R": cfg.R_short, "seed": cfg.seed,
            "gamma2": cfg.gamma2, "kernel": k.fingerprint}


def long_critical_values(n: int, k: FilterKernel, cfg: RunConfig, cache: CalibrationCache | None = None):
    """Critical values of the multiresolution step for traces of length ``n``."""
    return _lookup(cache, long_params(n, k, cfg),
                   lambda: detect_long.calibrate(n, k, cfg.alpha1, R=cfg.R_long, seed=cfg.seed))


def short_critical_values(k: FilterKernel, cfg: RunConfig, cache: CalibrationCache | None = None):
    """Critical values of the local tests for ``cfg.short_n`` window positions."""
    return _lookup(cache, short_params(k, cfg),
                   lambda: detect_short.calibrate_short(cfg.short_n, k, cfg.alpha2, cfg.l_max, cfg.R_short,
                                                        cfg.seed + 1, cfg.homogeneous, cfg.gamma2))


@dataclass
class PipelineResult:
    """Intermediate and final idealizations of one trace."""

    step_a: Idealization
    refit: Idealization
    events: list
    final: Idealization
    variance: PiecewiseSignal | None = None


def idealize(
    tr: Trace,
    k: FilterKernel,
    q_long: CriticalValues,
    q_short: CriticalValues,
    cfg: RunConfig | None = None,
    variance: bool = False,
) -> PipelineResult:
    """Run the three fitting steps on one trace."""
    cfg = cfg or RunConfig()
    if abs(tr.sample_rate - k.sample_rate) > 1e-9 * k.sample_rate:
        raise InputError(f"trace sampled at {tr.sample_rate} Hz but kernel expects {k.sample_rate} Hz")
    a = detect_long.fit(tr, k, q_long)
    refit = detect_short.refit_long_segments(tr, a, k, cfg.long_segment_min, cfg.gamma2)
    events = detect_short.scan(tr, refit, k, q_short, homogeneous=cfg.homogeneous)
    final = deconvolve(tr, refit, events, k, cfg.deconv())
    var = idealize_variance(tr, final, k, cfg.long_segment_min) if variance else None
    return PipelineResult(a, refit, events, final, var)
