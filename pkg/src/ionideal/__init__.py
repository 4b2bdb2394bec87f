"""Idealization of filtered ion-channel recordings with heterogeneous noise.

The pipeline detects long segments with a multiresolution criterion,
finds short events with local tests that model the filter explicitly and
refines all locations by local deconvolution.
"""

from .errors import CalibrationError, IdealizationError, InputError, NumericalError
from .filter import FilterKernel, make_bessel
from .model import PiecewiseSignal, Trace, simulate

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "IdealizationError",
    "InputError",
    "NumericalError",
    "FilterKernel",
    "make_bessel",
    "PiecewiseSignal",
    "Trace",
    "simulate",
    "__version__",
]
