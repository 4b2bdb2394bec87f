"""Building blocks for local models of short events.

A local window sees observations whose mean is a filtered three-level
signal ``c_L | c | c_R`` with changes at ``tau_L < tau_R``. Mean and
covariance are linear in ``c`` and in the three segment variances; this
module evaluates the coefficients and the Gaussian objectives built from
them. Observation indices are 1-based sample numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, solve_triangular

from .errors import NumericalError
from .filter import FilterKernel, acf, step_response

__all__ = ["PeakDesign", "peak_design", "peak_covariances", "trace_coefficients", "variance_coefficients", "WhitenedWindow"]


@dataclass(frozen=True)
class PeakDesign:
    """Per-observation coefficients of the three-level model.

    ``E[Y] = c_L (1 - FL) + c_R FR + c v`` and
    ``Var[Y] = s_L^2 (1 - AL0) + s_R^2 AR0 + s^2 w0``.
    """

    FL: np.ndarray
    FR: np.ndarray
    AL0: np.ndarray
    AR0: np.ndarray

    @property
    def v(self) -> np.ndarray:
        return self.FL - self.FR

    @property
    def w0(self) -> np.ndarray:
        return self.AL0 - self.AR0

    def c_lr(self, c_L: float, c_R: float) -> np.ndarray:
        return c_L * (1.0 - self.FL) + c_R * self.FR

    def s2_lr(self, s_L: float, s_R: float) -> np.ndarray:
        return s_L**2 * (1.0 - self.AL0) + s_R**2 * self.AR0


def peak_design(k: FilterKernel, dL, dR) -> PeakDesign:
    """Design from time offsets ``t - tau_L`` and ``t - tau_R`` (seconds)."""
    dL = np.asarray(dL, dtype=float)
    dR = np.asarray(dR, dtype=float)
    return PeakDesign(
        FL=step_response(k, dL),
        FR=step_response(k, dR),
        AL0=acf(k, dL, 0.0),
        AR0=acf(k, dR, 0.0),
    )


def peak_covariances(k: FilterKernel, dL, dR):
    """Covariance building blocks over a window of consecutive observations.

    Parameters
    ----------
    dL, dR : ndarray
        Offsets ``t_p - tau_L`` and ``t_p - tau_R`` of consecutive samples.

    Returns
    -------
    Wc, Sinf, SAL, SAR : ndarray
        ``Cov = s^2 Wc + s_L^2 (Sinf - SAL) + s_R^2 SAR``.
    """
    dL = np.asarray(dL, dtype=float)
    dR = np.asarray(dR, dtype=float)
    n = dL.size
    lag = (np.arange(n)[None, :] - np.arange(n)[:, None]) / k.sample_rate
    SAL = acf(k, dL[:, None], lag)
    SAR = acf(k, dR[:, None], lag)
    Sinf = acf(k, np.inf, lag)
    return SAL - SAR, Sinf, SAL, SAR


def trace_coefficients(v: np.ndarray, w0: np.ndarray, Wc, Sinf, SAL, SAR):
    """Exact coefficients of ``E[sum w0 (Y - v c_hat - c_LR)^2] = A s^2 + B``.

    With ``u = v / |v|`` the residual is ``P Y`` for ``P = I - u u^T`` and
    ``E = tr(P D P Cov)`` with ``D = diag(w0)``, evaluated as
    ``tr(D S) - 2 u^T D S u + (u^T D u)(u^T S u)``.

    Returns
    -------
    A, BL, BR : float
        ``B(s_L, s_R) = s_L^2 BL + s_R^2 BR``.
    """
    u = v / np.linalg.norm(v)
    du = w0 * u
    udu = float(u @ du)

    def tr(S):
        return float(np.dot(w0, np.diag(S)) - 2.0 * du @ S @ u + udu * (u @ S @ u))

    return tr(Wc), tr(Sinf - SAL), tr(SAR)


def variance_coefficients(k: FilterKernel, dL, dR):
    """Design and moment-estimator coefficients for one window.

    Returns
    -------
    design : PeakDesign
    A, BL, BR : float
        See :func:`trace_coefficients`.
    """
    d = peak_design(k, dL, dR)
    A, BL, BR = trace_coefficients(d.v, d.w0, *peak_covariances(k, dL, dR))
    return d, A, BL, BR


class WhitenedWindow:
    """Gaussian objective on a window of consecutive samples.

    The covariance is the homogeneous correlation ``R`` of the filtered
    noise plus ``gamma2 * I``. Residual vectors are whitened with its
    Cholesky factor so that ``|L^{-1} r|^2`` is the Mahalanobis form.

    Parameters
    ----------
    k : FilterKernel
    first, last : int
        1-based indices of the first and last observation.
    gamma2 : float
        Tikhonov regularization added to the correlation matrix.
    """

    def __init__(self, k: FilterKernel, first: int, last: int, gamma2: float):
        self.first, self.last = int(first), int(last)
        size = self.last - self.first + 1
        if size < 1:
            raise NumericalError("empty window")
        lag = np.abs(np.arange(size)[None, :] - np.arange(size)[:, None])
        acf_lags = np.concatenate([k.lag_acf, np.zeros(max(0, size - k.lag_acf.size))])
        R = acf_lags[lag] + gamma2 * np.eye(size)
        try:
            self._chol = cho_factor(R, lower=True)[0]
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"regularized correlation matrix not positive definite: {exc}") from exc
        self.index = np.arange(self.first, self.last + 1)

    def whiten(self, x: np.ndarray) -> np.ndarray:
        """``L^{-1} x`` for a vector or for the columns of a matrix."""
        return solve_triangular(self._chol, x, lower=True, check_finite=False)
