"""Robust residual transforms for least-squares estimation.

Each transform maps a raw error vector ``e`` to a residual vector ``r`` such
that ``0.5 * ||r||^2`` is the (constant-shifted) negative log-likelihood of
the chosen noise model.  Four models are provided:

* ``gaussian``: plain whitening, ``r = I^(1/2) (e - mu)``.
* ``max-mixture``: the mixture sum replaced by its dominant component; the
  component's log-normalization enters as an extra residual dimension with
  zero derivative, so the state Jacobian equals the plain Gaussian one.
* ``sum-mixture``: the exact mixture negative log-likelihood collapsed into
  a single scalar residual via the normalization ``gamma_s = sum_j c_j``.
* ``dcs``: dynamic covariance scaling, a closed-form M-estimator baseline.

Costs reported by the solver use the 1/2 ||r||^2 convention; the sum-mixture
residual absorbs a sqrt(2) factor so its squared norm halves back to the
intended negative log-likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .mixture import GaussianMixture

__all__ = [
    "RobustKind",
    "RobustModel",
    "ResidualEvaluation",
    "residual_gaussian",
    "residual_max_mixture",
    "residual_sum_mixture",
    "residual_dcs",
    "SUM_MIXTURE_LOG_FLOOR",
]

# Floor on the sum-mixture negative log before the square root; at the
# density maximum the sqrt derivative is unbounded without it.
SUM_MIXTURE_LOG_FLOOR = 1e-12


class RobustKind(str, Enum):
    GAUSSIAN = "gaussian"
    MAX_MIXTURE = "max-mixture"
    SUM_MIXTURE = "sum-mixture"
    DCS = "dcs"


@dataclass
class ResidualEvaluation:
    """Residual vector, its Jacobian w.r.t. the raw error, active branch."""

    residual: np.ndarray
    jacobian_wrt_error: np.ndarray
    active_component: Optional[int] = None

    @property
    def cost(self) -> float:
        """Solver-convention cost contribution 0.5 * ||r||^2."""
        return 0.5 * float(self.residual @ self.residual)


def _as_error(e, d: int) -> np.ndarray:
    e = np.atleast_1d(np.asarray(e, dtype=float))
    if e.shape[0] != d:
        raise ValueError(f"error has dimension {e.shape[0]}, model expects {d}")
    return e


def residual_gaussian(sqrt_info, mean, e) -> ResidualEvaluation:
    """Whitened residual ``I^(1/2) (e - mean)`` with Jacobian ``I^(1/2)``."""
    sqrt_info = np.atleast_2d(np.asarray(sqrt_info, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    e = _as_error(e, mean.shape[0])
    if sqrt_info.shape != (mean.shape[0], mean.shape[0]):
        raise ValueError("sqrt_info shape does not match the error dimension")
    return ResidualEvaluation(sqrt_info @ (e - mean), sqrt_info.copy())


def _branch_costs(gmm: GaussianMixture, e: np.ndarray) -> np.ndarray:
    """Per-component ``-log c_j + 0.5 ||I_j (e - mu_j)||^2``."""
    costs = np.empty(gmm.n_components)
    for j, comp in enumerate(gmm.components):
        y = comp.whitened(e)
        costs[j] = -comp.log_constant + 0.5 * float(y @ y)
    return costs


def residual_max_mixture(gmm: GaussianMixture, e) -> ResidualEvaluation:
    """Dominant-component residual with a log-normalization extra dimension.

    The first residual entry is ``sqrt(-2 log(c_j*/gamma_m))`` with
    ``gamma_m = max_j c_j``; it does not depend on the state, so its Jacobian
    row is zero.  Ties between branches resolve to the lowest index.
    """
    e = _as_error(e, gmm.dimension)
    costs = _branch_costs(gmm, e)
    j = int(np.argmin(costs))
    comp = gmm.components[j]
    log_gamma = float(np.max(gmm.log_constants))
    # roundoff can push the winner's log slightly above log_gamma
    head = math.sqrt(max(0.0, 2.0 * (log_gamma - comp.log_constant)))
    residual = np.concatenate(([head], comp.whitened(e)))
    jac = np.vstack([np.zeros((1, gmm.dimension)), comp.sqrt_info])
    return ResidualEvaluation(residual, jac, active_component=j)


def residual_sum_mixture(gmm: GaussianMixture, e) -> ResidualEvaluation:
    """Scalar residual embedding the exact mixture log-likelihood.

    ``r = sqrt(2 * -log sum_j (c_j/gamma_s) exp(-0.5 ||I_j (e-mu_j)||^2))``
    with ``gamma_s = sum_j c_j``, evaluated with log-sum-exp.  The negative
    log is floored at ``SUM_MIXTURE_LOG_FLOOR`` to keep the Jacobian finite
    at the density maximum.
    """
    e = _as_error(e, gmm.dimension)
    log_c = gmm.log_constants
    log_gamma_s = _logsumexp(log_c)

    terms = np.empty(gmm.n_components)
    pulls = np.zeros((gmm.n_components, gmm.dimension))
    for j, comp in enumerate(gmm.components):
        y = comp.whitened(e)
        terms[j] = comp.log_constant - log_gamma_s - 0.5 * float(y @ y)
        pulls[j] = comp.sqrt_info.T @ y
    lse = _logsumexp(terms)
    neg_log = max(-lse, SUM_MIXTURE_LOG_FLOOR)
    r = math.sqrt(2.0 * neg_log)

    # d(-log sum)/de is the responsibility-weighted pull toward each mean
    alpha = np.exp(terms - lse)
    grad = alpha @ pulls
    jac = (grad / r)[None, :]
    return ResidualEvaluation(np.array([r]), jac)


def residual_dcs(sqrt_info, e, phi: float) -> ResidualEvaluation:
    """Dynamic covariance scaling of a whitened residual.

    ``r = s * I^(1/2) e`` with ``s = min(1, 2*phi / (phi + chi2))`` and
    ``chi2 = ||I^(1/2) e||^2``.  The Jacobian is exact: inside the inlier
    region it is ``I^(1/2)``; once the scale engages it carries the rank-one
    term from ``ds/de``, keeping the residual consistent with central
    differences everywhere except on the activation boundary itself.
    """
    if phi <= 0:
        raise ValueError("phi must be positive")
    sqrt_info = np.atleast_2d(np.asarray(sqrt_info, dtype=float))
    e = _as_error(e, sqrt_info.shape[0])
    w = sqrt_info @ e
    chi2 = float(w @ w)
    if chi2 <= phi:
        return ResidualEvaluation(w.copy(), sqrt_info.copy())
    s = 2.0 * phi / (phi + chi2)
    # ds/dchi2 = -s / (phi + chi2); dchi2/de = 2 I^T w
    jac = s * sqrt_info - (2.0 * s / (phi + chi2)) * np.outer(w, sqrt_info.T @ w)
    return ResidualEvaluation(s * w, jac)


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    if not math.isfinite(m):
        return m
    return m + math.log(float(np.sum(np.exp(x - m))))


@dataclass
class RobustModel:
    """Tagged union of the supported noise models.

    Use the classmethod constructors; ``evaluate`` dispatches to the matching
    residual transform.
    """

    kind: RobustKind
    sqrt_info: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    mixture: Optional[GaussianMixture] = None
    dcs_phi: float = 1.0

    @classmethod
    def gaussian(cls, sqrt_info, mean=None) -> "RobustModel":
        sqrt_info = np.atleast_2d(np.asarray(sqrt_info, dtype=float))
        if mean is None:
            mean = np.zeros(sqrt_info.shape[0])
        return cls(RobustKind.GAUSSIAN, sqrt_info=sqrt_info, mean=np.atleast_1d(np.asarray(mean, dtype=float)))

    @classmethod
    def max_mixture(cls, mixture: GaussianMixture) -> "RobustModel":
        return cls(RobustKind.MAX_MIXTURE, mixture=mixture)

    @classmethod
    def sum_mixture(cls, mixture: GaussianMixture) -> "RobustModel":
        return cls(RobustKind.SUM_MIXTURE, mixture=mixture)

    @classmethod
    def dcs(cls, sqrt_info, phi: float = 1.0) -> "RobustModel":
        if phi <= 0:
            raise ValueError("phi must be positive")
        return cls(RobustKind.DCS, sqrt_info=np.atleast_2d(np.asarray(sqrt_info, dtype=float)), dcs_phi=phi)

    @property
    def error_dim(self) -> int:
        if self.mixture is not None:
            return self.mixture.dimension
        return self.sqrt_info.shape[0]

    @property
    def residual_dim(self) -> int:
        if self.kind == RobustKind.MAX_MIXTURE:
            return self.error_dim + 1
        if self.kind == RobustKind.SUM_MIXTURE:
            return 1
        return self.error_dim

    def evaluate(self, e) -> ResidualEvaluation:
        if self.kind == RobustKind.GAUSSIAN:
            return residual_gaussian(self.sqrt_info, self.mean, e)
        if self.kind == RobustKind.MAX_MIXTURE:
            return residual_max_mixture(self.mixture, e)
        if self.kind == RobustKind.SUM_MIXTURE:
            return residual_sum_mixture(self.mixture, e)
        if self.kind == RobustKind.DCS:
            return residual_dcs(self.sqrt_info, e, self.dcs_phi)
        raise ValueError(f"unknown robust kind {self.kind!r}")
