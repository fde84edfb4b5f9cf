"""Gaussian mixture error models: representation, EM fitting, scoring.

The mixture parametrization follows the square-root information form used
throughout this package: each component stores an upper-triangular matrix
``sqrt_info`` with ``sqrt_info.T @ sqrt_info = inv(covariance)``.  Component
densities are evaluated without the ``(2*pi)**(-d/2)`` normalization; the
constant cancels in responsibilities and only matters for information
criteria, which use the fully normalized likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "GaussianComponent",
    "GaussianMixture",
    "EmConfig",
    "Responsibilities",
    "EmDiagnostics",
    "component_density",
    "e_step",
    "m_step",
    "fit_em",
    "default_init",
    "information_criterion",
    "free_parameter_count",
    "total_log_likelihood",
    "mixture_to_text",
    "mixture_from_text",
]

_WEIGHT_SUM_TOL = 1e-9


def _as_matrix(a) -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"sqrt_info must be square, got shape {m.shape}")
    return m


def _check_sqrt_info(m: np.ndarray) -> None:
    if not np.all(np.isfinite(m)):
        raise ValueError("sqrt_info contains non-finite entries")
    if np.any(np.tril(m, -1) != 0.0):
        raise ValueError("sqrt_info must be upper-triangular")
    if np.any(np.diag(m) <= 0.0):
        raise ValueError("sqrt_info diagonal must be strictly positive")


@dataclass
class GaussianComponent:
    """One mixture component: weight, mean and square-root information."""

    weight: float
    mean: np.ndarray
    sqrt_info: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.sqrt_info = _as_matrix(self.sqrt_info)
        if self.mean.shape[0] != self.sqrt_info.shape[0]:
            raise ValueError("mean and sqrt_info dimensions disagree")
        if not (0.0 < self.weight <= 1.0):
            raise ValueError(f"weight must be in (0, 1], got {self.weight}")
        _check_sqrt_info(self.sqrt_info)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def log_det_sqrt_info(self) -> float:
        return float(np.sum(np.log(np.diag(self.sqrt_info))))

    @property
    def log_constant(self) -> float:
        """log(weight * det(sqrt_info)), the component's constant term."""
        return math.log(self.weight) + self.log_det_sqrt_info

    def whitened(self, e: np.ndarray) -> np.ndarray:
        return self.sqrt_info @ (np.asarray(e, dtype=float) - self.mean)


@dataclass
class GaussianMixture:
    """Ordered list of components sharing one error-space dimension."""

    components: list[GaussianComponent]

    def __post_init__(self) -> None:
        if not self.components:
            raise ValueError("mixture needs at least one component")
        d = self.components[0].dim
        if any(c.dim != d for c in self.components):
            raise ValueError("all components must share the same dimension")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > _WEIGHT_SUM_TOL:
            raise ValueError(f"component weights sum to {total}, expected 1")

    @property
    def dimension(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def log_constants(self) -> np.ndarray:
        return np.array([c.log_constant for c in self.components])

    def log_component_densities(self, errors: np.ndarray) -> np.ndarray:
        """Per-sample, per-component log of the unnormalized density.

        ``errors`` is (m, d); the result is (m, n) with entry
        ``log(w_j det(I_j) ) - 0.5 * ||I_j (e_i - mu_j)||^2``.
        """
        errors = np.atleast_2d(np.asarray(errors, dtype=float))
        if errors.shape[1] != self.dimension:
            raise ValueError(
                f"errors have dimension {errors.shape[1]}, mixture has {self.dimension}"
            )
        cols = []
        for comp in self.components:
            y = (errors - comp.mean) @ comp.sqrt_info.T
            quad = np.einsum("ij,ij->i", y, y)
            cols.append(comp.log_constant - 0.5 * quad)
        return np.stack(cols, axis=1)


@dataclass
class EmConfig:
    """Convergence and regularization knobs for EM fitting."""

    max_iterations: int = 100
    rel_tolerance: float = 1e-6
    cov_regularizer: float = 1e-9
    min_weight: float = 1e-8

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.rel_tolerance <= 0:
            raise ValueError("rel_tolerance must be positive")
        if self.cov_regularizer < 0:
            raise ValueError("cov_regularizer must be non-negative")
        if self.min_weight < 0:
            raise ValueError("min_weight must be non-negative")


@dataclass
class Responsibilities:
    """Posterior assignment matrix alpha (m, n); rows sum to one.

    ``uniform_rows`` lists samples whose component densities all underflowed
    and were assigned uniform responsibilities.
    """

    matrix: np.ndarray
    uniform_rows: list[int] = field(default_factory=list)


@dataclass
class EmDiagnostics:
    iterations: int
    final_loglik: float
    loglik_trace: list[float]
    converged: bool
    component_resets: int = 0
    uniform_rows: int = 0


def component_density(comp: GaussianComponent, e) -> float:
    """Unnormalized Gaussian density ``w * det(I) * exp(-0.5 ||I (e-mu)||^2)``."""
    e = np.atleast_1d(np.asarray(e, dtype=float))
    if e.shape[0] != comp.dim:
        raise ValueError(f"error has dimension {e.shape[0]}, component has {comp.dim}")
    y = comp.whitened(e)
    return math.exp(comp.log_constant - 0.5 * float(y @ y))


def _prepare_errors(errors) -> np.ndarray:
    arr = np.asarray(errors, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("errors must be a non-empty (m, d) array")
    if not np.all(np.isfinite(arr)):
        raise ValueError("errors contain non-finite values")
    return arr


def _responsibilities_and_loglik(
    gmm: GaussianMixture, errors: np.ndarray
) -> tuple[np.ndarray, list[int], float]:
    """One density evaluation shared by the E-step and the likelihood."""
    logp = gmm.log_component_densities(errors)
    row_max = np.max(logp, axis=1)
    dead = ~np.isfinite(row_max)
    # log-sum-exp with the row maximum subtracted; dead rows handled below
    safe_max = np.where(dead, 0.0, row_max)
    shifted = np.exp(logp - safe_max[:, None])
    norm = np.sum(shifted, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = shifted / norm[:, None]
        lse = safe_max + np.log(norm)
    uniform_rows: list[int] = []
    if np.any(dead):
        uniform_rows = [int(i) for i in np.flatnonzero(dead)]
        alpha[dead] = 1.0 / gmm.n_components
    return alpha, uniform_rows, float(np.sum(lse))


def e_step(gmm: GaussianMixture, errors) -> Responsibilities:
    """Posterior responsibilities via log-sum-exp over component densities."""
    errors = _prepare_errors(errors)
    alpha, uniform_rows, _ = _responsibilities_and_loglik(gmm, errors)
    return Responsibilities(alpha, uniform_rows)


def _m_step_impl(
    errors: np.ndarray,
    alpha: np.ndarray,
    cfg: EmConfig,
    fallback: GaussianMixture | None,
) -> tuple[GaussianMixture, list[int]]:
    m, d = errors.shape
    n = alpha.shape[1]
    if m < n:
        raise ValueError(f"need at least {n} samples to fit {n} components, got {m}")

    mass = alpha.sum(axis=0)
    resets: list[int] = []
    components: list[GaussianComponent] = []
    weights = np.maximum(mass / m, cfg.min_weight)
    weights = weights / weights.sum()

    for j in range(n):
        if mass[j] < m * 1e-12:
            if fallback is None:
                raise ValueError(
                    f"component {j} received no responsibility mass and no "
                    "fallback mixture was provided"
                )
            resets.append(j)
            fb = fallback.components[j]
            components.append(GaussianComponent(weights[j], fb.mean.copy(), fb.sqrt_info.copy()))
            continue
        mu = (alpha[:, j] @ errors) / mass[j]
        diff = errors - mu
        cov = (diff.T * alpha[:, j]) @ diff / mass[j]
        cov = cov + cfg.cov_regularizer * np.eye(d)
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(np.linalg.inv(cov))
        except np.linalg.LinAlgError as exc:
            raise ValueError(
                f"component {j} covariance is not positive definite after "
                f"regularization ({cfg.cov_regularizer})"
            ) from exc
        components.append(GaussianComponent(weights[j], mu, chol.T))

    return GaussianMixture(components), resets


def m_step(
    errors,
    resp: Responsibilities,
    cfg: EmConfig,
    fallback: GaussianMixture | None = None,
) -> GaussianMixture:
    """Weighted moment update of weights, means and square-root information.

    A component whose responsibility column carries essentially no mass is
    reset to the corresponding ``fallback`` component (the component count
    stays fixed).
    """
    errors = _prepare_errors(errors)
    mixture, _ = _m_step_impl(errors, np.asarray(resp.matrix, dtype=float), cfg, fallback)
    return mixture


def total_log_likelihood(gmm: GaussianMixture, errors, normalized: bool = False) -> float:
    """Sum over samples of the mixture log density.

    With ``normalized=True`` the proper Gaussian constant is included, which
    is required whenever the value is compared across different dimensions
    or used in an information criterion.
    """
    errors = _prepare_errors(errors)
    logp = gmm.log_component_densities(errors)
    row_max = np.max(logp, axis=1)
    safe_max = np.where(np.isfinite(row_max), row_max, 0.0)
    lse = safe_max + np.log(np.sum(np.exp(logp - safe_max[:, None]), axis=1))
    total = float(np.sum(lse))
    if normalized:
        m, d = errors.shape
        total -= 0.5 * m * d * math.log(2.0 * math.pi)
    return total


def fit_em(
    errors,
    init: GaussianMixture,
    cfg: EmConfig | None = None,
) -> tuple[GaussianMixture, EmDiagnostics]:
    """Alternate E- and M-steps from ``init`` until the log-likelihood stalls.

    Returns the fitted mixture and diagnostics including the log-likelihood
    trace, which is non-decreasing up to the covariance regularization.
    """
    cfg = cfg or EmConfig()
    errors = _prepare_errors(errors)
    if errors.shape[1] != init.dimension:
        raise ValueError(
            f"errors have dimension {errors.shape[1]}, init mixture has {init.dimension}"
        )
    if init.dimension == 1:
        return _fit_em_1d(errors, init, cfg)
    return _fit_em_generic(errors, init, cfg)


def _fit_em_generic(
    errors: np.ndarray, init: GaussianMixture, cfg: EmConfig
) -> tuple[GaussianMixture, EmDiagnostics]:
    current = init
    trace: list[float] = []
    resets = 0
    uniform = 0
    converged = False
    iterations = 0

    for iterations in range(1, cfg.max_iterations + 1):
        alpha, uniform_rows, loglik = _responsibilities_and_loglik(current, errors)
        uniform += len(uniform_rows)
        trace.append(loglik)
        if len(trace) >= 2:
            prev = trace[-2]
            rel = abs(loglik - prev) / max(1.0, abs(prev))
            if rel < cfg.rel_tolerance:
                converged = True
                break
        current, reset_idx = _m_step_impl(errors, alpha, cfg, init)
        resets += len(reset_idx)

    if not converged:
        trace.append(total_log_likelihood(current, errors))
    return current, EmDiagnostics(
        iterations=iterations,
        final_loglik=trace[-1],
        loglik_trace=trace,
        converged=converged,
        component_resets=resets,
        uniform_rows=uniform,
    )


def _fit_em_1d(
    errors: np.ndarray, init: GaussianMixture, cfg: EmConfig
) -> tuple[GaussianMixture, EmDiagnostics]:
    """Array-based EM for scalar errors; same update rules as the generic path.

    Avoids per-iteration component objects and matrix factorizations, which
    dominates the runtime when the fit is repeated every estimator step.
    """
    e = errors[:, 0]
    m = e.shape[0]
    n = init.n_components
    if m < n:
        raise ValueError(f"need at least {n} samples to fit {n} components, got {m}")

    w = init.weights.copy()
    mu = init.means[:, 0].copy()
    u = np.array([c.sqrt_info[0, 0] for c in init.components])
    init_mu, init_u = mu.copy(), u.copy()

    def densities():
        logp = (np.log(w) + np.log(u))[None, :] - 0.5 * ((e[:, None] - mu[None, :]) * u[None, :]) ** 2
        row_max = np.max(logp, axis=1)
        dead = ~np.isfinite(row_max)
        safe = np.where(dead, 0.0, row_max)
        shifted = np.exp(logp - safe[:, None])
        norm = np.sum(shifted, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = shifted / norm[:, None]
            lse = safe + np.log(norm)
        if np.any(dead):
            alpha[dead] = 1.0 / n
        return alpha, int(np.sum(dead)), float(np.sum(lse))

    trace: list[float] = []
    resets = 0
    uniform = 0
    converged = False
    iterations = 0

    for iterations in range(1, cfg.max_iterations + 1):
        alpha, n_dead, loglik = densities()
        uniform += n_dead
        trace.append(loglik)
        if len(trace) >= 2:
            prev = trace[-2]
            if abs(loglik - prev) / max(1.0, abs(prev)) < cfg.rel_tolerance:
                converged = True
                break
        mass = alpha.sum(axis=0)
        weights = np.maximum(mass / m, cfg.min_weight)
        w = weights / weights.sum()
        low = mass < m * 1e-12
        safe_mass = np.where(low, 1.0, mass)
        mu_new = (alpha * e[:, None]).sum(axis=0) / safe_mass
        var = (alpha * (e[:, None] - mu_new[None, :]) ** 2).sum(axis=0) / safe_mass
        var = var + cfg.cov_regularizer
        if np.any(low):
            resets += int(np.sum(low))
            mu_new = np.where(low, init_mu, mu_new)
            var = np.where(low, 1.0 / init_u**2, var)
        if np.any(var <= 0):
            raise ValueError(
                f"component variance not positive after regularization ({cfg.cov_regularizer})"
            )
        mu = mu_new
        u = 1.0 / np.sqrt(var)

    if not converged:
        _, _, final = densities()
        trace.append(final)

    comps = [GaussianComponent(w[j], np.array([mu[j]]), np.array([[u[j]]])) for j in range(n)]
    return GaussianMixture(comps), EmDiagnostics(
        iterations=iterations,
        final_loglik=trace[-1],
        loglik_trace=trace,
        converged=converged,
        component_resets=resets,
        uniform_rows=uniform,
    )


def default_init(base_sqrt_info, n: int, ratio: float = 10.0) -> GaussianMixture:
    """Equal-weight, zero-mean mixture with geometrically widening components.

    Component ``j`` (1-based) gets ``base_sqrt_info * ratio**(1-j)``, so with
    the default ratio the standard deviation grows by a factor of ten per
    component.
    """
    if n < 1:
        raise ValueError("need at least one component")
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    base = _as_matrix(base_sqrt_info)
    _check_sqrt_info(base)
    d = base.shape[0]
    comps = [
        GaussianComponent(1.0 / n, np.zeros(d), base * ratio ** (1 - j))
        for j in range(1, n + 1)
    ]
    return GaussianMixture(comps)


def free_parameter_count(n: int, d: int) -> int:
    """Free parameters of an n-component, d-dimensional mixture."""
    return n * (1 + d + d * (d + 1) // 2) - 1


def information_criterion(gmm: GaussianMixture, errors, kind: str = "bic") -> float:
    """BIC or AIC of the mixture on the given errors (normalized likelihood)."""
    errors = _prepare_errors(errors)
    m = errors.shape[0]
    k = free_parameter_count(gmm.n_components, gmm.dimension)
    loglik = total_log_likelihood(gmm, errors, normalized=True)
    kind = kind.lower()
    if kind == "bic":
        return k * math.log(m) - 2.0 * loglik
    if kind == "aic":
        return 2.0 * k - 2.0 * loglik
    raise ValueError(f"unknown criterion {kind!r}, expected 'bic' or 'aic'")


def mixture_to_text(gmm: GaussianMixture) -> str:
    """Serialize as one line per component: weight, mean, row-major sqrt_info."""
    lines = []
    for c in gmm.components:
        fields = [c.weight, *c.mean.tolist(), *c.sqrt_info.flatten().tolist()]
        lines.append(" ".join(format(v, ".17g") for v in fields))
    return "\n".join(lines) + "\n"


def mixture_from_text(text: str) -> GaussianMixture:
    """Parse the output of :func:`mixture_to_text`."""
    comps = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        values = [float(tok) for tok in line.split()]
        # 1 + d + d*d fields per line
        d = int(round((-1 + math.sqrt(1 + 4 * (len(values) - 1))) / 2))
        if 1 + d + d * d != len(values):
            raise ValueError(f"line {lineno}: {len(values)} fields do not encode a component")
        w = values[0]
        mean = np.array(values[1 : 1 + d])
        info = np.array(values[1 + d :]).reshape(d, d)
        comps.append(GaussianComponent(w, mean, info))
    if not comps:
        raise ValueError("no components found")
    return GaussianMixture(comps)
