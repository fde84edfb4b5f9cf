"""Nonlinear least-squares minimization with Levenberg-Marquardt damping.

The public surface is a block-structured problem: named parameter blocks plus
residual blocks given as callbacks that return the residual vector and one
Jacobian per involved parameter block.  Solving assembles a stacked Jacobian
and iterates damped normal-equation steps; cost is 0.5 * ||r||^2.

The LM driver is generic over the linear-system backend.  The block API uses
a dense backend; the sliding-window graph plugs in a banded backend built
from a fixed Jacobian sparsity pattern, which keeps long replays (thousands
of states revisited every step) tractable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "LeastSquaresProblem",
    "SolverConfig",
    "SolveReport",
    "NumericFailure",
    "DenseSystem",
    "BandedPattern",
    "solve",
    "minimize",
    "check_jacobian",
]

_LAMBDA_MAX = 1e12
_CHOLESKY_JITTER = 1e-10


class NumericFailure(RuntimeError):
    """Raised when optimization cannot proceed due to non-finite numerics."""


@dataclass
class SolverConfig:
    max_iterations: int = 50
    gradient_tolerance: float = 1e-8
    parameter_tolerance: float = 1e-12
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0

    def __post_init__(self) -> None:
        for name in ("max_iterations", "gradient_tolerance", "parameter_tolerance",
                     "initial_lambda", "lambda_up", "lambda_down"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str  # converged | max_iter | stalled | numeric_failure
    cost_trace: list[float] = field(default_factory=list)
    message: str = ""


# ---------------------------------------------------------------------------
# linear-system backends
# ---------------------------------------------------------------------------


class DenseSystem:
    """Normal equations from a dense Jacobian."""

    def __init__(self, jacobian: np.ndarray) -> None:
        self.J = jacobian
        self._H: Optional[np.ndarray] = None

    def gradient(self, r: np.ndarray) -> np.ndarray:
        return self.J.T @ r

    def solve_damped(self, g: np.ndarray, lam: float) -> Optional[np.ndarray]:
        if self._H is None:
            self._H = self.J.T @ self.J
        n = g.shape[0]
        A = self._H + lam * np.eye(n)
        for jitter in (0.0, _CHOLESKY_JITTER):
            try:
                c, low = scipy.linalg.cho_factor(A + jitter * np.eye(n), check_finite=False)
            except (scipy.linalg.LinAlgError, ValueError):
                continue
            dx = scipy.linalg.cho_solve((c, low), -g, check_finite=False)
            if np.all(np.isfinite(dx)):
                return dx
        return None


class BandedPattern:
    """Fixed sparsity pattern of a Jacobian given as triplets (rows, cols).

    Rows group into residual entries; the normal-equations matrix then only
    couples columns appearing in a common row, which for time-ordered states
    yields a fixed bandwidth.  ``system(values)`` binds one set of Jacobian
    values to the pattern.
    """

    def __init__(self, rows: np.ndarray, cols: np.ndarray, n_rows: int, n_params: int) -> None:
        self.rows = rows
        self.cols = cols
        self.n_rows = n_rows
        self.n_params = n_params

        order = np.argsort(rows, kind="stable")
        counts = np.bincount(rows, minlength=n_rows)
        if counts.size and counts.max() > 8:
            raise ValueError("banded backend supports at most 8 entries per residual row")

        # bucket rows by entry count and emit all unordered index pairs
        pair_a: list[np.ndarray] = []
        pair_b: list[np.ndarray] = []
        start = np.concatenate(([0], np.cumsum(counts)))
        for c in range(1, int(counts.max(initial=0)) + 1):
            rows_c = np.flatnonzero(counts == c)
            if rows_c.size == 0:
                continue
            idx = order[start[rows_c][:, None] + np.arange(c)[None, :]]
            for a in range(c):
                for b in range(a, c):
                    pair_a.append(idx[:, a])
                    pair_b.append(idx[:, b])
        if pair_a:
            pa = np.concatenate(pair_a)
            pb = np.concatenate(pair_b)
        else:
            pa = np.zeros(0, dtype=np.intp)
            pb = np.zeros(0, dtype=np.intp)
        ca = cols[pa]
        cb = cols[pb]
        swap = ca > cb
        ca2 = np.where(swap, cb, ca)
        cb2 = np.where(swap, ca, cb)
        self.bandwidth = int(np.max(cb2 - ca2, initial=0))
        self._pair_a = pa
        self._pair_b = pb
        # upper banded storage: ab[u + i - j, j] = H[i, j] for i <= j
        self._flat = (self.bandwidth + ca2 - cb2) * n_params + cb2
        self._ab_size = (self.bandwidth + 1) * n_params

    def system(self, values: np.ndarray) -> "BandedSystem":
        return BandedSystem(self, values)


class BandedSystem:
    """Normal equations accumulated into symmetric banded storage."""

    def __init__(self, pattern: BandedPattern, values: np.ndarray) -> None:
        self.pattern = pattern
        self.values = values
        self._ab: Optional[np.ndarray] = None

    def gradient(self, r: np.ndarray) -> np.ndarray:
        p = self.pattern
        return np.bincount(
            p.cols, weights=self.values * r[p.rows], minlength=p.n_params
        )

    def solve_damped(self, g: np.ndarray, lam: float) -> Optional[np.ndarray]:
        p = self.pattern
        if self._ab is None:
            contrib = self.values[p._pair_a] * self.values[p._pair_b]
            flat = np.bincount(p._flat, weights=contrib, minlength=p._ab_size)
            self._ab = flat.reshape(p.bandwidth + 1, p.n_params)
        ab = self._ab.copy()
        ab[-1, :] += lam
        try:
            dx = scipy.linalg.solveh_banded(ab, -g, lower=False, check_finite=False)
        except (scipy.linalg.LinAlgError, ValueError):
            return None
        if not np.all(np.isfinite(dx)):
            return None
        return dx


# ---------------------------------------------------------------------------
# block-structured problem
# ---------------------------------------------------------------------------


@dataclass
class _ParameterBlock:
    name: str
    value: np.ndarray
    normalize: Optional[Callable[[np.ndarray], np.ndarray]] = None


@dataclass
class _ResidualBlock:
    fn: Callable
    block_indices: list[int]
    dim: int


class LeastSquaresProblem:
    """Parameter blocks plus residual callbacks over subsets of them.

    A residual callback receives the current values of its parameter blocks
    (one 1-D array per block, in registration order) and must return
    ``(residual, [jac_per_block])`` where ``jac_per_block[k]`` has shape
    ``(len(residual), len(block_k))``.
    """

    def __init__(self) -> None:
        self._blocks: list[_ParameterBlock] = []
        self._by_name: dict[str, int] = {}
        self._residuals: list[_ResidualBlock] = []

    def add_parameter_block(self, name: str, value, normalize=None) -> int:
        if name in self._by_name:
            raise ValueError(f"duplicate parameter block {name!r}")
        v = np.atleast_1d(np.asarray(value, dtype=float)).copy()
        self._blocks.append(_ParameterBlock(name, v, normalize))
        idx = len(self._blocks) - 1
        self._by_name[name] = idx
        return idx

    def add_residual_block(self, fn: Callable, blocks: Sequence[int | str], dim: int) -> None:
        indices = [self._by_name[b] if isinstance(b, str) else int(b) for b in blocks]
        for i in indices:
            if not (0 <= i < len(self._blocks)):
                raise ValueError(f"residual references unknown parameter block {i}")
        if len(set(indices)) != len(indices):
            raise ValueError("residual block references a parameter block twice")
        if dim < 1:
            raise ValueError("residual dimension must be >= 1")
        self._residuals.append(_ResidualBlock(fn, indices, dim))

    def value(self, name: str) -> np.ndarray:
        return self._blocks[self._by_name[name]].value

    @property
    def num_parameters(self) -> int:
        return sum(b.value.shape[0] for b in self._blocks)

    @property
    def num_residuals(self) -> int:
        return sum(r.dim for r in self._residuals)

    # -- flat-vector plumbing used by the LM driver ------------------------

    def _offsets(self) -> list[int]:
        offsets = []
        pos = 0
        for b in self._blocks:
            offsets.append(pos)
            pos += b.value.shape[0]
        return offsets

    def _get_state(self) -> np.ndarray:
        return np.concatenate([b.value for b in self._blocks]) if self._blocks else np.zeros(0)

    def _set_state(self, x: np.ndarray) -> None:
        offsets = self._offsets()
        for b, off in zip(self._blocks, offsets):
            n = b.value.shape[0]
            v = x[off : off + n]
            if b.normalize is not None:
                v = b.normalize(v)
            b.value[...] = v

    def _evaluate(self, x: np.ndarray):
        """Stacked residual and dense Jacobian at state ``x``."""
        offsets = self._offsets()
        r = np.empty(self.num_residuals)
        J = np.zeros((self.num_residuals, self.num_parameters))
        row0 = 0
        for rb_index, rb in enumerate(self._residuals):
            values = []
            for bi in rb.block_indices:
                off = offsets[bi]
                values.append(x[off : off + self._blocks[bi].value.shape[0]])
            res, jacs = rb.fn(*values)
            res = np.atleast_1d(np.asarray(res, dtype=float))
            if res.shape[0] != rb.dim:
                raise ValueError(
                    f"residual block {rb_index} returned dimension {res.shape[0]}, declared {rb.dim}"
                )
            if not np.all(np.isfinite(res)):
                raise NumericFailure(f"non-finite residual in block {rb_index}")
            r[row0 : row0 + rb.dim] = res
            for bi, jac in zip(rb.block_indices, jacs):
                jac = np.atleast_2d(np.asarray(jac, dtype=float))
                if not np.all(np.isfinite(jac)):
                    raise NumericFailure(f"non-finite Jacobian in block {rb_index}")
                bn = self._blocks[bi].value.shape[0]
                if jac.shape != (rb.dim, bn):
                    raise ValueError(
                        f"residual block {rb_index}: Jacobian shape {jac.shape}, "
                        f"expected {(rb.dim, bn)}"
                    )
                J[row0 : row0 + rb.dim, offsets[bi] : offsets[bi] + bn] = jac
            row0 += rb.dim
        return r, DenseSystem(J)


# ---------------------------------------------------------------------------
# the LM driver
# ---------------------------------------------------------------------------


def minimize(
    x0: np.ndarray,
    evaluate: Callable,
    config: SolverConfig,
    apply_state: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> tuple[np.ndarray, SolveReport]:
    """Levenberg-Marquardt core shared by the block API and the graph module.

    ``evaluate(x)`` returns ``(r, system)`` where the system provides
    ``gradient(r)`` and ``solve_damped(g, lam)``.  ``apply_state`` maps a raw
    updated vector onto its manifold (e.g. angle wrapping).
    """
    x = np.asarray(x0, dtype=float).copy()
    if apply_state is not None:
        x = apply_state(x)

    try:
        r, system = evaluate(x)
    except NumericFailure as exc:
        return x, SolveReport(0, math.nan, math.nan, "numeric_failure", [], str(exc))
    if not np.all(np.isfinite(r)):
        return x, SolveReport(
            0, math.nan, math.nan, "numeric_failure", [], "non-finite residual at initial point"
        )

    cost = 0.5 * float(r @ r)
    trace = [cost]
    initial_cost = cost
    lam = config.initial_lambda
    iterations = 0
    termination = "max_iter"
    message = ""

    while iterations < config.max_iterations:
        g = system.gradient(r)
        if float(np.max(np.abs(g), initial=0.0)) < config.gradient_tolerance:
            termination = "converged"
            message = "gradient below tolerance"
            break

        stepped = False
        while lam <= _LAMBDA_MAX:
            dx = system.solve_damped(g, lam)
            if dx is None:
                lam *= config.lambda_up
                continue
            x_new = x + dx
            if apply_state is not None:
                x_new = apply_state(x_new)
            try:
                r_new, system_new = evaluate(x_new)
            except NumericFailure:
                lam *= config.lambda_up
                continue
            cost_new = 0.5 * float(r_new @ r_new)
            if math.isfinite(cost_new) and cost_new <= cost:
                x, r, system = x_new, r_new, system_new
                cost = cost_new
                trace.append(cost)
                lam = max(lam / config.lambda_down, 1e-15)
                iterations += 1
                stepped = True
                if float(np.linalg.norm(dx)) < config.parameter_tolerance:
                    termination = "converged"
                    message = "step below tolerance"
                break
            lam *= config.lambda_up

        if not stepped:
            termination = "stalled"
            message = "no acceptable step found"
            break
        if termination == "converged":
            break

    return x, SolveReport(iterations, initial_cost, cost, termination, trace, message)


def solve(problem: LeastSquaresProblem, config: SolverConfig | None = None) -> SolveReport:
    """Minimize the problem in place; parameters hold the solution on return."""
    config = config or SolverConfig()
    if not problem._residuals:
        raise ValueError("problem has no residual blocks")

    def evaluate(x):
        return problem._evaluate(x)

    def apply_state(x):
        offsets = problem._offsets()
        out = x.copy()
        for b, off in zip(problem._blocks, offsets):
            if b.normalize is not None:
                nb = b.value.shape[0]
                out[off : off + nb] = b.normalize(out[off : off + nb])
        return out

    x, report = minimize(problem._get_state(), evaluate, config, apply_state)
    if report.termination != "numeric_failure":
        problem._set_state(x)
    return report


def check_jacobian(fn: Callable, point: Sequence, step: float = 1e-5) -> float:
    """Max relative deviation between the callback's Jacobians and central
    finite differences at ``point`` (a list of block values)."""
    if step <= 0:
        raise ValueError("step must be positive")
    values = [np.atleast_1d(np.asarray(p, dtype=float)).copy() for p in point]
    _, jacs = fn(*values)
    worst = 0.0
    for bi, val in enumerate(values):
        analytic = np.atleast_2d(np.asarray(jacs[bi], dtype=float))
        for k in range(val.shape[0]):
            bumped = [v.copy() for v in values]
            bumped[bi][k] += step
            r_plus, _ = fn(*bumped)
            bumped[bi][k] -= 2 * step
            r_minus, _ = fn(*bumped)
            numeric = (np.asarray(r_plus, dtype=float) - np.asarray(r_minus, dtype=float)) / (2 * step)
            denom = np.maximum(1.0, np.abs(numeric))
            dev = np.max(np.abs(analytic[:, k] - numeric) / denom)
            worst = max(worst, float(dev))
    return worst
