"""Sliding-window factor graph estimation with self-tuning mixture models.

States are planar poses (x, y, theta), optionally extended by a receiver
clock (bias, drift) when pseudorange measurements are present.  Each time
step appends a node initialized by dead reckoning, drops everything older
than the window length, optionally refits the (pseudo) range error mixture
with EM on the current window errors, and re-optimizes the window.

Factor evaluation is vectorized per factor class; the window problem is
handed to the shared Levenberg-Marquardt driver with a sparse Jacobian.
Single-factor residual callbacks (``odometry_residual`` etc.) expose the
same math for use with :class:`~mixfusion.solver.LeastSquaresProblem` and
for finite-difference checks.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import mixture as mix
from .data import Dataset, MeasurementRecord
from .robust import SUM_MIXTURE_LOG_FLOOR, RobustKind, RobustModel
from .solver import BandedPattern, SolverConfig, minimize

__all__ = [
    "EstimatorConfig",
    "EstimatorOutput",
    "SlidingWindowGraph",
    "run",
    "wrap_angle",
    "error_odometry",
    "error_range",
    "error_pseudorange",
    "error_cced",
    "odometry_residual",
    "range_residual",
    "pseudorange_residual",
    "cced_residual",
    "pose_prior_residual",
]

_MIN_RANGE_DIST = 1e-9


def wrap_angle(a):
    """Wrap angles to (-pi, pi]; works on scalars and arrays."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi)
    w = np.where(w <= 0.0, w + 2.0 * np.pi, w) - np.pi
    if w.ndim == 0:
        return float(w)
    return w


# ---------------------------------------------------------------------------
# raw error functions
# ---------------------------------------------------------------------------


def error_odometry(pose_t, pose_next, z, dt: float) -> np.ndarray:
    """Body-frame velocity mismatch between two poses and a measurement.

    The pose increment is predicted by first-order Euler integration of the
    measured body velocities; the difference to the actual increment is
    expressed in velocity units (divided by dt) so the odometry sigmas in
    per-second units whiten it directly.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x0, y0, th0 = pose_t
    x1, y1, th1 = pose_next
    vx, vy, om = z
    c, s = math.cos(th0), math.sin(th0)
    ex = (x1 - x0) / dt - (c * vx - s * vy)
    ey = (y1 - y0) / dt - (s * vx + c * vy)
    eth = wrap_angle(th1 - th0 - om * dt) / dt
    return np.array([ex, ey, eth])


def error_range(pose, z: float, anchor) -> float:
    """Predicted minus measured distance to a fixed anchor."""
    dx = pose[0] - anchor[0]
    dy = pose[1] - anchor[1]
    dist = math.hypot(dx, dy)
    if dist < _MIN_RANGE_DIST:
        dist = _MIN_RANGE_DIST
    return dist - z


def error_pseudorange(pose, clock, z: float, anchor) -> float:
    """Range error shifted by the receiver clock bias (in meters)."""
    return error_range(pose, z, anchor) + clock[0]


def error_cced(clock_t, clock_next, dt: float) -> np.ndarray:
    """Constant-drift clock model error: bias prediction and drift change."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    b0, d0 = clock_t
    b1, d1 = clock_next
    return np.array([b1 - (b0 + d0 * dt), d1 - d0])


# ---------------------------------------------------------------------------
# noise-model slot shared by all factors of one measurement class
# ---------------------------------------------------------------------------


@dataclass
class _NoiseSlot:
    kind: RobustKind
    mixture: Optional[mix.GaussianMixture] = None
    dcs_phi: float = 1.0

    def require_mixture(self) -> mix.GaussianMixture:
        if self.mixture is None:
            raise ValueError(f"{self.kind} slot has no mixture")
        if self.mixture.dimension != 1:
            raise ValueError("range-class mixtures must be one-dimensional")
        return self.mixture

    def mixture_params(self):
        """(sqrt_info, mean, log_const) arrays for the 1-D mixture."""
        m = self.require_mixture()
        u = np.array([c.sqrt_info[0, 0] for c in m.components])
        mu = np.array([c.mean[0] for c in m.components])
        log_c = m.log_constants
        return u, mu, log_c


def _scalar_mixture_rows(kind: RobustKind) -> int:
    return 2 if kind == RobustKind.MAX_MIXTURE else 1


# ---------------------------------------------------------------------------
# vectorized factor banks
# ---------------------------------------------------------------------------


class _Bank:
    """Append-only factor store with a moving head for the sliding window."""

    def __init__(self) -> None:
        self.ts: list[float] = []
        self.head = 0

    def add_time(self, t: float) -> None:
        self.ts.append(t)

    def drop_before(self, cutoff: float) -> None:
        while self.head < len(self.ts) and self.ts[self.head] < cutoff:
            self.head += 1

    @property
    def n_active(self) -> int:
        return len(self.ts) - self.head

    def oldest_active(self) -> Optional[float]:
        if self.n_active == 0:
            return None
        return self.ts[self.head]

    def _arr(self, column: list[float]) -> np.ndarray:
        return np.asarray(column[self.head :], dtype=float)

    def _idx(self, column: list[int], head_node: int) -> np.ndarray:
        return np.asarray(column[self.head :], dtype=np.intp) - head_node


class _PosePriorBank(_Bank):
    def __init__(self) -> None:
        super().__init__()
        self.node: list[int] = []
        self.mean: list[tuple[float, float, float]] = []
        self.inv_sigma: list[tuple[float, float, float]] = []

    def add(self, t, node, mean, sigma) -> None:
        self.add_time(t)
        self.node.append(node)
        self.mean.append(tuple(mean))
        self.inv_sigma.append(tuple(1.0 / s for s in sigma))

    def prepare(self, head_node: int, stride: int, row0: int):
        m = self.n_active
        self._m = m
        if m == 0:
            return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp), 0
        rel = self._idx(self.node, head_node)
        self._mean = np.array(self.mean[self.head :], dtype=float)
        self._inv = np.array(self.inv_sigma[self.head :], dtype=float)
        base = rel * stride
        rows = row0 + 3 * np.arange(m, dtype=np.intp)[:, None] + np.array([0, 1, 2])
        cols = base[:, None] + np.array([0, 1, 2])
        self._cols = cols
        return rows.ravel(), cols.ravel(), 3 * m

    def evaluate(self, V: np.ndarray):
        if self._m == 0:
            return np.zeros(0), np.zeros(0)
        vals = V.reshape(-1)[self._cols.ravel()].reshape(self._m, 3)
        diff = vals - self._mean
        diff[:, 2] = wrap_angle(diff[:, 2])
        res = diff * self._inv
        return res.ravel(), self._inv.ravel()


class _ClockPriorBank(_Bank):
    def __init__(self) -> None:
        super().__init__()
        self.node: list[int] = []
        self.mean: list[tuple[float, float]] = []
        self.inv_sigma: list[tuple[float, float]] = []

    def add(self, t, node, mean, sigma) -> None:
        self.add_time(t)
        self.node.append(node)
        self.mean.append(tuple(mean))
        self.inv_sigma.append(tuple(1.0 / s for s in sigma))

    def prepare(self, head_node: int, stride: int, row0: int):
        m = self.n_active
        self._m = m
        if m == 0:
            return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp), 0
        rel = self._idx(self.node, head_node)
        self._mean = np.array(self.mean[self.head :], dtype=float)
        self._inv = np.array(self.inv_sigma[self.head :], dtype=float)
        cols = (rel * stride + 3)[:, None] + np.array([0, 1])
        rows = row0 + 2 * np.arange(m, dtype=np.intp)[:, None] + np.array([0, 1])
        self._cols = cols
        return rows.ravel(), cols.ravel(), 2 * m

    def evaluate(self, V: np.ndarray):
        if self._m == 0:
            return np.zeros(0), np.zeros(0)
        vals = V.reshape(-1)[self._cols.ravel()].reshape(self._m, 2)
        res = (vals - self._mean) * self._inv
        return res.ravel(), self._inv.ravel()


class _OdometryBank(_Bank):
    """Binary pose factors; 3 residual rows and 8 Jacobian entries each."""

    def __init__(self) -> None:
        super().__init__()
        self.node: list[int] = []
        self.dt: list[float] = []
        self.z: list[tuple[float, float, float]] = []
        self.inv_sigma: list[tuple[float, float, float]] = []

    def add(self, t, node_prev, dt, z, sigma) -> None:
        self.add_time(t)
        self.node.append(node_prev)
        self.dt.append(dt)
        self.z.append(tuple(z))
        self.inv_sigma.append(tuple(1.0 / s for s in sigma))

    def prepare(self, head_node: int, stride: int, row0: int):
        m = self.n_active
        self._m = m
        if m == 0:
            return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp), 0
        rel = self._idx(self.node, head_node)
        self._dt = self._arr(self.dt)
        zarr = np.array(self.z[self.head :], dtype=float)
        self._vx, self._vy, self._om = zarr[:, 0], zarr[:, 1], zarr[:, 2]
        inv = np.array(self.inv_sigma[self.head :], dtype=float)
        self._isx, self._isy, self._iso = inv[:, 0], inv[:, 1], inv[:, 2]
        b0 = rel * stride
        b1 = (rel + 1) * stride
        self._c0 = b0  # x0 column; y0 = +1, th0 = +2
        self._c1 = b1
        r = row0 + 3 * np.arange(m, dtype=np.intp)
        rows = np.stack([r, r, r, r + 1, r + 1, r + 1, r + 2, r + 2], axis=1)
        cols = np.stack(
            [b0, b0 + 2, b1, b0 + 1, b0 + 2, b1 + 1, b0 + 2, b1 + 2], axis=1
        )
        return rows.ravel(), cols.ravel(), 3 * m

    def evaluate(self, V: np.ndarray):
        if self._m == 0:
            return np.zeros(0), np.zeros(0)
        flat = V.reshape(-1)
        x0 = flat[self._c0]
        y0 = flat[self._c0 + 1]
        th0 = flat[self._c0 + 2]
        x1 = flat[self._c1]
        y1 = flat[self._c1 + 1]
        th1 = flat[self._c1 + 2]
        dt = self._dt
        c = np.cos(th0)
        s = np.sin(th0)
        wx = c * self._vx - s * self._vy
        wy = s * self._vx + c * self._vy
        ex = ((x1 - x0) / dt - wx) * self._isx
        ey = ((y1 - y0) / dt - wy) * self._isy
        eth = wrap_angle(th1 - th0 - self._om * dt) / dt * self._iso
        res = np.stack([ex, ey, eth], axis=1).ravel()
        inv_dt = 1.0 / dt
        vals = np.stack(
            [
                -self._isx * inv_dt,
                self._isx * wy,
                self._isx * inv_dt,
                -self._isy * inv_dt,
                -self._isy * wx,
                self._isy * inv_dt,
                -self._iso * inv_dt,
                self._iso * inv_dt,
            ],
            axis=1,
        ).ravel()
        return res, vals


class _CcedBank(_Bank):
    """Binary clock factors; 2 rows, 5 Jacobian entries each."""

    def __init__(self, sigma: tuple[float, float]) -> None:
        super().__init__()
        self.node: list[int] = []
        self.dt: list[float] = []
        self.inv_b = 1.0 / sigma[0]
        self.inv_d = 1.0 / sigma[1]

    def add(self, t, node_prev, dt) -> None:
        self.add_time(t)
        self.node.append(node_prev)
        self.dt.append(dt)

    def prepare(self, head_node: int, stride: int, row0: int):
        m = self.n_active
        self._m = m
        if m == 0:
            return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp), 0
        rel = self._idx(self.node, head_node)
        self._dt = self._arr(self.dt)
        b0 = rel * stride + 3
        b1 = (rel + 1) * stride + 3
        self._b0 = b0
        self._b1 = b1
        r = row0 + 2 * np.arange(m, dtype=np.intp)
        rows = np.stack([r, r, r, r + 1, r + 1], axis=1)
        cols = np.stack([b0, b0 + 1, b1, b0 + 1, b1 + 1], axis=1)
        return rows.ravel(), cols.ravel(), 2 * m

    def evaluate(self, V: np.ndarray):
        if self._m == 0:
            return np.zeros(0), np.zeros(0)
        flat = V.reshape(-1)
        b0 = flat[self._b0]
        d0 = flat[self._b0 + 1]
        b1 = flat[self._b1]
        d1 = flat[self._b1 + 1]
        e1 = (b1 - b0 - d0 * self._dt) * self.inv_b
        e2 = (d1 - d0) * self.inv_d
        res = np.stack([e1, e2], axis=1).ravel()
        ones = np.ones(self._m)
        vals = np.stack(
            [
                -self.inv_b * ones,
                -self.inv_b * self._dt,
                self.inv_b * ones,
                -self.inv_d * ones,
                self.inv_d * ones,
            ],
            axis=1,
        ).ravel()
        return res, vals


class _RangeBank(_Bank):
    """Unary (pseudo) range factors under a shared class noise model.

    ``with_clock`` adds the receiver bias to the predicted range and one
    Jacobian entry per quadratic row.
    """

    def __init__(self, slot: _NoiseSlot, with_clock: bool) -> None:
        super().__init__()
        self.slot = slot
        self.with_clock = with_clock
        self.node: list[int] = []
        self.z: list[float] = []
        self.sigma: list[float] = []
        self.anchor: list[tuple[float, float]] = []

    def add(self, t, node, z, sigma, anchor) -> None:
        self.add_time(t)
        self.node.append(node)
        self.z.append(z)
        self.sigma.append(sigma)
        self.anchor.append(tuple(anchor))

    @property
    def rows_per_factor(self) -> int:
        return _scalar_mixture_rows(self.slot.kind)

    def prepare(self, head_node: int, stride: int, row0: int):
        m = self.n_active
        self._m = m
        if m == 0:
            return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp), 0
        rel = self._idx(self.node, head_node)
        self._z = self._arr(self.z)
        self._inv_sigma = 1.0 / self._arr(self.sigma)
        anch = np.array(self.anchor[self.head :], dtype=float)
        self._ax, self._ay = anch[:, 0], anch[:, 1]
        base = rel * stride
        self._cx = base
        self._cb = base + 3 if self.with_clock else None
        rpf = self.rows_per_factor
        quad = row0 + rpf * np.arange(m, dtype=np.intp) + (rpf - 1)
        npar = 3 if self.with_clock else 2
        rows = np.repeat(quad, npar).reshape(m, npar)
        if self.with_clock:
            cols = np.stack([base, base + 1, self._cb], axis=1)
        else:
            cols = np.stack([base, base + 1], axis=1)
        self._nrows = rpf * m
        return rows.ravel(), cols.ravel(), self._nrows

    def raw_errors(self, V: np.ndarray) -> np.ndarray:
        """Unwhitened errors (predicted minus measured) at the given state."""
        if self._m == 0:
            return np.zeros(0)
        flat = V.reshape(-1)
        dx = flat[self._cx] - self._ax
        dy = flat[self._cx + 1] - self._ay
        dist = np.hypot(dx, dy)
        e = np.maximum(dist, _MIN_RANGE_DIST) - self._z
        if self.with_clock:
            e = e + flat[self._cb]
        return e

    def evaluate(self, V: np.ndarray):
        if self._m == 0:
            return np.zeros(0), np.zeros(0)
        flat = V.reshape(-1)
        dx = flat[self._cx] - self._ax
        dy = flat[self._cx + 1] - self._ay
        dist = np.hypot(dx, dy)
        tiny = dist < _MIN_RANGE_DIST
        if np.any(tiny):
            dx = np.where(tiny, _MIN_RANGE_DIST, dx)
            dy = np.where(tiny, 0.0, dy)
            dist = np.where(tiny, _MIN_RANGE_DIST, dist)
        e = dist - self._z
        if self.with_clock:
            e = e + flat[self._cb]
        gx = dx / dist
        gy = dy / dist

        kind = self.slot.kind
        if kind == RobustKind.GAUSSIAN:
            w = self._inv_sigma
            res = e * w
            de = w
        elif kind == RobustKind.DCS:
            w = self._inv_sigma
            chi2 = (e * w) ** 2
            phi = self.slot.dcs_phi
            scale = np.minimum(1.0, 2.0 * phi / (phi + chi2))
            res = scale * e * w
            # exact derivative; reduces to scale * w inside the inlier region
            de = np.where(
                chi2 <= phi, scale * w, scale * w * (phi - chi2) / (phi + chi2)
            )
        elif kind == RobustKind.MAX_MIXTURE:
            u, mu, log_c = self.slot.mixture_params()
            y = (e[:, None] - mu[None, :]) * u[None, :]
            costs = 0.5 * y * y - log_c[None, :]
            j = np.argmin(costs, axis=1)
            log_gamma = float(np.max(log_c))
            head = np.sqrt(np.maximum(0.0, 2.0 * (log_gamma - log_c[j])))
            quad = y[np.arange(self._m), j]
            res = np.stack([head, quad], axis=1).ravel()
            de = u[j]
        elif kind == RobustKind.SUM_MIXTURE:
            u, mu, log_c = self.slot.mixture_params()
            log_gamma_s = _logsumexp_1d(log_c)
            y = (e[:, None] - mu[None, :]) * u[None, :]
            terms = log_c[None, :] - log_gamma_s - 0.5 * y * y
            tmax = np.max(terms, axis=1)
            norm = np.sum(np.exp(terms - tmax[:, None]), axis=1)
            lse = tmax + np.log(norm)
            neg_log = np.maximum(-lse, SUM_MIXTURE_LOG_FLOOR)
            res = np.sqrt(2.0 * neg_log)
            alpha = np.exp(terms - lse[:, None])
            grad = np.sum(alpha * u[None, :] * y, axis=1)
            de = grad / res
        else:
            raise ValueError(f"unsupported range model {kind!r}")

        if self.with_clock:
            vals = np.stack([de * gx, de * gy, de], axis=1).ravel()
        else:
            vals = np.stack([de * gx, de * gy], axis=1).ravel()
        return res, vals


def _logsumexp_1d(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + math.log(float(np.sum(np.exp(x - m))))


# ---------------------------------------------------------------------------
# configuration and output
# ---------------------------------------------------------------------------


@dataclass
class EstimatorConfig:
    """Estimator behavior: window, noise models, EM and solver settings."""

    t_sw: float = 60.0
    range_model: str = "gaussian"  # gaussian | dcs | max-mixture | sum-mixture
    adaptive: bool = False
    components: int = 2
    sigma_ratio: float = 10.0
    base_sigma: Optional[float] = None  # default: sigma of the first range-class record
    dcs_phi: float = 1.0
    em: Optional[mix.EmConfig] = None
    em_warm_start: bool = False
    em_min_samples: int = 6
    solver: Optional[SolverConfig] = None
    prior_pose: Optional[tuple[float, float, float]] = None
    prior_sigma: tuple[float, float, float] = (0.5, 0.5, 0.2)
    prior_clock: tuple[float, float] = (0.0, 0.0)
    prior_clock_sigma: tuple[float, float] = (20.0, 1.0)
    cced_sigma: tuple[float, float] = (0.1, 0.009)

    def __post_init__(self) -> None:
        if self.t_sw <= 0:
            raise ValueError("t_sw must be positive")
        if self.components < 1:
            raise ValueError("components must be >= 1")
        if self.range_model not in ("gaussian", "dcs", "max-mixture", "sum-mixture"):
            raise ValueError(f"unknown range model {self.range_model!r}")

    def solver_config(self) -> SolverConfig:
        # warm-started windows are near-linear: start with tiny damping, stop
        # once the step is far below the trajectory-error resolution
        return self.solver or SolverConfig(
            max_iterations=12,
            gradient_tolerance=1e-2,
            parameter_tolerance=3e-7,
            initial_lambda=1e-8,
        )


@dataclass
class EstimatorOutput:
    """Per-step estimates plus diagnostics of one replay."""

    times: list[float] = field(default_factory=list)
    poses: list[np.ndarray] = field(default_factory=list)
    clocks: list[Optional[np.ndarray]] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)
    solve_ms: list[float] = field(default_factory=list)
    solver_failed: list[bool] = field(default_factory=list)
    window_nodes: list[int] = field(default_factory=list)
    window_max_age: list[float] = field(default_factory=list)
    mixtures: list[Optional[mix.GaussianMixture]] = field(default_factory=list)

    def trajectory(self) -> np.ndarray:
        """(k, 3) array of t, x, y."""
        return np.array([[t, p[0], p[1]] for t, p in zip(self.times, self.poses)])

    def to_csv(self, include_solve_ms: bool = True) -> str:
        def g(v) -> str:
            return format(v, ".17g")

        lines = ["t,x,y,theta,b,b_dot,cost,solve_ms"]
        for i, t in enumerate(self.times):
            p = self.poses[i]
            clk = self.clocks[i]
            b = g(clk[0]) if clk is not None else ""
            bd = g(clk[1]) if clk is not None else ""
            ms = g(self.solve_ms[i]) if include_solve_ms else ""
            lines.append(
                f"{g(t)},{g(p[0])},{g(p[1])},{g(p[2])},{b},{bd},{g(self.costs[i])},{ms}"
            )
        return "\n".join(lines) + "\n"

    def mixture_trace(self) -> str:
        """One line per adaptive step: t followed by serialized components."""
        lines = []
        for t, m in zip(self.times, self.mixtures):
            if m is None:
                continue
            fields = [format(t, ".17g")]
            for c in m.components:
                fields.append(format(c.weight, ".17g"))
                fields.extend(format(v, ".17g") for v in c.mean)
                fields.extend(format(v, ".17g") for v in c.sqrt_info.ravel())
            lines.append(" ".join(fields))
        return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------


class SlidingWindowGraph:
    """Time-indexed states and factors restricted to a sliding window."""

    def __init__(self, config: EstimatorConfig, with_clock: bool) -> None:
        self.config = config
        self.with_clock = with_clock
        self.stride = 5 if with_clock else 3
        self.node_ts: list[float] = []
        self.head = 0
        self._states = np.zeros((256, self.stride))
        self.n_nodes = 0

        kind = RobustKind(config.range_model)
        self.slot = _NoiseSlot(kind=kind, dcs_phi=config.dcs_phi)
        self._theta0: Optional[mix.GaussianMixture] = None
        self._base_sigma = config.base_sigma

        self.prior_pose_bank = _PosePriorBank()
        self.prior_clock_bank = _ClockPriorBank()
        self.odo_bank = _OdometryBank()
        self.range_bank = _RangeBank(self.slot, with_clock)
        self.cced_bank = _CcedBank(config.cced_sigma)
        self._banks: list[_Bank] = [
            self.prior_pose_bank,
            self.prior_clock_bank,
            self.odo_bank,
            self.range_bank,
            self.cced_bank,
        ]
        self.output = EstimatorOutput()
        self._last_em_mixture: Optional[mix.GaussianMixture] = None

    # -- state bookkeeping -------------------------------------------------

    def _ensure_capacity(self) -> None:
        if self.n_nodes >= self._states.shape[0]:
            grown = np.zeros((2 * self._states.shape[0], self.stride))
            grown[: self.n_nodes] = self._states[: self.n_nodes]
            self._states = grown

    def _push_node(self, t: float, state: np.ndarray) -> int:
        if self.node_ts and t <= self.node_ts[-1]:
            raise ValueError("node timestamps must be strictly increasing")
        self._ensure_capacity()
        self._states[self.n_nodes] = state
        self.node_ts.append(t)
        self.n_nodes += 1
        return self.n_nodes - 1

    def _mixture_base_sqrt_info(self) -> np.ndarray:
        if self._base_sigma is None:
            raise ValueError("mixture model requested but no base sigma known")
        return np.array([[1.0 / self._base_sigma]])

    def _init_mixture_if_needed(self, record_sigma: float) -> None:
        if self.slot.kind not in (RobustKind.MAX_MIXTURE, RobustKind.SUM_MIXTURE):
            return
        if self.slot.mixture is not None:
            return
        if self._base_sigma is None:
            self._base_sigma = record_sigma
        theta0 = mix.default_init(
            self._mixture_base_sqrt_info(), self.config.components, self.config.sigma_ratio
        )
        self._theta0 = theta0
        self.slot.mixture = theta0
        self._last_em_mixture = theta0

    def _em_config(self) -> mix.EmConfig:
        if self.config.em is not None:
            return self.config.em
        base = self._base_sigma if self._base_sigma is not None else 1.0
        return mix.EmConfig(cov_regularizer=1e-6 * base * base)

    # -- per-step pipeline ---------------------------------------------------

    def step(self, t: float, records: Sequence[MeasurementRecord]) -> None:
        """Process the measurements of one time step and re-estimate."""
        if self.node_ts and t <= self.node_ts[-1]:
            raise ValueError(f"step time {t} not after previous {self.node_ts[-1]}")

        odom = [r for r in records if r.kind == "odom2"]
        ranging = [r for r in records if r.kind in ("range2", "pseudorange2")]

        # 1. new node, dead-reckoned from the previous estimate
        first = self.n_nodes == 0
        if first:
            pose = np.array(self.config.prior_pose or (0.0, 0.0, 0.0), dtype=float)
            state = np.zeros(self.stride)
            state[:3] = pose
            if self.with_clock:
                state[3:5] = self.config.prior_clock
            node = self._push_node(t, state)
            self.prior_pose_bank.add(t, node, pose, self.config.prior_sigma)
            if self.with_clock:
                self.prior_clock_bank.add(
                    t, node, self.config.prior_clock, self.config.prior_clock_sigma
                )
        else:
            prev_t = self.node_ts[-1]
            dt = t - prev_t
            prev = self._states[self.n_nodes - 1].copy()
            state = prev.copy()
            if odom:
                vx, vy, om = odom[0].values[0:3]
                c, s = math.cos(prev[2]), math.sin(prev[2])
                state[0] = prev[0] + (c * vx - s * vy) * dt
                state[1] = prev[1] + (s * vx + c * vy) * dt
                state[2] = wrap_angle(prev[2] + om * dt)
            if self.with_clock:
                state[3] = prev[3] + prev[4] * dt
            node = self._push_node(t, state)
            prev_node = node - 1
            for rec in odom:
                z = rec.values[0:3]
                sig = rec.values[3:6]
                self.odo_bank.add(prev_t, prev_node, dt, z, sig)
            if self.with_clock:
                self.cced_bank.add(prev_t, prev_node, dt)

        for rec in ranging:
            z, sigma, ax, ay = rec.values[0:4]
            self._init_mixture_if_needed(sigma)
            if self._base_sigma is None:
                self._base_sigma = sigma
            self.range_bank.add(t, node, z, sigma, (ax, ay))

        # 2. slide the window
        cutoff = t - self.config.t_sw
        while self.head < self.n_nodes and self.node_ts[self.head] < cutoff:
            self.head += 1
        for bank in self._banks:
            bank.drop_before(cutoff)

        # 3. adaptive error-model estimation on the current window errors
        mixture_snapshot: Optional[mix.GaussianMixture] = None
        if (
            self.config.adaptive
            and self.slot.kind in (RobustKind.MAX_MIXTURE, RobustKind.SUM_MIXTURE)
            and self.slot.mixture is not None
        ):
            self._run_em()
            mixture_snapshot = self.slot.mixture
        elif self.slot.mixture is not None:
            mixture_snapshot = self.slot.mixture

        # 4. optimize the window
        t_start = time.perf_counter()
        cost, failed = self._solve_window()
        elapsed_ms = (time.perf_counter() - t_start) * 1e3

        est = self._states[self.n_nodes - 1]
        self.output.times.append(t)
        self.output.poses.append(est[:3].copy())
        self.output.clocks.append(est[3:5].copy() if self.with_clock else None)
        self.output.costs.append(cost)
        self.output.solve_ms.append(elapsed_ms)
        self.output.solver_failed.append(failed)
        self.output.window_nodes.append(self.n_nodes - self.head)
        self.output.window_max_age.append(t - self._oldest_factor_ts(t))
        self.output.mixtures.append(mixture_snapshot)

    def _oldest_factor_ts(self, t: float) -> float:
        oldest = t
        for bank in self._banks:
            ts = bank.oldest_active()
            if ts is not None:
                oldest = min(oldest, ts)
        return oldest

    def _window_view(self) -> np.ndarray:
        return self._states[self.head : self.n_nodes]

    def _prepare_banks(self):
        row0 = 0
        rows_all = []
        cols_all = []
        for bank in self._banks:
            rows, cols, nrows = bank.prepare(self.head, self.stride, row0)
            rows_all.append(rows)
            cols_all.append(cols)
            row0 += nrows
        return np.concatenate(rows_all), np.concatenate(cols_all), row0

    def _run_em(self) -> None:
        self.range_bank.prepare(self.head, self.stride, 0)
        errors = self.range_bank.raw_errors(self._window_view())
        n = self.config.components
        if errors.shape[0] < max(n, self.config.em_min_samples):
            return
        if self.config.em_warm_start and self._last_em_mixture is not None:
            init = self._last_em_mixture
        else:
            init = self._theta0
        fitted, _ = mix.fit_em(errors[:, None], init, self._em_config())
        self.slot.mixture = fitted
        self._last_em_mixture = fitted

    def _solve_window(self) -> tuple[float, bool]:
        rows, cols, n_rows = self._prepare_banks()
        n_active = self.n_nodes - self.head
        n_params = n_active * self.stride
        pattern = BandedPattern(rows, cols, n_rows, n_params)
        stride = self.stride

        def evaluate(x):
            V = x.reshape(n_active, stride)
            res_parts = []
            val_parts = []
            for bank in self._banks:
                r, v = bank.evaluate(V)
                res_parts.append(r)
                val_parts.append(v)
            r = np.concatenate(res_parts)
            vals = np.concatenate(val_parts)
            return r, pattern.system(vals)

        theta_cols = 2 + stride * np.arange(n_active)

        def apply_state(x):
            out = x.copy()
            out[theta_cols] = wrap_angle(out[theta_cols])
            return out

        x0 = self._window_view().reshape(-1).copy()
        x, report = minimize(x0, evaluate, self.config.solver_config(), apply_state)
        if report.termination == "numeric_failure":
            return self.output.costs[-1] if self.output.costs else math.nan, True
        self._states[self.head : self.n_nodes] = x.reshape(n_active, stride)
        return report.final_cost, False


def run(dataset: Dataset, config: EstimatorConfig) -> EstimatorOutput:
    """Replay the dataset causally, one estimator step per timestamp."""
    if not dataset.records:
        raise ValueError("dataset has no measurements")
    with_clock = dataset.has_kind("pseudorange2")
    cfg = config
    if cfg.prior_pose is None and dataset.ground_truth:
        gt0 = dataset.ground_truth[0]
        cfg = replace(cfg, prior_pose=(gt0.x, gt0.y, gt0.theta))
    graph = SlidingWindowGraph(cfg, with_clock)

    group: list[MeasurementRecord] = []
    t_group: Optional[float] = None
    for rec in dataset.records:
        if t_group is None or rec.t == t_group:
            group.append(rec)
            t_group = rec.t
        else:
            graph.step(t_group, group)
            group = [rec]
            t_group = rec.t
    if group:
        graph.step(t_group, group)
    return graph.output


# ---------------------------------------------------------------------------
# single-factor residual callbacks (solver API and derivative checks)
# ---------------------------------------------------------------------------


def _bank_callback(bank, stride: int, n_nodes: int, block_slices):
    rows, cols, n_rows = bank.prepare(0, stride, 0)
    n_params = n_nodes * stride

    def fn(*blocks):
        x = np.zeros(n_params)
        for sl, b in zip(block_slices, blocks):
            x[sl] = b
        res, vals = bank.evaluate(x.reshape(n_nodes, stride))
        J = np.zeros((n_rows, n_params))
        J[rows, cols] = vals
        return res, [J[:, sl] for sl in block_slices]

    return fn


def odometry_residual(z, dt: float, sigma):
    """Whitened odometry factor: ``fn(pose_t, pose_next) -> (r, [J0, J1])``."""
    bank = _OdometryBank()
    bank.add(0.0, 0, dt, z, sigma)
    return _bank_callback(bank, 3, 2, [slice(0, 3), slice(3, 6)])


def cced_residual(dt: float, sigma):
    """Whitened clock-drift factor: ``fn(clock_t, clock_next)``."""
    bank = _CcedBank(tuple(sigma))
    bank.add(0.0, 0, dt)
    return _bank_callback(bank, 5, 2, [slice(3, 5), slice(8, 10)])


def pose_prior_residual(mean, sigma):
    """Whitened pose prior: ``fn(pose)``."""
    bank = _PosePriorBank()
    bank.add(0.0, 0, mean, sigma)
    return _bank_callback(bank, 3, 1, [slice(0, 3)])


def _slot_from_model(model: RobustModel) -> tuple[_NoiseSlot, float]:
    if model.kind in (RobustKind.MAX_MIXTURE, RobustKind.SUM_MIXTURE):
        slot = _NoiseSlot(model.kind, mixture=model.mixture)
        sigma = 1.0
    else:
        slot = _NoiseSlot(model.kind, dcs_phi=model.dcs_phi)
        sigma = 1.0 / float(model.sqrt_info[0, 0])
    return slot, sigma


def range_residual(z: float, anchor, model: RobustModel):
    """Range factor under the given noise model: ``fn(pose)``."""
    slot, sigma = _slot_from_model(model)
    bank = _RangeBank(slot, with_clock=False)
    bank.add(0.0, 0, z, sigma, anchor)
    return _bank_callback(bank, 3, 1, [slice(0, 3)])


def pseudorange_residual(z: float, anchor, model: RobustModel):
    """Pseudorange factor with clock bias: ``fn(pose, clock)``."""
    slot, sigma = _slot_from_model(model)
    bank = _RangeBank(slot, with_clock=True)
    bank.add(0.0, 0, z, sigma, anchor)
    return _bank_callback(bank, 5, 1, [slice(0, 3), slice(3, 5)])
