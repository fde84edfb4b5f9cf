"""Trajectory and error-distribution evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AteReport", "ate", "histogram", "report_csv", "histogram_csv"]


@dataclass
class AteReport:
    """Horizontal absolute trajectory error statistics."""

    errors: np.ndarray
    mean: float
    rmse: float
    max: float
    matched: int
    unmatched: int


def ate(estimates, ground_truth, match_tolerance: float) -> AteReport:
    """Horizontal error of each estimate against its nearest ground-truth pose.

    Both inputs are (k, >=3) arrays of rows ``t, x, y, ...``.  Estimates with
    no ground-truth timestamp within the tolerance are excluded and counted.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    gt = np.atleast_2d(np.asarray(ground_truth, dtype=float))
    if est.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("both trajectories must be non-empty")

    order = np.argsort(gt[:, 0], kind="stable")
    gt = gt[order]
    gt_t = gt[:, 0]
    idx = np.searchsorted(gt_t, est[:, 0])
    idx = np.clip(idx, 0, gt.shape[0] - 1)
    idx_lo = np.clip(idx - 1, 0, gt.shape[0] - 1)
    pick_lo = np.abs(gt_t[idx_lo] - est[:, 0]) < np.abs(gt_t[idx] - est[:, 0])
    nearest = np.where(pick_lo, idx_lo, idx)
    dt = np.abs(gt_t[nearest] - est[:, 0])
    ok = dt <= match_tolerance

    if not np.any(ok):
        raise ValueError("no estimate matched a ground-truth timestamp")
    diff = est[ok, 1:3] - gt[nearest[ok], 1:3]
    errors = np.hypot(diff[:, 0], diff[:, 1])
    return AteReport(
        errors=errors,
        mean=float(np.mean(errors)),
        rmse=float(np.sqrt(np.mean(errors**2))),
        max=float(np.max(errors)),
        matched=int(np.sum(ok)),
        unmatched=int(np.sum(~ok)),
    )


def histogram(errors, bin_width: float) -> list[tuple[float, int]]:
    """Fixed-width histogram; bins tile the data range, counts sum to len."""
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    arr = np.asarray(errors, dtype=float).ravel()
    if arr.size == 0:
        return []
    lo = np.floor(arr.min() / bin_width) * bin_width
    n_bins = max(1, int(np.ceil((arr.max() - lo) / bin_width)))
    if lo + n_bins * bin_width <= arr.max():
        n_bins += 1
    edges = lo + bin_width * np.arange(n_bins + 1)
    counts, _ = np.histogram(arr, bins=edges)
    centers = edges[:-1] + 0.5 * bin_width
    return [(float(c), int(k)) for c, k in zip(centers, counts)]


def report_csv(report: AteReport) -> str:
    rows = [
        ("mean_ate_m", report.mean),
        ("rmse_m", report.rmse),
        ("max_m", report.max),
        ("matched", report.matched),
        ("unmatched", report.unmatched),
    ]
    lines = ["metric,value"]
    lines += [f"{name},{format(value, '.17g')}" for name, value in rows]
    return "\n".join(lines) + "\n"


def histogram_csv(bins: list[tuple[float, int]]) -> str:
    lines = ["bin_center,count"]
    lines += [f"{format(c, '.17g')},{k}" for c, k in bins]
    return "\n".join(lines) + "\n"
