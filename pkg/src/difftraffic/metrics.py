"""Evaluation criteria for filtering/reconstruction and corpus aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .idm import OPTIMIZABLE, InvalidArgument
from .optim import DEFAULT_BOUNDS
from .trajectory import DenseTrajectory, ObservedTrajectory, nearest_step_indices

IMPLAUSIBLE_ACCEL = 10.0  # m/s^2


@dataclass
class TrajectoryReport:
    id: str
    positional_error: float  # percent
    accel_mean: float
    accel_std: float
    implausible: bool
    negative_speed_steps: int
    wall_time: float


def positional_error_rate(dense: DenseTrajectory, obs: ObservedTrajectory) -> float:
    """Mean |residual| at the nearest dense step over spatial trajectory length, in %."""
    o = obs.normalized()
    length = abs(o.positions[-1] - o.positions[0])
    if length <= 0:
        raise InvalidArgument(f"{obs.id}: zero-length trajectory")
    k = np.minimum(nearest_step_indices(o.timestamps, dense.dt), dense.positions.shape[0] - 1)
    return float(np.mean(np.abs(o.positions - dense.positions[k])) / length * 100.0)


def acceleration_stats(accelerations) -> tuple[float, float]:
    a = np.abs(np.asarray(accelerations, dtype=float))
    if a.size == 0:
        raise InvalidArgument("no accelerations")
    return float(a.mean()), float(a.std())


def implausible(accelerations) -> bool:
    return bool(np.any(np.abs(np.asarray(accelerations)) > IMPLAUSIBLE_ACCEL))


def report(dense: DenseTrajectory, obs: ObservedTrajectory, wall_time: float = 0.0,
           accelerations=None) -> TrajectoryReport:
    """Score one dense trajectory; pass ``accelerations`` to override the profile."""
    acc = dense.accelerations if accelerations is None else accelerations
    mean, std = acceleration_stats(acc)
    return TrajectoryReport(obs.id, positional_error_rate(dense, obs), mean, std, implausible(acc),
                            int(np.sum(dense.speeds < 0)), wall_time)


def aggregate(reports: list[TrajectoryReport], param_vectors=None, bins: int = 10,
              bounds: dict | None = None) -> tuple[dict, list[tuple]]:
    """Corpus means plus histogram rows ``(parameter, bin_low, bin_high, count)``.

    ``param_vectors`` has one row per fitted trajectory, columns in
    ``OPTIMIZABLE`` order; histograms span the optimizer boxes.
    """
    if not reports:
        raise InvalidArgument("no reports to aggregate")
    summary = {
        "n": len(reports),
        "pos_error_pct": float(np.mean([r.positional_error for r in reports])),
        "accel_mean": float(np.mean([r.accel_mean for r in reports])),
        "accel_std": float(np.mean([r.accel_std for r in reports])),
        "implausible_pct": 100.0 * float(np.mean([r.implausible for r in reports])),
        "negative_speed_steps": int(sum(r.negative_speed_steps for r in reports)),
        "time_s": float(np.mean([r.wall_time for r in reports])),
    }
    rows = []
    if param_vectors is not None and len(param_vectors):
        bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
        pv = np.asarray(param_vectors, dtype=float)
        for j, name in enumerate(OPTIMIZABLE):
            lo, hi = bounds[name]
            counts, edges = np.histogram(np.clip(pv[:, j], lo, hi), bins=bins, range=(lo, hi))
            rows.extend((name, float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins))
    return summary, rows


def report_dict(r: TrajectoryReport) -> dict:
    return asdict(r)
