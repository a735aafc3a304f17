"""Observed and dense 1-D trajectories, observation alignment and the L1 fit loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .idm import InvalidArgument

_ROUND_TOL = 1e-9  # absorbs binary representation error in T/dt


@dataclass
class ObservedTrajectory:
    id: str
    timestamps: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        if self.timestamps.shape != self.positions.shape or self.timestamps.ndim != 1:
            raise InvalidArgument(f"{self.id}: timestamps and positions must be 1-D and equal length")

    def __len__(self) -> int:
        return self.timestamps.shape[0]

    def validate(self) -> None:
        if len(self) < 2:
            raise InvalidArgument(f"{self.id}: need at least 2 observations")
        if not (np.all(np.isfinite(self.timestamps)) and np.all(np.isfinite(self.positions))):
            raise InvalidArgument(f"{self.id}: non-finite observation")
        if np.any(np.diff(self.timestamps) <= 0):
            raise InvalidArgument(f"{self.id}: timestamps must be strictly increasing")

    def normalized(self) -> ObservedTrajectory:
        """Shift so the first observation sits at t = 0, p = 0."""
        return ObservedTrajectory(self.id, self.timestamps - self.timestamps[0],
                                  self.positions - self.positions[0])

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0])


@dataclass
class DenseTrajectory:
    dt: float
    positions: np.ndarray
    speeds: np.ndarray
    accelerations: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.positions.shape[0]) * self.dt


def horizon_steps(duration: float, dt: float) -> int:
    """Euler steps needed so the last observation has a nearest step."""
    return max(1, math.ceil(duration / dt - _ROUND_TOL))


def nearest_step_indices(timestamps, dt: float, n_steps: int | None = None) -> np.ndarray:
    """k_j = round(T_j / dt) with exact halves rounded up."""
    t = np.asarray(timestamps, dtype=float)
    if dt <= 0:
        raise InvalidArgument("dt must be > 0")
    if np.any(t < 0):
        raise InvalidArgument("timestamps must be normalized to start at 0")
    k = np.floor(t / dt + 0.5 + _ROUND_TOL).astype(np.int64)
    if n_steps is not None and np.any(k > n_steps):
        raise InvalidArgument(f"timestamp beyond simulated horizon of {n_steps} steps")
    return k


def reconstruction_loss(dense_positions, observed_positions, indices):
    """Sum of absolute residuals and its (sub)gradient w.r.t. every dense position."""
    dense_positions = np.asarray(dense_positions, dtype=float)
    residual = np.asarray(observed_positions, dtype=float) - dense_positions[indices]
    loss = math.fsum(np.abs(residual))
    grad = np.zeros_like(dense_positions)
    np.add.at(grad, indices, -np.sign(residual))
    return loss, grad
