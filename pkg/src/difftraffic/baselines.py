"""Classical interpolation and smoothing baselines.

Smoothing is applied to positions; speed and acceleration profiles are then
derived by forward differences.
"""

from __future__ import annotations

import math

import numpy as np

from .idm import InvalidArgument
from .trajectory import DenseTrajectory, ObservedTrajectory


def finite_difference_profiles(positions, dt: float):
    """Forward-difference speeds and accelerations, last value repeated."""
    p = np.asarray(positions, dtype=float)
    if p.shape[0] < 3:
        raise InvalidArgument("need at least 3 positions")
    v = np.empty_like(p)
    v[:-1] = np.diff(p) / dt
    v[-1] = v[-2]
    a = np.empty_like(p)
    a[:-1] = np.diff(v) / dt
    a[-1] = a[-2]
    return v, a


def _dense(positions, dt, **meta) -> DenseTrajectory:
    v, a = finite_difference_profiles(positions, dt)
    return DenseTrajectory(dt, positions, v, a, meta)


def linear_interpolate(obs: ObservedTrajectory, dt: float) -> DenseTrajectory:
    """Piecewise-linear positions at every multiple of ``dt`` in [0, T_l]."""
    obs.validate()
    o = obs.normalized()
    n = math.floor(o.duration / dt + 1e-9) + 1
    t = np.arange(n) * dt
    return _dense(np.interp(t, o.timestamps, o.positions), dt, method="linear")


def moving_average(dense: DenseTrajectory, window: int = 9) -> DenseTrajectory:
    """Centered mean; near the ends the window shrinks symmetrically."""
    if window < 1 or window % 2 == 0:
        raise InvalidArgument("window must be a positive odd integer")
    x = np.asarray(dense.positions, dtype=float)
    n = x.shape[0]
    i = np.arange(n)
    half = np.minimum(np.minimum(i, n - 1 - i), window // 2)
    csum = np.concatenate([[0.0], np.cumsum(x)])
    out = (csum[i + half + 1] - csum[i - half]) / (2 * half + 1)
    return _dense(out, dense.dt, method="ma", window=window)


def ema_kernel(width: float) -> np.ndarray:
    reach = int(math.ceil(4 * width))
    return np.exp(-np.abs(np.arange(-reach, reach + 1)) / width)


def exponential_moving_average(dense: DenseTrajectory, width: float = 5) -> DenseTrajectory:
    """Symmetric exponential kernel exp(-|i-j|/width), truncated at 4*width
    samples and renormalized over the samples that exist."""
    if width <= 0:
        raise InvalidArgument("width must be > 0")
    x = np.asarray(dense.positions, dtype=float)
    w = ema_kernel(width)
    reach = w.shape[0] // 2
    n = x.shape[0]
    num = np.convolve(x, w)[reach:reach + n]
    den = np.convolve(np.ones_like(x), w)[reach:reach + n]
    return _dense(num / den, dense.dt, method="ema", width=width)


METHODS = ("linear", "ma", "ema")


def run_baseline(obs: ObservedTrajectory, method: str, dt: float, window: int = 9,
                 width: float = 5) -> DenseTrajectory:
    dense = linear_interpolate(obs, dt)
    if method == "linear":
        return dense
    if method == "ma":
        return moving_average(dense, window)
    if method == "ema":
        return exponential_moving_average(dense, width)
    raise InvalidArgument(f"unknown baseline {method!r}")
