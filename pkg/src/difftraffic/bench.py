"""Forward/backward throughput on a ring road.

N identical vehicles sit on a ring of circumference 25 N metres, each following
the next one and the last following the first.  They start at the uniform-flow
equilibrium speed, so the simulation itself is quiet and only cost is measured.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import engine
from .idm import IdmParams, InvalidArgument, idm_acceleration

SPACING = 25.0  # m of ring per vehicle
BENCH_DT = 0.1


def equilibrium_speed(params: IdmParams, gap: float, dt: float = BENCH_DT) -> float:
    """Speed at which the kernel returns zero acceleration for a fixed gap."""
    def accel(v):
        return float(idm_acceleration(params, v, gap, 0.0, dt))
    hi = float(params.v_targ)
    if accel(0.0) <= 0.0:
        return 0.0
    return brentq(accel, 0.0, hi, xtol=1e-14, rtol=1e-15)


def ring_state(n: int, params: IdmParams | None = None, length: float = 5.0) -> engine.WorldState:
    if n < 2:
        raise InvalidArgument("ring needs at least 2 vehicles")
    params = params or IdmParams()
    circumference = SPACING * n
    v_eq = equilibrium_speed(params, SPACING - length)
    positions = np.arange(n) * SPACING
    leader = np.roll(np.arange(n), -1)
    return engine.WorldState(positions, np.full(n, v_eq), length, leader, params,
                             ring_length=circumference)


@dataclass
class BenchResult:
    n_vehicles: int
    steps: int
    threads: int
    forward_ms_per_step: float
    backward_ms_per_step: float
    checksum: str
    max_abs_accel: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _digest(buf: engine.TrajectoryBuffer, adj: engine.AdjointState) -> str:
    h = hashlib.sha256()
    for arr in (buf.positions, buf.speeds, buf.accelerations, adj.positions0, adj.speeds0, adj.params):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def bench(n_vehicles: int, steps: int, threads: int = 1, dt: float = BENCH_DT) -> BenchResult:
    """Time ``steps`` forward steps and one backward pass of a quadratic position loss."""
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    state = ring_state(n_vehicles)
    t0 = time.perf_counter()
    buf = engine.rollout(state, steps, dt, threads=threads)
    t1 = time.perf_counter()
    # L = 1/2 sum_i (p_K,i - p_ref,i)^2 with the reference drifting at the equilibrium speed
    ref = state.positions + steps * dt * state.speeds
    grad = np.zeros_like(buf.positions)
    grad[-1] = buf.positions[-1] - ref
    adj = engine.backward(buf, grad, threads=threads)
    t2 = time.perf_counter()
    return BenchResult(n_vehicles, steps, threads, 1e3 * (t1 - t0) / steps, 1e3 * (t2 - t1) / steps,
                       _digest(buf, adj), float(np.max(np.abs(buf.accelerations))))


def scaling_slope(ns, ms) -> float:
    """Least-squares slope of log(ms) against log(N)."""
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(ms, float)), 1)[0])
