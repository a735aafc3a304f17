"""Data-parallel stepping and backprop-through-time for the IDM simulator.

Vehicles are processed in fixed-size chunks.  The chunk boundaries never depend
on the worker count, so results are bit-identical for any number of threads.
All vehicles advance from the same pre-step snapshot (synchronous update).
"""

from __future__ import annotations

import functools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .idm import IdmParams, InvalidArgument, idm_acceleration, idm_acceleration_grad

NO_LEADER = -1
D_FREE = 1.0e4  # m, gap seen by a vehicle without a leader
CHUNK = 1 << 15


class NumericalFailure(ArithmeticError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@functools.lru_cache(maxsize=8)
def _executor(threads: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=threads, thread_name_prefix="difftraffic")


def run_chunks(fn, n: int, threads: int = 1, chunk: int = CHUNK) -> None:
    """Call ``fn(lo, hi)`` over ``[0, n)`` in fixed-size chunks."""
    bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    if threads <= 1 or len(bounds) <= 1:
        for lo, hi in bounds:
            fn(lo, hi)
        return
    for fut in [_executor(threads).submit(fn, lo, hi) for lo, hi in bounds]:
        fut.result()


@dataclass
class WorldState:
    positions: np.ndarray
    speeds: np.ndarray
    lengths: np.ndarray
    leader: np.ndarray
    params: IdmParams
    ring_length: float | None = None
    # leader terms seen by leaderless vehicles; default is the free-road sentinel
    free_gap: np.ndarray | None = None
    free_dv: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.speeds = np.asarray(self.speeds, dtype=float)
        n = self.positions.shape[0]
        self.lengths = np.broadcast_to(np.asarray(self.lengths, dtype=float), (n,))
        self.leader = np.asarray(self.leader, dtype=np.int64)
        fg = D_FREE if self.free_gap is None else self.free_gap
        fd = 0.0 if self.free_dv is None else self.free_dv
        self.free_gap = np.broadcast_to(np.asarray(fg, dtype=float), (n,))
        self.free_dv = np.broadcast_to(np.asarray(fd, dtype=float), (n,))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def validate(self) -> None:
        n = len(self)
        if self.speeds.shape != (n,) or self.leader.shape != (n,):
            raise InvalidArgument("state arrays must share one length")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.speeds))):
            raise InvalidArgument("non-finite state")
        if np.any(self.speeds < 0):
            raise InvalidArgument("speeds must be >= 0")
        if np.any(self.leader == np.arange(n)):
            raise InvalidArgument("vehicle cannot follow itself")
        if np.any((self.leader < NO_LEADER) | (self.leader >= n)):
            raise InvalidArgument("leader index out of range")
        self.params.validate()


def _gather(positions, speeds, state, lo, hi):
    idx = state.leader[lo:hi]
    has = idx >= 0
    h = np.where(has, idx, np.arange(lo, hi))
    gap = positions[h] - positions[lo:hi]
    if state.ring_length is not None:
        gap = np.mod(gap, state.ring_length)
    dp = np.where(has, gap - state.lengths[h], state.free_gap[lo:hi])
    dv = np.where(has, speeds[lo:hi] - speeds[h], state.free_dv[lo:hi])
    return dp, dv, has


def gather_leader(state: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Per-vehicle (gap, speed difference); leaderless vehicles get ``(D_FREE, 0)``
    unless the state carries its own free-road terms."""
    dp, dv, _ = _gather(state.positions, state.speeds, state, 0, len(state))
    return dp, dv


def step(state: WorldState, dt: float, threads: int = 1) -> WorldState:
    """Advance every vehicle by one explicit Euler step."""
    if dt <= 0:
        raise InvalidArgument("dt must be > 0")
    state.validate()
    buf = rollout(state, 1, dt, threads=threads)
    return WorldState(buf.positions[1], buf.speeds[1], state.lengths, state.leader,
                      state.params, state.ring_length, state.free_gap, state.free_dv)


@dataclass
class TrajectoryBuffer:
    """Everything a rollout records; ``positions``/``speeds`` have K+1 rows."""

    dt: float
    params: IdmParams
    positions: np.ndarray
    speeds: np.ndarray
    accelerations: np.ndarray
    gaps: np.ndarray
    speed_diffs: np.ndarray
    leader: np.ndarray | None = None  # None: virtual-leader rollout
    lengths: np.ndarray | None = None
    ring_length: float | None = None

    @property
    def n_steps(self) -> int:
        return self.accelerations.shape[0]


def _euler(p, v, a, dt):
    # max() only guards against a one-ulp undershoot when a* sits on -v/dt
    return p + dt * v, np.maximum(v + dt * a, 0.0)


def rollout(initial: WorldState, n_steps: int, dt: float, threads: int = 1) -> TrajectoryBuffer:
    if n_steps < 1:
        raise InvalidArgument("rollout needs at least one step")
    if dt <= 0:
        raise InvalidArgument("dt must be > 0")
    initial.validate()
    n = len(initial)
    params = initial.params.broadcast(n)
    pos = np.empty((n_steps + 1, n))
    spd = np.empty((n_steps + 1, n))
    acc = np.empty((n_steps, n))
    gaps = np.empty((n_steps, n))
    dvs = np.empty((n_steps, n))
    pos[0] = initial.positions
    spd[0] = initial.speeds
    for k in range(n_steps):
        def work(lo, hi, k=k):
            dp, dv, _ = _gather(pos[k], spd[k], initial, lo, hi)
            v = spd[k, lo:hi]
            a = idm_acceleration(params.take(slice(lo, hi)), v, dp, dv, dt, check=False)
            gaps[k, lo:hi] = dp
            dvs[k, lo:hi] = dv
            acc[k, lo:hi] = a
            pos[k + 1, lo:hi], spd[k + 1, lo:hi] = _euler(pos[k, lo:hi], v, a, dt)

        run_chunks(work, n, threads)
        if not np.all(np.isfinite(acc[k])):
            raise NumericalFailure(f"non-finite acceleration at step {k}", k)

    return TrajectoryBuffer(dt, params, pos, spd, acc, gaps, dvs, initial.leader.copy(),
                            np.array(initial.lengths), initial.ring_length)


def rollout_virtual_leader(p0, v0, params: IdmParams, dp_seq, dv_seq, dt: float,
                           threads: int = 1) -> TrajectoryBuffer:
    """Independent vehicles whose leader terms are given per step.

    ``dp_seq``/``dv_seq`` have shape (K,) for one vehicle or (K, B) for a
    batch of B vehicles; ``p0``/``v0`` are scalars or (B,).
    """
    dp_seq = np.asarray(dp_seq, dtype=float)
    dv_seq = np.asarray(dv_seq, dtype=float)
    if dp_seq.shape != dv_seq.shape:
        raise InvalidArgument("dp_seq and dv_seq must have equal length")
    if dt <= 0:
        raise InvalidArgument("dt must be > 0")
    single = dp_seq.ndim == 1
    if single:
        dp_seq, dv_seq = dp_seq[:, None], dv_seq[:, None]
    n_steps, b = dp_seq.shape
    p0 = np.broadcast_to(np.asarray(p0, dtype=float), (b,))
    v0 = np.broadcast_to(np.asarray(v0, dtype=float), (b,))
    if np.any(v0 < 0) or not np.all(np.isfinite(v0)):
        raise InvalidArgument("initial speed must be finite and >= 0")
    params.validate()
    params = params.broadcast(b)

    pos = np.empty((n_steps + 1, b))
    spd = np.empty((n_steps + 1, b))
    acc = np.empty((n_steps, b))
    pos[0], spd[0] = p0, v0
    for k in range(n_steps):
        def work(lo, hi, k=k):
            v = spd[k, lo:hi]
            a = idm_acceleration(params.take(slice(lo, hi)), v, dp_seq[k, lo:hi], dv_seq[k, lo:hi],
                                 dt, check=False)
            acc[k, lo:hi] = a
            pos[k + 1, lo:hi], spd[k + 1, lo:hi] = _euler(pos[k, lo:hi], v, a, dt)

        run_chunks(work, b, threads)
        if not np.all(np.isfinite(acc[k])):
            raise NumericalFailure(f"non-finite acceleration at step {k}", k)

    buf = TrajectoryBuffer(dt, params, pos, spd, acc, dp_seq.copy(), dv_seq.copy())
    if single:
        buf = _squeeze(buf)
    return buf


def _squeeze(buf: TrajectoryBuffer) -> TrajectoryBuffer:
    return TrajectoryBuffer(buf.dt, buf.params.take(0), buf.positions[:, 0], buf.speeds[:, 0],
                            buf.accelerations[:, 0], buf.gaps[:, 0], buf.speed_diffs[:, 0])


@dataclass
class AdjointState:
    """Gradients of a scalar loss after a full backward pass.

    ``params`` rows follow ``idm.OPTIMIZABLE``; ``gaps``/``speed_diffs`` are
    per-step gradients (zero for free-road sentinels in multi-vehicle mode).
    """

    positions0: np.ndarray
    speeds0: np.ndarray
    params: np.ndarray
    gaps: np.ndarray = field(repr=False)
    speed_diffs: np.ndarray = field(repr=False)


def backward(buffer: TrajectoryBuffer, dL_dpos, threads: int = 1) -> AdjointState:
    """Reverse-mode pass over a recorded rollout.

    ``dL_dpos`` holds dL/dp for every recorded position (same shape as
    ``buffer.positions``).
    """
    dL_dpos = np.asarray(dL_dpos, dtype=float)
    if dL_dpos.shape != buffer.positions.shape:
        raise InvalidArgument(f"dL_dpos shape {dL_dpos.shape} != {buffer.positions.shape}")
    squeeze = dL_dpos.ndim == 1
    if squeeze:
        dL_dpos = dL_dpos[:, None]
        spd = buffer.speeds[:, None]
        gaps, dvs = buffer.gaps[:, None], buffer.speed_diffs[:, None]
        params = buffer.params.broadcast(1)
    else:
        spd, gaps, dvs = buffer.speeds, buffer.gaps, buffer.speed_diffs
        params = buffer.params
    n_steps, n = gaps.shape
    dt = buffer.dt
    coupled = buffer.leader is not None
    if coupled:
        leader = buffer.leader
        has = leader >= 0
        followers = np.flatnonzero(has)
        their_leader = leader[followers]

    lam_p = dL_dpos[n_steps].copy()
    lam_v = np.zeros(n)
    d_params = np.zeros((5, n))
    d_gaps = np.zeros((n_steps, n))
    d_dvs = np.zeros((n_steps, n))

    for k in range(n_steps - 1, -1, -1):
        new_p = np.empty(n)
        new_v = np.empty(n)

        def work(lo, hi, k=k):
            _, g = idm_acceleration_grad(params.take(slice(lo, hi)), spd[k, lo:hi],
                                         gaps[k, lo:hi], dvs[k, lo:hi], dt, check=False)
            w = dt * lam_v[lo:hi]
            d_params[:, lo:hi] += w * g.params()
            gdp = w * g.d_dp
            gdv = w * g.d_dv
            if coupled:
                m = has[lo:hi]
                gdp = np.where(m, gdp, 0.0)
                gdv = np.where(m, gdv, 0.0)
            d_gaps[k, lo:hi] = gdp
            d_dvs[k, lo:hi] = gdv
            new_p[lo:hi] = lam_p[lo:hi] + dL_dpos[k, lo:hi] - (gdp if coupled else 0.0)
            new_v[lo:hi] = dt * lam_p[lo:hi] + lam_v[lo:hi] + w * g.d_v + (gdv if coupled else 0.0)

        run_chunks(work, n, threads)
        if coupled and followers.size:
            # follower -> leader contributions, summed in fixed index order
            new_p += np.bincount(their_leader, weights=d_gaps[k, followers], minlength=n)
            new_v -= np.bincount(their_leader, weights=d_dvs[k, followers], minlength=n)
        if not (np.all(np.isfinite(new_p)) and np.all(np.isfinite(new_v))):
            raise NumericalFailure(f"non-finite gradient at step {k}", k)
        lam_p, lam_v = new_p, new_v

    if not np.all(np.isfinite(d_params)):
        raise NumericalFailure("non-finite parameter gradient", 0)
    if squeeze:
        return AdjointState(lam_p[0], lam_v[0], d_params[:, 0], d_gaps[:, 0], d_dvs[:, 0])
    return AdjointState(lam_p, lam_v, d_params, d_gaps, d_dvs)
