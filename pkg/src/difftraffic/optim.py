"""Adam with a linear learning-rate decay and box projection, and the batched
trajectory fit built on top of it."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .idm import OPTIMIZABLE, IdmParams, InvalidArgument, optimal_spacing, softplus
from .trajectory import DenseTrajectory, ObservedTrajectory, horizon_steps, nearest_step_indices

log = logging.getLogger(__name__)

DEFAULT_BOUNDS = {
    "a_max": (5.0, 10.0),
    "a_pref": (0.1, 5.0),
    "T_pref": (0.1, 5.0),
    "s_min": (1.0, 10.0),
    "v_targ": (20.0, 60.0),
}


def lr_schedule(step: int, total: int = 500, start: float = 0.1, end: float = 0.01) -> float:
    """Linear decay from ``start`` at step 0 to ``end`` at step ``total - 1``."""
    if not 0 <= step < total:
        raise InvalidArgument(f"step {step} outside [0, {total})")
    if total == 1:
        return start
    frac = step / (total - 1)
    return start + (end - start) * frac


@dataclass
class AdamState:
    shape: tuple
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.shape)
        if self.v is None:
            self.v = np.zeros(self.shape)


def adam_step(state: AdamState, values, grads, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != state.m.shape or np.shape(values) != grads.shape:
        raise InvalidArgument("values, gradients and Adam state must share a shape")
    if not np.all(np.isfinite(grads)):
        raise engine.NumericalFailure(f"non-finite gradient at Adam step {state.t}", state.t)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return values - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class BoxConstraints:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.low) >= np.asarray(self.high)):
            raise InvalidArgument("every lower bound must be below its upper bound")

    @classmethod
    def idm_default(cls, bounds: dict | None = None) -> BoxConstraints:
        bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
        return cls(np.array([bounds[n][0] for n in OPTIMIZABLE]),
                   np.array([bounds[n][1] for n in OPTIMIZABLE]))

    def contains(self, values) -> np.ndarray:
        values = np.asarray(values)
        low, high = self._shaped(values)
        return np.all((values >= low) & (values <= high), axis=0)

    def _shaped(self, values):
        extra = (1,) * (np.ndim(values) - np.ndim(self.low))
        return np.reshape(self.low, np.shape(self.low) + extra), np.reshape(self.high, np.shape(self.high) + extra)


def project(values, constraints: BoxConstraints) -> np.ndarray:
    """Clamp componentwise into the box; rows of ``values`` follow the bound order."""
    low, high = constraints._shaped(values)
    return np.clip(values, low, high)


@dataclass
class FitConfig:
    steps: int = 500
    lr_start: float = 0.1
    lr_end: float = 0.01
    init: dict = field(default_factory=lambda: {"a_max": 10.0, "a_pref": 2.0, "T_pref": 1.0,
                                                "s_min": 5.0, "v_targ": 50.0})
    gap_init: float = 10.0
    speed_diff_init: float = 0.0
    a_min: float = -10.0
    delta: float = 4.0
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    batch_size: int = 256
    # return the lowest-loss iterate instead of the last one
    keep_best: bool = True


@dataclass
class FitResult:
    id: str
    params: IdmParams
    dense: DenseTrajectory
    loss: float
    initial_loss: float
    residuals: np.ndarray
    indices: np.ndarray
    gap_seq: np.ndarray
    speed_diff_seq: np.ndarray
    loss_trace: np.ndarray = field(repr=False)
    wall_time: float = 0.0
    t0: float = 0.0
    p0: float = 0.0

    def param_vector(self) -> np.ndarray:
        return self.params.optimizable()


def initial_speed(obs: ObservedTrajectory) -> float:
    return max((obs.positions[1] - obs.positions[0]) / (obs.timestamps[1] - obs.timestamps[0]), 0.0)


def equilibrium_gap(params: IdmParams, v) -> np.ndarray:
    """Gap at which a vehicle at speed ``v`` behind an equally fast leader has a_raw = 0."""
    s_star = softplus(optimal_spacing(params, v, 0.0))
    free = np.maximum(1.0 - (v / params.v_targ) ** params.delta, 1e-6)
    return s_star / np.sqrt(free)


def _losses(positions, rows, cols, values, splits) -> np.ndarray:
    # fsum is exactly rounded, so every evaluation path agrees bit for bit
    absres = np.abs(values - positions[rows, cols])
    return np.array([math.fsum(part) for part in np.split(absres, splits)])


def fit(observations: ObservedTrajectory, dt: float, steps: int = 500,
        config: FitConfig | None = None, leader_terms=None) -> FitResult:
    """Fit IDM parameters (and virtual-leader terms) to one trajectory."""
    config = config or FitConfig()
    if steps != config.steps:
        config = FitConfig(**{**config.__dict__, "steps": steps})
    terms = None if leader_terms is None else [leader_terms]
    return fit_batch([observations], dt, config, terms)[0]


def fit_batch(trajectories: list[ObservedTrajectory], dt: float, config: FitConfig | None = None,
              leader_terms: list | None = None, threads: int = 1) -> list[FitResult]:
    """Fit every trajectory; the batch is simulated as one vectorized rollout.

    By default every per-step (gap, speed difference) pair of the virtual
    leader is optimized.  ``leader_terms`` switches to one entry per
    trajectory: a fixed ``(gap_seq, speed_diff_seq)`` that is not optimized,
    or ``None`` for a single (gap, speed difference) pair shared by all steps
    and optimized with the parameters.
    """
    config = config or FitConfig()
    if dt <= 0:
        raise InvalidArgument("dt must be > 0")
    if not trajectories:
        return []
    t_start = time.perf_counter()
    obs = []
    for tr in trajectories:
        tr.validate()
        obs.append(tr.normalized())
    b = len(obs)
    own_steps = [horizon_steps(o.duration, dt) for o in obs]
    n_steps = max(own_steps)
    idx = [nearest_step_indices(o.timestamps, dt, k) for o, k in zip(obs, own_steps)]
    rows = np.concatenate(idx)
    cols = np.concatenate([np.full(len(o), i) for i, o in enumerate(obs)])
    values = np.concatenate([o.positions for o in obs])
    splits = np.cumsum([len(o) for o in obs])[:-1]
    v0 = np.array([initial_speed(o) for o in obs])

    box = BoxConstraints.idm_default(config.bounds)
    theta = np.tile(np.array([config.init[n] for n in OPTIMIZABLE], dtype=float)[:, None], (1, b))
    theta = project(theta, box)
    base = IdmParams(delta=config.delta, a_min=config.a_min)

    per_step = leader_terms is None
    gaps = np.full((n_steps, b), config.gap_init)
    dvs = np.full((n_steps, b), config.speed_diff_init)
    const = np.zeros(b, dtype=bool)  # one shared, optimized (gap, dv) pair
    if not per_step:
        if len(leader_terms) != b:
            raise InvalidArgument("need one leader-terms entry per trajectory")
        for i, terms in enumerate(leader_terms):
            if terms is None:
                const[i] = True
                continue
            g, d = (np.asarray(x, dtype=float) for x in terms)
            if g.shape != (own_steps[i],) or d.shape != (own_steps[i],):
                raise InvalidArgument(f"{obs[i].id}: leader terms need {own_steps[i]} steps")
            gaps[: own_steps[i], i] = g
            dvs[: own_steps[i], i] = d
    # a shared pair starts at the equilibrium gap of the initial parameters, so
    # the first rollout cruises instead of saturating the deceleration floor
    const_gap = np.where(const, equilibrium_gap(base.with_optimizable(theta), v0), config.gap_init)
    const_dv = np.full(b, config.speed_diff_init)

    adam_theta = AdamState(theta.shape)
    adam_gaps = AdamState(gaps.shape)
    adam_dvs = AdamState(dvs.shape)
    adam_const = AdamState((2, b))
    trace = np.empty((config.steps + 1, b))
    best = {"loss": np.full(b, np.inf), "theta": theta.copy(), "gaps": gaps.copy(), "dvs": dvs.copy(),
            "pair": np.stack([const_gap, const_dv])}

    def remember(loss):
        # column-wise, so each trajectory keeps its own best iterate
        better = loss < best["loss"]
        if better.any():
            best["loss"] = np.where(better, loss, best["loss"])
            best["theta"][:, better] = theta[:, better]
            best["gaps"][:, better] = gaps[:, better]
            best["dvs"][:, better] = dvs[:, better]
            best["pair"][:, better] = np.stack([const_gap, const_dv])[:, better]

    def evaluate():
        params = base.with_optimizable(theta)
        g = np.where(const, const_gap, gaps)
        d = np.where(const, const_dv, dvs)
        buf = engine.rollout_virtual_leader(0.0, v0, params, g, d, dt, threads=threads)
        return buf, _losses(buf.positions, rows, cols, values, splits)

    for it in range(config.steps):
        buf, loss = evaluate()
        if not np.all(np.isfinite(loss)):
            raise engine.NumericalFailure(f"non-finite loss at iteration {it}", it)
        trace[it] = loss
        remember(loss)
        residual = values - buf.positions[rows, cols]
        d_pos = np.zeros_like(buf.positions)
        np.add.at(d_pos, (rows, cols), -np.sign(residual))
        adj = engine.backward(buf, d_pos, threads=threads)
        lr = lr_schedule(it, config.steps, config.lr_start, config.lr_end)
        theta = project(adam_step(adam_theta, theta, adj.params, lr), box)
        if per_step:
            gaps = adam_step(adam_gaps, gaps, adj.gaps, lr)
            dvs = adam_step(adam_dvs, dvs, adj.speed_diffs, lr)
        elif const.any():
            pair = np.stack([const_gap, const_dv])
            grad = np.where(const, np.stack([adj.gaps.sum(axis=0), adj.speed_diffs.sum(axis=0)]), 0.0)
            const_gap, const_dv = adam_step(adam_const, pair, grad, lr)

    buf, loss = evaluate()
    if not np.all(np.isfinite(loss)):
        raise engine.NumericalFailure(f"non-finite loss at iteration {config.steps}", config.steps)
    trace[config.steps] = loss
    remember(loss)
    if config.keep_best:
        theta, gaps, dvs = best["theta"], best["gaps"], best["dvs"]
        const_gap, const_dv = best["pair"]
        buf, loss = evaluate()
    per_traj = (time.perf_counter() - t_start) / b

    results = []
    params = base.with_optimizable(theta)
    for i, o in enumerate(obs):
        k = own_steps[i]
        # last acceleration repeated so every dense column has k + 1 entries
        acc = np.append(buf.accelerations[:k, i], buf.accelerations[k - 1, i])
        dense = DenseTrajectory(dt, buf.positions[: k + 1, i].copy(), buf.speeds[: k + 1, i].copy(), acc)
        residuals = o.positions - dense.positions[idx[i]]
        results.append(FitResult(
            id=o.id, params=params.take(i), dense=dense, loss=float(loss[i]),
            initial_loss=float(trace[0, i]), residuals=residuals, indices=idx[i],
            gap_seq=buf.gaps[:k, i].copy(), speed_diff_seq=buf.speed_diffs[:k, i].copy(),
            loss_trace=trace[:, i].copy(), wall_time=per_traj,
            t0=float(trajectories[i].timestamps[0]), p0=float(trajectories[i].positions[0]),
        ))
    log.debug("fitted %d trajectories, %d steps, %.3fs each", b, n_steps, per_traj)
    return results
