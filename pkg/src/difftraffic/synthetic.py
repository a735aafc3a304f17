"""Synthetic corpora with IDM-generated ground truth.

Used by the acceptance suite and the ``synth`` subcommand since no recorded
traffic data ships with the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .idm import IdmParams, idm_acceleration
from .trajectory import ObservedTrajectory

# realistic driver ranges, all inside the optimizer's boxes
TRUE_RANGES = {
    "a_max": (5.0, 9.0),
    "a_pref": (0.5, 3.0),
    "T_pref": (0.8, 2.0),
    "s_min": (1.5, 4.0),
    "v_targ": (25.0, 40.0),
}


def draw_params(rng: np.random.Generator, n: int | None = None) -> IdmParams:
    return IdmParams(**{k: rng.uniform(lo, hi, size=n) for k, (lo, hi) in TRUE_RANGES.items()})


@dataclass
class SyntheticTrajectory:
    truth: ObservedTrajectory
    observed: ObservedTrajectory
    params: IdmParams
    accelerations: np.ndarray


def follow_leader(params: IdmParams, leader_speed: np.ndarray, dt: float, gap0: float, v0: float,
                  length: float = 5.0):
    """Simulate one IDM vehicle behind a leader with a prescribed speed profile.

    Returns ego positions and leader positions (both K+1) plus ego accelerations (K).
    """
    k_total = leader_speed.shape[0] - 1
    ego_p = np.empty(k_total + 1)
    ego_v = np.empty(k_total + 1)
    lead_p = np.empty(k_total + 1)
    acc = np.empty(k_total)
    ego_p[0], ego_v[0], lead_p[0] = 0.0, v0, gap0 + length
    for k in range(k_total):
        dp = lead_p[k] - ego_p[k] - length
        dv = ego_v[k] - leader_speed[k]
        acc[k] = idm_acceleration(params, ego_v[k], dp, dv, dt)
        ego_p[k + 1] = ego_p[k] + dt * ego_v[k]
        ego_v[k + 1] = max(ego_v[k] + dt * acc[k], 0.0)
        lead_p[k + 1] = lead_p[k] + dt * leader_speed[k]
    return ego_p, lead_p, acc


def leader_profile(rng: np.random.Generator, n_steps: int, dt: float) -> np.ndarray:
    t = np.arange(n_steps + 1) * dt
    base = rng.uniform(12.0, 25.0)
    amp = rng.uniform(0.0, 4.0)
    period = rng.uniform(15.0, 40.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    return np.maximum(base + amp * np.sin(2 * np.pi * t / period + phase), 0.0)


def noisy_corpus(n: int, seed: int = 0, duration: float = 30.0, dt: float = 0.1,
                 noise: float = 0.3, every: int = 1) -> list[SyntheticTrajectory]:
    """Car-following trajectories sampled every ``every`` steps with Gaussian position noise."""
    rng = np.random.default_rng(seed)
    n_steps = int(round(duration / dt))
    out = []
    for i in range(n):
        params = draw_params(rng)
        lead_v = leader_profile(rng, n_steps, dt)
        v0 = lead_v[0]
        gap0 = float(params.s_min + v0 * params.T_pref) * rng.uniform(0.9, 1.5)
        ego_p, _, acc = follow_leader(params, lead_v, dt, gap0, v0)
        t = np.arange(n_steps + 1) * dt
        sel = slice(None, None, every)
        truth = ObservedTrajectory(f"v{i:04d}", t[sel], ego_p[sel])
        obs_p = ego_p[sel] + rng.normal(0.0, noise, size=truth.timestamps.shape) if noise > 0 else ego_p[sel]
        out.append(SyntheticTrajectory(truth, ObservedTrajectory(f"v{i:04d}", t[sel], obs_p), params, acc))
    return out


def lane_points(rng: np.random.Generator, length: float = 700.0, spacing: float = 2.0,
                curved: bool = False) -> np.ndarray:
    """Straight lane or a gentle circular arc, with random placement."""
    s = np.arange(0.0, length + spacing / 2, spacing)
    if curved:
        radius = rng.uniform(400.0, 1500.0) * rng.choice([-1.0, 1.0])
        theta = s / radius
        pts = np.stack([radius * np.sin(theta), radius * (1.0 - np.cos(theta))], axis=1)
    else:
        pts = np.stack([s, np.zeros_like(s)], axis=1)
    heading = rng.uniform(0.0, 2 * np.pi)
    rot = np.array([[np.cos(heading), -np.sin(heading)], [np.sin(heading), np.cos(heading)]])
    return pts @ rot.T + rng.uniform(-500.0, 500.0, size=2)


def scene_suite(n: int, seed: int = 0, queue_fraction: float = 0.2):
    """Scenes with IDM-generated 1-D motion mapped onto lane polylines.

    Cruise scenes: a platoon whose front vehicle drives at its target speed
    and followers start near their equilibrium gaps.  Queue scenes: vehicles
    standing behind a stop line.
    """
    from . import engine
    from .predict import FRAME_DT, FUTURE_FRAMES, HISTORY_FRAMES, Agent, LanePolyline, SceneSample

    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n):
        lane = LanePolyline("lane0", lane_points(rng, curved=bool(rng.random() < 0.5)))
        n_agents = int(rng.integers(1, 5))
        params = draw_params(rng, n_agents)
        lengths = np.full(n_agents, 5.0)
        queue = rng.random() < queue_fraction
        a_max = params.a_max
        if queue:
            v = np.zeros(n_agents)
            gaps = 0.6 * params.s_min  # deep inside the standstill regime
            free_gap = gaps[0]
            vt = params.v_targ
        else:
            v_front = rng.uniform(20.0, 30.0)
            vt = np.concatenate([[v_front], v_front + rng.uniform(3.0, 15.0, n_agents - 1)])
            v = v_front * np.concatenate([[1.0], rng.uniform(0.97, 1.03, n_agents - 1)])
            eq = IdmParams(a_max, params.a_pref, params.s_min, params.T_pref, vt)
            s_eq = eq.s_min + v_front * eq.T_pref
            gaps = s_eq / np.sqrt(1.0 - (v_front / vt) ** 4 + 1e-12) * rng.uniform(0.95, 1.1, n_agents)
            free_gap = engine.D_FREE
        params = IdmParams(a_max, params.a_pref, params.s_min, params.T_pref, vt)
        # agent 0 is in front; positions measured along the lane
        pos = np.empty(n_agents)
        pos[0] = rng.uniform(150.0, 200.0)
        for j in range(1, n_agents):
            pos[j] = pos[j - 1] - lengths[j - 1] - gaps[j]
        pos += max(0.0, 20.0 - pos[-1])
        leader = np.arange(-1, n_agents - 1)
        state = engine.WorldState(pos, v, lengths, leader, params, free_gap=free_gap)
        buf = engine.rollout(state, HISTORY_FRAMES - 1 + FUTURE_FRAMES, FRAME_DT)
        agents = []
        order = rng.permutation(n_agents)
        for j in order:
            xy = lane.point_at(buf.positions[:, j])
            agents.append(Agent(f"a{j}", xy[:HISTORY_FRAMES], xy[HISTORY_FRAMES:], float(lengths[j])))
        scenes.append(SceneSample(f"scene{i:03d}", [lane], agents))
    return scenes
