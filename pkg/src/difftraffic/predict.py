"""Training-free forecasting on lane polylines.

Agents are snapped to lanes, reduced to arc length, fitted with IDM on their
1-second history and rolled forward together, then mapped back to 2-D.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .idm import IdmParams, InvalidArgument
from .optim import FitConfig, fit_batch
from .trajectory import ObservedTrajectory

log = logging.getLogger(__name__)

HISTORY_FRAMES = 11
FUTURE_FRAMES = 80
FRAME_DT = 0.1
DEFAULT_LENGTH = 5.0


@dataclass
class LanePolyline:
    id: str
    points: np.ndarray
    arc: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or self.points.shape[0] < 2:
            raise InvalidArgument(f"lane {self.id}: need at least 2 points of (x, y)")
        seg = np.hypot(*np.diff(self.points, axis=0).T)
        if np.any(seg <= 0):
            raise InvalidArgument(f"lane {self.id}: repeated vertex")
        self.arc = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.arc[-1])

    def point_at(self, s):
        """Inverse arc-length map, linear within segments, clamped at both ends."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        return np.stack([np.interp(s, self.arc, self.points[:, 0]),
                         np.interp(s, self.arc, self.points[:, 1])], axis=-1)


def project_to_lane(point, lane: LanePolyline):
    """Arc length and lateral distance of the closest point on ``lane``.

    ``point`` may be a single (x, y) or an (n, 2) array.
    """
    pts = np.asarray(point, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    a = lane.points[:-1]
    d = np.diff(lane.points, axis=0)
    seg_len2 = np.sum(d * d, axis=1)
    rel = pts[:, None, :] - a[None, :, :]
    t = np.clip(np.sum(rel * d[None], axis=2) / seg_len2, 0.0, 1.0)
    closest = a[None] + t[..., None] * d[None]
    dist = np.hypot(*(pts[:, None, :] - closest).transpose(2, 0, 1))
    # argmin keeps the first minimum, i.e. the smallest arc length
    j = np.argmin(dist, axis=1)
    rows = np.arange(pts.shape[0])
    s = lane.arc[j] + t[rows, j] * np.sqrt(seg_len2[j])
    lat = dist[rows, j]
    if single:
        return float(s[0]), float(lat[0])
    return s, lat


def assign_lane(history, lanes: list[LanePolyline], threshold: float = 2.5):
    """Lane id with the smallest mean lateral distance, or None.

    Lanes along which the projected arc length decreases are skipped.
    """
    if not lanes:
        raise InvalidArgument("no lanes to assign to")
    history = np.atleast_2d(np.asarray(history, dtype=float))
    best, best_d = None, np.inf
    for lane in lanes:
        s, d = project_to_lane(history, lane)
        if np.any(np.diff(s) < -1e-6):
            continue
        mean_d = float(np.mean(d))
        if mean_d < best_d:
            best, best_d = lane.id, mean_d
    if best is None or best_d > threshold:
        return None
    return best


def order_on_lane(agent_ids, arc_lengths) -> list:
    """Leader position (index into the inputs) per agent, or None for the front agent.

    Ties in arc length are broken by id with the larger id ahead.
    """
    order = sorted(range(len(agent_ids)), key=lambda i: (arc_lengths[i], agent_ids[i]))
    leaders = [None] * len(agent_ids)
    for rank, i in enumerate(order[:-1]):
        leaders[i] = order[rank + 1]
    return leaders


@dataclass
class Agent:
    id: str
    history: np.ndarray
    future: np.ndarray | None = None
    length: float = DEFAULT_LENGTH


@dataclass
class SceneSample:
    id: str
    lanes: list[LanePolyline]
    agents: list[Agent]


@dataclass
class PredictionResult:
    positions: dict  # agent id -> (80, 2)
    params: dict  # agent id -> IdmParams or None
    lanes: dict  # agent id -> lane id or None
    arc_lengths: dict  # agent id -> (80,) or None


def _speeds(s: np.ndarray, dt: float) -> np.ndarray:
    v = np.empty_like(s)
    v[:-1] = np.diff(s) / dt
    v[-1] = v[-2]
    return v


def forecast(scene: SceneSample, threshold: float = 2.5, config: FitConfig | None = None,
             frames: int = FUTURE_FRAMES, threads: int = 1) -> PredictionResult:
    config = config or FitConfig()
    lanes = {lane.id: lane for lane in scene.lanes}
    result = PredictionResult({}, {}, {}, {})
    groups: dict = {}
    for agent in scene.agents:
        lane_id = assign_lane(agent.history, scene.lanes, threshold)
        result.lanes[agent.id] = lane_id
        if lane_id is None:
            result.positions[agent.id] = _constant_velocity(agent.history, frames)
            result.params[agent.id] = None
            result.arc_lengths[agent.id] = None
        else:
            groups.setdefault(lane_id, []).append(agent)

    for lane_id, agents in groups.items():
        lane = lanes[lane_id]
        hist_s = np.stack([project_to_lane(a.history, lane)[0] for a in agents])
        ids = [a.id for a in agents]
        leaders = order_on_lane(ids, hist_s[:, -1])
        try:
            _forecast_group(lane, agents, hist_s, leaders, config, frames, threads, result)
        except (InvalidArgument, engine.NumericalFailure) as exc:
            log.warning("lane %s: falling back to constant velocity (%s)", lane_id, exc)
            for a in agents:
                result.positions[a.id] = _constant_velocity(a.history, frames)
                result.params[a.id] = None
                result.arc_lengths[a.id] = None
    return result


def _forecast_group(lane, agents, hist_s, leaders, config, frames, threads, result):
    n_hist = hist_s.shape[1]
    t = np.arange(n_hist) * FRAME_DT
    speeds = np.stack([_speeds(s, FRAME_DT) for s in hist_s])
    lengths = np.array([a.length for a in agents])
    observations, terms = [], []
    for i, a in enumerate(agents):
        observations.append(ObservedTrajectory(a.id, t, hist_s[i]))
        h = leaders[i]
        if h is None:
            # unobserved leader: one constant (gap, dv) pair is fitted and kept for the rollout
            terms.append(None)
        else:
            terms.append(((hist_s[h] - hist_s[i] - lengths[h])[:-1], (speeds[i] - speeds[h])[:-1]))
    fits = fit_batch(observations, FRAME_DT, config, leader_terms=terms, threads=threads)

    params = [f.params for f in fits]
    stacked = IdmParams(**{name: np.array([getattr(p, name) for p in params], dtype=float)
                           for name in ("a_max", "a_pref", "s_min", "T_pref", "v_targ", "a_min")},
                        delta=params[0].delta)
    state = engine.WorldState(
        positions=hist_s[:, -1],
        speeds=np.array([f.dense.speeds[-1] for f in fits]),
        lengths=lengths,
        leader=np.array([engine.NO_LEADER if h is None else h for h in leaders]),
        params=stacked,
        free_gap=np.array([f.gap_seq[-1] for f in fits]),
        free_dv=np.array([f.speed_diff_seq[-1] for f in fits]),
    )
    buf = engine.rollout(state, frames, FRAME_DT, threads=threads)
    for i, a in enumerate(agents):
        s = buf.positions[1:, i]
        result.arc_lengths[a.id] = s
        result.positions[a.id] = lane.point_at(s)
        result.params[a.id] = params[i]


def _constant_velocity(history, frames: int) -> np.ndarray:
    history = np.asarray(history, dtype=float)
    vel = (history[-1] - history[-2]) if history.shape[0] > 1 else np.zeros(2)
    steps = np.arange(1, frames + 1)[:, None]
    return history[-1] + steps * vel


def displacement_metrics(prediction, truth, miss_threshold: float = 2.0):
    """Single-mode (minADE, minFDE, miss) for one agent."""
    prediction = np.asarray(prediction, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if prediction.shape != truth.shape:
        raise InvalidArgument(f"frame mismatch: {prediction.shape} vs {truth.shape}")
    err = np.hypot(*(prediction - truth).T)
    return float(err.mean()), float(err[-1]), bool(err[-1] > miss_threshold)
