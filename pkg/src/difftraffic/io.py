"""CSV/JSON file formats.

CSV files start with a ``# difftraffic-v1`` comment line; JSON documents carry
``"version": 1``.  Floats are written with 17 significant digits so that a
write/read round trip is bit-exact.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from pathlib import Path

import jsonschema
import numpy as np

from .idm import OPTIMIZABLE
from .predict import FUTURE_FRAMES, HISTORY_FRAMES, Agent, LanePolyline, SceneSample
from .trajectory import DenseTrajectory, ObservedTrajectory

log = logging.getLogger(__name__)

CSV_VERSION = "# difftraffic-v1"
TRAJECTORY_HEADER = ["vehicle_id", "timestamp_s", "position_m"]
DENSE_HEADER = ["step", "time_s", "position_m", "speed_mps", "accel_mps2"]


class DataError(ValueError):
    """Input that parses but violates a data rule (exit code 1)."""


class ParseError(DataError):
    pass


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _rows(path: Path):
    """Yield (line number, fields) for non-comment, non-blank lines."""
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, next(csv.reader([line]))


def read_trajectories(path) -> list[ObservedTrajectory]:
    path = Path(path)
    rows = _rows(path)
    header = next(rows, None)
    if header is None or [h.strip() for h in header[1]] != TRAJECTORY_HEADER:
        raise ParseError(f"{path}: expected header {','.join(TRAJECTORY_HEADER)}")
    groups: dict[str, list] = defaultdict(list)
    for lineno, fields in rows:
        if len(fields) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(fields)}")
        try:
            t, p = float(fields[1]), float(fields[2])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric value") from None
        if not (np.isfinite(t) and np.isfinite(p)):
            raise ParseError(f"{path}:{lineno}: non-finite value")
        groups[fields[0].strip()].append((t, p))
    if not groups:
        log.warning("%s: no trajectories", path)
    out = []
    for vid, pts in groups.items():
        arr = np.array(sorted(pts))
        if np.any(np.diff(arr[:, 0]) <= 0):
            raise DataError(f"{path}: vehicle {vid} has duplicate timestamps")
        out.append(ObservedTrajectory(vid, arr[:, 0], arr[:, 1]))
    return out


def write_trajectories(path, corpus: list[ObservedTrajectory]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_VERSION + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for tr in corpus:
            for t, p in zip(tr.timestamps, tr.positions):
                w.writerow([tr.id, fmt(t), fmt(p)])


def write_dense(path, dense: DenseTrajectory) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_VERSION + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DENSE_HEADER)
        for k in range(dense.positions.shape[0]):
            w.writerow([k, fmt(k * dense.dt), fmt(dense.positions[k]), fmt(dense.speeds[k]),
                        fmt(dense.accelerations[k])])


def read_dense(path) -> DenseTrajectory:
    rows = [fields for _, fields in _rows(Path(path))]
    if not rows or rows[0] != DENSE_HEADER:
        raise ParseError(f"{path}: expected header {','.join(DENSE_HEADER)}")
    data = np.array([[float(x) for x in r] for r in rows[1:]])
    dt = data[1, 1] if data.shape[0] > 1 else 0.0
    return DenseTrajectory(dt, data[:, 2], data[:, 3], data[:, 4])


def write_outputs(out_dir, method: str, dense: list[tuple[str, DenseTrajectory]], summary: dict,
                  reports: list, params: list[tuple[str, np.ndarray]] | None = None,
                  hist_rows: list | None = None, timing: dict | None = None,
                  offsets: list[tuple[float, float]] | None = None) -> None:
    """Write dense CSVs, params.csv, metrics.json and param_hist.csv.

    Wall-clock numbers go to timing.json so every other file is reproducible
    byte for byte.  Fitted dense trajectories live in a frame starting at
    t = 0, p = 0; ``offsets`` (t0, p0) per trajectory are stored in params.csv.
    """
    if not dense:
        raise DataError("nothing to write")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for vid, d in dense:
        write_dense(out / f"dense_{vid}.csv", d)
    if params is not None:
        with open(out / "params.csv", "w", newline="") as fh:
            fh.write(CSV_VERSION + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", *OPTIMIZABLE] + (["t0_s", "p0_m"] if offsets else []))
            for i, (vid, vec) in enumerate(params):
                w.writerow([vid, *map(fmt, vec)] + ([*map(fmt, offsets[i])] if offsets else []))
    if hist_rows is not None:
        with open(out / "param_hist.csv", "w", newline="") as fh:
            fh.write(CSV_VERSION + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["parameter", "bin_low", "bin_high", "count"])
            for name, lo, hi, count in hist_rows:
                w.writerow([name, fmt(lo), fmt(hi), count])
    deterministic = {k: v for k, v in summary.items() if k != "time_s"}
    per_traj = [{k: v for k, v in r.items() if k != "wall_time"} for r in reports]
    _dump_json(out / "metrics.json", {"version": 1, "method": method, "summary": deterministic,
                                      "trajectories": per_traj})
    _dump_json(out / "timing.json", {"version": 1, "method": method,
                                     "time_s_per_trajectory": summary.get("time_s"), **(timing or {})})


def _dump_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


_POINT = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
SCENE_SCHEMA = {
    "type": "object",
    "required": ["lanes", "agents"],
    "properties": {
        "version": {"const": 1},
        "id": {"type": "string"},
        "lanes": {"type": "array", "items": {
            "type": "object", "required": ["id", "points"],
            "properties": {"id": {"type": ["string", "integer"]},
                           "points": {"type": "array", "items": _POINT, "minItems": 2}}}},
        "agents": {"type": "array", "items": {
            "type": "object", "required": ["id", "history"],
            "properties": {
                "id": {"type": ["string", "integer"]},
                "history": {"type": "array", "items": _POINT,
                            "minItems": HISTORY_FRAMES, "maxItems": HISTORY_FRAMES},
                "future": {"oneOf": [{"type": "null"},
                                     {"type": "array", "items": _POINT,
                                      "minItems": FUTURE_FRAMES, "maxItems": FUTURE_FRAMES}]},
                "length": {"type": "number", "exclusiveMinimum": 0}}}},
    },
}


def _json_path(error: jsonschema.ValidationError) -> str:
    path = "$"
    for part in error.absolute_path:
        path += f"[{part}]" if isinstance(part, int) else f".{part}"
    return path


def read_scene(path) -> SceneSample:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None
    try:
        jsonschema.validate(doc, SCENE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ParseError(f"{path}: {_json_path(exc)}: {exc.message}") from None
    try:
        lanes = [LanePolyline(str(l["id"]), l["points"]) for l in doc["lanes"]]
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    agents = []
    for a in doc["agents"]:
        future = a.get("future")
        agents.append(Agent(str(a["id"]), np.array(a["history"], dtype=float),
                            None if future is None else np.array(future, dtype=float),
                            float(a.get("length", 5.0))))
    return SceneSample(str(doc.get("id", path.stem)), lanes, agents)


def write_scene(path, scene: SceneSample) -> None:
    doc = {
        "version": 1,
        "id": scene.id,
        "lanes": [{"id": l.id, "points": l.points.tolist()} for l in scene.lanes],
        "agents": [{"id": a.id, "history": a.history.tolist(),
                    "future": None if a.future is None else a.future.tolist(),
                    "length": a.length} for a in scene.agents],
    }
    _dump_json(Path(path), doc)


def write_predictions(path, scene_id: str, result) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_VERSION + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id", "agent_id", "lane_id", "frame", "x_m", "y_m"])
        for aid, xy in result.positions.items():
            lane = result.lanes[aid]
            for f, (x, y) in enumerate(xy, start=1):
                w.writerow([scene_id, aid, "" if lane is None else lane, f, fmt(x), fmt(y)])
