"""Command-line entry point: ``difftraffic <subcommand> ...``.

Exit status is 0 on success, 1 for bad input data and 2 when the numerics
break down (non-finite state or gradient).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io, metrics, tasks
from .baselines import METHODS
from .bench import bench, scaling_slope
from .engine import NumericalFailure
from .idm import InvalidArgument
from .optim import DEFAULT_BOUNDS, FitConfig
from .predict import displacement_metrics, forecast

log = logging.getLogger("difftraffic")


@dataclass
class RunConfig:
    dt: float | None = None  # None: 0.1 s for filter, 1.0 s for reconstruct
    steps: int = 500
    lr_start: float = 0.1
    lr_end: float = 0.01
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    batch_size: int = 256
    lane_threshold: float = 2.5
    miss_threshold: float = 2.0
    ma_window: int = 9
    ema_width: float = 5.0
    threads: int = 1
    seed: int = 0
    input: str | None = None
    out: str | None = None

    def validate(self) -> None:
        for name in ("steps", "lr_start", "lr_end", "batch_size", "lane_threshold",
                     "miss_threshold", "ma_window", "ema_width", "threads"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"config: {name} must be > 0")
        if self.dt is not None and self.dt <= 0:
            raise InvalidArgument("config: dt must be > 0")
        for name, (lo, hi) in self.bounds.items():
            if name not in DEFAULT_BOUNDS or not 0 < lo <= hi:
                raise InvalidArgument(f"config: bad bounds for {name}")

    @classmethod
    def load(cls, path) -> RunConfig:
        doc = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known - {"version"}
        if unknown:
            raise InvalidArgument(f"config: unknown keys {sorted(unknown)}")
        doc.pop("version", None)
        if "bounds" in doc:
            doc["bounds"] = {**DEFAULT_BOUNDS, **{k: tuple(v) for k, v in doc["bounds"].items()}}
        return cls(**doc)

    def fit_config(self) -> FitConfig:
        return FitConfig(steps=self.steps, lr_start=self.lr_start, lr_end=self.lr_end,
                         bounds=dict(self.bounds), batch_size=self.batch_size)


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS so a subparser does not reset options given before the subcommand
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker cap")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="difftraffic", parents=[common],
                                description="Differentiable IDM traffic simulation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    for name, default_dt in (("filter", tasks.FILTER_DT), ("reconstruct", tasks.RECONSTRUCT_DT)):
        s = sub.add_parser(name, parents=[common], help=f"fit IDM trajectories (dt={default_dt})")
        s.add_argument("--input", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--dt", type=float)

    s = sub.add_parser("baseline", parents=[common], help="classical smoothing baselines")
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dt", type=float, default=tasks.FILTER_DT)

    s = sub.add_parser("predict", parents=[common], help="lane-based IDM forecasting")
    s.add_argument("--scene", required=True, help="scene JSON file or a directory of them")
    s.add_argument("--out", required=True)
    s.add_argument("--lane-threshold", type=float)
    s.add_argument("--miss-threshold", type=float)

    s = sub.add_parser("bench", parents=[common], help="ring-road throughput benchmark")
    s.add_argument("--vehicles", type=int, nargs="+", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--thread-counts", type=int, nargs="+", help="defaults to --threads")
    s.add_argument("--out", help="also write the report here")

    s = sub.add_parser("synth", parents=[common], help="generate synthetic inputs")
    s.add_argument("--kind", choices=("corpus", "scenes"), required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--noise", type=float, default=0.3)
    s.add_argument("--every", type=int, default=1, help="keep every n-th 0.1 s sample")
    return p


def resolve_config(args) -> RunConfig:
    config = getattr(args, "config", None)
    cfg = RunConfig.load(config) if config else RunConfig()
    for attr in ("seed", "threads"):
        if hasattr(args, attr):
            setattr(cfg, attr, getattr(args, attr))
    for attr, key in (("dt", "dt"), ("lane_threshold", "lane_threshold"),
                      ("miss_threshold", "miss_threshold"), ("input", "input"), ("out", "out")):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


def cmd_fit(args, cfg: RunConfig) -> None:
    default = tasks.FILTER_DT if args.command == "filter" else tasks.RECONSTRUCT_DT
    dt = cfg.dt if cfg.dt is not None else default
    corpus = io.read_trajectories(cfg.input)
    if not corpus:
        raise io.DataError(f"{cfg.input}: no trajectories")
    results = tasks.run_fit(corpus, dt, cfg.fit_config(), cfg.threads)
    reports = tasks.evaluate_fits(corpus, results)
    vectors = [r.param_vector() for r in results]
    summary, hist = metrics.aggregate(reports, vectors, bounds=cfg.bounds)
    io.write_outputs(cfg.out, args.command, [(r.id, r.dense) for r in results], summary,
                     [metrics.report_dict(r) for r in reports],
                     params=[(r.id, v) for r, v in zip(results, vectors)], hist_rows=hist,
                     offsets=[(r.t0, r.p0) for r in results])
    _print_summary(summary)


def cmd_baseline(args, cfg: RunConfig) -> None:
    corpus = io.read_trajectories(cfg.input)
    if not corpus:
        raise io.DataError(f"{cfg.input}: no trajectories")
    dense, reports = tasks.run_baselines(corpus, args.method, cfg.dt, cfg.ma_window, cfg.ema_width)
    summary, _ = metrics.aggregate(reports)
    io.write_outputs(cfg.out, args.method, [(o.id, d) for o, d in zip(corpus, dense)], summary,
                     [metrics.report_dict(r) for r in reports])
    _print_summary(summary)


def cmd_predict(args, cfg: RunConfig) -> None:
    src = Path(args.scene)
    files = sorted(src.glob("*.json")) if src.is_dir() else [src]
    if not files:
        raise io.DataError(f"{src}: no scene files")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    per_agent = []
    t0 = time.perf_counter()
    for path in files:
        scene = io.read_scene(path)
        result = forecast(scene, cfg.lane_threshold, cfg.fit_config(), threads=cfg.threads)
        io.write_predictions(out / f"pred_{scene.id}.csv", scene.id, result)
        for agent in scene.agents:
            if agent.future is None:
                continue
            ade, fde, miss = displacement_metrics(result.positions[agent.id], agent.future,
                                                  cfg.miss_threshold)
            per_agent.append({"scene": scene.id, "agent": agent.id, "lane": result.lanes[agent.id],
                              "ade": ade, "fde": fde, "miss": miss})
    elapsed = time.perf_counter() - t0
    summary = {"scenes": len(files), "agents": len(per_agent)}
    if per_agent:
        summary.update(min_ade=float(np.mean([a["ade"] for a in per_agent])),
                       min_fde=float(np.mean([a["fde"] for a in per_agent])),
                       miss_rate=float(np.mean([a["miss"] for a in per_agent])))
    io._dump_json(out / "metrics.json", {"version": 1, "method": "predict", "summary": summary,
                                        "agents": per_agent})
    io._dump_json(out / "timing.json", {"version": 1, "method": "predict", "wall_time_s": elapsed})
    _print_summary(summary)


def cmd_bench(args, cfg: RunConfig) -> None:
    thread_counts = args.thread_counts or [cfg.threads]
    runs = []
    for n in args.vehicles:
        for t in thread_counts:
            r = bench(n, args.steps, t)
            runs.append(r.as_dict())
            print(f"N={n:>9d} threads={t:<3d} forward {r.forward_ms_per_step:9.3f} ms/step"
                  f"  backward {r.backward_ms_per_step:9.3f} ms/step  sha256 {r.checksum[:12]}")
    report = {"version": 1, "runs": runs}
    sizes = sorted(set(args.vehicles))
    if len(sizes) >= 2:
        for t in thread_counts:
            ms = [next(r["forward_ms_per_step"] + r["backward_ms_per_step"] for r in runs
                       if r["n_vehicles"] == n and r["threads"] == t) for n in sizes]
            report.setdefault("slope", {})[str(t)] = scaling_slope(sizes, ms)
    if args.out:
        io._dump_json(Path(args.out), report)


def cmd_synth(args, cfg: RunConfig) -> None:
    from .synthetic import noisy_corpus, scene_suite
    if args.kind == "corpus":
        corpus = [s.observed for s in noisy_corpus(args.count, seed=cfg.seed, noise=args.noise,
                                                    every=args.every)]
        io.write_trajectories(args.out, corpus)
    else:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for scene in scene_suite(args.count, seed=cfg.seed):
            io.write_scene(out / f"{scene.id}.json", scene)


def _print_summary(summary: dict) -> None:
    print(json.dumps({k: v for k, v in summary.items() if k != "time_s"}, sort_keys=True))


COMMANDS = {"filter": cmd_fit, "reconstruct": cmd_fit, "baseline": cmd_baseline,
            "predict": cmd_predict, "bench": cmd_bench, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "baseline" and cfg.dt is None:
            cfg.dt = tasks.FILTER_DT
        COMMANDS[args.command](args, cfg)
    except NumericalFailure as exc:
        log.error("numerical failure: %s", exc)
        return 2
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        # io.DataError, ParseError and InvalidArgument are all ValueErrors
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
