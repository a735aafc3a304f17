"""Corpus drivers for trajectory filtering and reconstruction."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor

from . import metrics
from .baselines import run_baseline
from .optim import FitConfig, FitResult, fit_batch
from .trajectory import (DenseTrajectory, ObservedTrajectory, nearest_step_indices,  # noqa: F401
                         reconstruction_loss)

FILTER_DT = 0.1
RECONSTRUCT_DT = 1.0


def run_fit(corpus: list[ObservedTrajectory], dt: float, config: FitConfig | None = None,
            threads: int = 1) -> list[FitResult]:
    """Fit a corpus in fixed-size batches; batches run concurrently.

    Batch boundaries depend only on ``config.batch_size``, never on ``threads``.
    """
    config = config or FitConfig()
    batches = [corpus[i:i + config.batch_size] for i in range(0, len(corpus), config.batch_size)]
    if threads <= 1 or len(batches) <= 1:
        done = [fit_batch(b, dt, config) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(lambda b: fit_batch(b, dt, config), batches))
    return [r for batch in done for r in batch]


def run_filtering(corpus, dt: float = FILTER_DT, config: FitConfig | None = None, threads: int = 1):
    return run_fit(corpus, dt, config, threads)


def run_reconstruction(corpus, dt: float = RECONSTRUCT_DT, config: FitConfig | None = None,
                       threads: int = 1):
    return run_fit(corpus, dt, config, threads)


def evaluate_fits(corpus: list[ObservedTrajectory], results: list[FitResult]) -> list[metrics.TrajectoryReport]:
    # kernel outputs, not finite differences, are the fitted accelerations
    return [metrics.report(r.dense, obs, r.wall_time, accelerations=r.dense.accelerations[:-1])
            for obs, r in zip(corpus, results)]


def run_baselines(corpus: list[ObservedTrajectory], method: str, dt: float,
                  window: int = 9, width: float = 5) -> tuple[list[DenseTrajectory], list[metrics.TrajectoryReport]]:
    dense, reports = [], []
    for obs in corpus:
        t0 = time.perf_counter()
        d = run_baseline(obs, method, dt, window, width)
        elapsed = time.perf_counter() - t0
        dense.append(d)
        reports.append(metrics.report(d, obs, elapsed))
    return dense, reports
