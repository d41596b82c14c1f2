"""Desk-scale benchmark: synthetic class-incremental stream, several strategies and seeds."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from statistics import fmean

from .config import RunConfig, config_from_dict
from .training import run_strategies

BENCH_METHODS = ("simclr", "barlow", "byol")
BENCH_STRATEGIES = ("finetune", "cassle", "cassle_swap", "cassle_nopred")
BENCH_SEEDS = (0, 1, 2, 3, 4)


def bench_config(method: str, seed: int, steps: int = 2000) -> RunConfig:
    """8 classes of 32-dim inputs, two tasks, MLP encoder, ``steps`` steps per task."""
    return config_from_dict({
        "method": method,
        "seed": seed,
        "scenario": {"regime": "class_inc", "tasks": 2},
        "data": {"synthetic": {"n_classes": 8, "samples_per_class": 250, "input_dim": 32}},
        "arch": {"input_dim": 32},
        "training": {"steps_per_task": steps},
    })


def max_workers() -> int:
    """Parallel run cap from ``CSSL_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("CSSL_THREADS", "1")))
    except ValueError:
        return 1


def _job(args) -> tuple[str, int, dict]:
    method, seed, strategies, steps = args
    reports = run_strategies(bench_config(method, seed, steps), strategies)
    return method, seed, reports


def run_benchmark(methods=BENCH_METHODS, seeds=BENCH_SEEDS, strategies=BENCH_STRATEGIES,
                  steps: int = 2000, workers: int | None = None) -> dict:
    """``{method: {strategy: [report per seed]}}`` with seeds in the given order."""
    jobs = [(m, s, tuple(strategies), steps) for m in methods for s in seeds]
    workers = min(workers or max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    out: dict = {m: {st: [] for st in strategies} for m in methods}
    for method, _seed, reports in results:
        for strategy in strategies:
            out[method][strategy].append(reports[strategy])
    return out


def mean_accuracy(reports) -> float:
    return fmean(r["metrics"]["average_accuracy"] for r in reports)


def summarize(results: dict) -> dict:
    return {m: {st: mean_accuracy(rs) for st, rs in by.items()} for m, by in results.items()}
