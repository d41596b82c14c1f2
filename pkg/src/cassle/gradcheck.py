"""Finite-difference verification of every differentiable objective in the package."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autograd import Tensor, gradcheck
from .distill import (
    distill_contrastive,
    distill_cross_correlation,
    distill_mse,
    distill_prototype_ce,
    ssl_loss,
)
from .evaluation import probe_loss
from .losses import (
    LossConfig,
    barlow_twins_loss,
    negative_cosine_loss,
    prototype_ce_loss,
    sinkhorn_assignments,
)
from .nn import PrototypeBank, init_predictor, prototype_scores
from .training import FisherDiagonal, ewc_penalty

RTOL = 1e-4
ATOL = 1e-7
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    instances: int
    failures: int
    worst: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _case(name: str, rng: np.random.Generator):
    """Return ``(fn, tensors)`` for one random instance of the named objective."""
    cfg = LossConfig()
    n = int(rng.integers(4, 9))
    d = int(rng.integers(3, 9))
    za, zb = _param(rng, n, d), _param(rng, n, d)

    if name == "ssl/simclr":
        return (lambda: ssl_loss("simclr", za, zb, cfg)), [za, zb]
    if name == "ssl/barlow":
        return (lambda: barlow_twins_loss(za, zb, cfg)), [za, zb]
    if name == "ssl/byol":
        target = Tensor(rng.standard_normal((n, d)))
        return (lambda: negative_cosine_loss(za, target)), [za]
    if name == "ssl/swav":
        bank = PrototypeBank(_param(rng, int(rng.integers(3, 9)), d))
        fixed = PrototypeBank(Tensor(bank.weights.data.copy()))
        q = sinkhorn_assignments(prototype_scores(Tensor(zb.data), fixed, 1.0), cfg)
        return (lambda: prototype_ce_loss(za, q, bank, cfg)), [za, bank.weights]

    g = init_predictor(d, int(rng.integers(4, 9)), int(rng.integers(1 << 30)))
    for layer in g.layers:  # nonzero biases keep g(z) rows away from the origin
        layer.bias.data[...] = rng.standard_normal(layer.bias.shape)
    g_params = g.parameters()
    z_bar = Tensor(rng.standard_normal((n, d)))
    if name == "distill/contrastive":
        return (lambda: distill_contrastive(za, z_bar, g, cfg)), [za, *g_params]
    if name == "distill/mse":
        return (lambda: distill_mse(za, z_bar, g)), [za, *g_params]
    if name == "distill/prototype_ce":
        bank = PrototypeBank(Tensor(rng.standard_normal((int(rng.integers(3, 9)), d))),
                             trainable=False)
        return (lambda: distill_prototype_ce(za, z_bar, g, bank, cfg)), [za, *g_params]
    if name == "distill/cross_correlation":
        return (lambda: distill_cross_correlation(za, z_bar, g, cfg)), [za, *g_params]
    if name == "ewc_penalty":
        w, b = _param(rng, d, n), _param(rng, n)
        fisher = FisherDiagonal({"w": rng.random((d, n)), "b": rng.random(n)},
                                {"w": rng.standard_normal((d, n)), "b": rng.standard_normal(n)})
        lam = float(rng.uniform(0.1, 10.0))
        return (lambda: ewc_penalty({"w": w, "b": b}, fisher, lam)), [w, b]
    if name == "probe_loss":
        k = int(rng.integers(2, 6))
        x = rng.standard_normal((n, d))
        onehot = np.eye(k)[rng.integers(0, k, n)]
        w, b = _param(rng, d, k), _param(rng, k)
        return (lambda: probe_loss(w, b, x, onehot)), [w, b]
    raise KeyError(name)


CHECKS = (
    "ssl/simclr", "ssl/barlow", "ssl/byol", "ssl/swav",
    "distill/contrastive", "distill/mse", "distill/prototype_ce", "distill/cross_correlation",
    "ewc_penalty", "probe_loss",
)


def run_suite(instances: int = 20, seed: int = 0, names=CHECKS,
              progress: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    results = []
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        started = time.perf_counter()
        failures, worst = 0, 0.0
        for _ in range(instances):
            fn, tensors = _case(name, rng)
            ok, ratio = gradcheck(fn, tensors, h=STEP, rtol=RTOL, atol=ATOL)
            failures += not ok
            worst = max(worst, ratio)
        result = CheckResult(name, instances, failures, worst, time.perf_counter() - started)
        results.append(result)
        if progress is not None:
            progress(result)
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<28}{'n':>4}{'fail':>6}{'worst':>12}{'sec':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<28}{r.instances:>4}{r.failures:>6}{r.worst:>12.3g}"
                     f"{r.seconds:>8.2f}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
