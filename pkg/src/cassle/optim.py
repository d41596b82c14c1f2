"""LARS and momentum SGD over autograd leaves."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .errors import ConfigError, NumericError


@dataclass
class OptimizerConfig:
    kind: str = "lars"
    global_lr: float = 0.4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lars_eta: float = 0.02
    eps: float = 1e-8
    schedule: str = "cosine"

    def __post_init__(self):
        if self.kind not in ("lars", "sgd"):
            raise ConfigError(f"unknown optimizer {self.kind!r}", field="optimizer.kind")
        if not self.global_lr > 0:
            raise ConfigError("must be positive", field="optimizer.global_lr")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("must lie in [0, 1)", field="optimizer.momentum")
        if self.weight_decay < 0 or self.lars_eta <= 0 or self.eps < 0:
            raise ConfigError("weight_decay/eps must be >= 0 and lars_eta > 0", field="optimizer")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}", field="optimizer.schedule")


@dataclass
class OptimizerState:
    buffers: dict = field(default_factory=dict)  # Tensor -> momentum buffer
    steps: int = 0


def lars_local_lr(w: np.ndarray, grad: np.ndarray, cfg: OptimizerConfig) -> float:
    w_norm = float(np.linalg.norm(w))
    g_norm = float(np.linalg.norm(grad))
    if w_norm > 0.0 and g_norm > 0.0:
        return cfg.lars_eta * w_norm / (g_norm + cfg.weight_decay * w_norm + cfg.eps)
    return 1.0


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def _adapted(p: Tensor) -> bool:
    # biases are excluded from trust scaling and weight decay
    return p.ndim > 1


def optimizer_step(params: list[Tensor], cfg: OptimizerConfig, state: OptimizerState,
                   lr: float | None = None, grads: dict | None = None) -> None:
    """One in-place update of ``params`` from ``grads`` (default: each ``p.grad``).

    Parameters without a gradient are left untouched. Raises
    :class:`NumericError` before touching anything if a gradient is non-finite.
    """
    lr = cfg.global_lr if lr is None else lr
    pairs = []
    for p in params:
        g = grads.get(p) if grads is not None else p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; optimizer step aborted")
        pairs.append((p, g))
    for p, g in pairs:
        if _adapted(p):
            wd = cfg.weight_decay
            scale = lars_local_lr(p.data, g, cfg) if cfg.kind == "lars" else 1.0
            update = g + wd * p.data if wd else g
        else:
            scale, update = 1.0, g
        step = (lr * scale) * update
        buf = state.buffers.get(p)
        if buf is None:
            buf = step if cfg.momentum == 0.0 else step.copy()
        else:
            buf = cfg.momentum * buf + step
        state.buffers[p] = buf
        p.data -= buf
    state.steps += 1
