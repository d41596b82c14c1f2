"""Self-supervised objectives over batched projections.

All losses take ``batch x d`` tensors and return a scalar tensor. Similarities
are cosine similarities computed on l2-normalized rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    Tensor,
    as_tensor,
    center,
    exp,
    l2_normalize,
    log,
    log_softmax,
    mean,
    pow2,
    sum_,
)
from .errors import ConfigError, ContractError, DegenerateInputError, DomainError, ShapeError
from .nn import PrototypeBank, prototype_scores


@dataclass
class LossConfig:
    temperature: float = 0.2
    proto_temperature: float = 0.1
    barlow_lambda: float = 5e-3
    sinkhorn_iters: int = 3
    sinkhorn_eps: float = 0.05
    include_positive_in_denominator: bool = True

    def __post_init__(self):
        for name in ("temperature", "proto_temperature", "barlow_lambda", "sinkhorn_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be positive", field=f"losses.{name}")
        if int(self.sinkhorn_iters) < 1:
            raise ConfigError("must be >= 1", field="losses.sinkhorn_iters")


def _check_pair(name: str, a: Tensor, b: Tensor) -> None:
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"{name}: expected matching batch x d inputs, got {a.shape} and {b.shape}")


def infonce_loss(za, zb, cfg: LossConfig | None = None, negatives=None, *,
                 temperature: float | None = None) -> Tensor:
    """Contrastive loss with anchors ``za`` and positives ``zb``.

    Without explicit ``negatives`` the negatives of anchor i are every other
    row of both ``za`` and ``zb`` (2N - 2 of them). With explicit ``negatives``
    (an ``M x d`` tensor) every anchor uses that shared set instead.
    """
    cfg = cfg or LossConfig()
    tau = cfg.temperature if temperature is None else temperature
    if tau <= 0:
        raise ConfigError("temperature must be positive", field="losses.temperature")
    za, zb = as_tensor(za), as_tensor(zb)
    _check_pair("infonce_loss", za, zb)
    n = za.shape[0]
    a = l2_normalize(za, axis=1)
    b = l2_normalize(zb, axis=1)
    eye = np.eye(n)
    ab = (a @ b.T) / tau
    positive = sum_(ab * eye, axis=1)

    if negatives is None:
        if n < 2:
            raise DegenerateInputError("infonce_loss: in-batch negatives need batch >= 2")
        aa = (a @ a.T) / tau
        shift = np.maximum(ab.data.max(axis=1, keepdims=True), aa.data.max(axis=1, keepdims=True))
        keep_ab = np.ones((n, n)) if cfg.include_positive_in_denominator else 1.0 - eye
        denom = (sum_(_exp_shifted(ab, shift) * keep_ab, axis=1)
                 + sum_(_exp_shifted(aa, shift) * (1.0 - eye), axis=1))
    else:
        neg = l2_normalize(as_tensor(negatives), axis=1)
        if neg.ndim != 2 or neg.shape[1] != za.shape[1]:
            raise ShapeError(f"infonce_loss: negatives of shape {neg.shape}")
        an = (a @ neg.T) / tau
        shift = an.data.max(axis=1, keepdims=True)
        if cfg.include_positive_in_denominator:
            shift = np.maximum(shift, positive.data[:, None])
        denom = sum_(_exp_shifted(an, shift), axis=1)
        if cfg.include_positive_in_denominator:
            denom = denom + _exp_shifted(positive, shift[:, 0])
    # -log(exp(pos) / sum exp(.)), evaluated with a constant shift
    return mean(log(denom) - (positive - shift.reshape(-1)))


def _exp_shifted(x: Tensor, shift: np.ndarray) -> Tensor:
    return exp(x - shift)


def negative_cosine_loss(q, z) -> Tensor:
    """Mean of ``-cos(q_i, z_i)``; ``z`` is treated as a stop-gradient target."""
    q = as_tensor(q)
    z = as_tensor(z).detach()
    _check_pair("negative_cosine_loss", q, z)
    return -mean(sum_(l2_normalize(q, axis=1) * l2_normalize(z, axis=1), axis=1))


def sinkhorn_assignments(scores, cfg: LossConfig | None = None, *,
                         iters: int | None = None, eps: float | None = None) -> np.ndarray:
    """Balanced soft assignments of samples to prototypes (no gradient).

    Alternates normalizing each prototype column to total mass 1/K and each
    sample row to mass 1/B, then rescales rows to sum to one.
    """
    cfg = cfg or LossConfig()
    iters = cfg.sinkhorn_iters if iters is None else iters
    eps = cfg.sinkhorn_eps if eps is None else eps
    if iters < 1:
        raise ConfigError("must be >= 1", field="losses.sinkhorn_iters")
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or not np.all(np.isfinite(s)):
        raise DomainError("sinkhorn_assignments: scores must be a finite batch x K matrix")
    batch, k = s.shape
    q = np.exp((s - s.max(axis=1, keepdims=True)) / eps)
    q /= q.sum()
    for _ in range(iters):
        q /= q.sum(axis=0, keepdims=True)
        q /= k
        q /= q.sum(axis=1, keepdims=True)
        q /= batch
    q /= q.sum(axis=1, keepdims=True)
    if not np.all(np.isfinite(q)):
        raise DomainError("sinkhorn_assignments: non-finite assignments")
    return q


def prototype_ce_loss(za, assignments, bank: PrototypeBank, cfg: LossConfig | None = None, *,
                      temperature: float | None = None) -> Tensor:
    """Cross-entropy between target assignments and the softmax over prototype scores."""
    cfg = cfg or LossConfig()
    tau = cfg.proto_temperature if temperature is None else temperature
    a = assignments.data if isinstance(assignments, Tensor) else np.asarray(assignments, float)
    if a.ndim != 2 or a.shape[0] != as_tensor(za).shape[0] or a.shape[1] != bank.size:
        raise ShapeError(f"prototype_ce_loss: assignments of shape {a.shape}")
    if np.any(a < 0) or not np.allclose(a.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
        raise ContractError("prototype_ce_loss: assignment rows must be distributions")
    logp = log_softmax(prototype_scores(za, bank, tau), axis=1)
    return -mean(sum_(logp * a, axis=1))


def cross_correlation(za, zb) -> Tensor:
    """``d x d`` correlation between batch-centred columns of ``za`` and ``zb``."""
    za, zb = as_tensor(za), as_tensor(zb)
    _check_pair("cross_correlation", za, zb)
    if za.shape[0] < 2:
        raise DegenerateInputError("cross_correlation: batch must be >= 2")
    a = l2_normalize(center(za, 0), axis=0)
    b = l2_normalize(center(zb, 0), axis=0)
    return a.T @ b


def barlow_twins_loss(za, zb, cfg: LossConfig | None = None, *, lam: float | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    lam = cfg.barlow_lambda if lam is None else lam
    if lam <= 0:
        raise ConfigError("must be positive", field="losses.barlow_lambda")
    c = cross_correlation(za, zb)
    eye = np.eye(c.shape[0])
    on_diag = sum_(pow2((1.0 - c) * eye))
    off_diag = sum_(pow2(c * (1.0 - eye)))
    return on_diag + lam * off_diag


def softmax_targets(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


__all__ = [
    "LossConfig", "infonce_loss", "negative_cosine_loss", "sinkhorn_assignments",
    "prototype_ce_loss", "cross_correlation", "barlow_twins_loss", "softmax_targets",
]
