"""Predictor-mediated distillation: each SSL loss reused between g(z) and frozen features.

The combined objective is ``L_SSL(zA, zB) + L_D(zA, zA_bar) + L_D(zB, zB_bar)``
with ``L_D(z, z_bar) = L_SSL(g(z), z_bar)`` and no weighting coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autograd import Tensor, as_tensor
from .errors import ConfigError
from .formats import params_digest
from .losses import (
    LossConfig,
    barlow_twins_loss,
    infonce_loss,
    negative_cosine_loss,
    prototype_ce_loss,
    sinkhorn_assignments,
    softmax_targets,
)
from .nn import EncoderState, PredictorState, PrototypeBank, predict_past, prototype_scores

METHOD_FAMILY = {
    "simclr": "contrastive",
    "byol": "mse",
    "swav": "prototype_ce",
    "barlow": "cross_correlation",
}
FAMILIES = ("contrastive", "mse", "prototype_ce", "cross_correlation")


@dataclass(frozen=True)
class AblationFlags:
    swap_views: bool = False
    use_predictor: bool = True


@dataclass
class FrozenEncoder:
    encoder: EncoderState
    digest: str

    @property
    def bank(self) -> PrototypeBank | None:
        return self.encoder.prototypes


def snapshot_frozen(enc: EncoderState) -> FrozenEncoder:
    """Deep copy with every parameter (prototypes included) flagged constant."""
    frozen = enc.clone(frozen=True)
    return FrozenEncoder(frozen, params_digest(frozen.state_dict()))


def _predict(g: PredictorState | None, z: Tensor) -> Tensor:
    return as_tensor(z) if g is None else predict_past(g, z)


def distill_contrastive(z, z_bar, g: PredictorState | None, cfg: LossConfig | None = None,
                        negatives=None) -> Tensor:
    """InfoNCE between g(z_i) and z_bar_i; negatives pooled from predicted and frozen rows."""
    return infonce_loss(_predict(g, z), as_tensor(z_bar).detach(), cfg, negatives)


def distill_mse(z, z_bar, g: PredictorState | None) -> Tensor:
    return negative_cosine_loss(_predict(g, z), z_bar)


def distill_prototype_ce(z, z_bar, g: PredictorState | None, frozen_bank: PrototypeBank | None,
                         cfg: LossConfig | None = None) -> Tensor:
    """Cross-entropy against softmax assignments of z_bar to the frozen prototypes."""
    cfg = cfg or LossConfig()
    if frozen_bank is None or frozen_bank.size == 0:
        raise ConfigError("prototype distillation needs a non-empty frozen bank",
                          field="arch.n_prototypes")
    bank = PrototypeBank(frozen_bank.weights.detach(), trainable=False)
    targets = softmax_targets(prototype_scores(as_tensor(z_bar).detach(), bank,
                                               cfg.proto_temperature).data)
    return prototype_ce_loss(_predict(g, z), targets, bank, cfg)


def distill_cross_correlation(z, z_bar, g: PredictorState | None,
                              cfg: LossConfig | None = None) -> Tensor:
    return barlow_twins_loss(_predict(g, z), as_tensor(z_bar).detach(), cfg)


def distill_loss(family: str, z, z_bar, g, cfg: LossConfig | None = None,
                 frozen_bank: PrototypeBank | None = None) -> Tensor:
    if family == "contrastive":
        return distill_contrastive(z, z_bar, g, cfg)
    if family == "mse":
        return distill_mse(z, z_bar, g)
    if family == "prototype_ce":
        return distill_prototype_ce(z, z_bar, g, frozen_bank, cfg)
    if family == "cross_correlation":
        return distill_cross_correlation(z, z_bar, g, cfg)
    raise ConfigError(f"unknown distillation family {family!r}", field="distill_family")


def ssl_loss(method: str, za: Tensor, zb: Tensor, cfg: LossConfig | None = None, *,
             pred_a: Tensor | None = None, pred_b: Tensor | None = None,
             target_a: Tensor | None = None, target_b: Tensor | None = None,
             bank: PrototypeBank | None = None) -> Tensor:
    """Symmetrized SSL objective, summed over both directions where the method is asymmetric.

    BYOL uses ``pred_*`` (prediction-head outputs) against EMA ``target_*``;
    SwAV uses the trainable ``bank``.
    """
    cfg = cfg or LossConfig()
    if method == "simclr":
        return infonce_loss(za, zb, cfg) + infonce_loss(zb, za, cfg)
    if method == "barlow":
        # C(zB, zA) is the transpose of C(zA, zB): one term is already symmetric
        return barlow_twins_loss(za, zb, cfg)
    if method == "byol":
        if pred_a is None or target_a is None or pred_b is None or target_b is None:
            raise ConfigError("byol needs prediction-head outputs and EMA targets", field="method")
        return negative_cosine_loss(pred_a, target_b) + negative_cosine_loss(pred_b, target_a)
    if method == "swav":
        if bank is None:
            raise ConfigError("swav needs a prototype bank", field="arch.n_prototypes")
        fixed = PrototypeBank(bank.weights.detach(), trainable=False)
        qa = sinkhorn_assignments(prototype_scores(za.detach(), fixed, 1.0), cfg)
        qb = sinkhorn_assignments(prototype_scores(zb.detach(), fixed, 1.0), cfg)
        return prototype_ce_loss(za, qb, bank, cfg) + prototype_ce_loss(zb, qa, bank, cfg)
    raise ConfigError(f"unknown method {method!r}", field="method")


@dataclass
class LossTerms:
    ssl: Tensor
    distill: Tensor | None

    @property
    def total(self) -> Tensor:
        return self.ssl if self.distill is None else self.ssl + self.distill


def cassle_total_loss(method: str, za: Tensor, zb: Tensor, za_bar: Tensor | None,
                      zb_bar: Tensor | None, g: PredictorState | None,
                      flags: AblationFlags | None = None, cfg: LossConfig | None = None, *,
                      distill_family: str | None = None, frozen_bank: PrototypeBank | None = None,
                      **ssl_inputs) -> LossTerms:
    """SSL term plus unweighted two-view distillation term.

    ``za_bar``/``zb_bar`` of ``None`` means there is no frozen encoder yet
    (first task) and the distillation term is omitted entirely.
    """
    flags = flags or AblationFlags()
    cfg = cfg or LossConfig()
    ssl = ssl_loss(method, za, zb, cfg, **ssl_inputs)
    if za_bar is None or zb_bar is None:
        return LossTerms(ssl, None)
    family = distill_family or METHOD_FAMILY[method]
    predictor = g if flags.use_predictor else None
    if flags.use_predictor and g is None:
        raise ConfigError("predictor required unless use_predictor is false", field="strategy")
    targets = (zb_bar, za_bar) if flags.swap_views else (za_bar, zb_bar)
    distill = (distill_loss(family, za, targets[0], predictor, cfg, frozen_bank)
               + distill_loss(family, zb, targets[1], predictor, cfg, frozen_bank))
    return LossTerms(ssl, distill)
