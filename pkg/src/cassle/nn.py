"""Encoder, predictor, EMA target and prototype bank built on the autograd engine."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autograd import Tensor, as_tensor, l2_normalize, relu
from .errors import ConfigError, ShapeError


@dataclass
class ArchSpec:
    """Layer widths of the MLP encoder.

    ``backbone`` and ``projector`` list output widths only; the input width of
    each stage is implied by the previous one.
    """

    input_dim: int = 32
    backbone: list[int] = field(default_factory=lambda: [64, 32])
    projector: list[int] = field(default_factory=lambda: [64, 32])
    activation: str = "relu"
    head_hidden: int | None = None
    predictor_hidden: int | None = None
    n_prototypes: int | None = None

    def __post_init__(self):
        widths = [self.input_dim, *self.backbone, *self.projector]
        if not self.backbone or not self.projector:
            raise ConfigError("backbone and projector need at least one layer", field="arch")
        if any(int(w) <= 0 for w in widths):
            raise ConfigError(f"zero-width layer in {widths}", field="arch")
        for name in ("head_hidden", "predictor_hidden", "n_prototypes"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError("must be positive", field=f"arch.{name}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}", field="arch.activation")

    @property
    def feature_dim(self) -> int:
        return self.backbone[-1]

    @property
    def proj_dim(self) -> int:
        return self.projector[-1]


@dataclass
class Linear:
    weight: Tensor  # in_dim x out_dim
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int) -> Linear:
    bound = np.sqrt(6.0 / in_dim)
    weight = rng.uniform(-bound, bound, size=(in_dim, out_dim))
    return Linear(Tensor(weight, requires_grad=True), Tensor(np.zeros(out_dim), requires_grad=True))


def _init_mlp(rng, in_dim: int, widths: list[int]) -> list[Linear]:
    layers = []
    for width in widths:
        layers.append(init_linear(rng, in_dim, width))
        in_dim = width
    return layers


def run_mlp(layers: list[Linear], x: Tensor, *, final_activation: bool) -> Tensor:
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        if x.shape[-1] != layer.in_dim:
            raise ShapeError(f"layer {i} expects width {layer.in_dim}, got {x.shape[-1]}")
        x = layer(x)
        if i < last or final_activation:
            x = relu(x)
    return x


@dataclass
class PrototypeBank:
    weights: Tensor  # K x d
    trainable: bool = True

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def normalized(self) -> Tensor:
        return l2_normalize(self.weights, axis=1)


@dataclass
class EncoderState:
    arch: ArchSpec
    backbone: list[Linear]
    projector: list[Linear]
    head: list[Linear] | None = None
    prototypes: PrototypeBank | None = None
    seed: int = 0

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        groups = [("backbone", self.backbone), ("projector", self.projector)]
        if self.head is not None:
            groups.append(("head", self.head))
        for group, layers in groups:
            for i, layer in enumerate(layers):
                yield f"{group}.{i}.weight", layer.weight
                yield f"{group}.{i}.bias", layer.bias
        if self.prototypes is not None:
            yield "prototypes", self.prototypes.weights

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def clone(self, *, frozen: bool = False) -> "EncoderState":
        """Deep copy; ``frozen=True`` flags every parameter constant."""

        def copy_layers(layers):
            if layers is None:
                return None
            return [Linear(Tensor(l.weight.data.copy(), not frozen),
                           Tensor(l.bias.data.copy(), not frozen)) for l in layers]

        bank = None
        if self.prototypes is not None:
            bank = PrototypeBank(Tensor(self.prototypes.weights.data.copy(), not frozen),
                                 trainable=self.prototypes.trainable and not frozen)
        return EncoderState(self.arch, copy_layers(self.backbone), copy_layers(self.projector),
                            copy_layers(self.head), bank, self.seed)

    def load_state_dict(self, params: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in params:
                raise ShapeError(f"missing parameter {name}")
            if params[name].shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {params[name].shape}")
            p.data[...] = params[name]


def init_encoder(arch: ArchSpec, seed: int, *, with_head: bool = False,
                 with_prototypes: bool = False) -> EncoderState:
    """He-uniform initialization, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    backbone = _init_mlp(rng, arch.input_dim, arch.backbone)
    projector = _init_mlp(rng, arch.feature_dim, arch.projector)
    head = None
    if with_head:
        hidden = arch.head_hidden or 4 * arch.proj_dim
        head = _init_mlp(rng, arch.proj_dim, [hidden, arch.proj_dim])
    bank = None
    if with_prototypes:
        k = arch.n_prototypes or 4 * arch.proj_dim
        protos = rng.standard_normal((k, arch.proj_dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        bank = PrototypeBank(Tensor(protos, requires_grad=True))
    return EncoderState(arch, backbone, projector, head, bank, seed)


def encode(enc: EncoderState, x) -> tuple[Tensor, Tensor]:
    """Return ``(features, z)``: backbone output and projector output."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != enc.arch.input_dim:
        raise ShapeError(f"encode: expected batch x {enc.arch.input_dim}, got {x.shape}")
    features = run_mlp(enc.backbone, x, final_activation=True)
    z = run_mlp(enc.projector, features, final_activation=False)
    return features, z


def predict_head(enc: EncoderState, z: Tensor) -> Tensor:
    if enc.head is None:
        raise ShapeError("encoder has no prediction head")
    return run_mlp(enc.head, z, final_activation=False)


@dataclass
class PredictorState:
    """Two dense layers ``d -> hidden -> d`` with a ReLU in between."""

    layers: list[Linear]

    @property
    def dim(self) -> int:
        return self.layers[0].in_dim

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in (layer.weight, layer.bias)]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield f"predictor.{i}.weight", layer.weight
            yield f"predictor.{i}.bias", layer.bias


def init_predictor(dim: int, hidden: int | None, seed: int) -> PredictorState:
    hidden = hidden or 4 * dim
    if dim <= 0 or hidden <= 0:
        raise ConfigError("predictor widths must be positive", field="arch.predictor_hidden")
    rng = np.random.default_rng(seed)
    return PredictorState(_init_mlp(rng, dim, [hidden, dim]))


def predict_past(g: PredictorState, z: Tensor) -> Tensor:
    """Map current projections into the frozen encoder's space."""
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != g.dim:
        raise ShapeError(f"predictor expects batch x {g.dim}, got {z.shape}")
    return run_mlp(g.layers, z, final_activation=False)


@dataclass
class EmaState:
    shadow: EncoderState
    momentum: float = 0.99


def init_ema(online: EncoderState, momentum: float = 0.99) -> EmaState:
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError("momentum must lie in [0, 1]", field="training.ema_momentum")
    return EmaState(online.clone(frozen=True), momentum)


def ema_update(ema: EmaState, online: EncoderState, m: float | None = None) -> EmaState:
    """``shadow <- m * shadow + (1 - m) * online``, parameter by parameter, in place."""
    m = ema.momentum if m is None else m
    if not 0.0 <= m <= 1.0:
        raise ConfigError("momentum must lie in [0, 1]", field="training.ema_momentum")
    online_params = dict(online.named_parameters())
    for name, shadow in ema.shadow.named_parameters():
        src = online_params.get(name)
        if src is None or src.shape != shadow.shape:
            raise ShapeError(f"ema_update: parameter {name} does not match")
        shadow.data[...] = m * shadow.data + (1.0 - m) * src.data
    return ema


def prototype_scores(z, bank: PrototypeBank, tau: float) -> Tensor:
    """Cosine similarity between each row of ``z`` and each prototype, over ``tau``."""
    if tau <= 0:
        raise ConfigError("temperature must be positive", field="losses.temperature")
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != bank.weights.shape[1]:
        raise ShapeError(f"prototype_scores: z {z.shape} vs prototypes {bank.weights.shape}")
    scores = l2_normalize(z, axis=1) @ bank.normalized().T
    return scores if tau == 1.0 else scores / tau
