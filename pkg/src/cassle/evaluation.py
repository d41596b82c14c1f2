"""Linear probes, weighted k-NN and the continual-learning metrics A, F, FT."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autograd import Tensor, backward, log_softmax, mean, sum_
from .errors import ConfigError, ContractError, ShapeError, StratificationError, UndefinedMetricError
from .optim import cosine_lr


@dataclass
class ProbeConfig:
    label_fraction: float = 1.0
    task_aware: bool = False
    epochs: int = 100
    lr: float = 0.3
    momentum: float = 0.9
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("must lie in (0, 1]", field="eval.probe.label_fraction")
        if int(self.epochs) < 0 or int(self.batch_size) < 1:
            raise ConfigError("epochs >= 0 and batch_size >= 1 required", field="eval.probe.epochs")
        if not self.lr > 0:
            raise ConfigError("must be positive", field="eval.probe.lr")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("must lie in [0, 1)", field="eval.probe.momentum")


@dataclass
class ProbeState:
    weight: np.ndarray  # dim x classes
    bias: np.ndarray
    classes: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.logits(features), axis=1)]


def stratified_subset(labels, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices keeping ``floor(fraction * n_c)`` samples of every class c.

    Each class is permuted by its own seeded stream, so a smaller fraction
    always selects a subset of what a larger fraction selects.
    """
    labels = np.asarray(labels)
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("must lie in (0, 1]", field="eval.probe.label_fraction")
    keep = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        n_keep = int(math.floor(fraction * len(members)))
        if n_keep == 0:
            raise StratificationError(f"class {int(c)} has no sample at label fraction {fraction}")
        order = np.random.default_rng([seed, int(c)]).permutation(len(members))
        keep.append(members[order[:n_keep]])
    return np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)


def probe_loss(weight: Tensor, bias: Tensor, x, targets: np.ndarray) -> Tensor:
    """Softmax cross-entropy of a dense layer; ``targets`` is a one-hot matrix."""
    logits = x @ weight + bias
    return -mean(sum_(log_softmax(logits, axis=1) * targets, axis=1))


def train_linear_probe(features, labels, cfg: ProbeConfig | None = None) -> ProbeState:
    """Multinomial logistic regression on constant features, momentum SGD with cosine decay.

    Features are standardized with statistics of the labeled subset; the
    backbone is never touched because only arrays come in.
    """
    cfg = cfg or ProbeConfig()
    feats = np.asarray(getattr(features, "data", features), dtype=np.float64)
    labels = np.asarray(labels)
    if feats.ndim != 2 or len(labels) != len(feats):
        raise ShapeError(f"probe: features {feats.shape} vs {len(labels)} labels")
    idx = stratified_subset(labels, cfg.label_fraction, cfg.seed)
    x, y = feats[idx], labels[idx]
    classes = np.unique(y)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-8] = 1.0
    x = (x - mu) / sd
    onehot = (y[:, None] == classes[None, :]).astype(np.float64)

    weight = Tensor(np.zeros((x.shape[1], len(classes))), requires_grad=True)
    bias = Tensor(np.zeros(len(classes)), requires_grad=True)
    vel_w, vel_b = np.zeros_like(weight.data), np.zeros_like(bias.data)
    rng = np.random.default_rng(cfg.seed)
    n = len(x)
    batches = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * batches
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(batches):
            rows = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            weight.grad = bias.grad = None
            backward(probe_loss(weight, bias, x[rows], onehot[rows]))
            lr = cosine_lr(cfg.lr, step, total)
            vel_w = cfg.momentum * vel_w + lr * weight.grad
            vel_b = cfg.momentum * vel_b + lr * bias.grad
            weight.data -= vel_w
            bias.data -= vel_b
            step += 1
    return ProbeState(weight.data.copy(), bias.data.copy(), classes, mu, sd)


def evaluate_probe(probe: ProbeState, features, labels) -> float:
    feats = np.asarray(getattr(features, "data", features), dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(probe.predict(feats) == labels))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def knn_predict(train_feats, train_labels, test_feats, k: int = 20, tau: float = 0.07) -> np.ndarray:
    train = _unit_rows(np.asarray(train_feats, dtype=np.float64))
    test = _unit_rows(np.asarray(test_feats, dtype=np.float64))
    train_labels = np.asarray(train_labels)
    if k < 1 or k > len(train):
        raise ConfigError(f"k={k} must lie in [1, {len(train)}]", field="eval.knn_k")
    if not tau > 0:
        raise ConfigError("must be positive", field="eval.knn_tau")
    classes = np.unique(train_labels)
    class_index = np.searchsorted(classes, train_labels)
    sims = test @ train.T
    # stable sort: equal similarities keep the earlier training sample
    top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top_sims = np.take_along_axis(sims, top, axis=1)
    weights = np.exp((top_sims - 1.0) / tau)  # common factor exp(1/tau) dropped
    scores = np.zeros((len(test), len(classes)))
    np.add.at(scores, (np.arange(len(test))[:, None], class_index[top]), weights)
    return classes[np.argmax(scores, axis=1)]  # first maximum: smaller class id


def knn_evaluate(train_feats, train_labels, test_feats, test_labels, k: int = 20,
                 tau: float = 0.07) -> float:
    test_labels = np.asarray(test_labels)
    if len(test_labels) == 0:
        return 0.0
    pred = knn_predict(train_feats, train_labels, test_feats, k, tau)
    return float(np.mean(pred == test_labels))


def _matrix(M) -> np.ndarray:
    m = np.asarray(M, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise ShapeError(f"accuracy matrix must be square and non-empty, got {m.shape}")
    return m


def _require(cells: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(cells)):
        raise ContractError(f"accuracy matrix is missing cells needed for {what}")


def _exact_mean(values) -> float:
    # exact rational arithmetic on the stored doubles, rounded once at the end
    values = list(values)
    return float(sum(values, Fraction(0)) / len(values))


def average_accuracy(M) -> float:
    """Mean of the last row."""
    m = _matrix(M)
    _require(m[-1], "average accuracy")
    return _exact_mean(Fraction(float(v)) for v in m[-1])


def forgetting(M) -> float:
    """Mean over earlier tasks of the largest drop relative to the final row (unclamped)."""
    m = _matrix(M)
    T = m.shape[0]
    if T < 2:
        raise UndefinedMetricError("forgetting needs at least two tasks")
    _require(m[:, :T - 1], "forgetting")
    q = [[Fraction(float(v)) for v in row] for row in m]
    return _exact_mean(max(q[t][i] for t in range(T)) - q[-1][i] for i in range(T - 1))


def forward_transfer(M, R) -> float:
    """Mean of ``A[i-1, i] - R[i]`` over tasks 2..T."""
    m = _matrix(M)
    T = m.shape[0]
    if T < 2:
        raise UndefinedMetricError("forward transfer needs at least two tasks")
    r = np.asarray(R, dtype=np.float64)
    if r.shape != (T,):
        raise ShapeError(f"random baselines must have length {T}, got {r.shape}")
    sup = np.array([m[i - 1, i] for i in range(1, T)])
    _require(sup, "forward transfer")
    _require(r[1:], "forward transfer")
    return _exact_mean(Fraction(float(m[i - 1, i])) - Fraction(float(r[i])) for i in range(1, T))


def compute_metrics(M, R) -> dict:
    """Every metric that is defined for ``M``; undefined ones are ``None``."""
    m = _matrix(M)
    out = {"average_accuracy": average_accuracy(m), "forgetting": None, "forward_transfer": None}
    if m.shape[0] >= 2:
        out["forgetting"] = forgetting(m)
        out["forward_transfer"] = forward_transfer(m, R)
    return out
