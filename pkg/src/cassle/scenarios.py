"""Task streams for the three incremental regimes, and input-space augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError

REGIMES = ("class_inc", "data_inc", "domain_inc")
REGIME_ALIASES = {"class": "class_inc", "data": "data_inc", "domain": "domain_inc"}


@dataclass
class ScenarioSpec:
    regime: str = "class_inc"
    tasks: int = 2

    def __post_init__(self):
        self.regime = REGIME_ALIASES.get(self.regime, self.regime)
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}", field="scenario.regime")
        if int(self.tasks) < 1:
            raise ConfigError("must be >= 1", field="scenario.tasks")


@dataclass
class TaskStream:
    regime: str
    tasks: list[LabeledDataset]
    class_sets: list[list[int]]

    def __len__(self) -> int:
        return len(self.tasks)


def split_class_incremental(ds: LabeledDataset, T: int, seed: int) -> TaskStream:
    classes = np.array(ds.classes)
    if T < 1 or T > len(classes):
        raise ConfigError(f"cannot split {len(classes)} classes into {T} tasks", field="scenario.tasks")
    order = np.random.default_rng(seed).permutation(classes)
    groups = [sorted(int(c) for c in g) for g in np.array_split(order, T)]
    tasks = [ds.subset(np.flatnonzero(np.isin(ds.labels, g))) for g in groups]
    return TaskStream("class_inc", tasks, groups)


def split_data_incremental(ds: LabeledDataset, T: int, seed: int) -> TaskStream:
    if T < 1 or T > len(ds):
        raise ConfigError(f"cannot split {len(ds)} samples into {T} tasks", field="scenario.tasks")
    order = np.random.default_rng(seed).permutation(len(ds))
    chunks = np.array_split(order, T)
    tasks = [ds.subset(np.sort(c)) for c in chunks]
    return TaskStream("data_inc", tasks, [t.classes for t in tasks])


def with_domain_ids(ds: LabeledDataset) -> LabeledDataset:
    """Data generated without domains is a single domain 0."""
    if ds.domain_ids is not None:
        return ds
    return LabeledDataset(ds.samples, ds.labels, np.zeros(len(ds), dtype=np.int64), ds.ids)


def split_domain_incremental(ds: LabeledDataset, seed: int = 0) -> TaskStream:
    """One task per domain, largest domain first; ties go to the smaller domain id."""
    if ds.domain_ids is None:
        raise ConfigError("domain-incremental split needs domain ids", field="data.n_domains")
    domains, counts = np.unique(ds.domain_ids, return_counts=True)
    order = sorted(zip(domains, counts), key=lambda dc: (-dc[1], dc[0]))
    tasks = [ds.subset(np.flatnonzero(ds.domain_ids == d)) for d, _ in order]
    return TaskStream("domain_inc", tasks, [t.classes for t in tasks])


def split(ds: LabeledDataset, spec: ScenarioSpec, seed: int) -> TaskStream:
    if spec.regime == "class_inc":
        return split_class_incremental(ds, spec.tasks, seed)
    if spec.regime == "data_inc":
        return split_data_incremental(ds, spec.tasks, seed)
    stream = split_domain_incremental(ds, seed)
    if len(stream) != spec.tasks:
        raise ConfigError(f"data has {len(stream)} domains but scenario asks for {spec.tasks} tasks",
                          field="scenario.tasks")
    return stream


@dataclass
class AugmentPolicy:
    """Probabilities and magnitudes of the input-space transforms.

    Every transform is applied per sample with its own probability. Rotation
    turns consecutive coordinate pairs (0, 1), (2, 3), ... by independent
    angles drawn from ``[-rotate_max_angle, rotate_max_angle]``.
    """

    noise_sigma: float = 0.6
    noise_prob: float = 1.0
    mask_rate: float = 0.2
    mask_prob: float = 0.5
    scale_low: float = 0.8
    scale_high: float = 1.2
    scale_prob: float = 0.8
    rotate_max_angle: float = 0.3
    rotate_prob: float = 0.5

    def __post_init__(self):
        for name in ("noise_prob", "mask_prob", "scale_prob", "rotate_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError("probability must lie in [0, 1]", field=f"augment.{name}")
        if self.noise_sigma < 0 or self.rotate_max_angle < 0:
            raise ConfigError("must be >= 0", field="augment.noise_sigma")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ConfigError("must lie in [0, 1)", field="augment.mask_rate")
        if not 0.0 < self.scale_low <= self.scale_high:
            raise ConfigError("need 0 < scale_low <= scale_high", field="augment.scale_low")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(noise_prob=0.0, mask_prob=0.0, scale_prob=0.0, rotate_prob=0.0)


def _augment(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    n, dim = x.shape
    out = x.copy()
    if policy.rotate_prob > 0 and dim >= 2:
        pairs = dim // 2
        hit = rng.random(n) < policy.rotate_prob
        theta = rng.uniform(-policy.rotate_max_angle, policy.rotate_max_angle, (n, pairs)) * hit[:, None]
        c, s = np.cos(theta), np.sin(theta)
        even, odd = out[:, 0:2 * pairs:2].copy(), out[:, 1:2 * pairs:2].copy()
        out[:, 0:2 * pairs:2] = c * even - s * odd
        out[:, 1:2 * pairs:2] = s * even + c * odd
    if policy.scale_prob > 0:
        hit = rng.random(n) < policy.scale_prob
        factor = rng.uniform(policy.scale_low, policy.scale_high, n)
        out *= np.where(hit, factor, 1.0)[:, None]
    if policy.mask_prob > 0 and policy.mask_rate > 0:
        hit = rng.random(n) < policy.mask_prob
        drop = (rng.random((n, dim)) < policy.mask_rate) & hit[:, None]
        out[drop] = 0.0
    if policy.noise_prob > 0 and policy.noise_sigma > 0:
        hit = rng.random(n) < policy.noise_prob
        out += policy.noise_sigma * rng.standard_normal((n, dim)) * hit[:, None]
    return out


def augment_pair(x: np.ndarray, policy: AugmentPolicy, rng) -> tuple[np.ndarray, np.ndarray]:
    """Two independent stochastic views of every row of ``x``.

    ``rng`` is a Generator or an integer seed; view A is drawn before view B.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    x = np.asarray(x, dtype=np.float64)
    return _augment(x, policy, rng), _augment(x, policy, rng)
