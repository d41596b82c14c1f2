"""Datasets: seeded synthetic clusters and the CIFAR-100 binary distribution."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

CIFAR_RECORD = 3074
CIFAR_CLASSES = 100


@dataclass
class LabeledDataset:
    """Samples plus labels. Labels are only used to split and to evaluate."""

    samples: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or len(self.labels) != len(self.samples):
            raise ConfigError("dataset needs N x dim samples with one label each")
        if self.ids is None:
            self.ids = np.arange(len(self.samples))
        if self.domain_ids is not None:
            self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        domains = None if self.domain_ids is None else self.domain_ids[index]
        return LabeledDataset(self.samples[index], self.labels[index], domains, self.ids[index])


@dataclass
class SyntheticSpec:
    n_classes: int = 8
    samples_per_class: int = 250
    input_dim: int = 32
    cluster_std: float = 1.0
    n_domains: int = 1
    domain_shift_strength: float = 1.0
    seed: int = 0
    domain_weights: list[float] | None = field(default=None)

    def __post_init__(self):
        for name in ("n_classes", "samples_per_class", "input_dim", "n_domains"):
            if int(getattr(self, name)) < 1:
                raise ConfigError("must be >= 1", field=f"data.{name}")
        if self.cluster_std < 0 or self.domain_shift_strength < 0:
            raise ConfigError("must be >= 0", field="data.cluster_std")
        if self.domain_weights is not None and len(self.domain_weights) != self.n_domains:
            raise ConfigError("needs one weight per domain", field="data.domain_weights")


def _cayley_rotation(rng: np.random.Generator, dim: int, strength: float) -> np.ndarray:
    a = rng.standard_normal((dim, dim))
    skew = (a - a.T) / np.sqrt(2.0 * dim)
    eye = np.eye(dim)
    return np.linalg.solve(eye - 0.5 * strength * skew, eye + 0.5 * strength * skew)


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Gaussian clusters around class means placed on a sphere of radius ``4 * cluster_std``.

    With several domains each domain applies its own orthogonal map and offset
    (domain 0 is the identity); ``domain_shift_strength`` scales both.
    """
    rng = np.random.default_rng(spec.seed)
    radius = 4.0 * spec.cluster_std
    means = rng.standard_normal((spec.n_classes, spec.input_dim))
    means *= radius / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    samples = means[labels] + spec.cluster_std * rng.standard_normal((len(labels), spec.input_dim))

    domains = None
    if spec.n_domains > 1:
        weights = np.asarray(spec.domain_weights or np.arange(spec.n_domains, 0, -1), dtype=float)
        domains = rng.choice(spec.n_domains, size=len(labels), p=weights / weights.sum())
        for d in range(1, spec.n_domains):
            rot = _cayley_rotation(rng, spec.input_dim, spec.domain_shift_strength)
            offset = rng.standard_normal(spec.input_dim)
            offset *= spec.domain_shift_strength * radius / np.linalg.norm(offset)
            rows = domains == d
            samples[rows] = samples[rows] @ rot.T + offset
    return LabeledDataset(samples, labels, domains)


def read_cifar100_binary(path) -> LabeledDataset:
    """Decode the CIFAR-100 binary format.

    Each 3074-byte record holds the coarse label, the fine label and three
    1024-byte colour planes (R, G, B) of a row-major 32x32 image. Pixels are
    scaled to [0, 1]; the fine label is the class.
    """
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    fine = records[:, 1].astype(np.int64)
    if fine.size and fine.max() >= CIFAR_CLASSES:
        raise FormatError(f"{path}: fine label {int(fine.max())} out of range")
    if records.size and records[:, 0].max() >= 20:
        raise FormatError(f"{path}: coarse label out of range")
    pixels = records[:, 2:].astype(np.float64) / 255.0
    return LabeledDataset(pixels, fine)


def stratified_holdout(ds: LabeledDataset, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays ``(train, test)`` holding out ``fraction`` of every class (and domain)."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError("must lie in (0, 1)", field="eval.test_fraction")
    rng = np.random.default_rng(seed)
    keys = ds.labels if ds.domain_ids is None else ds.labels * 100003 + ds.domain_ids
    test = []
    for key in np.unique(keys):
        members = rng.permutation(np.flatnonzero(keys == key))
        test.extend(members[:int(round(fraction * len(members)))])
    test_mask = np.zeros(len(ds), dtype=bool)
    test_mask[np.asarray(test, dtype=np.int64)] = True
    return np.flatnonzero(~test_mask), np.flatnonzero(test_mask)
