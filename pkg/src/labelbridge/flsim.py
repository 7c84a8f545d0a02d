"""Single-round FedSGD simulation: batch sampling, restricted gradient upload, defenses."""

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import models


class SamplingError(ValueError):
    pass


class PolicyError(ValueError):
    """The requested share would leak a gradient the threat model withholds."""


@dataclass
class Dataset:
    inputs: np.ndarray  # (num_samples, *input_shape)
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_shape(self):
        return tuple(self.inputs.shape[1:])

    def class_pool(self, c):
        return np.flatnonzero(self.labels == c)

    def subset(self, idx):
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes)


DISTRIBUTIONS = ("random", "uniform", "single", "subclassed", "imbalanced")


@dataclass(frozen=True)
class BatchDistribution:
    mode: str = "random"
    cls: int = 0  # single class / imbalanced major class
    subset_size: int = 2
    major_fraction: float = 0.5

    def __post_init__(self):
        if self.mode not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.mode!r}")
        if not 0 < self.major_fraction <= 1:
            raise ValueError("major_fraction must be in (0, 1]")

    @classmethod
    def parse(cls, text):
        """``random``, ``uniform``, ``single:3``, ``subclassed:4``, ``imbalanced:0:0.75``."""
        parts = str(text).split(":")
        mode = parts[0]
        if mode == "single":
            return cls(mode, cls=int(parts[1]) if len(parts) > 1 else 0)
        if mode == "subclassed":
            return cls(mode, subset_size=int(parts[1]) if len(parts) > 1 else 2)
        if mode == "imbalanced":
            major = int(parts[1]) if len(parts) > 1 else 0
            frac = float(parts[2]) if len(parts) > 2 else 0.5
            return cls(mode, cls=major, major_fraction=frac)
        if len(parts) > 1:
            raise ValueError(f"distribution {mode!r} takes no parameters")
        return cls(mode)

    def __str__(self):
        if self.mode == "single":
            return f"single:{self.cls}"
        if self.mode == "subclassed":
            return f"subclassed:{self.subset_size}"
        if self.mode == "imbalanced":
            return f"imbalanced:{self.cls}:{self.major_fraction:g}"
        return self.mode


def _even_split(B, classes):
    counts = {}
    base, rem = divmod(B, len(classes))
    for i, c in enumerate(sorted(classes)):
        counts[c] = base + (1 if i < rem else 0)
    return counts


def batch_counts(dist, n_classes, B, rng):
    """Per-class label counts for one batch."""
    C = n_classes
    counts = np.zeros(C, dtype=np.int64)
    if dist.mode == "uniform":
        for c, k in _even_split(B, range(C)).items():
            counts[c] = k
    elif dist.mode == "single":
        if not 0 <= dist.cls < C:
            raise SamplingError(f"class {dist.cls} out of range")
        counts[dist.cls] = B
    elif dist.mode == "subclassed":
        if not 1 <= dist.subset_size <= C:
            raise SamplingError(f"subset size {dist.subset_size} not in [1, {C}]")
        subset = rng.choice(C, size=dist.subset_size, replace=False)
        for c, k in _even_split(B, subset).items():
            counts[c] = k
    elif dist.mode == "imbalanced":
        if not 0 <= dist.cls < C:
            raise SamplingError(f"class {dist.cls} out of range")
        major = min(B, math.ceil(dist.major_fraction * B))
        counts[dist.cls] = major
        others = np.array([c for c in range(C) if c != dist.cls])
        counts += np.bincount(rng.choice(others, size=B - major), minlength=C)
    else:  # random
        size = int(rng.integers(2, C + 1))
        subset = rng.choice(C, size=size, replace=False)
        counts += np.bincount(rng.choice(subset, size=B), minlength=C)
    return counts


def sample_batch(dataset, dist, B, seed):
    """Draw a batch; returns ``(inputs, labels, true_counts)``."""
    if B < 1:
        raise SamplingError("batch size must be >= 1")
    if len(dataset) == 0:
        raise SamplingError("empty dataset")
    rng = np.random.default_rng(seed)
    counts = batch_counts(dist, dataset.n_classes, B, rng)
    idx = []
    for c in np.flatnonzero(counts):
        pool = dataset.class_pool(c)
        if pool.size == 0:
            raise SamplingError(f"no samples of class {c} in the dataset")
        k = int(counts[c])
        idx.append(rng.choice(pool, size=k, replace=k > pool.size))
    idx = rng.permutation(np.concatenate(idx))
    return dataset.inputs[idx], dataset.labels[idx], counts


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"  # none | prune | noise
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "prune", "noise"):
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.kind == "prune" and not 0 <= self.value < 1:
            raise ValueError("prune ratio must be in [0, 1)")
        if self.kind == "noise" and self.value < 0:
            raise ValueError("noise sigma must be >= 0")

    @classmethod
    def parse(cls, text):
        """``none``, ``prune:0.9`` or ``noise:0.05``."""
        if text is None or text == "none":
            return cls()
        kind, _, value = str(text).partition(":")
        return cls(kind, float(value))

    def __str__(self):
        return "none" if self.kind == "none" else f"{self.kind}:{self.value:g}"


@dataclass(frozen=True)
class GradientShare:
    """What a client uploads: one layer's batch-averaged weight gradient."""

    layer_index: int
    grad: np.ndarray
    batch_size: int
    defense: Optional[DefenseSpec] = None


def check_share_policy(model, layer_index):
    if not model.bottom_start <= layer_index < model.final_index:
        raise PolicyError(
            f"layer {layer_index} may not be shared: only bottom-stack layers "
            f"{model.bottom_start}..{model.final_index - 1} are uploaded"
        )


def client_step(model, batch_inputs, labels, shared_layer_index):
    """Run one local forward/backward pass and upload only the requested layer's gradient."""
    check_share_policy(model, shared_layer_index)
    trace = models.forward(model, batch_inputs)
    grads = models.backward(model, trace, labels)
    grad = grads.weight[shared_layer_index].copy()
    return GradientShare(layer_index=shared_layer_index, grad=grad, batch_size=len(labels))


def prune_smallest(g, ratio):
    """Zero the floor(ratio * n) entries of smallest magnitude; ties go to lower flat index."""
    flat = np.array(g, dtype=np.float64).ravel()
    k = math.floor(ratio * flat.size)
    if k:
        order = np.argsort(np.abs(flat), kind="stable")
        flat[order[:k]] = 0.0
    return flat.reshape(np.shape(g))


def apply_defense(share, defense, seed=None):
    if defense is None or defense.kind == "none":
        return share
    if defense.kind == "prune":
        grad = prune_smallest(share.grad, defense.value)
    else:
        rng = np.random.default_rng(seed)
        grad = share.grad + rng.normal(0.0, defense.value, size=share.grad.shape)
    return replace(share, grad=grad, defense=defense)
