"""Synthetic Gaussian-blob data, class-sorted shard partitioning, ρ-mixed eval sets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeding


@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"features {self.x.shape} and labels {self.y.shape} disagree")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("label outside 0..num_classes-1")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y))

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.x[idx], self.y[idx], self.num_classes)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.dim)] + ["label"])
            for row, label in zip(self.x, self.y):
                w.writerow([repr(float(v)) for v in row] + [int(label)])

    @classmethod
    def from_csv(cls, path, num_classes: int | None = None) -> "LabeledDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        x = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
        y = np.array([int(r[-1]) for r in rows], dtype=np.int64)
        if num_classes is None:
            num_classes = int(y.max()) + 1 if y.size else 0
        return cls(x.reshape(len(rows), -1), y, num_classes)


@dataclass
class EvalSet:
    main: LabeledDataset
    ood: LabeledDataset
    rho: float
    main_classes: tuple[int, ...]

    def combined(self) -> LabeledDataset:
        return LabeledDataset(
            np.concatenate([self.main.x, self.ood.x]),
            np.concatenate([self.main.y, self.ood.y]),
            self.main.num_classes,
        )


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def generate_synthetic(
    num_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    center_scale: float = 1.0,
    test_per_class: int | None = None,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Gaussian blobs: class means ~ N(0, center_scale^2 I), samples ~ N(mean, spread^2 I).

    Train and test come from independent streams. Samples are laid out
    class by class, ``per_class`` (or ``test_per_class``) each.
    """
    if num_classes < 2 or per_class < 1:
        raise ValueError("need at least 2 classes and 1 sample per class")
    test_per_class = per_class if test_per_class is None else test_per_class
    means = seeding.derive_rng(seed, seeding.DATA_MEANS).normal(0.0, center_scale, size=(num_classes, dim))

    def draw(stream: int, n: int) -> LabeledDataset:
        rng = seeding.derive_rng(seed, stream)
        y = np.repeat(np.arange(num_classes), n)
        noise = rng.standard_normal(size=(num_classes * n, dim))
        return LabeledDataset(means[y] + spread * noise, y, num_classes)

    return draw(seeding.DATA_TRAIN, per_class), draw(seeding.DATA_TEST, test_per_class)


def shard_partition(
    train: LabeledDataset,
    num_shards: int,
    num_clients: int,
    shards_per_client: int,
    seed: int,
) -> list[LabeledDataset]:
    """Sort by label, cut into equal contiguous shards, deal shuffled shards to clients."""
    n = len(train)
    if num_shards != num_clients * shards_per_client:
        raise ValueError(
            f"num_shards ({num_shards}) must equal clients x shards_per_client "
            f"({num_clients} x {shards_per_client})"
        )
    if num_shards <= 0 or n % num_shards:
        raise ValueError(f"{num_shards} shards do not divide {n} samples")
    order = np.argsort(train.y, kind="stable")
    shard_size = n // num_shards
    shards = order.reshape(num_shards, shard_size)
    perm = seeding.derive_rng(seed, seeding.SHARDS).permutation(num_shards)
    out = []
    for k in range(num_clients):
        picked = perm[k * shards_per_client:(k + 1) * shards_per_client]
        out.append(train.subset(shards[picked].ravel()))
    return out


def build_eval_set(main_classes, test: LabeledDataset, rho: float, seed: int, client: int = 0) -> EvalSet:
    """All test samples of the main classes plus round(rho*|main|) uniform draws from the rest."""
    if rho < 0:
        raise ValueError(f"rho must be non-negative, got {rho}")
    main_classes = tuple(sorted(int(c) for c in main_classes))
    is_main = np.isin(test.y, main_classes)
    main_idx = np.flatnonzero(is_main)
    other_idx = np.flatnonzero(~is_main)
    n_ood = round_half_away(rho * len(main_idx))
    if n_ood > len(other_idx):
        raise ValueError(
            f"rho={rho} needs {n_ood} out-of-distribution samples but only {len(other_idx)} are available"
        )
    rng = seeding.derive_rng(seed, seeding.EVAL_OOD, client, round_half_away(rho * 1_000_000))
    ood_idx = np.sort(rng.choice(other_idx, size=n_ood, replace=False)) if n_ood else other_idx[:0]
    return EvalSet(test.subset(main_idx), test.subset(ood_idx), float(rho), main_classes)


def write_datasets(directory, train: LabeledDataset, test: LabeledDataset) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / "train.csv", directory / "test.csv"]
    train.to_csv(paths[0])
    test.to_csv(paths[1])
    return paths
