"""Datasets, non-IID partitioners and per-client train/test splits."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
MAX_REDRAWS = 100


class PartitionError(RuntimeError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class Pathological:
    classes_per_client: int = 2
    beta: float = 0.5


@dataclass
class Practical:
    gamma: float = 0.5


@dataclass
class PartitionSpec:
    variant: Pathological | Practical
    num_clients: int
    seed: int = 0

    def validate(self, num_classes: int) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        v = self.variant
        if isinstance(v, Pathological):
            if not 1 <= v.classes_per_client <= num_classes:
                raise ValueError(f"classes_per_client must be in [1, {num_classes}]")
            if not v.beta > 0:
                raise ValueError("beta must be > 0")
        elif not v.gamma > 0:
            raise ValueError("gamma must be > 0")


@dataclass
class ClientShard:
    client_id: int
    train: Dataset
    test: Dataset
    train_index: np.ndarray  # positions in the partitioned dataset
    test_index: np.ndarray

    @property
    def n_k(self) -> int:
        return len(self.train)


@dataclass
class ClientPool:
    """A client's samples before the train/test split."""

    client_id: int
    index: np.ndarray


def load_cifar10_binary(paths: Sequence[str | Path]) -> Dataset:
    """Read CIFAR-10 binary batch files (1 label byte + 3072 planar RGB bytes per record)."""
    images, labels = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % CIFAR_RECORD:
            raise ValueError(f"{path}: {raw.size} bytes is not a multiple of {CIFAR_RECORD}")
        rec = raw.reshape(-1, CIFAR_RECORD)
        if rec.size and rec[:, 0].max() > 9:
            raise ValueError(f"{path}: label byte {int(rec[:, 0].max())} > 9")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float64) / 255.0)
    if not images:
        raise ValueError("no CIFAR files given")
    return Dataset(np.concatenate(images), np.concatenate(labels), 10)


def gen_synthetic(num_classes: int, dims: Sequence[int], samples_per_class: int,
                  class_separation: float, seed: int = 0, noise: float = 1.0,
                  mean_grid: int = 4) -> Dataset:
    """Isotropic Gaussian classes rendered as image-shaped tensors.

    Class means are orthonormal directions scaled so every pair of means is
    exactly ``class_separation`` noise standard deviations apart (when there
    are more classes than free directions they are only normalised). With
    ``mean_grid=g`` each mean is piecewise constant on a g x g grid of
    spatial blocks, the kind of structure a convolution picks up;
    ``mean_grid=0`` draws every pixel independently. Samples are ordered by
    class.
    """
    if mean_grid < 0:
        raise ValueError("mean_grid must be >= 0")
    rng = np.random.default_rng(seed)
    dims = tuple(int(v) for v in dims)
    d = int(np.prod(dims))
    if mean_grid and len(dims) == 3:
        c, h, w = dims
        coarse = rng.normal(size=(num_classes, c, mean_grid, mean_grid))
        rows = np.arange(h) * mean_grid // h
        cols = np.arange(w) * mean_grid // w
        dirs = coarse[:, :, rows][:, :, :, cols].reshape(num_classes, d)
    else:
        dirs = rng.normal(size=(num_classes, d))
    if np.linalg.matrix_rank(dirs) == num_classes:
        # orthonormal rows spanning the same (block-structured) subspace
        dirs = np.linalg.qr(dirs.T)[0].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = dirs * (class_separation * noise / np.sqrt(2.0))
    x = means[:, None, :] + noise * rng.normal(size=(num_classes, samples_per_class, d))
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    return Dataset(x.reshape(num_classes * samples_per_class, *dims), labels, num_classes)


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``; leftover units go to the largest fractional parts."""
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def pathological_classes(client_id: int, k: int, num_classes: int) -> list[int]:
    return [(client_id * k + j) % num_classes for j in range(k)]


def _split_class(rng, idx: np.ndarray, counts: np.ndarray) -> list[np.ndarray]:
    idx = rng.permutation(idx)
    return np.split(idx, np.cumsum(counts)[:-1])


def partition_pathological(ds: Dataset, spec: PartitionSpec) -> list[ClientPool]:
    """Each client holds ``k`` classes chosen round-robin; class samples are split
    among their holders with Dirichlet(beta) proportions."""
    spec.validate(ds.num_classes)
    v = spec.variant
    n, c, k = spec.num_clients, ds.num_classes, v.classes_per_client
    rng = np.random.default_rng(spec.seed)
    holders = {cls: [] for cls in range(c)}
    for i in range(n):
        for cls in pathological_classes(i, k, c):
            holders[cls].append(i)
    pieces: list[list[np.ndarray]] = [[] for _ in range(n)]
    for cls in range(c):
        idx = np.flatnonzero(ds.labels == cls)
        owners = holders[cls]
        if not owners:
            # class held by nobody (n * k < c); left out of the federation
            continue
        for _ in range(MAX_REDRAWS):
            counts = largest_remainder(rng.dirichlet([v.beta] * len(owners)), idx.size)
            if counts.min() > 0:
                break
        else:
            raise PartitionError(f"class {cls}: some holder got zero samples after {MAX_REDRAWS} draws")
        for owner, part in zip(owners, _split_class(rng, idx, counts)):
            pieces[owner].append(part)
    return [ClientPool(i, np.sort(np.concatenate(p))) for i, p in enumerate(pieces)]


def partition_practical(ds: Dataset, spec: PartitionSpec) -> list[ClientPool]:
    """Every class is spread over all clients with Dirichlet(gamma) proportions."""
    spec.validate(ds.num_classes)
    n = spec.num_clients
    rng = np.random.default_rng(spec.seed)
    per_class = [np.flatnonzero(ds.labels == cls) for cls in range(ds.num_classes)]
    for _ in range(MAX_REDRAWS):
        pieces: list[list[np.ndarray]] = [[] for _ in range(n)]
        for idx in per_class:
            counts = largest_remainder(rng.dirichlet([spec.variant.gamma] * n), idx.size)
            for owner, part in enumerate(_split_class(rng, idx, counts)):
                pieces[owner].append(part)
        pools = [ClientPool(i, np.sort(np.concatenate(p))) for i, p in enumerate(pieces)]
        if min(p.index.size for p in pools) > 0:
            return pools
    raise PartitionError(f"some client got no samples after {MAX_REDRAWS} draws")


def partition(ds: Dataset, spec: PartitionSpec) -> list[ClientPool]:
    if isinstance(spec.variant, Pathological):
        return partition_pathological(ds, spec)
    return partition_practical(ds, spec)


def held_out_count(n: int) -> int:
    """Samples of one class sent to test: floor(n/5), but one whenever n is 2..4."""
    if n < 2:
        return 0
    return max(1, n // 5)


def split_train_test(ds: Dataset, pool: ClientPool, seed: int = 0) -> ClientShard:
    """Stratified 8:2 split of a client's pool."""
    if pool.index.size == 0:
        raise ValueError(f"client {pool.client_id}: empty pool")
    rng = np.random.default_rng([seed, pool.client_id])
    labels = ds.labels[pool.index]
    train, test = [], []
    for cls in np.unique(labels):
        idx = rng.permutation(pool.index[labels == cls])
        t = held_out_count(idx.size)
        test.append(idx[:t])
        train.append(idx[t:])
    tr, te = np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
    return ClientShard(pool.client_id, ds.subset(tr), ds.subset(te), tr, te)


def make_shards(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    return [split_train_test(ds, pool, spec.seed) for pool in partition(ds, spec)]
