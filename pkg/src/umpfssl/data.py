"""Datasets, IDX ingestion, Dirichlet label-skew partitioning and labeled/unlabeled splits."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConsistencyError, DomainError, FormatError, PartitionError
from .rng import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
MAX_REROLLS = 10


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise DomainError(f"features must be a non-empty N x d matrix, got {X.shape}")
        if y.shape != (X.shape[0],):
            raise ConsistencyError(f"{X.shape[0]} feature rows but labels of shape {y.shape}")
        if self.class_count < 2:
            raise DomainError("class_count must be at least 2")
        if y.min() < 0 or y.max() >= self.class_count:
            raise DomainError("label outside [0, class_count)")
        if not np.all(np.isfinite(X)):
            raise DomainError("non-finite feature values")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def lattice_means(class_count: int, dim: int = 2, spacing: float = 1.0) -> np.ndarray:
    """Class means on the integer grid ``{0..side-1}^dim``, enumerated in base-``side`` order."""
    side = max(2, math.ceil(class_count ** (1.0 / dim) - 1e-9))
    while side ** dim < class_count:
        side += 1
    means = np.zeros((class_count, dim))
    for c in range(class_count):
        q = c
        for d in range(dim):
            means[c, d] = q % side
            q //= side
    return means * spacing


def generate_synthetic(class_count: int, per_class: int, cluster_spread: float, seed: int,
                       dim: int = 2, spacing: float = 1.0) -> Dataset:
    """Isotropic Gaussian blobs, ``per_class`` rows per class, rows grouped by class."""
    if class_count < 2 or per_class < 1:
        raise DomainError("need class_count >= 2 and per_class >= 1")
    if cluster_spread < 0:
        raise DomainError("cluster_spread must be non-negative")
    rng = make_rng(seed, "synthetic")
    means = lattice_means(class_count, dim, spacing)
    labels = np.repeat(np.arange(class_count), per_class)
    noise = rng.standard_normal((class_count * per_class, dim)) * cluster_spread
    return Dataset(means[labels] + noise, labels, class_count)


# --- IDX -------------------------------------------------------------------

def _open(path, mode):
    path = Path(path)
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    with _open(path, "rb") as fh:
        raw = fh.read()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header != size:
        raise FormatError(f"{path}: expected {size} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] and flattened."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if class_count is None:
        class_count = max(2, int(y.max()) + 1)
    return Dataset(X, y, class_count)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write ``uint8`` images of shape (N, rows, cols) and labels of shape (N,)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise DomainError("images must have shape (N, rows, cols)")
    with _open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with _open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# --- partitioning ----------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    client_count: int
    alpha: float
    label_split_alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.client_count < 2:
            raise DomainError("client_count must be at least 2")
        if not self.alpha > 0 or not self.label_split_alpha > 0:
            raise DomainError("Dirichlet concentrations must be positive")


def largest_remainder(proportions: Sequence[float], total: int) -> np.ndarray:
    """Integer counts summing to ``total``.

    Floors first; leftover units go to the largest fractional remainders,
    ties to the lowest index.
    """
    p = np.asarray(proportions, dtype=np.float64)
    s = p.sum()
    if total == 0:
        return np.zeros(p.shape[0], dtype=np.int64)
    if s <= 0:
        raise DomainError("proportions must have positive mass")
    exact = p / s * total
    counts = np.floor(exact).astype(np.int64)
    leftover = int(total - counts.sum())
    order = sorted(range(p.shape[0]), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def sample_dirichlet(rng: np.random.Generator, alpha: float, size: int) -> np.ndarray:
    """Gamma draws normalized onto the simplex."""
    g = rng.gamma(alpha, 1.0, size=size)
    total = g.sum()
    if total <= 0.0:
        # every gamma draw underflowed (tiny alpha): put all mass on one coordinate
        g = np.zeros(size)
        g[rng.integers(size)] = 1.0
        total = 1.0
    return g / total


@dataclass(frozen=True)
class ClientPartition:
    """Index sets of one client before the labeled/unlabeled split."""

    client_id: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _split_by_class(data: Dataset, seed: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    rng = make_rng(seed, "train-val-test")
    per_class = []
    for c in range(data.class_count):
        idx = np.flatnonzero(data.labels == c)
        if idx.size == 0:
            raise PartitionError(f"class {c} has no samples")
        idx = rng.permutation(idx)
        n_tr, n_va, _ = largest_remainder(SPLIT_FRACTIONS, idx.size)
        per_class.append((idx[:n_tr], idx[n_tr:n_tr + n_va], idx[n_tr + n_va:]))
    return per_class


def _allocate(per_class, props: np.ndarray, K: int) -> list[list[list[int]]]:
    # owned[split][k] -> list of indices
    owned = [[[] for _ in range(K)] for _ in range(3)]
    for c, splits in enumerate(per_class):
        for s, idx in enumerate(splits):
            counts = largest_remainder(props[c], idx.size)
            start = 0
            for k in range(K):
                owned[s][k].extend(idx[start:start + counts[k]].tolist())
                start += counts[k]
    return owned


def dirichlet_partition(data: Dataset, spec: PartitionSpec,
                        proportions: np.ndarray | None = None) -> list[ClientPartition]:
    """Allocate each class to clients in proportions drawn from ``Dir_K(alpha)``.

    The dataset is first split per class 70/10/20 into train/val/test; each
    split of class ``c`` is then allocated with the same client proportions,
    so val/test label histograms follow the train histogram. ``proportions``
    (a ``class_count x K`` matrix) overrides the Dirichlet draw.
    """
    K = spec.client_count
    per_class = _split_by_class(data, spec.seed)
    if proportions is not None:
        props = np.asarray(proportions, dtype=np.float64)
        if props.shape != (data.class_count, K):
            raise DomainError(f"proportions must have shape {(data.class_count, K)}")
        owned = _allocate(per_class, props, K)
    else:
        for attempt in range(MAX_REROLLS + 1):
            rng = make_rng(spec.seed, "dirichlet", attempt)
            props = np.stack([sample_dirichlet(rng, spec.alpha, K) for _ in range(data.class_count)])
            owned = _allocate(per_class, props, K)
            if all(owned[0][k] for k in range(K)):
                break
        else:
            _top_up_empty_clients(owned[0], data.labels, K)
    return [
        ClientPartition(k, *(np.array(sorted(owned[s][k]), dtype=np.int64) for s in range(3)))
        for k in range(K)
    ]


def _top_up_empty_clients(train: list[list[int]], labels: np.ndarray, K: int) -> None:
    for k in range(K):
        if train[k]:
            continue
        for c in range(int(labels.max()) + 1):
            holdings = [sum(1 for i in train[j] if labels[i] == c) for j in range(K)]
            donor = max(range(K), key=lambda j: (holdings[j], -j))
            if holdings[donor] < 2:
                continue
            give = max(i for i in train[donor] if labels[i] == c)
            train[donor].remove(give)
            train[k].append(give)
        if not train[k]:
            raise PartitionError(f"client {k} could not be given any training sample")


class _HiddenLabels:
    """Ground truth of unlabeled data; readable only through ``reveal_hidden_labels``."""

    __slots__ = ("_values",)

    def __init__(self, values: np.ndarray):
        self._values = _frozen(np.asarray(values, dtype=np.int64))

    def reveal(self) -> np.ndarray:
        return self._values

    def __repr__(self):
        return f"<hidden labels: {self._values.shape[0]}>"


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_count: int
    labeled_ratio: float = field(init=False)
    _hidden: _HiddenLabels = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("labeled_x", "unlabeled_x", "val_x", "test_x"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.float64)))
        for name in ("labeled_y", "val_y", "test_y"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))
        n_s, n_u = self.n_labeled, self.n_unlabeled
        if n_s + n_u == 0:
            raise DomainError(f"client {self.client_id} has no training data")
        object.__setattr__(self, "labeled_ratio", n_s / (n_s + n_u))
        if self._hidden is None:
            object.__setattr__(self, "_hidden", _HiddenLabels(np.full(n_u, -1)))

    @property
    def n_labeled(self) -> int:
        return self.labeled_y.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.unlabeled_x.shape[0]

    def train_label_counts(self) -> np.ndarray:
        """Per-class counts over labeled plus (hidden) unlabeled training data."""
        counts = np.bincount(self.labeled_y, minlength=self.class_count)
        return counts + np.bincount(reveal_hidden_labels(self), minlength=self.class_count)


def reveal_hidden_labels(client: ClientDataset) -> np.ndarray:
    """True labels of ``client.unlabeled_x``. For metrics only; training never calls this."""
    return client._hidden.reveal()


def split_labeled(data: Dataset, part: ClientPartition, label_split_alpha: float = 0.5,
                  seed: int = 0, proportions: Sequence[float] | None = None) -> ClientDataset:
    """Split a client's training indices into labeled and unlabeled parts.

    The labeled share ``p_s`` comes from ``Dir_2(label_split_alpha)`` unless
    ``proportions=(p_s, p_u)`` is given. Val/test stay fully labeled.
    """
    rng = make_rng(seed, "label-split", part.client_id)
    p = (np.asarray(proportions, dtype=np.float64) if proportions is not None
         else sample_dirichlet(rng, label_split_alpha, 2))
    n_s, _ = largest_remainder(p, part.train.size)
    order = rng.permutation(part.train)
    lab, unl = np.sort(order[:n_s]), np.sort(order[n_s:])
    X, y = data.features, data.labels
    return ClientDataset(
        client_id=part.client_id,
        labeled_x=X[lab], labeled_y=y[lab],
        unlabeled_x=X[unl],
        val_x=X[part.val], val_y=y[part.val],
        test_x=X[part.test], test_y=y[part.test],
        class_count=data.class_count,
        _hidden=_HiddenLabels(y[unl]),
    )


def build_clients(data: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    parts = dirichlet_partition(data, spec)
    return [split_labeled(data, p, spec.label_split_alpha, spec.seed) for p in parts]


def label_skew(clients: Sequence[ClientDataset]) -> float:
    """Mean total-variation distance between client train label histograms and the global one."""
    counts = np.stack([c.train_label_counts() for c in clients]).astype(np.float64)
    glob = counts.sum(axis=0)
    glob /= glob.sum()
    local = counts / counts.sum(axis=1, keepdims=True)
    return float(np.mean(0.5 * np.abs(local - glob).sum(axis=1)))


PARTITION_COLUMNS_PREFIX = ("client", "n_labeled", "n_unlabeled", "labeled_ratio")


def write_partition_csv(clients: Sequence[ClientDataset], path) -> None:
    """One row per client: id, split sizes, mu_k and per-class training counts."""
    C = clients[0].class_count
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(PARTITION_COLUMNS_PREFIX) + [f"class_{c}" for c in range(C)])
        for cl in clients:
            w.writerow([cl.client_id, cl.n_labeled, cl.n_unlabeled, repr(cl.labeled_ratio)]
                       + cl.train_label_counts().tolist())
