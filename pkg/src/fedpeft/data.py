"""Datasets and federated client partitions."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, PartitionError

SYNTH_STREAM = 31
SPLIT_STREAM = 32
PARTITION_STREAM = 33


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # samples x dims
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if f.ndim != 2 or y.ndim != 1 or f.shape[0] != y.shape[0]:
            raise DataError(f"features {f.shape} and labels {y.shape} do not line up")
        if y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= self.num_classes):
            raise DataError(f"labels must be integers in [0, {self.num_classes})")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()


def synth_generate(
    num_classes: int = 20,
    dims: int = 32,
    samples: int = 2000,
    seed: int = 0,
    separation: float = 1.0,
    noise: float = 1.0,
    modes: int = 1,
) -> Dataset:
    """Gaussian class clusters with seeded means; classes are balanced to within one sample.

    Each class owns ``modes`` cluster centres drawn from ``N(0, separation^2 I)``;
    a sample picks one of its class's centres uniformly and adds ``N(0, noise^2 I)``.
    """
    if num_classes < 1 or dims < 1 or modes < 1:
        raise ConfigError("num_classes, dims and modes must be positive")
    if samples < num_classes:
        raise ConfigError(f"need at least one sample per class ({samples} < {num_classes})")
    if separation <= 0 or noise < 0:
        raise ConfigError("separation must be positive and noise nonnegative")
    rng = np.random.default_rng([seed, SYNTH_STREAM])
    centres = rng.normal(0.0, separation, size=(num_classes, modes, dims))
    labels = np.arange(samples) % num_classes
    labels = labels[rng.permutation(samples)]
    mode = rng.integers(0, modes, size=samples)
    features = centres[labels, mode] + rng.normal(0.0, noise, size=(samples, dims))
    return Dataset(features, labels, num_classes)


def load_csv(path: str | Path, num_classes: int | None = None) -> Dataset:
    """Read ``f0,...,fD,label`` rows (header required, ``#`` lines skipped)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file {path} does not exist")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise DataError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if header[-1] != "label" or any(h != f"f{i}" for i, h in enumerate(header[:-1])):
        raise DataError(f"{path}: header must be f0,...,fD,label")
    try:
        features = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 1)
        labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(features, labels, num_classes)


def save_csv(ds: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(ds.dims)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def split_train_test(ds: Dataset, train_fraction: float = 0.6, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified seeded split; every class with >= 2 samples lands on both sides.

    The train size is ``round(train_fraction * n)``; per-class quotas use
    largest-remainder rounding so that the total is exact.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(ds)
    n_train = int(np.floor(train_fraction * n + 0.5))
    if n_train < 1 or n_train >= n:
        raise ConfigError(f"train_fraction {train_fraction} leaves an empty split of {n} samples")
    rng = np.random.default_rng([seed, SPLIT_STREAM])
    present = [c for c in range(ds.num_classes) if (ds.labels == c).any()]
    counts = np.array([(ds.labels == c).sum() for c in present])
    if (counts < 2).any():
        raise DataError("every present class needs at least two samples to appear in both splits")
    exact = train_fraction * counts
    quota = np.clip(np.floor(exact).astype(int), 1, counts - 1)
    order = sorted(range(len(present)), key=lambda j: (-(exact[j] - np.floor(exact[j])), j))
    gap = n_train - quota.sum()
    while gap != 0:
        moved = False
        for j in order:
            if gap > 0 and quota[j] < counts[j] - 1:
                quota[j] += 1
                gap -= 1
                moved = True
            elif gap < 0 and quota[j] > 1:
                quota[j] -= 1
                gap += 1
                moved = True
            if gap == 0:
                break
        if not moved:
            raise ConfigError("cannot satisfy train size while keeping every class on both sides")
    train_idx, test_idx = [], []
    for j, c in enumerate(present):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(idx.size)]
        train_idx.append(idx[: quota[j]])
        test_idx.append(idx[quota[j] :])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return ds.subset(train_idx), ds.subset(test_idx)


@dataclass(frozen=True)
class Partition:
    clients: tuple[np.ndarray, ...]
    scheme: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(np.asarray(c, dtype=np.int64) for c in self.clients))

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def sizes(self) -> list[int]:
        return [int(c.size) for c in self.clients]

    def label_histograms(self, labels: np.ndarray, num_classes: int) -> np.ndarray:
        return np.array([np.bincount(labels[c], minlength=num_classes) for c in self.clients])

    def to_json(self) -> str:
        body = {
            "scheme": self.scheme,
            "clients": {str(i): [int(v) for v in c] for i, c in enumerate(self.clients)},
        }
        return json.dumps(body, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> Partition:
        body = json.loads(text)
        clients = [body["clients"][str(i)] for i in range(len(body["clients"]))]
        return cls(tuple(np.array(c, dtype=np.int64) for c in clients), body["scheme"])


def check_partition(p: Partition, n_samples: int) -> None:
    seen = np.concatenate(p.clients) if p.clients else np.array([], dtype=np.int64)
    if any(c.size == 0 for c in p.clients):
        raise PartitionError("some client holds no samples")
    if np.unique(seen).size != seen.size:
        raise PartitionError("client index lists overlap")
    if seen.size and (seen.min() < 0 or seen.max() >= n_samples):
        raise PartitionError("partition refers to samples outside the dataset")


def _repair_empty(clients: list[list[int]]) -> None:
    # move one sample from the largest client (lowest id on ties) to each empty one
    for i in range(len(clients)):
        if clients[i]:
            continue
        donor = max(range(len(clients)), key=lambda j: (len(clients[j]), -j))
        if len(clients[donor]) < 2:
            raise PartitionError("not enough samples to give every client one")
        clients[i].append(clients[donor].pop())


def partition_iid(train: Dataset, n_clients: int, seed: int) -> Partition:
    if not 1 <= n_clients <= len(train):
        raise ConfigError(f"cannot split {len(train)} samples across {n_clients} clients")
    rng = np.random.default_rng([seed, PARTITION_STREAM, 0])
    parts = np.array_split(rng.permutation(len(train)), n_clients)
    return Partition(tuple(np.sort(p) for p in parts), {"kind": "iid"})


def partition_dirichlet(train: Dataset, n_clients: int, alpha: float, seed: int) -> Partition:
    """Per-class client proportions drawn from ``Dirichlet(alpha * 1)``; samples dealt multinomially."""
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    if not 1 <= n_clients <= len(train):
        raise ConfigError(f"cannot split {len(train)} samples across {n_clients} clients")
    rng = np.random.default_rng([seed, PARTITION_STREAM, 1])
    clients: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(train.num_classes):
        idx = np.flatnonzero(train.labels == c)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        p = rng.dirichlet(np.full(n_clients, alpha))
        counts = rng.multinomial(idx.size, p)
        start = 0
        for k, cnt in enumerate(counts):
            clients[k].extend(int(v) for v in idx[start : start + cnt])
            start += cnt
    _repair_empty(clients)
    return Partition(tuple(np.sort(np.array(c, dtype=np.int64)) for c in clients), {"kind": "dirichlet", "alpha": alpha})


def partition_pathological(train: Dataset, n_clients: int, shards_per_client: int = 2, seed: int = 0) -> Partition:
    """Sort by label, cut into ``n_clients * shards_per_client`` contiguous shards, deal them out."""
    if shards_per_client < 1 or n_clients < 1:
        raise ConfigError("n_clients and shards_per_client must be positive")
    n_shards = n_clients * shards_per_client
    if len(train) < n_shards:
        raise ConfigError(f"{len(train)} samples cannot fill {n_shards} shards")
    rng = np.random.default_rng([seed, PARTITION_STREAM, 2])
    order = np.lexsort((np.arange(len(train)), train.labels))
    shards = np.array_split(order, n_shards)
    deal = rng.permutation(n_shards)
    clients = []
    for k in range(n_clients):
        mine = deal[k * shards_per_client : (k + 1) * shards_per_client]
        clients.append(np.sort(np.concatenate([shards[s] for s in mine])))
    return Partition(tuple(clients), {"kind": "pathological", "shards_per_client": shards_per_client})


def label_entropy(p: Partition, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Shannon entropy (nats) of each client's label histogram."""
    hist = p.label_histograms(labels, num_classes).astype(np.float64)
    probs = hist / hist.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, -probs * np.log(probs), 0.0)
    return terms.sum(axis=1)
