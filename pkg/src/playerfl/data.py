"""Datasets, Dirichlet label-skew partitioning, CSV ingestion and batching."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._rng import make_rng
from .exceptions import InvalidLabelError, InvalidSpecError, ParseError, ShapeError

DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    dropped_rows: int = 0

    def __post_init__(self):
        self.features = np.array(self.features, dtype=np.float64, ndmin=2)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.class_count = int(self.class_count)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size == 0:
            raise InvalidSpecError("a dataset needs at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise InvalidLabelError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.features)):
            raise InvalidSpecError("features must be finite")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass
class ClientData:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    indices: np.ndarray = field(repr=False, default=None)

    @property
    def n_samples(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


@dataclass
class ClientPartition:
    """Per-client train/val/test triples plus aggregation weights.

    ``weights[c]`` is client ``c``'s share of the pooled training samples.
    """

    clients: list
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.clients)

    @property
    def class_count(self) -> int:
        return self.clients[0].train.class_count

    def label_distributions(self) -> np.ndarray:
        rows = []
        for client in self.clients:
            counts = np.zeros(self.class_count)
            for part in (client.train, client.val, client.test):
                counts += part.class_counts()
            rows.append(counts / counts.sum())
        return np.array(rows)


def client_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise InvalidSpecError("every client needs a positive sample count")
    return sizes / sizes.sum()


def generate_synthetic(
    classes: int,
    dim: int,
    samples_per_class: int,
    class_separation: float = 3.0,
    noise: float = 1.0,
    seed: int = 0,
) -> LabeledDataset:
    """Gaussian class clusters.

    Class means sit at distance ``class_separation`` from the origin along
    random unit directions; samples add isotropic noise with standard
    deviation ``noise``.  Rows are ordered by class.
    """
    if classes < 2:
        raise InvalidSpecError("need at least two classes")
    if dim < 1:
        raise InvalidSpecError("dim must be >= 1")
    if samples_per_class < 1:
        raise InvalidSpecError("samples_per_class must be >= 1")
    if not noise > 0:
        raise InvalidSpecError("noise must be > 0")
    rng = make_rng(seed, "synthetic")
    directions = rng.standard_normal((classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = class_separation * directions
    labels = np.repeat(np.arange(classes), samples_per_class)
    features = means[labels] + noise * rng.standard_normal((labels.size, dim))
    return LabeledDataset(features, labels, classes)


def _split_sizes(n: int, fractions) -> tuple:
    n_val = math.floor(n * fractions[1] + 0.5)
    n_test = math.floor(n * fractions[2] + 0.5)
    return n - n_val - n_test, n_val, n_test


def _check_fractions(fractions) -> tuple:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(not f > 0 for f in fractions):
        raise InvalidSpecError(f"need three positive split fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidSpecError(f"split fractions must sum to 1, got {sum(fractions)}")
    return fractions


def min_split_size(fractions=DEFAULT_FRACTIONS) -> int:
    """Smallest sample count for which every train/val/test split is non-empty."""
    fractions = _check_fractions(fractions)
    n = 3
    while min(_split_sizes(n, fractions)) < 1:
        n += 1
    return n


def split_train_val_test(data: LabeledDataset, fractions=DEFAULT_FRACTIONS, seed: int = 0, stream=()):
    """Shuffle and cut into train/val/test.

    Validation and test sizes are ``round(N * fraction)``; training receives
    the remainder.
    """
    fractions = _check_fractions(fractions)
    n = len(data)
    sizes = _split_sizes(n, fractions)
    if min(sizes) < 1:
        raise InvalidSpecError(f"split of {n} samples with fractions {fractions} leaves an empty part")
    order = make_rng(seed, "split", *stream).permutation(n)
    n_train, n_val, _ = sizes
    return (
        data.subset(order[:n_train]),
        data.subset(order[n_train : n_train + n_val]),
        data.subset(order[n_train + n_val :]),
    )


def minibatches(data: LabeledDataset, batch: int, seed: int = 0, stream=()) -> list:
    """Deterministically shuffled ``(features, labels)`` batches; the last may be short."""
    if batch < 1:
        raise InvalidSpecError("batch size must be >= 1")
    order = make_rng(seed, "batches", *stream).permutation(len(data))
    return [
        (data.features[order[i : i + batch]], data.labels[order[i : i + batch]])
        for i in range(0, len(data), batch)
    ]


def dirichlet_proportions(alpha: float, clients: int, rng: np.random.Generator) -> np.ndarray:
    draws = rng.gamma(alpha, 1.0, size=clients)
    total = draws.sum()
    if total == 0.0:
        # every Gamma draw underflowed (tiny alpha); the mass goes to one client
        draws = np.zeros(clients)
        draws[rng.integers(clients)] = 1.0
        total = 1.0
    return draws / total


def dirichlet_assignments(labels, class_count: int, clients: int, alpha: float, seed: int = 0) -> list:
    """Per-client index arrays from a per-class Dirichlet split (no repair)."""
    if clients < 2:
        raise InvalidSpecError("need at least two clients")
    if not alpha > 0:
        raise InvalidSpecError("alpha must be > 0")
    labels = np.asarray(labels)
    rng = make_rng(seed, "dirichlet")
    buckets = [[] for _ in range(clients)]
    for cls in range(class_count):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        props = dirichlet_proportions(alpha, clients, rng)
        cuts = np.floor(np.cumsum(props)[:-1] * idx.size + 0.5).astype(np.int64)
        for c, part in enumerate(np.split(idx, cuts)):
            buckets[c].extend(part.tolist())
    return [np.array(sorted(b), dtype=np.int64) for b in buckets]


def _repair(assignments: list, min_size: int) -> list:
    buckets = [list(a) for a in assignments]
    while True:
        sizes = [len(b) for b in buckets]
        small = min(range(len(buckets)), key=lambda c: (sizes[c], c))
        if sizes[small] >= min_size:
            break
        donor = max(range(len(buckets)), key=lambda c: (sizes[c], -c))
        if sizes[donor] <= min_size:
            raise InvalidSpecError("not enough samples to give every client a usable split")
        buckets[small].append(buckets[donor].pop())
    return [np.array(sorted(b), dtype=np.int64) for b in buckets]


def dirichlet_label_partition(
    data: LabeledDataset,
    clients: int,
    alpha: float = 0.5,
    seed: int = 0,
    fractions=DEFAULT_FRACTIONS,
) -> ClientPartition:
    """Label-skewed client datasets.

    For each class, client shares are drawn from Dir(alpha) (normalized
    Gamma(alpha, 1) draws) and that class's samples are cut accordingly.  A
    client left too small to split into non-empty train/val/test parts takes
    one sample at a time from the currently largest client.
    """
    if clients > len(data):
        raise InvalidSpecError(f"{clients} clients but only {len(data)} samples")
    fractions = _check_fractions(fractions)
    min_size = min_split_size(fractions)
    if clients * min_size > len(data):
        raise InvalidSpecError(
            f"{len(data)} samples cannot give {clients} clients {min_size} samples each"
        )
    assignments = _repair(dirichlet_assignments(data.labels, data.class_count, clients, alpha, seed), min_size)
    parts = []
    for c, idx in enumerate(assignments):
        train, val, test = split_train_val_test(data.subset(idx), fractions, seed, stream=("client", c))
        parts.append(ClientData(train, val, test, idx))
    return ClientPartition(parts, client_weights([len(p.train) for p in parts]))


def zscore_stats(features) -> tuple:
    x = np.asarray(features, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return mean, std


def load_csv(
    path,
    feature_columns: Sequence[str] | None,
    label_column: str,
    normalization: str = "none",
    stats: tuple | None = None,
    classes: Sequence[str] | None = None,
) -> LabeledDataset:
    """Read a headed, comma-separated UTF-8 file.

    Empty fields count as missing and drop the row (tallied in
    ``dropped_rows``).  Labels are categorical strings mapped to indices in
    sorted order unless ``classes`` fixes the mapping.  With ``zscore``, the
    caller's ``(mean, std)`` is used when given, else the file's own
    statistics; zero standard deviations are replaced by 1.
    """
    if normalization not in ("zscore", "none"):
        raise InvalidSpecError(f"unknown normalization {normalization!r}")
    path = Path(path)
    rows, raw_labels, lines = [], [], []
    dropped = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ParseError(f"label column {label_column!r} not in header", line=1)
        if feature_columns is None:
            feature_columns = [h for h in header if h != label_column]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise ParseError(f"feature columns {missing} not in header", line=1)
        f_idx = [header.index(c) for c in feature_columns]
        l_idx = header.index(label_column)
        for record in reader:
            line = reader.line_num
            if not record or (len(record) == 1 and not record[0].strip()):
                continue
            if len(record) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(record)}", line=line)
            fields = [record[i].strip() for i in f_idx]
            label = record[l_idx].strip()
            if label == "" or any(f == "" for f in fields):
                dropped += 1
                continue
            try:
                values = [float(f) for f in fields]
            except ValueError as exc:
                raise ParseError(f"non-numeric feature value ({exc})", line=line) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite feature value", line=line)
            rows.append(values)
            raw_labels.append(label)
            lines.append(line)
    if not rows:
        raise InvalidSpecError(f"{path} contains no complete rows")
    if classes is None:
        classes = sorted(set(raw_labels))
    mapping = {name: i for i, name in enumerate(classes)}
    labels = []
    for label, line in zip(raw_labels, lines):
        if label not in mapping:
            raise InvalidLabelError(f"line {line}: unknown label {label!r}")
        labels.append(mapping[label])
    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(feature_columns))
    if normalization == "zscore":
        mean, std = stats if stats is not None else zscore_stats(features)
        std = np.where(np.asarray(std) == 0.0, 1.0, std)
        features = (features - mean) / std
    return LabeledDataset(features, labels, len(classes), dropped_rows=dropped)
