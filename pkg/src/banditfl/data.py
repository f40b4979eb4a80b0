"""Dataset synthesis, non-IID partitioning, and IDX ingestion.

A federated dataset is a plain container: train arrays, held-out test
arrays, a partition map assigning train indices to clients, and per-client
test slices.  Partitioners are pure functions of (labels, spec, rng), so a
seed pins the entire data layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, IngestionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class ShardsSpec:
    """Label-sorted shards dealt to clients; bounds distinct labels per client."""

    shards_per_client: int = 2

    def __post_init__(self) -> None:
        if self.shards_per_client < 1:
            raise ValueError("shards_per_client must be at least 1")


@dataclass(frozen=True)
class DirichletSpec:
    """Per-class client proportions drawn from a symmetric Dirichlet(alpha)."""

    alpha: float = 0.5

    def __post_init__(self) -> None:
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class IidSpec:
    pass


PartitionSpec = ShardsSpec | DirichletSpec | IidSpec


@dataclass
class BaseDataset:
    """Raw material before partitioning: train and held-out test arrays."""

    features: np.ndarray
    labels: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray
    n_classes: int


@dataclass
class FederatedDataset:
    features: np.ndarray
    labels: np.ndarray
    partition: dict[int, np.ndarray]
    test_features: np.ndarray
    test_labels: np.ndarray
    per_client_test: dict[int, np.ndarray] = field(default_factory=dict)
    n_classes: int = 0

    @property
    def n_clients(self) -> int:
        return len(self.partition)

    def client_slice(self, client_id: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.partition[client_id]
        return self.features[idx], self.labels[idx]

    def client_test_slice(self, client_id: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.per_client_test[client_id]
        return self.test_features[idx], self.test_labels[idx]


def _balanced_counts(total: int, n_classes: int) -> np.ndarray:
    counts = np.full(n_classes, total // n_classes)
    counts[: total % n_classes] += 1
    return counts


def generate_synthetic(
    n_clients: int,
    n_classes: int,
    n_features: int,
    samples_per_client: int,
    class_separation: float,
    rng: np.random.Generator,
) -> BaseDataset:
    """Gaussian class clusters with unit covariance on a random frame.

    Class means sit along random directions, orthonormalized when the
    feature dimension allows, so pairwise mean distance is class_separation
    exactly for n_classes <= n_features and approximately otherwise.  A
    stratified 20% test pool is generated alongside the training data.
    """
    if min(n_clients, n_classes, n_features, samples_per_client) < 1:
        raise ValueError("all synthetic dataset counts must be at least 1")
    directions = rng.standard_normal((n_classes, n_features))
    if n_classes <= n_features:
        q, _ = np.linalg.qr(directions.T)
        directions = q.T[:n_classes]
    else:
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = (class_separation / np.sqrt(2.0)) * directions

    n_train = n_clients * samples_per_client
    n_test = max(n_classes, int(round(0.25 * n_train)))  # 20% of the total

    def draw(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for c, count in enumerate(counts):
            xs.append(means[c] + rng.standard_normal((count, n_features)))
            ys.append(np.full(count, c, dtype=np.int64))
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        order = rng.permutation(x.shape[0])
        return x[order], y[order]

    x_train, y_train = draw(_balanced_counts(n_train, n_classes))
    x_test, y_test = draw(_balanced_counts(n_test, n_classes))
    return BaseDataset(x_train, y_train, x_test, y_test, n_classes)


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(int)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def shard_partition(
    labels, n_clients: int, shards_per_client: int, rng: np.random.Generator
) -> dict[int, np.ndarray]:
    """Sort by label, cut into equal contiguous shards, deal them at random.

    The remainder after equal cuts is appended to the final shard.
    """
    y = np.asarray(labels)
    n_shards = n_clients * shards_per_client
    shard_size = y.size // n_shards
    if shard_size < 1:
        raise ConfigError(
            f"{y.size} samples cannot fill {n_shards} shards "
            f"({n_clients} clients x {shards_per_client} shards)"
        )
    order = np.argsort(y, kind="stable")
    shards = [order[i * shard_size : (i + 1) * shard_size] for i in range(n_shards)]
    shards[-1] = order[(n_shards - 1) * shard_size :]
    deal = rng.permutation(n_shards)
    return {
        c: np.sort(np.concatenate([shards[s] for s in deal[c * shards_per_client : (c + 1) * shards_per_client]]))
        for c in range(n_clients)
    }


def dirichlet_partition(
    labels, n_clients: int, alpha: float, rng: np.random.Generator
) -> dict[int, np.ndarray]:
    """Split each class by proportions drawn from Dirichlet(alpha).

    Largest-remainder rounding keeps exact class totals; any client left
    empty is repaired by stealing one sample from the largest slice.
    """
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    y = np.asarray(labels)
    slices: dict[int, list[np.ndarray]] = {c: [] for c in range(n_clients)}
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        counts = _largest_remainder(rng.dirichlet(np.full(n_clients, alpha)), idx.size)
        stops = np.cumsum(counts)
        start = 0
        for client, stop in enumerate(stops):
            if stop > start:
                slices[client].append(idx[start:stop])
            start = stop
    parts = {
        c: np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
        for c, chunks in slices.items()
    }
    for c in range(n_clients):
        while parts[c].size == 0:
            donor = max(parts, key=lambda k: parts[k].size)
            parts[c] = parts[donor][-1:]
            parts[donor] = parts[donor][:-1]
    return {c: np.sort(parts[c]) for c in range(n_clients)}


def iid_partition(labels, n_clients: int, rng: np.random.Generator) -> dict[int, np.ndarray]:
    y = np.asarray(labels)
    if y.size < n_clients:
        raise ConfigError(f"{y.size} samples cannot cover {n_clients} clients")
    chunks = np.array_split(rng.permutation(y.size), n_clients)
    return {c: np.sort(chunk) for c, chunk in enumerate(chunks)}


def make_partition(
    labels, spec: PartitionSpec, n_clients: int, rng: np.random.Generator
) -> dict[int, np.ndarray]:
    if isinstance(spec, ShardsSpec):
        return shard_partition(labels, n_clients, spec.shards_per_client, rng)
    if isinstance(spec, DirichletSpec):
        return dirichlet_partition(labels, n_clients, spec.alpha, rng)
    if isinstance(spec, IidSpec):
        return iid_partition(labels, n_clients, rng)
    raise ConfigError(f"unknown partition spec {spec!r}")


def validate_partition(partition: dict[int, np.ndarray], n_samples: int) -> None:
    """Disjoint, covering, and non-empty; raises DataError otherwise."""
    combined = np.concatenate([partition[c] for c in sorted(partition)]) if partition else np.empty(0)
    if any(partition[c].size == 0 for c in partition):
        raise DataError("every client slice must be non-empty")
    if combined.size != n_samples or not np.array_equal(np.sort(combined), np.arange(n_samples)):
        raise DataError("partition must cover each training index exactly once")


def _client_test_slices(
    train_labels: np.ndarray,
    partition: dict[int, np.ndarray],
    test_labels: np.ndarray,
    n_classes: int,
    mode: str,
    rng: np.random.Generator,
) -> dict[int, np.ndarray]:
    if mode not in ("matched", "global"):
        raise ConfigError(f"client_test_mode must be 'matched' or 'global', got {mode!r}")
    pools = {c: np.flatnonzero(test_labels == c) for c in range(n_classes)}
    global_props = np.bincount(train_labels, minlength=n_classes) / train_labels.size
    out: dict[int, np.ndarray] = {}
    for client in sorted(partition):
        own = train_labels[partition[client]]
        props = (
            np.bincount(own, minlength=n_classes) / own.size
            if mode == "matched"
            else global_props
        )
        wanted = _largest_remainder(props, own.size)
        picks = []
        for cls in range(n_classes):
            take = min(int(wanted[cls]), pools[cls].size)
            if take > 0:
                picks.append(rng.choice(pools[cls], size=take, replace=False))
        if not picks:  # degenerate pool; fall back to the client's majority class
            cls = int(np.argmax(props))
            picks.append(pools[cls][:1])
        out[client] = np.sort(np.concatenate(picks))
        if out[client].size == 0:
            raise DataError(f"no test samples available for client {client}")
    return out


def assemble_federated(
    base: BaseDataset,
    spec: PartitionSpec,
    n_clients: int,
    rng: np.random.Generator,
    client_test_mode: str = "matched",
) -> FederatedDataset:
    """Partition a base dataset and attach per-client test slices."""
    partition = make_partition(base.labels, spec, n_clients, rng)
    validate_partition(partition, base.labels.size)
    per_client_test = _client_test_slices(
        base.labels, partition, base.test_labels, base.n_classes, client_test_mode, rng
    )
    return FederatedDataset(
        features=base.features,
        labels=base.labels,
        partition=partition,
        test_features=base.test_features,
        test_labels=base.test_labels,
        per_client_test=per_client_test,
        n_classes=base.n_classes,
    )


def _read_be32(buf: bytes, offset: int, path: Path) -> int:
    if offset + 4 > len(buf):
        raise IngestionError(f"{path}: truncated header at offset {offset}")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a big-endian IDX image/label file pair.

    Images: magic 0x803, then (count, rows, cols) and count*rows*cols bytes
    of pixels, scaled here to [0, 1].  Labels: magic 0x801, then count and
    count bytes.  The two counts must agree.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    img = images_path.read_bytes()
    magic = _read_be32(img, 0, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IngestionError(
            f"{images_path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )
    n = _read_be32(img, 4, images_path)
    rows = _read_be32(img, 8, images_path)
    cols = _read_be32(img, 12, images_path)
    if len(img) != 16 + n * rows * cols:
        raise IngestionError(
            f"{images_path}: expected {16 + n * rows * cols} bytes, found {len(img)} "
            f"(pixel data starts at offset 16)"
        )
    lab = labels_path.read_bytes()
    magic = _read_be32(lab, 0, labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise IngestionError(
            f"{labels_path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_LABELS_MAGIC:08x}"
        )
    n_labels = _read_be32(lab, 4, labels_path)
    if len(lab) != 8 + n_labels:
        raise IngestionError(
            f"{labels_path}: expected {8 + n_labels} bytes, found {len(lab)} "
            f"(label data starts at offset 8)"
        )
    if n != n_labels:
        raise IngestionError(
            f"image count {n} ({images_path}) does not match label count {n_labels} ({labels_path})"
        )
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).astype(float) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    return pixels.reshape(n, rows * cols), labels


def write_idx_images(path, images: np.ndarray) -> None:
    """Inverse of the image half of load_idx; images are uint8 (n, rows, cols)."""
    arr = np.ascontiguousarray(images, dtype=np.uint8)
    n, rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(arr.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    arr = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, arr.size))
        fh.write(arr.tobytes())


def export_table(features: np.ndarray, labels: np.ndarray, path) -> None:
    """Plain-text dump: header line, then one comma-separated row per sample."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels)
    header = "label," + ",".join(f"f{j}" for j in range(x.shape[1]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for i in range(x.shape[0]):
            fh.write(str(int(y[i])) + "," + ",".join(repr(float(v)) for v in x[i]) + "\n")
