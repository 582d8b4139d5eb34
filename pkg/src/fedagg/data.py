"""Dataset ingestion and client partitioning.

Supports the MNIST IDX binary format (big-endian magic/count headers,
unsigned-byte payload) and a synthetic Gaussian-blob generator, plus three
partition schemes: iid, pathological (label-sorted shards) and Dirichlet.

Heterogeneity of a partition is quantified per client as the L1 distance
between the client's label marginal and the global one,
``theta_h = sum_j |P_h(y=j) - P_global(y=j)|`` (range [0, 2]).
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConsistencyError, ContractError, FormatError

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

IID = "iid"
PATHOLOGICAL = "pathological"
DIRICHLET = "dirichlet"


@dataclass
class Dataset:
    features: np.ndarray   # (n, input_dim) float64
    labels: np.ndarray     # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.size < 1:
            raise ContractError("dataset must contain at least one sample")
        if self.labels.shape != (self.size,):
            raise ContractError("labels must match the number of feature rows")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ContractError("labels out of range [0, num_classes)")

    @property
    def size(self):
        return self.features.shape[0]

    @property
    def input_dim(self):
        return self.features.shape[1]


@dataclass
class Partition:
    assignments: list      # N index arrays into the dataset
    scheme: str            # "iid" | "pathological" | "dirichlet"
    seed: int
    sigma: float = 0.0     # Dirichlet concentration, 0 when unused

    @property
    def num_clients(self):
        return len(self.assignments)

    def sizes(self):
        return [len(a) for a in self.assignments]

    def tag(self):
        if self.scheme == DIRICHLET:
            return f"dirichlet-{self.sigma:g}"
        return self.scheme


@dataclass
class HeterogeneityReport:
    per_client_distance: np.ndarray
    mean_distance: float


def _read_exact(f, nbytes, path):
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise OSError(f"truncated IDX file: {path} (wanted {nbytes} bytes, got {len(data)})")
    return data


def load_idx(images_path, labels_path):
    """Load an IDX image/label file pair into a Dataset with pixels scaled by 1/255."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IMAGE_MAGIC:
            raise FormatError(f"bad image magic 0x{magic:08x} in {images_path}")
        payload = _read_exact(f, count * rows * cols, images_path)
        pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        magic, lcount = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != LABEL_MAGIC:
            raise FormatError(f"bad label magic 0x{magic:08x} in {labels_path}")
        labels = np.frombuffer(_read_exact(f, lcount, labels_path), dtype=np.uint8)
    if lcount != count:
        raise ConsistencyError(
            f"image count {count} != label count {lcount} ({images_path}, {labels_path})")
    features = pixels.astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), int(labels.max()) + 1)


def _simplex_means(num_classes, input_dim, separation):
    # Vertices of a regular simplex with pairwise distance `separation`.
    # With input_dim >= K the scaled standard basis vectors already form one.
    if input_dim >= num_classes:
        means = np.zeros((num_classes, input_dim))
        means[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
        return means
    # Otherwise center the K x K construction and keep the leading coordinates.
    verts = np.eye(num_classes) - 1.0 / num_classes
    verts *= separation / np.sqrt(2.0)
    return verts[:, :input_dim]


def synth_generate(num_classes, input_dim, samples_per_class, class_separation, seed):
    """Gaussian blobs, one unit-covariance cloud per class on a scaled simplex."""
    if num_classes < 1 or input_dim < 1 or samples_per_class < 1:
        raise ContractError("all counts must be >= 1")
    rng = np.random.default_rng([int(seed), 53])
    means = _simplex_means(num_classes, input_dim, class_separation)
    feats = []
    labels = []
    for k in range(num_classes):
        feats.append(means[k] + rng.standard_normal((samples_per_class, input_dim)))
        labels.append(np.full(samples_per_class, k, dtype=np.int64))
    features = np.concatenate(feats, axis=0)
    labels = np.concatenate(labels)
    order = rng.permutation(features.shape[0])
    return Dataset(features[order], labels[order], num_classes)


def _check_clients(n_samples, n_clients):
    if n_clients < 1:
        raise ContractError("need at least one client")
    if n_samples < n_clients:
        raise ConfigError(f"cannot split {n_samples} samples across {n_clients} clients")


def partition_iid(dataset, n_clients, seed):
    """Label-stratified equal split: client marginals match the global one.

    Each class is shuffled and dealt round-robin, so per-client class counts
    differ from exact proportionality by at most one sample; lists are then
    trimmed to a common length (remainder dropped).
    """
    _check_clients(dataset.size, n_clients)
    rng = np.random.default_rng([int(seed), 3])
    dealing = np.concatenate([rng.permutation(np.flatnonzero(dataset.labels == c))
                              for c in range(dataset.num_classes)])
    per = dataset.size // n_clients
    dropped = dataset.size - per * n_clients
    if dropped:
        log.info("iid partition drops %d remainder samples", dropped)
    parts = [np.sort(dealing[i::n_clients][:per]) for i in range(n_clients)]
    return Partition(parts, IID, int(seed))


def partition_pathological(dataset, n_shards, shard_size, shards_per_client, n_clients, seed):
    """Label-sorted shards dealt uniformly at random, shards_per_client each."""
    if n_shards * shard_size > dataset.size:
        raise ConfigError(
            f"{n_shards} shards x {shard_size} exceeds dataset size {dataset.size}")
    if n_shards != n_clients * shards_per_client:
        raise ConfigError(
            f"n_shards ({n_shards}) must equal n_clients*shards_per_client "
            f"({n_clients}*{shards_per_client})")
    dropped = dataset.size - n_shards * shard_size
    if dropped:
        log.info("pathological partition drops %d remainder samples", dropped)
    rng = np.random.default_rng([int(seed), 5])
    # Stable sort by label so identical (dataset, seed) give identical shards.
    order = np.lexsort((np.arange(dataset.size), dataset.labels))
    shard_ids = rng.permutation(n_shards)
    parts = []
    for i in range(n_clients):
        mine = shard_ids[i * shards_per_client:(i + 1) * shards_per_client]
        idx = np.concatenate([order[s * shard_size:(s + 1) * shard_size] for s in mine])
        parts.append(np.sort(idx))
    return Partition(parts, PATHOLOGICAL, int(seed))


def _rebalance_equal(parts_idx, labels, target):
    """Move samples from over-full to under-full clients until all hold `target`.

    Donors give away their most-common labels first (ties: lowest label), so
    heterogeneous clients keep their dominant classes as intact as possible.
    """
    lists = [list(p) for p in parts_idx]

    def most_common_label(entries):
        counts = np.bincount(labels[np.asarray(entries, dtype=np.int64)])
        return int(np.argmax(counts))

    def take(donor, k):
        lab = most_common_label(lists[donor])
        chosen = [i for i in lists[donor] if labels[i] == lab][-k:]
        removed = set(chosen)
        lists[donor] = [i for i in lists[donor] if i not in removed]
        return chosen

    while True:
        under = [i for i, p in enumerate(lists) if len(p) < target]
        if not under:
            break
        over = [i for i, p in enumerate(lists) if len(p) > target]
        donor = over[int(np.argmax([len(lists[i]) for i in over]))]
        recv = under[0]
        k = min(len(lists[donor]) - target, target - len(lists[recv]))
        lists[recv].extend(take(donor, k))
    for i in range(len(lists)):
        while len(lists[i]) > target:     # global remainder: drop
            take(i, len(lists[i]) - target)
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in lists]


def partition_dirichlet(dataset, sigma, n_clients, equal_size, seed):
    """Per-class Dirichlet(sigma) allocation across clients; optional equal sizes."""
    if sigma <= 0:
        raise ContractError("sigma must be > 0")
    _check_clients(dataset.size, n_clients)
    rng = np.random.default_rng([int(seed), 7])
    parts = [[] for _ in range(n_clients)]
    for cls in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(n_clients, float(sigma)))
        bounds = np.floor(np.cumsum(props) * idx.size + 0.5).astype(np.int64)
        bounds[-1] = idx.size
        start = 0
        for i, stop in enumerate(bounds):
            parts[i].extend(idx[start:stop])
            start = stop
    if equal_size:
        target = dataset.size // n_clients
        arrays = _rebalance_equal(parts, dataset.labels, target)
    else:
        arrays = [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]
    return Partition(arrays, DIRICHLET, int(seed), sigma=float(sigma))


def heterogeneity(partition, dataset):
    """Per-client L1 distance between client and global label marginals."""
    if partition.num_clients < 1:
        raise ContractError("partition has no clients")
    k = dataset.num_classes
    global_p = np.bincount(dataset.labels, minlength=k) / dataset.size
    dists = np.empty(partition.num_clients)
    for i, idx in enumerate(partition.assignments):
        if len(idx) == 0:
            raise ContractError(f"client {i} holds no samples")
        local_p = np.bincount(dataset.labels[idx], minlength=k) / len(idx)
        dists[i] = np.abs(local_p - global_p).sum()
    return HeterogeneityReport(dists, float(dists.mean()))


def validate_partition(partition, dataset):
    """Check disjointness and index range; raises ConsistencyError on violation."""
    seen = np.zeros(dataset.size, dtype=bool)
    for i, idx in enumerate(partition.assignments):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= dataset.size):
            raise ConsistencyError(f"client {i} holds out-of-range indices")
        if np.any(seen[idx]):
            raise ConsistencyError(f"client {i} overlaps another client's samples")
        seen[idx] = True


def label_histograms(partition, dataset):
    """(N, K) matrix of per-client label counts; rows sum to client sizes."""
    k = dataset.num_classes
    out = np.zeros((partition.num_clients, k), dtype=np.int64)
    for i, idx in enumerate(partition.assignments):
        out[i] = np.bincount(dataset.labels[idx], minlength=k)
    return out
