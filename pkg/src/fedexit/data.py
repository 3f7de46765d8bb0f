"""Datasets: synthetic class-template images, IDX files, Dirichlet partitioning
across clients, and severity-scaled Gaussian corruption."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for IDX file problems."""


class IdxMagicError(IdxError):
    """File does not start with the expected IDX magic."""


class IdxTruncatedError(IdxError):
    """File is shorter than its own header promises."""


class IdxCountMismatchError(IdxError):
    """Image file and label file disagree on the number of records."""


@dataclass
class Dataset:
    """Images in [0, 1], shape (n, channels, H, W), with integer labels."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.ndim != 4:
            raise ValueError(f"inputs must be (n, C, H, W), got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(
                f"labels {self.labels.shape} do not match {self.inputs.shape[0]} inputs")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got {self.labels.dtype}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


def synth_dataset(n: int, num_classes: int, image_size: int = 16, channels: int = 1,
                  cluster_std: float = 0.25, label_map_seed: int = 0, noise_seed: int = 0,
                  dtype=np.float32) -> Dataset:
    """Per-class template images plus Gaussian cluster noise, clipped to [0, 1].

    Templates depend only on label_map_seed; the noise stream only on
    noise_seed. Labels are balanced by construction (arange(n) % C).
    """
    if n < 1 or num_classes < 1:
        raise ValueError("need n >= 1 and num_classes >= 1")
    tmpl_rng = np.random.default_rng(np.random.SeedSequence((label_map_seed, 0)))
    templates = tmpl_rng.random((num_classes, channels, image_size, image_size))
    labels = (np.arange(n) % num_classes).astype(np.int64)
    noise_rng = np.random.default_rng(np.random.SeedSequence((noise_seed, 1)))
    noise = noise_rng.normal(0.0, cluster_std, size=(n, channels, image_size, image_size))
    x = np.clip(templates[labels] + noise, 0.0, 1.0).astype(dtype)
    return Dataset(x, labels, num_classes)


def _read_idx_header(buf: bytes, path: str, magic: int, rank: int) -> tuple[int, ...]:
    need = 4 + 4 * rank
    if len(buf) < need:
        raise IdxTruncatedError(f"{path}: {len(buf)} bytes is too short for an IDX header")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{rank}I", buf[4:need])


def load_idx(images_path: str, labels_path: str, num_classes: int | None = None,
             dtype=np.float32) -> Dataset:
    """Load an IDX image/label file pair (big-endian, unsigned-byte payload).

    Pixel bytes are scaled to [0, 1]. Raises IdxMagicError, IdxTruncatedError,
    or IdxCountMismatchError for the respective malformations.
    """
    with open(images_path, "rb") as fh:
        ibuf = fh.read()
    with open(labels_path, "rb") as fh:
        lbuf = fh.read()

    n_img, rows, cols = _read_idx_header(ibuf, images_path, IDX_IMAGES_MAGIC, 3)
    body = ibuf[16:]
    if len(body) < n_img * rows * cols:
        raise IdxTruncatedError(
            f"{images_path}: header promises {n_img}x{rows}x{cols} bytes, "
            f"payload has {len(body)}")
    (n_lab,) = _read_idx_header(lbuf, labels_path, IDX_LABELS_MAGIC, 1)
    lbody = lbuf[8:]
    if len(lbody) < n_lab:
        raise IdxTruncatedError(f"{labels_path}: header promises {n_lab} labels, payload has {len(lbody)}")
    if n_img != n_lab:
        raise IdxCountMismatchError(f"{images_path} has {n_img} images but {labels_path} has {n_lab} labels")

    images = np.frombuffer(body, dtype=np.uint8, count=n_img * rows * cols)
    images = (images.reshape(n_img, 1, rows, cols).astype(dtype)) / np.asarray(255.0, dtype=dtype)
    labels = np.frombuffer(lbody, dtype=np.uint8, count=n_lab).astype(np.int64)
    classes = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(images, labels, classes)


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset across clients. kind is 'lda' or 'iid';
    alpha is the Dirichlet concentration (lda only, smaller = more skew)."""

    num_clients: int
    kind: str = "lda"
    alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.kind not in ("lda", "iid"):
            raise ValueError(f"kind must be 'lda' or 'iid', got {self.kind!r}")
        if self.kind == "lda" and not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray

    def __len__(self) -> int:
        return self.indices.shape[0]


def partition(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Split sample indices across clients.

    LDA: per class, draw proportions from Dirichlet(alpha) over clients and
    deal that class's shuffled indices out by a multinomial draw. Empty shards
    are repaired by stealing one sample from the largest shard. IID is a plain
    shuffled split into near-equal parts.
    """
    n, k = len(ds), spec.num_clients
    if n < k:
        raise ValueError(f"cannot give {k} clients at least one sample from {n}")
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 2)))

    if spec.kind == "iid":
        perm = rng.permutation(n)
        parts = np.array_split(perm, k)
        return [ClientShard(i, np.sort(p).astype(np.int64)) for i, p in enumerate(parts)]

    buckets: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        q = rng.dirichlet(np.full(k, spec.alpha))
        counts = rng.multinomial(idx.size, q)
        stop = np.cumsum(counts)
        start = stop - counts
        for i in range(k):
            if counts[i]:
                buckets[i].append(idx[start[i]:stop[i]])

    shards = [np.concatenate(b) if b else np.empty(0, dtype=np.int64) for b in buckets]
    # repair: every client must hold at least one sample
    while True:
        sizes = np.array([s.size for s in shards])
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            break
        donor = int(np.argmax(sizes))
        taken = shards[donor][-1]
        shards[donor] = shards[donor][:-1]
        shards[empty[0]] = np.array([taken], dtype=np.int64)
    return [ClientShard(i, np.sort(s).astype(np.int64)) for i, s in enumerate(shards)]


def shard_label_entropy(ds: Dataset, shards: list[ClientShard]) -> float:
    """Mean per-client entropy (nats) of the shard label distribution.
    Lower means more heterogeneous shards."""
    ents = []
    for s in shards:
        counts = np.bincount(ds.labels[s.indices], minlength=ds.num_classes)
        p = counts / counts.sum()
        nz = p[p > 0]
        ents.append(float(-(nz * np.log(nz)).sum()))
    return float(np.mean(ents))


@dataclass(frozen=True)
class CorruptionSpec:
    """Gaussian pixel noise with std 0.1 * severity; severity 0 is identity."""

    severity: int
    seed: int | tuple[int, ...] = 0

    def __post_init__(self):
        if not (0 <= int(self.severity) <= 5):
            raise ValueError(f"severity must be an integer in [0, 5], got {self.severity}")


def corrupt(ds: Dataset, spec: CorruptionSpec) -> Dataset:
    if spec.severity == 0:
        return Dataset(ds.inputs, ds.labels, ds.num_classes)
    entropy = spec.seed if isinstance(spec.seed, tuple) else (spec.seed,)
    rng = np.random.default_rng(np.random.SeedSequence((*entropy, 3)))
    noise = rng.normal(0.0, 0.1 * spec.severity, size=ds.inputs.shape)
    x = np.clip(ds.inputs + noise, 0.0, 1.0).astype(ds.inputs.dtype)
    return Dataset(x, ds.labels, ds.num_classes)
