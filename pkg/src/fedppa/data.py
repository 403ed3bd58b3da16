"""Datasets, IDX ingestion, Dirichlet label-skew partitioning and entropy weights."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InputError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------------------
# IDX files


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < count:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {count} bytes)")
    if len(payload) > count:
        raise FormatError(f"{path}: {len(payload) - count} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> LabeledDataset:
    """Read an IDX image/label file pair (optionally gzipped) into a dataset.

    Pixels are scaled by 1/255; images gain a channel axis (N x 1 x H x W).
    """
    pixels = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, labels_path)
    if len(pixels) != len(labels):
        raise FormatError(f"{len(pixels)} images in {images_path} but {len(labels)} labels in {labels_path}")
    if len(labels) and labels.max() >= num_classes:
        raise FormatError(f"{labels_path}: label {labels.max()} >= num_classes {num_classes}")
    images = pixels[:, None, :, :].astype(np.float64) / 255.0
    return LabeledDataset(images, labels.astype(np.int64), num_classes)


def write_idx(data: LabeledDataset, images_path, labels_path, *, compress: bool = False):
    """Inverse of ``load_idx`` for single-channel datasets."""
    if data.images.shape[1] != 1:
        raise InputError("IDX image files hold single-channel images only")
    n, _, h, w = data.images.shape
    pixels = np.rint(data.images[:, 0] * 255.0).clip(0, 255).astype(np.uint8)
    blobs = (
        (images_path, struct.pack(">IIII", IMAGES_MAGIC, n, h, w) + pixels.tobytes()),
        (labels_path, struct.pack(">II", LABELS_MAGIC, n) + data.labels.astype(np.uint8).tobytes()),
    )
    for path, blob in blobs:
        if compress:
            blob = gzip.compress(blob, mtime=0)
        Path(path).write_bytes(blob)


def load_bundled_mnist(split: str = "train") -> LabeledDataset:
    """The packaged MNIST subset: ``train`` (4,000 images) or ``test`` (1,000)."""
    if split not in ("train", "test"):
        raise InputError(f"split must be 'train' or 'test', got {split!r}")
    root = resources.files("fedppa") / "datasets" / "mnist5k"
    with resources.as_file(root / f"{split}-images-idx3-ubyte.gz") as img, resources.as_file(
        root / f"{split}-labels-idx1-ubyte.gz"
    ) as lab:
        return load_idx(img, lab)


def synth_dataset(num_classes: int, per_class: int, seed: int, image_shape=(1, 28, 28), noise: float = 0.25):
    """Gaussian blobs around one random prototype image per class, shuffled."""
    if per_class < 1 or num_classes < 1:
        raise InputError("num_classes and per_class must be >= 1")
    rng = np.random.default_rng(seed)
    prototypes = rng.uniform(0.0, 1.0, size=(num_classes,) + tuple(image_shape))
    labels = np.repeat(np.arange(num_classes), per_class)
    images = prototypes[labels] + rng.normal(0.0, noise, size=(len(labels),) + tuple(image_shape))
    order = rng.permutation(len(labels))
    return LabeledDataset(np.clip(images[order], 0.0, 1.0), labels[order], num_classes)


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class PartitionConfig:
    alpha: float = 0.5
    num_clients: int = 8
    seed: int = 0
    train_fraction: float = 0.8
    min_samples: int | None = None  # None: min(32 / (1 - train_fraction), N / (2M))
    max_attempts: int = 100

    def __post_init__(self):
        if not self.alpha > 0:
            raise InputError("alpha must be > 0")
        if self.num_clients < 1:
            raise InputError("num_clients must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise InputError("train_fraction must lie in (0, 1)")
        if self.min_samples is not None and self.min_samples < 2:
            raise InputError("min_samples must be >= 2 so both splits are nonempty")
        if self.max_attempts < 1:
            raise InputError("max_attempts must be >= 1")

    def resolved_min_samples(self, n: int) -> int:
        """Smallest acceptable shard for a dataset of ``n`` samples."""
        if self.min_samples is not None:
            return self.min_samples
        return max(2, int(min(32 / (1 - self.train_fraction), n / self.num_clients / 2)))


@dataclass
class ClientDataset:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset
    indices: np.ndarray  # positions in the source dataset

    @property
    def label_histogram(self) -> np.ndarray:
        return self.train.histogram()


def sample_dirichlet(rng: np.random.Generator, alpha: float, size: int) -> np.ndarray:
    """Symmetric Dirichlet draw from normalized Gamma(alpha, 1) variates.

    For ``alpha < 1`` the gamma draw uses the ``Gamma(alpha+1) * U**(1/alpha)``
    boost, evaluated in log space so tiny concentrations cannot underflow to an
    all-zero vector.
    """
    if alpha >= 1:
        logs = np.log(rng.gamma(alpha, size=size))
    else:
        logs = np.log(rng.gamma(alpha + 1.0, size=size)) + np.log1p(-rng.random(size)) / alpha
    w = np.exp(logs - logs.max())
    return w / w.sum()


def _draw_assignment(labels, num_classes, cfg, rng):
    parts = [[] for _ in range(cfg.num_clients)]
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if not len(idx):
            continue
        rng.shuffle(idx)
        p = sample_dirichlet(rng, cfg.alpha, cfg.num_clients)
        cuts = (np.cumsum(p)[:-1] * len(idx)).astype(int)
        for k, chunk in enumerate(np.split(idx, cuts)):
            parts[k].append(chunk)
    return [np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts]


def partition_dirichlet(data: LabeledDataset, cfg: PartitionConfig) -> list:
    """Split ``data`` across clients with per-class Dirichlet(alpha) proportions.

    Draws that leave any client with fewer than ``cfg.resolved_min_samples``
    samples are discarded and redrawn, up to ``cfg.max_attempts`` times. Each
    client's shard is then split into train/test with its own RNG stream.
    """
    if not len(data):
        raise InputError("cannot partition an empty dataset")
    least = cfg.resolved_min_samples(len(data))
    if least * cfg.num_clients > len(data):
        raise InputError(f"{len(data)} samples cannot give {cfg.num_clients} clients {least} each")
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.max_attempts):
        parts = _draw_assignment(data.labels, data.num_classes, cfg, rng)
        if min(len(p) for p in parts) >= least:
            break
    else:
        raise InputError(
            f"no Dirichlet draw gave every client >= {least} samples after "
            f"{cfg.max_attempts} attempts (alpha={cfg.alpha}, clients={cfg.num_clients}, seed={cfg.seed})"
        )
    return [_split_client(k, data, idx, cfg) for k, idx in enumerate(parts)]


def _split_client(client_id, data, idx, cfg):
    order = np.random.default_rng([cfg.seed, client_id]).permutation(idx)
    n_train = int(min(max(round(cfg.train_fraction * len(order)), 1), len(order) - 1))
    return ClientDataset(client_id, data.subset(order[:n_train]), data.subset(order[n_train:]), order)


def label_matrix(shards: Sequence[ClientDataset]) -> np.ndarray:
    """Client x class training-label counts."""
    return np.stack([s.label_histogram for s in shards])


# ---------------------------------------------------------------------------
# entropy weights


@dataclass(frozen=True)
class EntropyWeights:
    raw_entropy: np.ndarray
    normalized: np.ndarray
    client_ids: tuple = ()

    def __post_init__(self):
        if self.normalized.min(initial=0.0) < 0:
            raise InputError("entropy weights must be nonnegative")
        if not self.client_ids:
            object.__setattr__(self, "client_ids", tuple(range(len(self.normalized))))

    def for_client(self, client_id: int) -> float:
        return float(self.normalized[self.client_ids.index(client_id)])


def shannon_entropy(counts) -> float:
    """Natural-log entropy of a label histogram; empty classes contribute 0."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise InputError("entropy of an empty histogram")
    q = counts[counts > 0] / total
    return float(-np.sum(q * np.log(q))) + 0.0  # no negative zero


def entropy_weights(shards: Sequence[ClientDataset]) -> EntropyWeights:
    """Per-client entropy of the training labels, normalized to sum to one.

    Falls back to uniform weights when every client holds a single label.
    """
    if not shards:
        raise InputError("no shards")
    for s in shards:
        if not len(s.train):
            raise InputError(f"client {s.client_id} has an empty training split")
    raw = np.array([shannon_entropy(s.label_histogram) for s in shards])
    total = raw.sum()
    if total == 0:
        normalized = np.full(len(raw), 1.0 / len(raw))
    else:
        normalized = raw / total
    return EntropyWeights(raw, normalized, tuple(s.client_id for s in shards))
