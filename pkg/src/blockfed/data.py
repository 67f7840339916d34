"""Dataset plumbing: IDX image/label files, a synthetic 10-class generator,
IID sharding, and the test/validation split.

Image features are flattened and scaled to [0, 1]; labels are class ids. The
synthetic generator is a drop-in for the IDX path so the full pipeline runs
without any dataset files.
"""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class DataShard:
    """One client's private training slice."""

    owner: int
    samples: np.ndarray  # (n, features) float64 in [0, 1]
    labels: np.ndarray   # (n,) int64

    def __post_init__(self):
        if len(self.samples) != len(self.labels) or len(self.samples) == 0:
            raise ValueError("shard must be nonempty with matching samples/labels")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class EvalSplit:
    """Training set plus the 30/70 split of the original test set."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray


def _open_maybe_gzip(path: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx_images(path: str) -> np.ndarray:
    """Flattened images from an IDX3 file, scaled to [0, 1] float64."""
    with _open_maybe_gzip(path) as f:
        magic, n, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{path}: bad IDX image magic 0x{magic:08x}")
        raw = np.frombuffer(f.read(n * rows * cols), dtype=np.uint8)
    if raw.size != n * rows * cols:
        raise ValueError(f"{path}: truncated image data")
    return raw.reshape(n, rows * cols).astype(np.float64) / 255.0


def load_idx_labels(path: str) -> np.ndarray:
    with _open_maybe_gzip(path) as f:
        magic, n = struct.unpack(">II", f.read(8))
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{path}: bad IDX label magic 0x{magic:08x}")
        raw = np.frombuffer(f.read(n), dtype=np.uint8)
    if raw.size != n:
        raise ValueError(f"{path}: truncated label data")
    return raw.astype(np.int64)


def write_idx_images(path: str, images: np.ndarray) -> None:
    """Write (n, rows, cols) uint8 images in IDX3 format (big-endian)."""
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError("expected (n, rows, cols) uint8 array")
    n, rows, cols = images.shape
    with _open_maybe_gzip_write(path) as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path: str, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with _open_maybe_gzip_write(path) as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def _open_maybe_gzip_write(path: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, "wb")
    return open(path, "wb")


def synthetic_dataset(
    n_train: int,
    n_test: int,
    features: int,
    rng: np.random.Generator,
    classes: int = 10,
    noise: float = 1.0,
):
    """Balanced Gaussian-blob classification data squashed into [0, 1].

    Per-class mean vectors are standard normal; samples add `noise`-scaled
    Gaussian jitter and pass through a sigmoid so they respect the image-like
    [0, 1] range. Returns (train_x, train_y, test_x, test_y).
    """
    means = rng.normal(0.0, 1.0, size=(classes, features))

    def draw(n):
        labels = np.arange(n) % classes
        labels = rng.permutation(labels)
        raw = means[labels] + noise * rng.normal(size=(n, features))
        return 1.0 / (1.0 + np.exp(-raw)), labels.astype(np.int64)

    train_x, train_y = draw(n_train)
    test_x, test_y = draw(n_test)
    return train_x, train_y, test_x, test_y


def split_test_set(
    x: np.ndarray, y: np.ndarray, test_fraction: float, rng: np.random.Generator
):
    """Disjoint (test, validation) split of the original test set."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    n = len(x)
    perm = rng.permutation(n)
    n_test = round(n * test_fraction)
    test_idx, val_idx = perm[:n_test], perm[n_test:]
    return x[test_idx], y[test_idx], x[val_idx], y[val_idx]


def shard_dataset(
    x: np.ndarray, y: np.ndarray, num_clients: int, rng: np.random.Generator
) -> list[DataShard]:
    """Seeded shuffle then contiguous equal split: IID shards, sizes within 1."""
    n = len(x)
    if num_clients < 1 or num_clients > n:
        raise ValueError(f"cannot split {n} samples into {num_clients} shards")
    perm = rng.permutation(n)
    parts = np.array_split(perm, num_clients)
    return [DataShard(owner=k, samples=x[idx], labels=y[idx]) for k, idx in enumerate(parts)]


def shard_sizes(n_samples: int, num_clients: int) -> list[int]:
    """Shard lengths without materializing data (matches shard_dataset)."""
    base, extra = divmod(n_samples, num_clients)
    return [base + 1 if k < extra else base for k in range(num_clients)]
