"""Dataset containers, IDX/CIFAR file ingestion, and a bundled surrogate.

Image datasets are read directly from the standard binary files (big-endian
IDX for MNIST-style data, record-per-image binary for CIFAR-10); nothing is
downloaded.  Images are float32 scaled to [0, 1], channels-last.

``synthetic_digits`` builds an MNIST-shaped stand-in from scikit-learn's
bundled handwritten-digit scans (8x8 originals, upscaled and jittered onto a
28x28 canvas) for machines where the real MNIST files are not available.
Base images are split between train and test before augmentation, so the
splits share no source scans.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError
from .streams import DATA, substream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class DataSplit:
    """Images (n, h, w, c) float32 in [0, 1] plus integer labels (n,)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"image count {len(self.images)} does not match label count {len(self.labels)}"
            )

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "DataSplit":
        return DataSplit(self.images[:n], self.labels[:n])


@dataclass
class Dataset:
    name: str
    train: DataSplit
    test: DataSplit
    classes: int = 10


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise DataFormatError(f"truncated file while reading {what}", offset=f.tell() - len(data))
    return data


def load_idx_images(path) -> np.ndarray:
    """Raw (n, rows, cols) uint8 array from an IDX image file."""
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(f"bad image magic 0x{magic:08x}", offset=0)
        count, rows, cols = struct.unpack(">III", _read_exact(f, 12, "dimensions"))
        raw = _read_exact(f, count * rows * cols, f"{count} images of {rows}x{cols}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "magic"))
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(f"bad label magic 0x{magic:08x}", offset=0)
        (count,) = struct.unpack(">I", _read_exact(f, 4, "count"))
        raw = _read_exact(f, count, f"{count} labels")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def save_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())


def save_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_mnist(image_path, label_path) -> DataSplit:
    """One split of an MNIST-format dataset, scaled to [0, 1] channels-last."""
    images = load_idx_images(image_path)
    labels = load_idx_labels(label_path)
    if len(images) != len(labels):
        raise DataFormatError(
            f"image file holds {len(images)} items but label file holds {len(labels)}"
        )
    scaled = (images.astype(np.float32) / 255.0)[..., None]
    return DataSplit(scaled, labels)


def load_cifar10(paths) -> DataSplit:
    """CIFAR-10 binary batches: per record one label byte + 3072 pixel bytes."""
    record = 1 + 3 * 32 * 32
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % record != 0:
            raise DataFormatError(
                f"{path}: size {len(raw)} is not a multiple of the {record}-byte record",
                offset=(len(raw) // record) * record,
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels.append(arr[:, 0].astype(np.int64))
        planes = arr[:, 1:].reshape(-1, 3, 32, 32)
        images.append(planes.transpose(0, 2, 3, 1))
    images = np.concatenate(images).astype(np.float32) / 255.0
    labels = np.concatenate(labels)
    if labels.max() > 9:
        raise DataFormatError(f"label {labels.max()} outside [0, 9]")
    return DataSplit(images, labels)


def batches(split: DataSplit, batch_size: int, rng=None):
    """Yield (images, labels) batches; shuffled when an rng is given."""
    n = len(split)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield split.images[idx], split.labels[idx]


# ---------------------------------------------------------------------------
# surrogate dataset
# ---------------------------------------------------------------------------


def _box_blur(images):
    padded = np.pad(images, ((0, 0), (1, 1), (1, 1)))
    acc = np.zeros_like(images, dtype=np.float32)
    for dy in range(3):
        for dx in range(3):
            acc += padded[:, dy : dy + images.shape[1], dx : dx + images.shape[2]]
    return acc / 9.0


def _augment(bases, labels, n, rng, size=28):
    """Upscale 8x8 scans to 24x24, blur, and place with jitter on a canvas."""
    pick = rng.integers(0, len(bases), size=n)
    imgs = np.repeat(np.repeat(bases[pick], 3, axis=1), 3, axis=2).astype(np.float32)
    imgs = _box_blur(imgs)
    imgs *= rng.uniform(0.7, 1.0, size=(n, 1, 1)).astype(np.float32)
    canvas = np.zeros((n, size, size), dtype=np.float32)
    margin = size - imgs.shape[1]
    offs = rng.integers(0, margin + 1, size=(n, 2))
    for oy in range(margin + 1):
        for ox in range(margin + 1):
            sel = np.flatnonzero((offs[:, 0] == oy) & (offs[:, 1] == ox))
            if len(sel):
                canvas[sel, oy : oy + imgs.shape[1], ox : ox + imgs.shape[2]] = imgs[sel]
    canvas += rng.normal(0.0, 0.05, size=canvas.shape).astype(np.float32)
    canvas = np.clip(canvas, 0.0, 1.0)
    return canvas[..., None], labels[pick]


def synthetic_digits(n_train: int = 60000, n_test: int = 10000, seed: int = 0, image_size: int = 28) -> Dataset:
    """Deterministic 10-class digit dataset shaped like MNIST."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    scans = (raw.images / 16.0).astype(np.float32)
    labels = raw.target.astype(np.int64)
    rng = substream(seed, DATA)
    order = rng.permutation(len(scans))
    split_at = int(0.85 * len(scans))
    train_idx, test_idx = order[:split_at], order[split_at:]
    train_images, train_labels = _augment(scans[train_idx], labels[train_idx], n_train, rng, image_size)
    test_images, test_labels = _augment(scans[test_idx], labels[test_idx], n_test, rng, image_size)
    return Dataset(
        "digits28",
        DataSplit(train_images, train_labels),
        DataSplit(test_images, test_labels),
    )
