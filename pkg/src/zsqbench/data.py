"""Dataset ingestion and persistence.

Two on-disk formats share one record layout: a label byte followed by
``C*H*W`` pixel bytes, channel-planar.  CIFAR-10's binary distribution is
the 3x32x32 instance (3073-byte records); synthetic datasets use the same
layout with a JSON sidecar for shape and a float32 difficulty sidecar.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ZSQError

CIFAR10_SHAPE = (3, 32, 32)
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"


class DatasetIOError(ZSQError, OSError):
    """A dataset file is missing or corrupt."""


@dataclass
class LabeledImages:
    images: np.ndarray  # uint8, N x C x H x W
    labels: np.ndarray  # int64, N

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "LabeledImages":
        return LabeledImages(self.images[:n], self.labels[:n])


def record_size(shape) -> int:
    c, h, w = shape
    return 1 + c * h * w


def decode_records(raw: bytes, shape, source: str = "<bytes>") -> LabeledImages:
    size = record_size(shape)
    if len(raw) % size:
        whole = len(raw) // size * size
        raise DatasetIOError(
            f"{source}: {len(raw)} bytes is not a multiple of the {size}-byte record; "
            f"trailing partial record starts at byte offset {whole}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, size)
    return LabeledImages(arr[:, 1:].reshape(-1, *shape).copy(), arr[:, 0].astype(np.int64))


def encode_records(data: LabeledImages) -> bytes:
    imgs = np.asarray(data.images, dtype=np.uint8)
    labels = np.asarray(data.labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise FormatError("labels must fit in one unsigned byte")
    rec = np.empty((len(labels), 1 + int(np.prod(imgs.shape[1:]))), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = imgs.reshape(len(labels), rec.shape[1] - 1)
    return rec.tobytes()


def read_records(path, shape) -> LabeledImages:
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(f"dataset file not found: {path}")
    return decode_records(path.read_bytes(), shape, str(path))


def write_records(path, data: LabeledImages) -> None:
    Path(path).write_bytes(encode_records(data))


def load_cifar10(root, train_limit: int | None = None, test_limit: int | None = None):
    """Read CIFAR-10 binary batches from ``root``; returns ``(train, test)``.

    Missing training batches are skipped as long as at least one is present,
    so a directory holding only ``data_batch_1.bin`` is a valid subset.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetIOError(f"dataset directory not found: {root}")
    parts = [read_records(root / f, CIFAR10_SHAPE) for f in CIFAR10_TRAIN_FILES if (root / f).is_file()]
    if not parts:
        raise DatasetIOError(f"no CIFAR-10 training batch (data_batch_*.bin) in {root}")
    train = LabeledImages(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
    test = read_records(root / CIFAR10_TEST_FILE, CIFAR10_SHAPE)
    if train_limit is not None:
        train = train.subset(train_limit)
    if test_limit is not None:
        test = test.subset(test_limit)
    return train, test


def channel_stats(images: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    x = images.astype(np.float64) / 255.0
    return tuple(float(v) for v in x.mean(axis=(0, 2, 3))), tuple(float(v) for v in x.std(axis=(0, 2, 3)))


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return ((images.astype(np.float32) / 255.0) - m) / s


def normalized_range(mean, std) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (low, high) of normalized pixel values."""
    m, s = np.asarray(mean, np.float32), np.asarray(std, np.float32)
    return (0.0 - m) / s, (1.0 - m) / s


def clamp_normalized(x: np.ndarray, mean, std) -> np.ndarray:
    lo, hi = normalized_range(mean, std)
    return np.clip(x, lo.reshape(1, -1, 1, 1), hi.reshape(1, -1, 1, 1)).astype(np.float32)


def to_uint8(x: np.ndarray, mean, std) -> np.ndarray:
    """Invert :func:`normalize`, clamping to the valid pixel range."""
    m = np.asarray(mean, np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, np.float64).reshape(1, -1, 1, 1)
    pix = (x.astype(np.float64) * s + m) * 255.0
    return np.clip(np.floor(pix + 0.5), 0, 255).astype(np.uint8)


# -- synthetic dataset persistence ---------------------------------------------------

def write_synthetic(prefix, data: LabeledImages, difficulties: np.ndarray | None, meta: dict) -> None:
    """Write ``<prefix>.bin``, ``<prefix>.difficulty.f32`` and ``<prefix>.meta.json``."""
    prefix = str(prefix)
    write_records(prefix + ".bin", data)
    if difficulties is not None:
        Path(prefix + ".difficulty.f32").write_bytes(np.asarray(difficulties, dtype="<f4").tobytes())
    meta = dict(meta, shape=list(data.images.shape[1:]), count=len(data))
    Path(prefix + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_synthetic(prefix):
    prefix = str(prefix)
    meta_file = Path(prefix + ".meta.json")
    if not meta_file.is_file():
        raise DatasetIOError(f"synthetic dataset metadata not found: {meta_file}")
    meta = json.loads(meta_file.read_text(encoding="utf-8"))
    data = read_records(prefix + ".bin", tuple(meta["shape"]))
    if len(data) != meta["count"]:
        raise FormatError(f"{prefix}.bin holds {len(data)} records, metadata says {meta['count']}")
    diff = None
    dpath = Path(prefix + ".difficulty.f32")
    if dpath.is_file():
        raw = dpath.read_bytes()
        if len(raw) != 4 * len(data):
            raise FormatError(f"{dpath}: {len(raw)} bytes, expected {4 * len(data)}")
        diff = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    return data, diff, meta


# -- offline desk dataset ----------------------------------------------------------------

def desk_digits(seed: int = 0, test_size: int = 597, side: int = 32) -> tuple[LabeledImages, LabeledImages]:
    """Scikit-learn's 8x8 handwritten digits upsampled to 3 x side x side.

    Real scanned images, shipped with scikit-learn, so the desk pipeline runs
    without network access.  Upsampling is bilinear, which keeps the
    low-frequency character of natural images.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    d = load_digits()
    imgs = d.images.astype(np.float64) / 16.0
    up = np.stack([zoom(im, side / 8, order=1, mode="nearest", grid_mode=True) for im in imgs])
    up = np.clip(np.floor(up * 255.0 + 0.5), 0, 255).astype(np.uint8)
    up = np.repeat(up[:, None], 3, axis=1)
    order = np.random.default_rng(seed).permutation(len(up))
    up, labels = up[order], d.target[order].astype(np.int64)
    n_train = len(up) - test_size
    return LabeledImages(up[:n_train], labels[:n_train]), LabeledImages(up[n_train:], labels[n_train:])


def write_cifar_layout(root, train: LabeledImages, test: LabeledImages) -> None:
    """Write a dataset in CIFAR-10's binary layout (``data_batch_1.bin`` + ``test_batch.bin``)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_records(root / CIFAR10_TRAIN_FILES[0], train)
    write_records(root / CIFAR10_TEST_FILE, test)
