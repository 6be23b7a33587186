"""Dataset readers (CIFAR binary, IDX), [-1, 1] normalisation and flip/translate augmentation."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DatasetFormatError(ValueError):
    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: byte {offset}: {msg}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class AugmentPolicy:
    horizontal_flip: bool = True
    max_translate: int = 4


@dataclass
class DatasetSplit:
    images: np.ndarray  # uint8, (N, C, H, W)
    labels: np.ndarray  # int64, (N,)
    num_labels: int
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    normalized: bool = True

    def __len__(self):
        return len(self.labels)

    @property
    def x(self) -> np.ndarray:
        """Float32 pixels, mapped to [-1, 1] when ``normalized``."""
        return normalize(self.images) if self.normalized else self.images.astype(np.float32)

    def subset(self, idx) -> "DatasetSplit":
        return DatasetSplit(self.images[idx], self.labels[idx], self.num_labels, self.policy, self.normalized)


def normalize(pixels: np.ndarray) -> np.ndarray:
    """pixel / 255 * 2 - 1."""
    return (np.asarray(pixels, dtype=np.float32) / np.float32(255.0)) * np.float32(2.0) - np.float32(1.0)


# ---------------------------------------------------------------------------
# CIFAR binary: each record is label byte(s) followed by C*H*W pixel bytes


def read_cifar_records(path, label_bytes: int = 1, image_shape=(3, 32, 32)) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    rec = label_bytes + int(np.prod(image_shape))
    if len(raw) == 0:
        raise DatasetFormatError(path, 0, "empty file")
    if len(raw) % rec:
        offset = len(raw) - len(raw) % rec
        raise DatasetFormatError(path, offset, f"truncated record ({len(raw) % rec} of {rec} bytes)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)  # CIFAR-100 stores (coarse, fine): keep fine
    images = arr[:, label_bytes:].reshape((-1,) + tuple(image_shape)).copy()
    return images, labels


def encode_cifar_records(images: np.ndarray, labels: np.ndarray, label_bytes: int = 1) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    n = len(images)
    lab = np.zeros((n, label_bytes), dtype=np.uint8)
    lab[:, -1] = labels
    return np.concatenate([lab, images.reshape(n, -1)], axis=1).tobytes()


# ---------------------------------------------------------------------------
# IDX (MNIST-style): magic 00 00 <type> <ndim>, big-endian uint32 dims, data

_IDX_TYPES = {0x08: np.uint8}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetFormatError(path, 0, "missing IDX header")
    if raw[0] or raw[1]:
        raise DatasetFormatError(path, 0, "bad IDX magic")
    dtype = _IDX_TYPES.get(raw[2])
    if dtype is None:
        raise DatasetFormatError(path, 2, f"unsupported IDX type 0x{raw[2]:02x}")
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise DatasetFormatError(path, 4, "truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    start = 4 + 4 * ndim
    need = int(np.prod(dims))
    if len(raw) - start != need:
        raise DatasetFormatError(path, min(len(raw), start + need), f"expected {need} data bytes, found {len(raw) - start}")
    return np.frombuffer(raw, dtype=dtype, offset=start).reshape(dims).copy()


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    return bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


# ---------------------------------------------------------------------------


_CIFAR_LAYOUTS = (
    # (train files glob, test file, label bytes)
    ("data_batch_*.bin", "test_batch.bin", 1),
    ("train.bin", "test.bin", 2),
)


def _check_labels(path, labels, num_labels):
    if num_labels is not None and labels.size and labels.max() >= num_labels:
        raise ValueError(f"{path}: label {labels.max()} outside [0, {num_labels})")


def load_dataset(path, fmt: str = "cifar-binary", num_labels: int | None = None, image_shape=(3, 32, 32), policy: AugmentPolicy | None = None) -> tuple[DatasetSplit, DatasetSplit]:
    """Read a train/test pair from a directory.

    cifar-binary: ``data_batch_*.bin`` + ``test_batch.bin`` (1 label byte) or
    ``train.bin`` + ``test.bin`` (coarse + fine label bytes).
    idx: ``train-images-idx3-ubyte`` / ``train-labels-idx1-ubyte`` and the
    ``t10k-*`` pair.
    """
    path = Path(path)
    policy = policy or AugmentPolicy()
    if fmt == "cifar-binary":
        for pattern, test_name, label_bytes in _CIFAR_LAYOUTS:
            train_files = sorted(path.glob(pattern))
            if train_files and (path / test_name).exists():
                break
        else:
            raise FileNotFoundError(f"no CIFAR binary train/test files in {path}")
        parts = [read_cifar_records(f, label_bytes, image_shape) for f in train_files]
        train = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
        test = read_cifar_records(path / test_name, label_bytes, image_shape)
    elif fmt == "idx":
        splits = []
        for prefix in ("train", "t10k"):
            imgs = read_idx(path / f"{prefix}-images-idx3-ubyte")
            labels = read_idx(path / f"{prefix}-labels-idx1-ubyte").astype(np.int64)
            if imgs.ndim == 3:
                imgs = imgs[:, None]
            if len(imgs) != len(labels):
                raise DatasetFormatError(path / f"{prefix}-labels-idx1-ubyte", 4, f"{len(labels)} labels for {len(imgs)} images")
            splits.append((imgs, labels))
        train, test = splits
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    if num_labels is None:
        num_labels = int(max(train[1].max(), test[1].max())) + 1
    for name, (_, labels) in (("train", train), ("test", test)):
        _check_labels(f"{path} [{name}]", labels, num_labels)
    return (
        DatasetSplit(train[0], train[1], num_labels, policy),
        DatasetSplit(test[0], test[1], num_labels, policy),
    )


def split_holdout(ds: DatasetSplit, fraction: float = 0.2, seed: int = 0) -> tuple[DatasetSplit, DatasetSplit]:
    """Fixed random split of a training set into (fit, held-out)."""
    order = np.random.default_rng(seed).permutation(len(ds))
    n_hold = int(round(len(ds) * fraction))
    return ds.subset(np.sort(order[n_hold:])), ds.subset(np.sort(order[:n_hold]))


def check_balance(labels: np.ndarray, num_labels: int, tolerance: float = 0.05) -> float:
    """Warn when class counts differ from their mean by more than ``tolerance``; returns the worst deviation."""
    counts = np.bincount(labels, minlength=num_labels)
    mean = counts.mean()
    worst = float(np.abs(counts - mean).max() / mean) if mean else 0.0
    if worst > tolerance:
        warnings.warn(f"class counts are imbalanced by {worst:.1%} (min {counts.min()}, max {counts.max()})", stacklevel=2)
    return worst


def augment(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip (p = 0.5) and integer translation in [-t, t]^2 with zero fill."""
    n = len(batch)
    out = batch
    if policy.horizontal_flip:
        flip = rng.random(n) < 0.5
        out = np.where(flip[:, None, None, None], out[:, :, :, ::-1], out)
    t = policy.max_translate
    if t > 0:
        h, w = out.shape[2:]
        shift = rng.integers(-t, t + 1, size=(n, 2))
        padded = np.pad(out, ((0, 0), (0, 0), (t, t), (t, t)))
        win = sliding_window_view(padded, (h, w), axis=(2, 3))
        out = win[np.arange(n), :, t + shift[:, 0], t + shift[:, 1]]
    return np.ascontiguousarray(out)


def augmenter(policy: AugmentPolicy):
    def _aug(batch, rng):
        return augment(batch, policy, rng)

    return _aug
