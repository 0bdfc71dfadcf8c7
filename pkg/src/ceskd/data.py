"""Datasets: synthetic generator, IDX / CIFAR-10 binary loaders, augmentation, normalisation."""
import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import DataError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


@dataclass
class Dataset:
    """Features ``X`` (``[n, d]`` or ``[n, C, H, W]``) with integer labels."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.X = np.asarray(self.X)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.shape[0] != self.y.shape[0]:
            raise DataError(f"{self.X.shape[0]} samples but {self.y.shape[0]} labels")
        if self.y.shape[0] < 1:
            raise DataError("dataset must contain at least one sample")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.X)):
            raise DataError("dataset contains non-finite values")
        if self.split not in ("train", "test"):
            raise DataError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self):
        return self.y.shape[0]

    @property
    def input_shape(self):
        return self.X.shape[1:]

    @property
    def is_image(self):
        return self.X.ndim == 4

    def subset(self, indices):
        indices = np.asarray(indices)
        return Dataset(self.X[indices], self.y[indices], self.n_classes, self.split)


def gen_synthetic(k, dim, n, hardness_spread, seed, n_test=None, modes=1,
                  separation=4.0, noise=1.0):
    """Gaussian class clusters with a controllable share of boundary samples.

    Every class owns ``modes`` cluster centres. A fraction ``hardness_spread``
    of the samples is pulled from its own centre towards the nearest centre
    of another class, by between 0.2 and 0.5 of the gap (0.5 is the midpoint),
    so the dataset carries a genuine easy-to-hard gradient. Classes are
    balanced; train and test come from the same law.
    """
    if k < 2:
        raise DataError("need at least two classes")
    if n < k:
        raise DataError("need at least one sample per class")
    if not 0.0 <= hardness_spread <= 1.0:
        raise DataError("hardness_spread must lie in [0, 1]")
    n_test = max(k, n // 4) if n_test is None else n_test
    gen = np.random.default_rng(seed)
    centres = gen.normal(size=(k, modes, dim))
    centres *= separation / np.sqrt(2.0)
    flat = centres.reshape(k * modes, dim)
    owner = np.repeat(np.arange(k), modes)

    def draw(count):
        y = np.arange(count) % k
        gen.shuffle(y)
        mode = gen.integers(modes, size=count)
        own = centres[y, mode]
        X = own + noise * gen.normal(size=(count, dim))
        hard = gen.random(count) < hardness_spread
        if hard.any():
            d = ((own[hard, None, :] - flat[None]) ** 2).sum(-1)
            d[owner[None, :] == y[hard, None]] = np.inf
            target = flat[d.argmin(axis=1)]
            t = gen.uniform(0.2, 0.5, size=(hard.sum(), 1))
            X[hard] += t * (target - own[hard])
        return X.astype(np.float32), y

    Xtr, ytr = draw(n)
    Xte, yte = draw(n_test)
    return Dataset(Xtr, ytr, k, "train"), Dataset(Xte, yte, k, "test")


# -- IDX ---------------------------------------------------------------------------

def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, path, magic, ndim):
    if len(raw) < 4:
        raise ParseError(f"{path}: file too short for IDX magic ({len(raw)} bytes)", offset=0)
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise ParseError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: truncated IDX header: expected {header} bytes, got {len(raw)}", offset=4)
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise ParseError(
            f"{path}: expected {expected} bytes for dimensions {dims}, got {len(raw)}",
            offset=min(len(raw), expected))
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header)


def load_idx(images_path, labels_path, n_classes=10, split="train"):
    """Load an IDX image/label pair (optionally gzipped) as ``[n, 1, rows, cols]`` floats in [0, 1]."""
    (n, rows, cols), pixels = _parse_idx(_read_bytes(images_path), images_path, IDX_IMAGES_MAGIC, 3)
    (m,), labels = _parse_idx(_read_bytes(labels_path), labels_path, IDX_LABELS_MAGIC, 1)
    if n != m:
        raise ParseError(f"image count {n} != label count {m}", offset=4)
    if n and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise DataError(f"{labels_path}: label {labels[bad]} at item {bad} is outside [0, {n_classes})")
    X = pixels.reshape(n, 1, rows, cols).astype(np.float32) / 255.0
    return Dataset(X, labels.astype(np.int64), n_classes, split)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 ``images [n, rows, cols]`` and ``labels [n]`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# -- CIFAR-10 binary ------------------------------------------------------------------

def load_cifar10_bin(paths, split="train"):
    """Load CIFAR-10 binary batches: 3073-byte records (label, then R, G, B 32x32 planes)."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    Xs, ys = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise ParseError(
                f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}",
                offset=len(raw) - len(raw) % CIFAR_RECORD)
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = rec[:, 0]
        if labels.max() >= 10:
            bad = int(np.argmax(labels >= 10))
            raise DataError(f"{path}: label {labels[bad]} in record {bad} (offset {bad * CIFAR_RECORD}) >= 10")
        Xs.append(rec[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float32) / 255.0)
        ys.append(labels.astype(np.int64))
    return Dataset(np.concatenate(Xs), np.concatenate(ys), 10, split)


def write_cifar10_bin(path, images, labels):
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    with open(path, "wb") as fh:
        fh.write(np.hstack([labels, images]).tobytes())


# -- augmentation -----------------------------------------------------------------------

def hflip(batch):
    return batch[..., ::-1]


def crop(batch, offsets, pad=4):
    """Reflect-pad each image by ``pad`` then cut a native-size window at ``offsets[i] = (dy, dx)``."""
    n, _, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect") if pad else batch
    out = np.empty_like(batch)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def augment(batch, rng, pad=4, flip_prob=0.5):
    """Random crop (pad-``pad`` reflect) plus horizontal flip, drawn per sample."""
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise DataError(f"augment expects an image batch [n, C, H, W], got shape {batch.shape}")
    n = batch.shape[0]
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < flip_prob
    out = crop(batch, offsets, pad)
    out[flips] = hflip(out[flips])
    return out


# -- normalisation -----------------------------------------------------------------------

@dataclass
class NormalizationStats:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.var) <= 0):
            raise DataError("normalisation variance must be > 0 for every channel")


def _channel_axes(X):
    return (0, 2, 3) if X.ndim == 4 else (0,)


def compute_stats(train: Dataset) -> NormalizationStats:
    """Per-channel (or per-feature) mean and variance of the training split."""
    if train.split != "train":
        raise DataError("normalisation statistics must come from the training split")
    axes = _channel_axes(train.X)
    X = train.X.astype(np.float64)
    mean, var = X.mean(axis=axes), X.var(axis=axes)
    if np.any(var <= 0):
        bad = np.flatnonzero(var <= 0).tolist()
        raise DataError(f"zero variance in channel(s) {bad}")
    return NormalizationStats(mean, var)


def normalize(dataset: Dataset, stats: NormalizationStats) -> Dataset:
    """``x -> (x - mean) / sqrt(var)`` per channel."""
    shape = (1, -1, 1, 1) if dataset.X.ndim == 4 else (1, -1)
    mean = np.asarray(stats.mean).reshape(shape)
    std = np.sqrt(np.asarray(stats.var)).reshape(shape)
    X = ((dataset.X - mean) / std).astype(dataset.X.dtype)
    return Dataset(X, dataset.y, dataset.n_classes, dataset.split)
