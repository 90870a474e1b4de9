"""Dataset ingestion: CIFAR-10 binary batches, MNIST IDX files, synthetic Gaussians.

All inputs are stored as float32 pixels in ``[0, 1]`` with shape
``(N, C, H, W)``. Normalization statistics are computed on the training split
and are applied inside the models, never to the stored arrays.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.special import ndtr

CIFAR_RECORD = 3073
CIFAR_RECORDS_PER_FILE = 10_000
MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801


class DatasetError(ValueError):
    """Malformed dataset file or invalid dataset parameters."""


@dataclass(frozen=True)
class Dataset:
    name: str
    x: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    mean: tuple[float, ...]
    std: tuple[float, ...]
    num_classes: int
    info: dict = field(default_factory=dict, compare=False)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])

    @property
    def split_sizes(self) -> dict[str, int]:
        return {"train": len(self.train_idx), "val": len(self.val_idx), "test": len(self.test_idx)}

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]
        return self.x[idx], self.y[idx]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return normalize(x, self.mean, self.std)

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return denormalize(z, self.mean, self.std)

    def eval_set(self, size: int | None = None, seed: int = 0, split: str = "test") -> tuple[np.ndarray, np.ndarray]:
        """A seeded subset of a split (the whole split when ``size`` is None)."""
        x, y = self.split(split)
        if size is None or size >= len(x):
            return x, y
        pick = np.sort(np.random.default_rng(seed).permutation(len(x))[:size])
        return x[pick], y[pick]


def normalize(x: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return (np.asarray(x, dtype=np.float64) - m) / s


def denormalize(z: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return np.asarray(z, dtype=np.float64) * s + m


def split_indices(n: int, seed: int, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle of ``range(n)``; the last ``val_fraction`` becomes validation."""
    if not 0 <= val_fraction < 1:
        raise DatasetError(f"val_fraction must be in [0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    cut = n - n_val
    return np.sort(order[:cut]), np.sort(order[cut:])


def channel_stats(x: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    if len(x) == 0:
        raise DatasetError("cannot compute statistics of an empty split")
    xd = np.asarray(x, dtype=np.float64)
    mean = xd.mean(axis=(0, 2, 3))
    std = xd.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return tuple(float(m) for m in mean), tuple(float(s) for s in std)


def assemble(name: str, x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray | None,
             y_test: np.ndarray | None, num_classes: int, seed: int = 0, val_fraction: float = 0.1,
             info: dict | None = None) -> Dataset:
    """Concatenate train and test arrays and derive the fixed splits."""
    if x_test is None:
        x_test = np.zeros((0,) + x_train.shape[1:], dtype=np.float32)
        y_test = np.zeros(0, dtype=np.int64)
    n_train = len(x_train)
    tr, va = split_indices(n_train, seed, val_fraction)
    x = np.concatenate([x_train, x_test]).astype(np.float32, copy=False)
    y = np.concatenate([y_train, y_test]).astype(np.int64, copy=False)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise DatasetError(f"{name}: pixel values must lie in [0, 1]")
    mean, std = channel_stats(x[tr])
    test = np.arange(n_train, len(x))
    return Dataset(name, x, y, tr, va, test, mean, std, num_classes, dict(info or {}))


def subset(ds: Dataset, n_train: int, seed: int = 0, val_fraction: float = 0.1) -> Dataset:
    """Keep a seeded subset of ``n_train`` training-pool examples (train + val) and the full test split."""
    pool = np.concatenate([ds.train_idx, ds.val_idx])
    pool.sort()
    if n_train > len(pool):
        raise DatasetError(f"requested {n_train} examples from a pool of {len(pool)}")
    pick = np.sort(np.random.default_rng(seed).permutation(len(pool))[:n_train])
    chosen = pool[pick]
    info = dict(ds.info, subset=n_train)
    return assemble(f"{ds.name}[{n_train}]", ds.x[chosen], ds.y[chosen], ds.x[ds.test_idx], ds.y[ds.test_idx],
                    ds.num_classes, seed=seed, val_fraction=val_fraction, info=info)


# -- CIFAR-10 --------------------------------------------------------------------------

def read_cifar10_file(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """One binary batch: records of 1 label byte + 3072 channel-major pixel bytes."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
        raise DatasetError(f"{path}: corrupt CIFAR-10 file, {len(raw) - whole} trailing bytes "
                           f"starting at byte offset {whole}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"{path}: label byte {int(labels[i])} > 9 in record {i} (byte offset {i * CIFAR_RECORD})")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels.astype(np.int64)


def load_cifar10_binary(train_paths: Sequence[str | os.PathLike], test_paths: Sequence[str | os.PathLike] = (),
                        seed: int = 0, val_fraction: float = 0.1) -> Dataset:
    """CIFAR-10 from the binary distribution (``data_batch_*.bin``, ``test_batch.bin``)."""
    if not train_paths:
        raise DatasetError("load_cifar10_binary needs at least one training batch file")
    for p in list(train_paths) + list(test_paths):
        if not Path(p).is_file():
            raise DatasetError(f"missing CIFAR-10 file {p}")
    tr = [read_cifar10_file(p) for p in train_paths]
    te = [read_cifar10_file(p) for p in test_paths]
    x_tr = np.concatenate([a for a, _ in tr])
    y_tr = np.concatenate([b for _, b in tr])
    x_te = np.concatenate([a for a, _ in te]) if te else None
    y_te = np.concatenate([b for _, b in te]) if te else None
    return assemble("cifar10", x_tr, y_tr, x_te, y_te, 10, seed=seed, val_fraction=val_fraction,
                    info={"train_files": [str(p) for p in train_paths]})


# -- MNIST -------------------------------------------------------------------------------

def _read_idx(path: str | os.PathLike, magic: int, kind: str) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DatasetError(f"{path}: too short for an IDX header")
    found, = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DatasetError(f"{path}: magic mismatch in {kind} file: expected 0x{magic:08x}, found 0x{found:08x}")
    ndim = 3 if kind == "image" else 1
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated {kind} header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    body = raw[header:]
    expected = int(np.prod(dims))
    if len(body) != expected:
        raise DatasetError(f"{path}: {kind} payload has {len(body)} bytes, dimension fields imply {expected}")
    return dims, body


def read_mnist_pair(image_path, label_path) -> tuple[np.ndarray, np.ndarray]:
    (n, rows, cols), body = _read_idx(image_path, MNIST_IMAGE_MAGIC, "image")
    (m,), lbody = _read_idx(label_path, MNIST_LABEL_MAGIC, "label")
    if n != m:
        raise DatasetError(f"count mismatch: image count field {n} vs label count field {m}")
    images = np.frombuffer(body, dtype=np.uint8).reshape(n, 1, rows, cols).astype(np.float32) / np.float32(255.0)
    labels = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    return images, labels


def load_mnist_idx(image_path, label_path, test_image_path=None, test_label_path=None,
                   seed: int = 0, val_fraction: float = 0.1) -> Dataset:
    """MNIST (or any IDX image/label pair); the optional second pair becomes the test split."""
    x_tr, y_tr = read_mnist_pair(image_path, label_path)
    x_te = y_te = None
    if test_image_path is not None:
        x_te, y_te = read_mnist_pair(test_image_path, test_label_path)
    k = int(max(y_tr.max(initial=0), y_te.max(initial=0) if y_te is not None else 0)) + 1
    return assemble("mnist", x_tr, y_tr, x_te, y_te, max(k, 10), seed=seed, val_fraction=val_fraction,
                    info={"image_path": str(image_path)})


MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def find_mnist_dir(directory: str | os.PathLike) -> dict[str, Path]:
    """Locate the four standard MNIST files in ``directory`` (either naming convention)."""
    d = Path(directory)
    found = {}
    for key, names in MNIST_FILES.items():
        for n in names:
            if (d / n).is_file():
                found[key] = d / n
                break
        else:
            raise DatasetError(f"{d}: no {key} file (looked for {', '.join(names)})")
    return found


def load_mnist_dir(directory, seed: int = 0, val_fraction: float = 0.1) -> Dataset:
    f = find_mnist_dir(directory)
    return load_mnist_idx(f["train_images"], f["train_labels"], f["test_images"], f["test_labels"],
                          seed=seed, val_fraction=val_fraction)


# -- synthetic ----------------------------------------------------------------------------

def synth_gaussians(classes: int, dims: int, per_class: int, seed: int, sigma: float = 1.0,
                    mean_distance: float = 2.0, test_per_class: int = 0, val_fraction: float = 0.1,
                    shape: tuple[int, int, int] | None = None) -> Dataset:
    """Isotropic Gaussian classes around seeded random means.

    Means are random points rescaled so the closest pair sits ``mean_distance``
    apart. Samples are then mapped into ``[0, 1]`` by one affine map shared by
    all coordinates (so class geometry is preserved up to scale); the map and
    the transformed means are kept in ``info``.
    """
    if classes < 2:
        raise DatasetError(f"need at least 2 classes, got {classes}")
    if dims < 1 or per_class < 1 or not sigma > 0 or not mean_distance > 0:
        raise DatasetError("dims, per_class, sigma and mean_distance must be positive")
    shape = tuple(shape) if shape is not None else (1, 1, dims)
    if int(np.prod(shape)) != dims:
        raise DatasetError(f"shape {shape} does not hold {dims} features")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(classes, dims))
    diffs = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diffs ** 2).sum(-1))
    closest = dist[~np.eye(classes, dtype=bool)].min()
    means *= mean_distance / closest
    total = per_class + test_per_class
    y = np.repeat(np.arange(classes), total)
    raw = means[y] + sigma * rng.normal(size=(classes * total, dims))
    lo, hi = raw.min(), raw.max()
    span = hi - lo
    x = (raw - lo) / span
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    is_test = np.tile(np.arange(total) >= per_class, classes)
    x = x.reshape((-1,) + shape)
    info = {"means": (means - lo) / span, "sigma": sigma / span, "offset": lo, "span": span}
    return assemble(f"gaussians{classes}x{dims}", x[~is_test], y[~is_test],
                    x[is_test] if test_per_class else None, y[is_test] if test_per_class else None,
                    classes, seed=seed, val_fraction=val_fraction, info=info)


def bayes_accuracy_two_gaussians(mean_distance: float, sigma: float) -> float:
    """Accuracy of the optimal rule between two equal-prior isotropic Gaussians."""
    return float(ndtr(mean_distance / (2 * sigma)))


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    """Index batches over ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
