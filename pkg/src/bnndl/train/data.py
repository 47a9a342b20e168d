"""Dataset ingestion, normalisation and seeded augmentation.

Supported on-disk formats:

* CIFAR-10 binary: records of 1 label byte followed by 3072 pixel bytes
  (R, G, B planes of 32x32, row-major). Files ``data_batch_1.bin`` ..
  ``data_batch_5.bin`` and ``test_batch.bin``.
* MNIST IDX: big-endian ``train-images-idx3-ubyte`` etc, optionally gzipped.
* SVHN: the same record layout as CIFAR-10 in ``train.bin`` / ``test.bin``,
  produced from the original ``.mat`` files by :func:`convert_svhn_mat`.

Images are normalised per channel with statistics of the training split and
then rounded onto a Q8 fixed-point grid clamped to [-4, 4). The float
training path and the fused inference engine see exactly the same values.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataError

FRAC_BITS = 8
Q_MIN, Q_MAX = -4 * (1 << FRAC_BITS), 4 * (1 << FRAC_BITS) - 1


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    classes: int = 10
    name: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        if n <= 0 or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.classes, self.name)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# -- CIFAR-style records -------------------------------------------------------


def read_cifar_records(path, channels: int = 3, size: int = 32, classes: int = 10) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    rec = 1 + channels * size * size
    if len(raw) == 0 or len(raw) % rec:
        whole = len(raw) // rec * rec
        raise DataError(f"{path}: truncated record at byte offset {whole} "
                        f"(file size {len(raw)} is not a multiple of {rec})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        raise DataError(f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * rec}")
    images = arr[:, 1:].reshape(-1, channels, size, size).copy()
    return Dataset(images, labels, classes, path.name)


def write_cifar_records(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    flat = images.reshape(len(images), -1)
    Path(path).write_bytes(np.concatenate([labels, flat], axis=1).tobytes())


def _concat(parts: list[Dataset], name: str) -> Dataset:
    return Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]),
                   parts[0].classes, name)


def ingest_cifar10(path) -> tuple[Dataset, Dataset]:
    """Load ``(train, test)`` from a directory of CIFAR-10 binary batches."""
    root = Path(path)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    train_files = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
    missing = [str(f) for f in train_files + [root / "test_batch.bin"] if not f.exists()]
    if missing:
        raise DataError(f"CIFAR-10 files missing: {', '.join(missing)}")
    train = _concat([read_cifar_records(f) for f in train_files], "cifar10-train")
    test = read_cifar_records(root / "test_batch.bin")
    test.name = "cifar10-test"
    return train, test


def ingest_svhn_mat_converted(path) -> tuple[Dataset, Dataset]:
    root = Path(path)
    for f in ("train.bin", "test.bin"):
        if not (root / f).exists():
            raise DataError(f"SVHN converted file missing: {root / f}")
    return read_cifar_records(root / "train.bin"), read_cifar_records(root / "test.bin")


def convert_svhn_mat(mat_path, out_path) -> int:
    """Convert an SVHN ``*_32x32.mat`` file into CIFAR-layout records.

    Needs scipy. SVHN encodes digit 0 as label 10; it is mapped back to 0.
    Returns the number of records written.
    """
    from scipy.io import loadmat

    mat = loadmat(mat_path)
    images = np.transpose(mat["X"], (3, 2, 0, 1))  # HWCN -> NCHW
    labels = mat["y"].ravel().astype(np.int64) % 10
    write_cifar_records(out_path, images, labels)
    return len(labels)


# -- MNIST IDX -----------------------------------------------------------------

_IDX_TYPES = {0x08: np.uint8}


def read_idx(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at byte offset {len(raw)}")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_TYPES:
        raise DataError(f"{path}: bad IDX magic 0x{raw[:4].hex()} at byte offset 0")
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise DataError(f"{path}: truncated header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    n = int(np.prod(dims))
    if len(raw) - hdr < n:
        raise DataError(f"{path}: truncated payload at byte offset {len(raw)} (expected {hdr + n})")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=hdr).reshape(dims).copy()


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def _find(root: Path, stem: str) -> Path:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (root / cand).exists():
            return root / cand
    raise DataError(f"MNIST file missing: {root / stem}")


def ingest_mnist(path) -> tuple[Dataset, Dataset]:
    root = Path(path)
    out = []
    for split in ("train", "t10k"):
        images = read_idx(_find(root, f"{split}-images-idx3-ubyte"))
        labels = read_idx(_find(root, f"{split}-labels-idx1-ubyte")).astype(np.int64)
        if images.ndim != 3 or len(images) != len(labels):
            raise DataError(f"MNIST {split}: image/label count mismatch ({images.shape}, {labels.shape})")
        if labels.max(initial=0) > 9:
            raise DataError(f"MNIST {split}: label out of range")
        out.append(Dataset(images[:, None], labels, 10, f"mnist-{split}"))
    return out[0], out[1]


# -- synthetic data -----------------------------------------------------------------


def make_synthetic(n: int, classes: int = 10, channels: int = 3, size: int = 32,
                   seed: int = 0, noise: float = 40.0, template_seed: int = 1234) -> Dataset:
    """Class-template images plus pixel noise, stored as uint8.

    Templates depend only on ``template_seed`` so train and test splits
    drawn with different ``seed`` share the same classes.
    """
    trng = np.random.default_rng(template_seed)
    coarse = trng.uniform(0, 255, (classes, channels, 4, 4))
    templates = np.kron(coarse, np.ones((1, 1, size // 4 + 1, size // 4 + 1)))[:, :, :size, :size]
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n)
    images = templates[labels] + rng.normal(0, noise, (n, channels, size, size))
    return Dataset(np.clip(np.rint(images), 0, 255).astype(np.uint8), labels.astype(np.int64),
                   classes, "synthetic")


def write_synthetic_cifar(root, n_train: int = 500, n_test: int = 200, seed: int = 0) -> Path:
    """Write a small synthetic dataset in the CIFAR-10 directory layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    train = make_synthetic(n_train, seed=seed)
    test = make_synthetic(n_test, seed=seed + 1)
    chunks = np.array_split(np.arange(n_train), 5)
    for i, idx in enumerate(chunks, 1):
        write_cifar_records(root / f"data_batch_{i}.bin", train.images[idx], train.labels[idx])
    write_cifar_records(root / "test_batch.bin", test.images, test.labels)
    return root


def load_dataset(kind: str, path: str | os.PathLike | None = None, **kwargs) -> tuple[Dataset, Dataset]:
    if kind == "cifar10":
        return ingest_cifar10(path)
    if kind == "mnist":
        return ingest_mnist(path)
    if kind == "svhn":
        return ingest_svhn_mat_converted(path)
    if kind == "synthetic":
        n_train = int(kwargs.get("n_train", 1000))
        n_test = int(kwargs.get("n_test", 500))
        size = int(kwargs.get("size", 32))
        channels = int(kwargs.get("channels", 3))
        return (make_synthetic(n_train, channels=channels, size=size, seed=0),
                make_synthetic(n_test, channels=channels, size=size, seed=1))
    raise DataError(f"unknown dataset {kind!r}")


# -- normalisation ----------------------------------------------------------------


@dataclass
class Normalizer:
    """Per-channel standardisation onto a clamped Q8 grid."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, images: np.ndarray) -> "Normalizer":
        x = images.astype(np.float64)
        axes = (0, 2, 3)
        std = x.std(axis=axes)
        return cls(x.mean(axis=axes), np.where(std > 0, std, 1.0))

    def lut(self) -> np.ndarray:
        """int16 table [C, 256] mapping a raw pixel to its Q8 code."""
        p = np.arange(256, dtype=np.float64)
        q = np.rint((p[None, :] - self.mean[:, None]) / self.std[:, None] * (1 << FRAC_BITS))
        return np.clip(q, Q_MIN, Q_MAX).astype(np.int16)

    def quantize(self, images: np.ndarray) -> np.ndarray:
        """Raw uint8 [N,C,H,W] to int16 Q8 codes."""
        lut = self.lut()
        return np.stack([lut[c][images[:, c]] for c in range(images.shape[1])], axis=1)

    def __call__(self, images: np.ndarray, dtype=np.float32) -> np.ndarray:
        dtype = np.dtype(dtype)
        return self.quantize(images).astype(dtype) * dtype.type(1.0 / (1 << FRAC_BITS))


# -- batching and augmentation ----------------------------------------------------


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, take a random crop of the original size, random h-flip."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        crop = xp[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def iterate_batches(x: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator | None = None,
                    do_augment: bool = False):
    """Yield ``(xb, yb)``; shuffles and augments when an rng is supplied."""
    n = len(y)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        xb = x[idx]
        if do_augment and rng is not None:
            xb = augment(xb, rng)
        yield xb, y[idx]
