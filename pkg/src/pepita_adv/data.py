"""MNIST-family IDX files and CIFAR binary batches, plus seeded splits.

Loaders work from local files only; ``scripts/fetch_data.sh`` documents where
the official files come from. Pixels are scaled by 1/255 and nothing else,
so the attack pixel box is always [0, 1].
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import DTYPE, make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_PIXELS = 3072

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

# Uncompressed official files.
MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}

CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = ["test_batch.bin"]
CIFAR100_TRAIN = ["train.bin"]
CIFAR100_TEST = ["test.bin"]

DEFAULT_VAL_SIZE = {"mnist": 10000, "fmnist": 10000, "cifar10": 5000, "cifar100": 5000}


class ParseError(ValueError):
    """A dataset file does not match its binary format."""


@dataclass
class RawData:
    train_images: np.ndarray  # uint8, (n, ...)
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    n_classes: int
    name: str = "raw"


@dataclass
class Dataset:
    """Split, flattened and normalized data; samples are rows."""

    name: str
    x_train: np.ndarray
    labels_train: np.ndarray
    x_val: np.ndarray
    labels_val: np.ndarray
    x_test: np.ndarray
    labels_test: np.ndarray
    n_classes: int
    train_idx: np.ndarray = field(default=None)
    val_idx: np.ndarray = field(default=None)
    adv_val_size: int | None = None
    pixel_min: float = 0.0
    pixel_max: float = 1.0

    def __post_init__(self):
        self.y_train = one_hot(self.labels_train, self.n_classes)

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]

    @property
    def x_val_adv(self) -> np.ndarray:
        return self.x_val[: self.adv_val_size]

    @property
    def labels_val_adv(self) -> np.ndarray:
        return self.labels_val[: self.adv_val_size]


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=DTYPE)
    out[np.arange(labels.size), labels] = 1.0
    return out


def _read(path: str | Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


# -- IDX ---------------------------------------------------------------------


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Parse a big-endian IDX buffer of unsigned bytes."""
    if len(raw) < 8:
        raise ParseError("IDX header truncated at offset 0")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise ParseError(f"bad IDX magic 0x{magic:08x} at offset 0 (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"IDX dimensions truncated at offset {len(raw)}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise ParseError(f"IDX data truncated at offset {len(raw)} (need {header + count} bytes)")
    if len(raw) > header + count:
        raise ParseError(f"unexpected trailing bytes at offset {header + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims).copy()


def encode_idx(arr: np.ndarray) -> bytes:
    """Inverse of :func:`parse_idx` for uint8 arrays (1-D labels or 3-D images)."""
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def write_idx(path: str | Path, arr: np.ndarray) -> Path:
    path = Path(path)
    raw = encode_idx(arr)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(raw)
    else:
        path.write_bytes(raw)
    return path


def load_idx(images_path: str | Path, labels_path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    images = parse_idx(_read(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name}[.gz] not found in {data_dir}")


def load_mnist(data_dir: str | Path, name: str = "mnist") -> RawData:
    """MNIST or Fashion-MNIST (same file names and format)."""
    data_dir = Path(data_dir)
    tr = load_idx(*(_find(data_dir, f) for f in MNIST_FILES["train"]))
    te = load_idx(*(_find(data_dir, f) for f in MNIST_FILES["test"]))
    return RawData(tr[0], tr[1], te[0], te[1], 10, name)


def verify_mnist(data_dir: str | Path) -> dict[str, bool]:
    data_dir = Path(data_dir)
    out = {}
    for fname, digest in MNIST_SHA256.items():
        path = data_dir / fname
        out[fname] = path.exists() and hashlib.sha256(path.read_bytes()).hexdigest() == digest
    return out


# -- CIFAR -------------------------------------------------------------------


def parse_cifar(raw: bytes, variant: str = "c10") -> tuple[np.ndarray, np.ndarray]:
    """Records of 1 (C10) or 2 (C100: coarse, fine) label bytes + 3072 pixels.

    Pixels stay channel-major in file order; C100 returns the fine label.
    """
    n_label = {"c10": 1, "c100": 2}[variant]
    rec = n_label + CIFAR_PIXELS
    if len(raw) % rec:
        n_full = len(raw) // rec
        raise ParseError(f"CIFAR record truncated at offset {n_full * rec}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    return arr[:, n_label:].copy(), arr[:, n_label - 1].copy()


def encode_cifar(images: np.ndarray, labels: np.ndarray, variant: str = "c10", coarse=None) -> bytes:
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), CIFAR_PIXELS)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if variant == "c100":
        coarse = np.zeros(len(images), dtype=np.uint8) if coarse is None else np.asarray(coarse, dtype=np.uint8)
        cols.insert(0, coarse[:, None])
    return np.concatenate(cols + [images], axis=1).tobytes()


def load_cifar(data_dir: str | Path, variant: str = "c10") -> RawData:
    data_dir = Path(data_dir)
    train_files, test_files, n_classes = (
        (CIFAR10_TRAIN, CIFAR10_TEST, 10) if variant == "c10" else (CIFAR100_TRAIN, CIFAR100_TEST, 100)
    )

    def load(files):
        parts = [parse_cifar(_find(data_dir, f).read_bytes(), variant) for f in files]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    tr_x, tr_y = load(train_files)
    te_x, te_y = load(test_files)
    if tr_y.max(initial=0) >= n_classes or te_y.max(initial=0) >= n_classes:
        raise ParseError("label out of range")
    return RawData(tr_x, tr_y, te_x, te_y, n_classes, "cifar10" if variant == "c10" else "cifar100")


def load_raw(name: str, data_dir: str | Path) -> RawData:
    if name in ("mnist", "fmnist"):
        return load_mnist(data_dir, name)
    if name == "cifar10":
        return load_cifar(data_dir, "c10")
    if name == "cifar100":
        return load_cifar(data_dir, "c100")
    raise ValueError(f"unknown dataset {name!r}")


# -- splits ------------------------------------------------------------------


def prepare(
    raw: RawData,
    seed: int = 0,
    val_fraction: float | None = None,
    val_size: int | None = None,
    subset: int | None = None,
    adv_val_size: int | None = None,
) -> Dataset:
    """Normalize to [0, 1], flatten and carve a validation split from train.

    ``subset`` keeps the first N remaining training samples after the seeded
    shuffle. The test split is always the official one.
    """
    n = raw.train_images.shape[0]
    if val_size is None:
        if val_fraction is None:
            val_size = DEFAULT_VAL_SIZE.get(raw.name, n // 6)
        else:
            if not 0 < val_fraction < 0.5:
                raise ValueError("val_fraction must be in (0, 0.5)")
            val_size = int(round(n * val_fraction))
    if not 0 < val_size < n:
        raise ValueError("validation split must be non-empty and leave training data")
    perm = make_rng(seed, "split").permutation(n)
    val_idx = perm[:val_size]
    train_idx = perm[val_size:]
    if subset is not None:
        train_idx = train_idx[:subset]

    def flat(images):
        return images.reshape(images.shape[0], -1).astype(DTYPE) / 255.0

    return Dataset(
        name=raw.name,
        x_train=flat(raw.train_images[train_idx]),
        labels_train=raw.train_labels[train_idx].astype(np.int64),
        x_val=flat(raw.train_images[val_idx]),
        labels_val=raw.train_labels[val_idx].astype(np.int64),
        x_test=flat(raw.test_images),
        labels_test=raw.test_labels.astype(np.int64),
        n_classes=raw.n_classes,
        train_idx=train_idx,
        val_idx=val_idx,
        adv_val_size=adv_val_size,
    )
