"""Datasets: IDX (MNIST) files, seeded Gaussian blobs and normalization.

Images are channels-last. A :class:`Dataset` carries a split tag per
sample and a normalization record that later lands in report metadata.
"""
from __future__ import annotations

import gzip
import logging
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "Dataset",
    "IdxFormatError",
    "NormalizationError",
    "parse_idx",
    "load_idx",
    "write_idx",
    "load_mnist",
    "synth_gaussian_blobs",
    "normalize",
    "MNIST_FILES",
    "write_mnist_subset",
]

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_MAX_ELEMENTS = 1 << 31

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """Malformed IDX bytes; the message names the byte offset."""


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Samples with per-sample split tags ("train", "validation", "test")."""

    images: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    n_classes: int
    normalization: dict | None = None
    value_range: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels) or len(self.labels) != len(self.splits):
            raise ValueError(
                f"{len(self.images)} images, {len(self.labels)} labels, {len(self.splits)} split tags")
        labels = np.asarray(self.labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        for name, dtype in (("images", np.float64), ("labels", np.int64), ("splits", None)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.labels)

    def split(self, tag: str) -> "Dataset":
        m = self.splits == tag
        return Dataset(self.images[m].copy(), self.labels[m].copy(), self.splits[m].copy(),
                       self.n_classes, self.normalization, self.value_range, dict(self.meta))

    @property
    def train(self) -> "Dataset":
        return self.split("train")

    @property
    def validation(self) -> "Dataset":
        return self.split("validation")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])


# --- IDX ----------------------------------------------------------------------------


def parse_idx(buf: bytes, scale: bool = True) -> np.ndarray:
    """Decode an IDX byte string (unsigned-byte images or labels only).

    Images come back as float64 divided by 255 when ``scale`` is set;
    labels always come back as raw int64.
    """
    if len(buf) < 4:
        raise IdxFormatError(f"truncated header: need 4 magic bytes at offset 0, file has {len(buf)}")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise IdxFormatError(
            f"unsupported IDX type code 0x{magic:08x} at offset 0 "
            f"(expected 0x{IDX_IMAGES:08x} images or 0x{IDX_LABELS:08x} labels)")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"truncated header: dimension sizes end at offset {header}, file has {len(buf)} bytes")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = 1
    for k, d in enumerate(dims):
        count *= d
        if count > _MAX_ELEMENTS:
            raise IdxFormatError(f"dimension overflow at offset {4 + 4 * k}: {dims} exceeds {_MAX_ELEMENTS} elements")
    have = len(buf) - header
    if have < count:
        raise IdxFormatError(f"truncated payload at offset {len(buf)}: expected {count} bytes after offset {header}, got {have}")
    if have > count:
        raise IdxFormatError(f"length mismatch at offset {header + count}: {have - count} trailing bytes")
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if magic == IDX_LABELS:
        return data.astype(np.int64)
    return data / 255.0 if scale else data.astype(np.int64)


def _read_bytes(path: str | os.PathLike) -> bytes:
    path = Path(path)
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def load_idx(path: str | os.PathLike, scale: bool = True) -> np.ndarray:
    """Read an IDX file (optionally gzipped; ``name.gz`` is tried when ``name`` is absent)."""
    try:
        return parse_idx(_read_bytes(path), scale=scale)
    except IdxFormatError as exc:
        raise IdxFormatError(f"{path}: {exc}") from None


def write_idx(path: str | os.PathLike, data: np.ndarray) -> None:
    """Write a 3-D image or 1-D label array of integers in [0, 255]."""
    arr = np.asarray(data)
    if arr.ndim not in (1, 3):
        raise ValueError(f"IDX writer supports 1-D labels or 3-D images, got {arr.ndim}-D")
    if arr.size and (not np.array_equal(arr, np.round(arr)) or arr.min() < 0 or arr.max() > 255):
        raise ValueError("IDX unsigned-byte payload needs integers in [0, 255]")
    magic = IDX_LABELS if arr.ndim == 1 else IDX_IMAGES
    payload = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.astype(np.uint8).tobytes()
    Path(path).write_bytes(payload)


def load_mnist(directory: str | os.PathLike, n_train: int = 10000, n_validation: int = 1000,
               scheme: str = "unit-range", strict: bool = True) -> Dataset:
    """MNIST from a directory of IDX files.

    The training split is the first ``n_train`` rows of the training file,
    the validation split the first ``n_validation`` rows of the t10k file.
    Pixels are read as raw bytes and then normalized with ``scheme``.
    Asking for more rows than a file holds is an error unless ``strict`` is
    off, in which case the split is shortened with a warning.
    """
    d = Path(directory)
    parts = []
    for tag, key, n in (("train", "train", n_train), ("validation", "test", n_validation)):
        img_name, lab_name = MNIST_FILES[key]
        images = load_idx(d / img_name, scale=False)
        labels = load_idx(d / lab_name)
        if len(images) != len(labels):
            raise IdxFormatError(f"{d / img_name}: {len(images)} images but {len(labels)} labels")
        if n > len(images) and not strict:
            logger.warning("%s holds %d rows; using all of them for %s instead of %d", img_name, len(images), tag, n)
            n = len(images)
        if n > len(images):
            raise ValueError(f"requested {n} {tag} samples, {img_name} holds {len(images)}")
        parts.append((images[:n], labels[:n], np.full(n, tag)))
    images = np.concatenate([p[0] for p in parts]).astype(np.float64)[..., None]
    ds = Dataset(images, np.concatenate([p[1] for p in parts]), np.concatenate([p[2] for p in parts]),
                 n_classes=10, value_range=(0.0, 255.0), meta={"source": "mnist", "directory": str(d)})
    return normalize(ds, scheme)


# --- synthetic ------------------------------------------------------------------------


def _centers(n_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if n_classes <= dim:
        return np.eye(dim)[:n_classes]
    if n_classes == dim + 1:
        return np.vstack([np.eye(dim), -np.ones(dim) / np.sqrt(dim)])
    warnings.warn(f"{n_classes} classes do not fit orthonormally in {dim} dimensions; "
                  "using random unit centers", RuntimeWarning, stacklevel=3)
    logger.warning("blobs: random unit centers for %d classes in %d dimensions", n_classes, dim)
    c = rng.standard_normal((n_classes, dim))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def synth_gaussian_blobs(n_classes: int, n_per_class: int, dim: int, separation: float, seed: int = 0,
                         validation_fraction: float = 0.2) -> Dataset:
    """Unit-variance Gaussian classes centered at ``separation * u_k``, shuffled and split."""
    if n_classes < 2 or dim < 2:
        raise ValueError("blobs need n_classes >= 2 and dim >= 2")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    centers = separation * _centers(n_classes, dim, rng)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    X = centers[labels] + rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    X, labels = X[order], labels[order]
    n_val = int(round(validation_fraction * len(labels)))
    splits = np.array(["train"] * (len(labels) - n_val) + ["validation"] * n_val)
    return Dataset(X, labels, splits, n_classes, normalization={"scheme": "none"},
                   meta={"source": "blobs", "separation": float(separation), "seed": int(seed)})


# --- normalization ----------------------------------------------------------------------


def normalize(ds: Dataset, scheme: str) -> Dataset:
    """Apply ``unit-range`` (declared value range, else data range, mapped to [0,1]) or ``none``."""
    if scheme not in ("unit-range", "none"):
        raise NormalizationError(f"unknown normalization scheme {scheme!r}")
    if ds.normalization is not None:
        raise NormalizationError(f"dataset already normalized with {ds.normalization['scheme']!r}")
    if scheme == "none":
        return Dataset(ds.images, ds.labels, ds.splits, ds.n_classes, {"scheme": "none"}, ds.value_range, ds.meta)
    lo, hi = ds.value_range if ds.value_range else (float(ds.images.min()), float(ds.images.max()))
    if not hi > lo:
        raise NormalizationError(f"cannot rescale constant range [{lo}, {hi}]")
    images = (ds.images - lo) / (hi - lo)
    record = {"scheme": "unit-range", "source_range": [lo, hi]}
    return Dataset(images, ds.labels, ds.splits, ds.n_classes, record, (0.0, 1.0), ds.meta)


def write_mnist_subset(directory: str | os.PathLike, n_validation: int = 1000, seed: int = 0) -> Path:
    """Write the 5000-image MNIST sample bundled with mlxtend as IDX files.

    The sample is sorted by label, so it is shuffled with ``seed`` first;
    the last ``n_validation`` images become the t10k files.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    order = np.random.default_rng(seed).permutation(len(y))
    X = X[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cut = len(y) - n_validation
    for key, sl in (("train", slice(0, cut)), ("test", slice(cut, None))):
        img_name, lab_name = MNIST_FILES[key]
        write_idx(d / img_name, X[sl])
        write_idx(d / lab_name, y[sl])
    return d
