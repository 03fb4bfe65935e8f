"""Datasets: MNIST IDX files and deterministic synthetic data."""
import gzip
import os
from pathlib import Path
import struct

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_ENV = "TKFAC_DATA_DIR"
BUNDLED_DIR = Path(__file__).parent / "_data" / "mnist5k"

_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


class IdxFormatError(ValueError):
    pass


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expect_magic=None):
    """Read an IDX file (optionally gzipped) into a numpy array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if expect_magic is not None and magic != expect_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF not in _DTYPES:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_DTYPES[(magic >> 8) & 0xFF])
    count = int(np.prod(dims))
    if len(raw) - header < count * dtype.itemsize:
        raise IdxFormatError(f"{path}: truncated data ({len(raw) - header} bytes for {dims})")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as an IDX file (gzipped if the name ends in ``.gz``)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", (0x08 << 8) | array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def downsample_2x2(images):
    """2x2 mean pooling of ``(N, 28, 28)`` images to ``(N, 196)`` vectors."""
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    if h % 2 or w % 2:
        raise ValueError(f"image size {(h, w)} is not even")
    return images.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4)).reshape(n, -1)


def data_dir():
    return Path(os.environ.get(DATA_ENV) or BUNDLED_DIR)


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        p = Path(directory) / name
        if p.exists():
            return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist_idx(images_path, labels_path=None):
    """Load MNIST IDX images scaled to [0, 1] (shape ``(N, 28, 28)``) and labels."""
    images = read_idx(images_path, IMAGES_MAGIC).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path, LABELS_MAGIC).astype(np.intp)
        if labels.shape[0] != images.shape[0]:
            raise IdxFormatError("image and label counts differ")
    return images, labels


def load_mnist(directory=None, split="train", downsample=False, subset=None, seed=0):
    """Load MNIST from ``directory`` (default ``$TKFAC_DATA_DIR`` or the bundled 5000-image subset).

    ``subset`` keeps a seed-determined random selection of that many images.
    With ``downsample`` the images become 196-dim vectors, otherwise 784-dim.
    """
    directory = data_dir() if directory is None else Path(directory)
    prefix = "train" if split == "train" else "t10k"
    images, labels = load_mnist_idx(_find(directory, f"{prefix}-images-idx3-ubyte"),
                                    _find(directory, f"{prefix}-labels-idx1-ubyte"))
    if subset is not None and subset < images.shape[0]:
        idx = np.sort(np.random.default_rng(seed).choice(images.shape[0], subset, replace=False))
        images, labels = images[idx], labels[idx]
    x = downsample_2x2(images) if downsample else images.reshape(images.shape[0], -1)
    return x, labels


def synthetic_dataset(n, dim, classes=10, seed=0, teacher=None, image_shape=None):
    """Gaussian inputs with labels from a random teacher network or uniform random classes.

    ``teacher`` is ``None`` (uniform labels) or a hidden width for a random
    one-hidden-layer ReLU teacher.  ``image_shape`` reshapes inputs to
    ``(n, C, H, W)``.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    if teacher is None:
        y = rng.integers(0, classes, size=n)
    else:
        w1 = rng.standard_normal((teacher, dim)) / np.sqrt(dim)
        w2 = rng.standard_normal((classes, teacher)) / np.sqrt(teacher)
        y = np.argmax(np.maximum(x @ w1.T, 0) @ w2.T, axis=1)
    if image_shape is not None:
        x = x.reshape((n,) + tuple(image_shape))
    return x, y.astype(np.intp)
