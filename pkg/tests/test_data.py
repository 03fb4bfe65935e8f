import gzip
import struct

import numpy as np
import pytest

from tkfac import data as D


def write_header_only(path, magic, dims):
    """An IDX file with a full header and zeroed payload."""
    with gzip.open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims))
        fh.write(bytes(int(np.prod(dims))))


def test_standard_train_file_header(tmp_path):
    p = tmp_path / "train-images-idx3-ubyte.gz"
    write_header_only(p, D.IMAGES_MAGIC, (60000, 28, 28))
    images, _ = D.load_mnist_idx(p)
    assert images.shape == (60000, 28, 28)


def test_roundtrip_and_scaling(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = np.array([3, 1, 4, 1, 5], dtype=np.uint8)
    D.write_idx(tmp_path / "train-images-idx3-ubyte", imgs)
    D.write_idx(tmp_path / "train-labels-idx1-ubyte.gz", labels)
    x, y = D.load_mnist(tmp_path)
    np.testing.assert_allclose(x, imgs.reshape(5, -1) / 255.0)
    np.testing.assert_array_equal(y, labels)
    assert x.min() >= 0 and x.max() <= 1


def test_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad"
    D.write_idx(p, np.zeros((2, 3), np.uint8))
    with pytest.raises(D.IdxFormatError):
        D.read_idx(p, D.IMAGES_MAGIC)
    q = tmp_path / "short"
    q.write_bytes(struct.pack(">I", D.IMAGES_MAGIC) + struct.pack(">3I", 10, 28, 28) + b"\0" * 5)
    with pytest.raises(D.IdxFormatError):
        D.read_idx(q)
    (tmp_path / "tiny").write_bytes(b"\0\0")
    with pytest.raises(D.IdxFormatError):
        D.read_idx(tmp_path / "tiny")


def test_downsample_is_mean_pool():
    img = np.arange(16.0).reshape(1, 4, 4)
    np.testing.assert_array_equal(D.downsample_2x2(img), [[2.5, 4.5, 10.5, 12.5]])
    assert D.downsample_2x2(np.zeros((3, 28, 28))).shape == (3, 196)


def test_bundled_subset():
    x, y = D.load_mnist(downsample=True, subset=300, seed=2)
    assert x.shape == (300, 196)
    x2, y2 = D.load_mnist(downsample=True, subset=300, seed=2)
    np.testing.assert_array_equal(x, x2)
    np.testing.assert_array_equal(y, y2)
    full, labels = D.load_mnist()
    assert full.shape == (5000, 784)
    np.testing.assert_array_equal(np.bincount(labels), [500] * 10)


def test_data_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv(D.DATA_ENV, str(tmp_path))
    assert D.data_dir() == tmp_path
    with pytest.raises(FileNotFoundError):
        D.load_mnist()


def test_synthetic_dataset():
    a = D.synthetic_dataset(1000, 196, classes=10, seed=4)
    b = D.synthetic_dataset(1000, 196, classes=10, seed=4)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert a[0].shape == (1000, 196)
    freq = np.bincount(a[1], minlength=10) / 1000
    np.testing.assert_allclose(freq, 0.1, atol=0.05)
    x, y = D.synthetic_dataset(20, 16, seed=0, teacher=8, image_shape=(1, 4, 4))
    assert x.shape == (20, 1, 4, 4) and y.max() < 10
