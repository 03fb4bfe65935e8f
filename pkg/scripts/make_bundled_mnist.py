"""Write the bundled 5000-image MNIST subset as gzipped IDX files.

The images come from the ``mnist_5k.csv.gz`` file shipped inside the mlxtend
wheel (500 training images per digit, 784 pixel columns followed by the label).

    pip download --no-deps -d /tmp/whl mlxtend
    python scripts/make_bundled_mnist.py /tmp/whl/mlxtend-*.whl
"""
import gzip
import io
import sys
import zipfile

import numpy as np

from tkfac.data import BUNDLED_DIR, write_idx


def main(wheel):
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",").astype(np.uint8)
    images = table[:, :-1].reshape(-1, 28, 28)
    labels = table[:, -1]
    BUNDLED_DIR.mkdir(parents=True, exist_ok=True)
    write_idx(BUNDLED_DIR / "train-images-idx3-ubyte.gz", images)
    write_idx(BUNDLED_DIR / "train-labels-idx1-ubyte.gz", labels)
    print(f"wrote {images.shape[0]} images to {BUNDLED_DIR}")


if __name__ == "__main__":
    main(sys.argv[1])
