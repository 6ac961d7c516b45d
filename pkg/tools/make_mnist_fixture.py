"""Build the small MNIST fixture under tests/data/mnist from mlxtend's bundled
5,000-image sample (pass the path of an mlxtend wheel or its mnist_5k.csv.gz).

    python tools/make_mnist_fixture.py mlxtend-0.24.0-py3-none-any.whl
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from qvae.data import MNIST_FILES, write_idx

N_TRAIN = 4000
OUT = Path(__file__).resolve().parents[1] / "tests" / "data" / "mnist"


def load_csv(src):
    if src.endswith(".whl"):
        blob = zipfile.ZipFile(src).read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        blob = Path(src).read_bytes()
    table = np.loadtxt(io.StringIO(gzip.decompress(blob).decode()), delimiter=",")
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def main(src):
    images, labels = load_csv(src)
    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]
    OUT.mkdir(parents=True, exist_ok=True)
    for split, sl in (("train", slice(0, N_TRAIN)), ("test", slice(N_TRAIN, None))):
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(OUT / f"{img_name}.gz", images[sl], "images")
        write_idx(OUT / f"{lbl_name}.gz", labels[sl], "labels")
    print(f"wrote {N_TRAIN} train / {len(labels) - N_TRAIN} test images to {OUT}")


if __name__ == "__main__":
    main(sys.argv[1])
