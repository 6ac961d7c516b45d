"""MNIST/USPS readers and the preprocessing that brings both to 32x32 in [0, 1]."""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
USPS_FILES = {"train": "zip.train", "test": "zip.test"}
USPS_RANGE_TOL = 1e-6
MNIST_CROP = 20


class DataFormatError(ValueError):
    """Malformed dataset file."""


@dataclass
class RawDataset:
    images: np.ndarray
    labels: np.ndarray
    source: str
    split: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        return RawDataset(self.images[:n], self.labels[:n], self.source, self.split)


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, kind="images"):
    """Parse an IDX images (magic 2051) or labels (magic 2049) file.

    Gzip compression is detected from the first two bytes.  Images come back
    as float32 in [0, 1], labels as int64.
    """
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if kind == "images":
        if magic != IMAGES_MAGIC:
            raise DataFormatError(f"{path}: wrong magic {magic}, expected {IMAGES_MAGIC}")
        if len(raw) < 16:
            raise DataFormatError(f"{path}: truncated header")
        rows, cols = struct.unpack(">II", raw[8:16])
        need = count * rows * cols
        payload = raw[16:]
        if len(payload) != need:
            raise DataFormatError(
                f"{path}: payload has {len(payload)} bytes, header implies {need}"
            )
        data = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
        return data.astype(np.float32) / np.float32(255.0)
    if kind == "labels":
        if magic != LABELS_MAGIC:
            raise DataFormatError(f"{path}: wrong magic {magic}, expected {LABELS_MAGIC}")
        payload = raw[8:]
        if len(payload) != count:
            raise DataFormatError(
                f"{path}: payload has {len(payload)} bytes, header implies {count}"
            )
        return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    raise ValueError(f"kind must be 'images' or 'labels', got {kind!r}")


def write_idx(path, array, kind="images"):
    """Inverse of :func:`read_idx`; images are quantized to bytes."""
    arr = np.asarray(array)
    if kind == "images":
        if arr.dtype != np.uint8:
            arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        header = struct.pack(">IIII", IMAGES_MAGIC, *arr.shape)
    else:
        arr = arr.astype(np.uint8)
        header = struct.pack(">II", LABELS_MAGIC, len(arr))
    blob = header + arr.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(blob)


def read_usps_text(path):
    """Read the classic ``zip.train`` / ``zip.test`` layout.

    Each line holds a label and 256 values in [-1, 1]; values are remapped to
    [0, 1] with ``(v + 1) / 2``.
    """
    labels, images = [], []
    opener = gzip.open if _is_gzip(path) else open
    with opener(path, "rt") as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 257:
                raise DataFormatError(f"{path}:{lineno}: expected 257 fields, got {len(fields)}")
            vals = np.array(fields[1:], dtype=np.float64)
            if vals.min() < -1 - USPS_RANGE_TOL or vals.max() > 1 + USPS_RANGE_TOL:
                raise DataFormatError(f"{path}:{lineno}: value outside [-1, 1]")
            labels.append(int(float(fields[0])))
            images.append(vals)
    if not images:
        raise DataFormatError(f"{path}: no samples")
    imgs = np.clip((np.stack(images) + 1.0) / 2.0, 0.0, 1.0).reshape(-1, 16, 16)
    return imgs.astype(np.float32), np.array(labels, dtype=np.int64)


def _is_gzip(path):
    with open(path, "rb") as fh:
        return fh.read(2) == b"\x1f\x8b"


def center_crop(img, size):
    h, w = img.shape[-2:]
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return img[..., top : top + size, left : left + size]


def _axis_weights(n_in, n_out):
    # half-pixel centres, clamped to the border
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize of the last two axes (align-corners off)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extents must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    rows = img[..., r0, :] * (1 - fr)[:, None] + img[..., r1, :] * fr[:, None]
    out = rows[..., c0] * (1 - fc) + rows[..., c1] * fc
    return out


def preprocess_mnist(raw):
    """28x28 -> crop 20x20 -> 16x16 -> 32x32 (works on stacks too)."""
    x = center_crop(np.asarray(raw, dtype=np.float64), MNIST_CROP)
    x = resize_bilinear(x, 16, 16)
    x = resize_bilinear(x, 32, 32)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def preprocess_usps(raw):
    x = resize_bilinear(np.asarray(raw, dtype=np.float64), 32, 32)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def preprocess(dataset):
    """Return (N, 1, 32, 32) float32 images for a :class:`RawDataset`."""
    fn = preprocess_mnist if dataset.source == "mnist" else preprocess_usps
    return fn(dataset.images)[:, None, :, :]


def _find(data_dir, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(data_dir, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")


def load_dataset(source, data_dir, split="train"):
    if split not in ("train", "test"):
        raise ValueError(f"split must be train or test, got {split!r}")
    if source == "mnist":
        img_stem, lbl_stem = MNIST_FILES[split]
        images = read_idx(_find(data_dir, img_stem), "images")
        labels = read_idx(_find(data_dir, lbl_stem), "labels")
        if images.shape[1:] != (28, 28):
            raise DataFormatError(f"MNIST images must be 28x28, got {images.shape[1:]}")
    elif source == "usps":
        images, labels = read_usps_text(_find(data_dir, USPS_FILES[split]))
    else:
        raise ValueError(f"unknown dataset {source!r}; expected mnist or usps")
    if labels.size and (labels.min() < 0 or labels.max() > 9):
        raise DataFormatError("labels must be in 0..9")
    return RawDataset(images, labels, source, split)


def shuffled_indices(n, seed, epoch):
    """Seeded Fisher-Yates permutation; a pure function of (seed, epoch)."""
    rng = np.random.Generator(np.random.PCG64(seed + epoch))
    idx = np.arange(n)
    swaps = rng.integers(0, np.arange(n, 1, -1)).tolist() if n > 1 else []
    for i, j in zip(range(n - 1, 0, -1), swaps):
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def iter_batches(n, batch_size, order=None, drop_last=True):
    order = np.arange(n) if order is None else order
    stop = (n // batch_size) * batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield order[start : start + batch_size]
