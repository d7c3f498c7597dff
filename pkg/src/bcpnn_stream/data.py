"""Dataset loading (IDX, CSV) and encoding into hypercolumn activations."""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bcpnn_stream.errors import (
    CountMismatchError,
    DataFormatError,
    InputError,
    MagicError,
    TruncatedFileError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, height, width), float64 in [0, 1]
    labels: np.ndarray  # (n,), int64
    width: int
    height: int
    n_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.shape[1:] != (self.height, self.width):
            raise DataFormatError(
                f"images have shape {self.images.shape[1:]}, expected {(self.height, self.width)}"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InputError(f"labels outside [0, {self.n_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise InputError("pixel values outside [0, 1]")

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return zip(self.images, self.labels.tolist())

    def subset(self, n: int | None = None, start: int = 0) -> "Dataset":
        stop = None if n is None else start + n
        return Dataset(self.images[start:stop], self.labels[start:stop], self.width, self.height, self.n_classes)

    def shuffled(self, seed: int) -> "Dataset":
        order = np.random.default_rng(seed).permutation(len(self))
        return Dataset(self.images[order], self.labels[order], self.width, self.height, self.n_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<4q", len(self), self.width, self.height, self.n_classes))
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


def _read_idx(path: Path, magic: int, ndim: int):
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    header = 4 * (1 + ndim)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise MagicError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    body = raw[header:]
    if len(body) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} data bytes, found {len(body)}")
    if len(body) > expected:
        raise DataFormatError(f"{path}: {len(body) - expected} trailing bytes after the IDX payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    """Read a big-endian IDX image/label pair; pixels are scaled by 1/255."""
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    labels = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 1
    _, height, width = images.shape
    return Dataset(images.astype(np.float64) / 255.0, labels, width, height, n_classes)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset back to IDX, quantizing pixels to bytes."""
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    n = len(dataset)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, dataset.height, dataset.width))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_csv(path, width: int, height: int, n_classes: int) -> Dataset:
    """Rows are ``label, p0, p1, ...``; pixels in [0, 255] or [0, 1].

    The scale is inferred from the file's maximum pixel value.
    """
    path = Path(path)
    n_pix = width * height
    labels, rows = [], []
    try:
        with open(path, newline="") as f:
            for rowno, row in enumerate(csv.reader(f), 1):
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                if len(row) != n_pix + 1:
                    raise DataFormatError(
                        f"{path}:{rowno}: expected {n_pix + 1} values (label + {width}x{height} pixels), "
                        f"got {len(row)}"
                    )
                try:
                    label = int(row[0])
                    pix = [float(v) for v in row[1:]]
                except ValueError as exc:
                    raise DataFormatError(f"{path}:{rowno}: {exc}") from None
                if not 0 <= label < n_classes:
                    raise InputError(f"{path}:{rowno}: label {label} outside [0, {n_classes})")
                labels.append(label)
                rows.append(pix)
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    images = np.array(rows, dtype=np.float64).reshape(-1, height, width)
    if images.size and images.min() < 0:
        raise InputError(f"{path}: negative pixel values")
    if images.size and images.max() > 1.0:
        images = images / 255.0
    return Dataset(images, np.array(labels, dtype=np.int64), width, height, n_classes)


def encode_complementary(image, n_mc: int = 2) -> np.ndarray:
    """One hypercolumn per pixel.

    With two minicolumns a pixel ``v`` becomes ``(v, 1 - v)``. With more, the
    value is split linearly between the two nearest of ``n_mc`` evenly spaced
    levels, minicolumn 0 standing for intensity 1.
    """
    v = np.asarray(image, dtype=np.float64).ravel()
    if v.size and (v.min() < 0.0 or v.max() > 1.0 or not np.all(np.isfinite(v))):
        raise InputError("pixel values must lie in [0, 1]")
    if n_mc == 2:
        return np.stack([v, 1.0 - v], axis=1).ravel()
    if n_mc < 2:
        raise InputError(f"need at least 2 minicolumns per pixel (got {n_mc})")
    levels = (n_mc - 1) * (1.0 - v)
    lo = np.minimum(np.floor(levels).astype(np.int64), n_mc - 2)
    frac = levels - lo
    out = np.zeros((v.size, n_mc))
    rows = np.arange(v.size)
    out[rows, lo] = 1.0 - frac
    out[rows, lo + 1] = frac
    return out.ravel()


def encode_onehot(label: int, n_classes: int) -> np.ndarray:
    if not 0 <= label < n_classes:
        raise InputError(f"label {label} out of range for {n_classes} classes")
    v = np.zeros(n_classes)
    v[label] = 1.0
    return v
