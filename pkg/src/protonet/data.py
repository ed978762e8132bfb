"""Dataset loading (IDX binaries, image directories) and minibatch streams."""

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    """Base class for dataset loading failures."""


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


@dataclass
class Dataset:
    """Immutable image/label pairs; pixels in [0,1], labels 0-based."""
    images: np.ndarray  # [n, H, W, C] float64 in [0, 1]
    labels: np.ndarray  # [n] int64 in [0, K)
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.images):
            raise IdxCountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() >= self.n_classes:
            raise DataError(f"label {self.labels.max()} out of range for K={self.n_classes}")

    @property
    def n(self) -> int:
        return len(self.labels)


def _read_exact(f, count, what):
    buf = f.read(count)
    if len(buf) != count:
        raise IdxTruncatedError(f"truncated IDX file while reading {what}")
    return buf


def load_idx(images_path, labels_path, n_classes: int = 10, name: str = "idx") -> Dataset:
    """Parse big-endian IDX image/label files; pixel bytes are divided by 255."""
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxMagicError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        raw = _read_exact(f, n * rows * cols, "pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols, 1) / 255.0

    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise IdxMagicError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, n_labels, "label data"), dtype=np.uint8)

    if n != n_labels:
        raise IdxCountMismatchError(f"{n} images but {n_labels} labels")
    return Dataset(images, labels.astype(np.int64), n_classes=n_classes, name=name)


def write_idx(d: Dataset, images_path, labels_path) -> None:
    """Inverse of load_idx for synthetic data; quantizes pixels to bytes."""
    n, rows, cols, c = d.images.shape
    if c != 1:
        raise DataError("IDX writer handles single-channel images only")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(np.round(d.images[..., 0] * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(d.labels.astype(np.uint8).tobytes())


def load_image_dir(root, manifest_path, expect_shape=None, name: str = "imagedir") -> Dataset:
    """Load 8-bit images listed in a `relative_path,label` manifest.

    K is inferred as max label + 1. `expect_shape` (H, W, C), when given,
    rejects images of any other size.
    """
    entries = []
    with open(manifest_path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rel, label = line.rsplit(",", 1)
                entries.append((rel.strip(), int(label)))
            except ValueError as e:
                raise DataError(f"{manifest_path}:{line_no}: bad manifest line {line!r}") from e
    if not entries:
        raise DataError(f"empty manifest {manifest_path}")

    images, labels = [], []
    for rel, label in entries:
        path = os.path.join(root, rel)
        if not os.path.exists(path):
            raise DataError(f"manifest references missing file {path}")
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im,
                             dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if expect_shape is not None and arr.shape != tuple(expect_shape):
            raise DataError(f"{path}: shape {arr.shape}, expected {tuple(expect_shape)}")
        images.append(arr / 255.0)
        labels.append(label)
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"inconsistent image shapes in manifest: {sorted(shapes)}")
    return Dataset(np.stack(images), np.asarray(labels), n_classes=max(labels) + 1, name=name)


def split(d: Dataset, sizes, seed: int):
    """Disjoint seed-deterministic subsets; permutes once, then slices."""
    if sum(sizes) > d.n:
        raise DataError(f"split sizes {sizes} exceed dataset size {d.n}")
    perm = np.random.default_rng(seed).permutation(d.n)
    out, start = [], 0
    for i, size in enumerate(sizes):
        idx = perm[start:start + size]
        out.append(Dataset(d.images[idx], d.labels[idx], d.n_classes,
                           name=f"{d.name}/split{i}"))
        start += size
    return out


@dataclass
class BatchStream:
    """Seeded without-replacement minibatch cursor over a dataset.

    Each epoch's order is a pure function of (seed, epoch); the final short
    batch is emitted, not dropped. Single-owner mutable state.
    """
    batch_size: int
    seed: int
    epoch: int = 0
    _cursor: int = field(default=0, repr=False)
    _perm: np.ndarray = field(default=None, repr=False)

    @staticmethod
    def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
        return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)

    def next_batch(self, d: Dataset):
        """Advance the stream; returns (images, labels) for the next batch."""
        if self._perm is None or self._cursor >= d.n:
            if self._perm is not None:
                self.epoch += 1
            self._perm = self.epoch_permutation(self.seed, self.epoch, d.n)
            self._cursor = 0
        idx = self._perm[self._cursor:self._cursor + self.batch_size]
        self._cursor += len(idx)
        return d.images[idx], d.labels[idx]
