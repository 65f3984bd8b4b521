"""Image datasets: PPM/PGM I/O, class-directory loading, synthetic data, splits.

On-disk layout is ``root/<class_name>/<image>.ppm`` with binary P6 images.
Convert other formats first, e.g. ``convert face.jpg face.ppm`` (ImageMagick)
or ``Image.open(p).convert("RGB").save(q)`` with Pillow.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .rng import make_rng

log = logging.getLogger(__name__)

BRIGHT = 0.9
DARK = 0.1
# Quadrant (row, col) for class k is QUADRANTS[k % 4]. Classes 0 and 1 sit on a
# diagonal so a horizontal flip never turns one into the other.
QUADRANTS = ((0, 0), (1, 1), (0, 1), (1, 0))


@dataclass
class LabeledDataset:
    images: np.ndarray  # N x H x W x 3, float32 in [0, 1]
    labels: np.ndarray  # N, int64
    label_map: list[str]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.label_map)):
            raise DataError(f"labels must lie in [0, {len(self.label_map)})")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]:
        return self.images[i], int(self.labels[i])

    @property
    def num_classes(self) -> int:
        return len(self.label_map)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], list(self.label_map))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------------------
# netpbm


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_netpbm(path: str | os.PathLike, magic: bytes, channels: int) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    fields = []
    pos = 0
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise DataError(f"{path}: truncated header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != magic:
        raise DataError(f"{path}: expected magic {magic.decode()}, found {fields[0][:8]!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise DataError(f"{path}: malformed header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise DataError(f"{path}: unsupported dims {width}x{height} or maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    n = width * height * channels
    if len(raw) - pos < n:
        raise DataError(f"{path}: raster has {len(raw) - pos} bytes, expected {n}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return (pixels.reshape(shape).astype(np.float32) / np.float32(maxval)).astype(np.float32)


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P6 image as an H x W x 3 float32 array in [0, 1]."""
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P5 image as an H x W float32 array in [0, 1]."""
    return _read_netpbm(path, b"P5", 1)


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"PPM needs an H x W x 3 image, got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + _to_bytes(img).tobytes())


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise DataError(f"PGM needs an H x W image, got {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + _to_bytes(img).tobytes())


def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img
    rows = np.arange(size) * h // size
    cols = np.arange(size) * w // size
    return img[rows][:, cols]


# ---------------------------------------------------------------------------
# datasets


def load_dataset(root: str | os.PathLike, expected_size: int) -> LabeledDataset:
    """Load ``root/<class>/<image>.ppm``; classes and files in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"{root}: no class subdirectories")
    images, labels = [], []
    for label, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir() if p.is_file() and p.suffix.lower() == ".ppm")
        if not files:
            log.warning("class directory %s holds no .ppm images", root / name)
        for f in files:
            images.append(resize_nearest(read_ppm(f), expected_size))
            labels.append(label)
    if not images:
        raise DataError(f"{root}: no images found")
    return LabeledDataset(np.stack(images), np.array(labels), classes)


def save_dataset(ds: LabeledDataset, root: str | os.PathLike) -> None:
    """Write ``ds`` in the class-directory layout ``load_dataset`` reads."""
    root = Path(root)
    for name in ds.label_map:
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        write_ppm(root / ds.label_map[label] / f"{i:06d}.ppm", img)


@dataclass
class SyntheticSpec:
    num_classes: int = 2
    samples_per_class: int = 32
    image_size: int = 64
    noise_std: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        errs = []
        if self.num_classes < 2:
            errs.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_size < 16:
            errs.append(f"image_size must be >= 16, got {self.image_size}")
        if self.samples_per_class < 1:
            errs.append(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if self.noise_std < 0:
            errs.append(f"noise_std must be >= 0, got {self.noise_std}")
        if errs:
            raise ConfigError("invalid synthetic spec:\n  " + "\n  ".join(errs))


def quadrant_slices(cls: int, size: int) -> tuple[slice, slice]:
    """Row/column slices of the bright quadrant for class ``cls``."""
    half = size // 2
    r, c = QUADRANTS[cls % 4]
    rows = slice(0, half) if r == 0 else slice(half, size)
    cols = slice(0, half) if c == 0 else slice(half, size)
    return rows, cols


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Bright-quadrant images: class k lights up quadrant ``QUADRANTS[k % 4]``.

    Samples are ordered class by class.
    """
    spec.validate()
    rng = make_rng(spec.seed)
    n = spec.num_classes * spec.samples_per_class
    s = spec.image_size
    images = np.full((n, s, s, 3), DARK, dtype=np.float64)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    for i, k in enumerate(labels):
        rows, cols = quadrant_slices(int(k), s)
        images[i, rows, cols, :] = BRIGHT
    if spec.noise_std > 0:
        images = np.clip(images + rng.normal(0.0, spec.noise_std, images.shape), 0.0, 1.0)
    names = [f"class{k}" for k in range(spec.num_classes)]
    return LabeledDataset(images.astype(np.float32), labels, names)


def parse_synthetic(text: str) -> tuple[int, int]:
    """Parse ``"KxN"`` (K classes, N samples per class)."""
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not m:
        raise ConfigError(f"synthetic spec must look like '2x32', got {text!r}")
    return int(m.group(1)), int(m.group(2))


def split(ds: LabeledDataset, train_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded stratified split: floor(fraction * n_k) samples of class k go to train.

    Both parts keep the original sample order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = make_rng(seed)
    train_idx, test_idx = [], []
    for k in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == k)
        if len(members) < 2:
            if len(members):
                log.warning("class %s has %d sample(s); all go to train", ds.label_map[k], len(members))
            train_idx.extend(members)
            continue
        perm = rng.permutation(members)
        cut = int(np.floor(train_fraction * len(members)))
        train_idx.extend(perm[:cut])
        test_idx.extend(perm[cut:])
    return ds.subset(np.sort(np.array(train_idx, dtype=np.int64))), ds.subset(np.sort(np.array(test_idx, dtype=np.int64)))
