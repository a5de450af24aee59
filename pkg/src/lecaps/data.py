"""Dataset loading and generation.

Real datasets use their standard binary layouts: the IDX image/label files
for MNIST-style sets and the 3073-byte-record binary batches for CIFAR-10.
A deterministic synthetic digit generator stands in when no files are
available (smoke tests, sandboxed machines); it renders a small bitmap font
with mild affine jitter and noise.

Geometric pipelines: ``expand_images`` places digits at random offsets on a
larger canvas without resampling (pixel sums are conserved exactly), and
``affine_test_set`` centers digits on that canvas and applies random
rotation/shear/scale with bilinear warping.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "DatasetSplit",
    "read_idx_images",
    "read_idx_labels",
    "write_idx_images",
    "write_idx_labels",
    "load_idx_split",
    "read_cifar10_batch",
    "load_cifar10",
    "synthetic_digits",
    "expand_images",
    "expand_split",
    "AffineSpec",
    "warp_affine",
    "affine_test_set",
    "load_dataset",
    "DATASET_NAMES",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixel bytes

DATASET_NAMES = ("mnist", "fmnist", "cifar10", "expanded-mnist", "affine-test", "synthetic")

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class DataError(Exception):
    """A dataset file is missing, truncated, or malformed."""


@dataclass
class DatasetSplit:
    """Float images in [0, 1], shape [n, c, h, w], with integer labels [n]."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"split images must be [n, c, h, w], got shape {self.images.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise DataError(
                f"label count {self.labels.shape} does not match image count {self.images.shape[0]}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, limit: int | None) -> "DatasetSplit":
        if limit is None or limit >= len(self):
            return self
        return DatasetSplit(self.images[:limit], self.labels[:limit], self.name)


# ---------------------------------------------------------------------------
# IDX files (MNIST layout)


def read_idx_images(path: str | Path) -> np.ndarray:
    """Read an IDX image file into [n, h, w] uint8."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 16:
        raise DataError(f"{path}: too short for an IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DataError(f"{path}: bad image magic 0x{magic:08x} (expected 0x{IDX_IMAGE_MAGIC:08x})")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {count} {rows}x{cols} images, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    """Read an IDX label file into [n] uint8."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"label file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DataError(f"{path}: too short for an IDX label header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise DataError(f"{path}: bad label magic 0x{magic:08x} (expected 0x{IDX_LABEL_MAGIC:08x})")
    if len(raw) != 8 + count:
        raise DataError(f"{path}: expected {8 + count} bytes for {count} labels, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise DataError(f"IDX images must be [n, h, w] uint8, got {images.shape} {images.dtype}")
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DataError(f"IDX labels must be 1-D, got shape {labels.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def load_idx_split(images_path: str | Path, labels_path: str | Path, limit: int | None = None, name: str = "") -> DatasetSplit:
    """Pair an IDX image file with its label file and normalize to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )
    floats = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return DatasetSplit(floats, labels.astype(np.int64), name).take(limit)


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches


def read_cifar10_batch(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """One binary batch -> ([n, 3, 32, 32] uint8, [n] labels)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"batch file not found: {path}")
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise DataError(f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    if labels.max(initial=0) > 9:
        raise DataError(f"{path}: label byte out of range, file is probably not a CIFAR-10 batch")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(batch_paths: list[str | Path], limit: int | None = None, name: str = "cifar10") -> DatasetSplit:
    images, labels = [], []
    for p in batch_paths:
        imgs, labs = read_cifar10_batch(p)
        images.append(imgs)
        labels.append(labs)
    all_images = np.concatenate(images).astype(np.float32) / 255.0
    all_labels = np.concatenate(labels).astype(np.int64)
    return DatasetSplit(all_images, all_labels, name).take(limit)


# ---------------------------------------------------------------------------
# synthetic digits

_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _glyph_canvas(digit: int, image_size: int) -> np.ndarray:
    rows = _GLYPHS[digit]
    bitmap = np.array([[float(ch) for ch in row] for row in rows], dtype=np.float64)
    scale = max(1, image_size // 9)
    glyph = np.kron(bitmap, np.ones((scale, scale)))
    canvas = np.zeros((image_size, image_size), dtype=np.float64)
    top = (image_size - glyph.shape[0]) // 2
    left = (image_size - glyph.shape[1]) // 2
    if top < 0 or left < 0:
        raise DataError(f"image size {image_size} is too small for the digit font")
    canvas[top : top + glyph.shape[0], left : left + glyph.shape[1]] = glyph
    return canvas


def synthetic_digits(n: int, seed: int = 0, image_size: int = 28, noise: float = 0.05) -> DatasetSplit:
    """Deterministic stand-in digit set: bitmap font + affine jitter + noise.

    Classes cycle 0..9 before shuffling, so any prefix of a reasonably
    sized draw is close to balanced.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % 10
    rng.shuffle(labels)
    images = np.empty((n, 1, image_size, image_size), dtype=np.float32)
    for i, digit in enumerate(labels):
        spec = AffineSpec(
            rotation_deg=rng.uniform(-8.0, 8.0),
            scale=rng.uniform(0.9, 1.1),
            shear=rng.uniform(-0.08, 0.08),
            shift_x=rng.uniform(-2.0, 2.0),
            shift_y=rng.uniform(-2.0, 2.0),
        )
        canvas = warp_affine(_glyph_canvas(int(digit), image_size), spec)
        if noise:
            canvas = canvas + noise * rng.standard_normal(canvas.shape)
        images[i, 0] = np.clip(canvas, 0.0, 1.0)
    return DatasetSplit(images, labels, "synthetic")


# ---------------------------------------------------------------------------
# placement on a larger canvas


def expand_images(images: np.ndarray, out_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Place each [c, h, w] image at a uniform integer offset on an out_size canvas.

    Pure placement, no resampling: every pixel value is copied, so per-image
    pixel sums are conserved exactly. Returns (expanded, offsets[n, 2]) with
    offsets as (top, left).
    """
    n, c, h, w = images.shape
    if out_size < h or out_size < w:
        raise DataError(f"canvas {out_size} is smaller than the images ({h}x{w})")
    offsets = np.stack(
        [rng.integers(0, out_size - h + 1, size=n), rng.integers(0, out_size - w + 1, size=n)], axis=1
    )
    out = np.zeros((n, c, out_size, out_size), dtype=images.dtype)
    for i, (top, left) in enumerate(offsets):
        out[i, :, top : top + h, left : left + w] = images[i]
    return out, offsets


def expand_split(split: DatasetSplit, out_size: int = 40, seed: int = 0) -> tuple[DatasetSplit, np.ndarray]:
    """Expanded variant of a split; labels pass through unchanged."""
    rng = np.random.default_rng(seed)
    expanded, offsets = expand_images(split.images, out_size, rng)
    return DatasetSplit(expanded, split.labels.copy(), f"expanded-{split.name or 'digits'}"), offsets


# ---------------------------------------------------------------------------
# affine warping


@dataclass(frozen=True)
class AffineSpec:
    """Rotation (degrees), isotropic scale, x-shear, and pixel shift."""

    rotation_deg: float = 0.0
    scale: float = 1.0
    shear: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0

    @classmethod
    def identity(cls) -> "AffineSpec":
        return cls()

    def matrix(self) -> np.ndarray:
        """Forward 2x2 map (about the image center) in (x, y) coordinates."""
        theta = np.deg2rad(self.rotation_deg)
        rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        shear = np.array([[1.0, self.shear], [0.0, 1.0]])
        scale = np.array([[self.scale, 0.0], [0.0, self.scale]])
        return rotation @ shear @ scale


def warp_affine(image: np.ndarray, spec: AffineSpec) -> np.ndarray:
    """Warp a [h, w] image about its center with bilinear resampling.

    Implemented as an inverse map: each output pixel samples the input at
    the back-transformed location; samples outside the input are zero. The
    identity spec reproduces the input exactly (integer sample points).
    """
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    inverse = np.linalg.inv(spec.matrix())
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    u = xs - cx - spec.shift_x
    v = ys - cy - spec.shift_y
    x_in = inverse[0, 0] * u + inverse[0, 1] * v + cx
    y_in = inverse[1, 0] * u + inverse[1, 1] * v + cy

    x0 = np.floor(x_in).astype(np.int64)
    y0 = np.floor(y_in).astype(np.int64)
    wx = x_in - x0
    wy = y_in - y0

    def sample(yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        values = image[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(inside, values, 0.0)

    out = (
        (1 - wy) * (1 - wx) * sample(y0, x0)
        + (1 - wy) * wx * sample(y0, x0 + 1)
        + wy * (1 - wx) * sample(y0 + 1, x0)
        + wy * wx * sample(y0 + 1, x0 + 1)
    )
    return out.astype(image.dtype, copy=False)


def affine_test_set(
    split: DatasetSplit,
    out_size: int = 40,
    seed: int = 0,
    max_rotation: float = 20.0,
    max_shear: float = 0.2,
    scale_range: tuple[float, float] = (0.8, 1.2),
    max_shift: float = 2.0,
) -> tuple[DatasetSplit, list[AffineSpec]]:
    """Center each digit on a larger canvas, then warp it with a random spec.

    With all ranges at zero this is exactly the centered placement, which
    pins down the coordinate conventions in tests.
    """
    rng = np.random.default_rng(seed)
    n, c, h, w = split.images.shape
    if out_size < h or out_size < w:
        raise DataError(f"canvas {out_size} is smaller than the images ({h}x{w})")
    top, left = (out_size - h) // 2, (out_size - w) // 2
    lo, hi = scale_range
    out = np.zeros((n, c, out_size, out_size), dtype=split.images.dtype)
    specs: list[AffineSpec] = []
    for i in range(n):
        spec = AffineSpec(
            rotation_deg=rng.uniform(-max_rotation, max_rotation),
            scale=rng.uniform(lo, hi),
            shear=rng.uniform(-max_shear, max_shear),
            shift_x=rng.uniform(-max_shift, max_shift),
            shift_y=rng.uniform(-max_shift, max_shift),
        )
        specs.append(spec)
        for ch in range(c):
            canvas = np.zeros((out_size, out_size), dtype=split.images.dtype)
            canvas[top : top + h, left : left + w] = split.images[i, ch]
            out[i, ch] = warp_affine(canvas, spec)
    return DatasetSplit(out, split.labels.copy(), f"affine-{split.name or 'digits'}"), specs


# ---------------------------------------------------------------------------
# top-level loading


def _mnist_paths(data_dir: Path) -> dict[str, Path]:
    return {key: data_dir / fname for key, fname in MNIST_FILES.items()}


def load_dataset(
    name: str,
    data_dir: str | Path = "data",
    train_limit: int | None = None,
    test_limit: int | None = None,
    seed: int = 0,
    synthetic_fallback: bool = False,
) -> tuple[DatasetSplit, DatasetSplit]:
    """Resolve a dataset name to (train_split, test_split).

    - mnist / fmnist: the four IDX files under data_dir.
    - cifar10: data_batch_1..5.bin and test_batch.bin under data_dir.
    - expanded-mnist: MNIST placed at random offsets on a 40x40 canvas.
    - affine-test: train on expanded MNIST, evaluate on affine-warped digits.
    - synthetic: generated digits (no files needed).

    With synthetic_fallback=True the MNIST-family loaders substitute
    generated digits when the IDX files are absent, so every pipeline can
    run on a machine without datasets.
    """
    if name not in DATASET_NAMES:
        raise DataError(f"unknown dataset {name!r} (choose from {', '.join(DATASET_NAMES)})")
    data_dir = Path(data_dir)

    if name == "synthetic":
        train_n = train_limit if train_limit is not None else 5000
        test_n = test_limit if test_limit is not None else 1000
        # Disjoint seeds so train and test never share images.
        return (
            synthetic_digits(train_n, seed=seed, image_size=28),
            synthetic_digits(test_n, seed=seed + 1, image_size=28),
        )

    if name in ("mnist", "fmnist"):
        return _load_idx_pair(name, data_dir, train_limit, test_limit, seed, synthetic_fallback)

    if name == "cifar10":
        train_paths = [data_dir / f"data_batch_{i}.bin" for i in range(1, 6)]
        test_paths = [data_dir / "test_batch.bin"]
        missing = [p for p in train_paths + test_paths if not p.exists()]
        if missing:
            raise DataError(f"missing CIFAR-10 batch files: {', '.join(str(p) for p in missing)}")
        return (
            load_cifar10(train_paths, train_limit, "cifar10-train"),
            load_cifar10(test_paths, test_limit, "cifar10-test"),
        )

    # Both canvas datasets build on the MNIST-family images.
    base_train, base_test = _load_idx_pair("mnist", data_dir, train_limit, test_limit, seed, synthetic_fallback)
    train, _ = expand_split(base_train, out_size=40, seed=seed)
    if name == "expanded-mnist":
        test, _ = expand_split(base_test, out_size=40, seed=seed + 1)
        return train, test
    test, _ = affine_test_set(base_test, out_size=40, seed=seed + 1)
    return train, test


def _load_idx_pair(
    name: str,
    data_dir: Path,
    train_limit: int | None,
    test_limit: int | None,
    seed: int,
    synthetic_fallback: bool,
) -> tuple[DatasetSplit, DatasetSplit]:
    paths = _mnist_paths(data_dir)
    missing = [p for p in paths.values() if not p.exists()]
    if missing:
        if synthetic_fallback:
            train_n = train_limit if train_limit is not None else 5000
            test_n = test_limit if test_limit is not None else 1000
            return (
                synthetic_digits(train_n, seed=seed, image_size=28),
                synthetic_digits(test_n, seed=seed + 1, image_size=28),
            )
        raise DataError(
            f"missing {name} files under {data_dir}: {', '.join(p.name for p in missing)} "
            "(pass --synthetic-fallback to substitute generated digits)"
        )
    return (
        load_idx_split(paths["train_images"], paths["train_labels"], train_limit, f"{name}-train"),
        load_idx_split(paths["test_images"], paths["test_labels"], test_limit, f"{name}-test"),
    )
