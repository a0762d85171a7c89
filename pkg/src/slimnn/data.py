"""Dataset ingestion and generation.

Covers the IDX binary format (the standard MNIST distribution format, big
endian), an optional plain-text AMAT loader, the 50000/12000 resplit of the
combined pool, synthetic generation of the rotation / random-background /
image-background variants, train-statistics normalization, and seeded
batching. Datasets are immutable after construction; every generator is a
pure function of (inputs, seed).
"""

import gzip
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DataError, IdxFormatError
from .seeding import derive_seed

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

VARIANTS = ("rotation", "background_random", "background_images")
DATASET_NAMES = ("mnist",) + tuple(f"mnist_{v}" for v in VARIANTS)

DIGIT_MASK_THRESHOLD = 0.1  # pixel values below this count as background


@dataclass(frozen=True)
class Dataset:
    """Labeled grayscale images, [N, H, W] float64 in [0, 1] pre-normalization."""

    images: np.ndarray
    labels: np.ndarray
    name: str = "mnist"
    normalization: tuple | None = None  # (mean, std) applied to the pixels

    def __post_init__(self):
        if self.images.ndim != 3:
            raise DataError(f"images must be [N, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() > 9):
            raise DataError("labels must be class indices in 0..9")

    def __len__(self):
        return len(self.images)

    def flat_images(self):
        n, h, w = self.images.shape
        return self.images.reshape(n, h * w)


# ---------------------------------------------------------------------------
# IDX binary format


def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n, offset, what):
    data = f.read(n)
    if len(data) != n:
        raise IdxFormatError(
            f"truncated file while reading {what}: wanted {n} bytes at offset "
            f"{offset}, got {len(data)}",
            offset=offset,
        )
    return data


def load_idx(images_path, labels_path):
    """Parse an IDX image/label file pair into a Dataset.

    Pixel bytes are scaled to [0, 1]. Files may be gzip-compressed.
    """
    with _open_maybe_gzip(images_path) as f:
        magic, n, rows, cols = struct.unpack(">4I", _read_exact(f, 16, 0, "image header"))
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(
                f"bad image magic in {images_path}: expected {IMAGE_MAGIC:#010x}, "
                f"found {magic:#010x}",
                offset=0,
            )
        raw = _read_exact(f, n * rows * cols, 16, f"{n} images of {rows}x{cols}")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)
    with _open_maybe_gzip(labels_path) as f:
        magic, n_labels = struct.unpack(">2I", _read_exact(f, 8, 0, "label header"))
        if magic != LABEL_MAGIC:
            raise IdxFormatError(
                f"bad label magic in {labels_path}: expected {LABEL_MAGIC:#010x}, "
                f"found {magic:#010x}",
                offset=0,
            )
        labels = np.frombuffer(_read_exact(f, n_labels, 8, f"{n_labels} labels"), dtype=np.uint8)
    if n != n_labels:
        raise IdxFormatError(
            f"image count {n} != label count {n_labels}", offset=4
        )
    return Dataset(images=images.astype(np.float64) / 255.0, labels=labels.astype(np.int64))


def load_idx_images(path):
    """Parse just an IDX image file into an [N, H, W] float array in [0, 1]."""
    with _open_maybe_gzip(path) as f:
        magic, n, rows, cols = struct.unpack(">4I", _read_exact(f, 16, 0, "image header"))
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(
                f"bad image magic in {path}: expected {IMAGE_MAGIC:#010x}, "
                f"found {magic:#010x}",
                offset=0,
            )
        raw = _read_exact(f, n * rows * cols, 16, f"{n} images of {rows}x{cols}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols).astype(np.float64) / 255.0


def write_idx(ds: Dataset, images_path, labels_path):
    """Inverse of load_idx; pixels are quantized to uint8."""
    n, rows, cols = ds.images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IMAGE_MAGIC, n, rows, cols))
        f.write(np.rint(ds.images * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def load_amat(path, name="mnist"):
    """Plain-text loader: whitespace-separated floats, one sample per row,
    last column is the label; pixels are assumed already in [0, 1]."""
    table = np.loadtxt(path)
    if table.ndim == 1:
        table = table[None, :]
    pixels = table[:, :-1]
    side = int(round(np.sqrt(pixels.shape[1])))
    if side * side != pixels.shape[1]:
        raise DataError(f"row length {pixels.shape[1]} is not label + square image")
    return Dataset(
        images=pixels.reshape(-1, side, side),
        labels=table[:, -1].astype(np.int64),
        name=name,
    )


# ---------------------------------------------------------------------------
# splits and batching


def resplit(train: Dataset, test: Dataset, seed, train_size=50000, test_size=12000):
    """Shuffle the combined pool and cut fresh train/test splits.

    Defaults give the 50000/12000 split; the remainder of the pool is
    discarded. Splits are disjoint by construction.
    """
    pool_images = np.concatenate([train.images, test.images])
    pool_labels = np.concatenate([train.labels, test.labels])
    needed = train_size + test_size
    if len(pool_images) < needed:
        raise DataError(
            f"combined pool has {len(pool_images)} images, need >= {needed}"
        )
    perm = np.random.default_rng(seed).permutation(len(pool_images))
    tr = perm[:train_size]
    te = perm[train_size : train_size + test_size]
    return (
        Dataset(pool_images[tr], pool_labels[tr], name=train.name),
        Dataset(pool_images[te], pool_labels[te], name=train.name),
    )


def batch_indices(n, batch_size, epoch_seed):
    """Seeded per-epoch shuffle of range(n), yielded in batches.

    Every index appears exactly once; the final partial batch is kept.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    perm = np.random.default_rng(epoch_seed).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def batch_iter(ds: Dataset, batch_size, epoch_seed):
    """Seeded epoch of (images, labels) batches over the dataset."""
    for idx in batch_indices(len(ds), batch_size, epoch_seed):
        yield ds.images[idx], ds.labels[idx]


# ---------------------------------------------------------------------------
# variants


def rotate_images(images, angles):
    """Rotate each image by its own angle (radians), bilinear, zero fill."""
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    out = np.empty_like(images)
    chunk = 1024
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        cos = np.cos(angles[start:stop])[:, None, None]
        sin = np.sin(angles[start:stop])[:, None, None]
        # inverse map: sample the source at the un-rotated coordinate
        src_r = cos * rr + sin * cc + cy
        src_c = -sin * rr + cos * cc + cx
        r0 = np.floor(src_r).astype(np.int64)
        c0 = np.floor(src_c).astype(np.int64)
        fr = src_r - r0
        fc = src_c - c0
        block = images[start:stop]
        acc = np.zeros_like(block)
        for dr, dc, wgt in (
            (0, 0, (1 - fr) * (1 - fc)),
            (0, 1, (1 - fr) * fc),
            (1, 0, fr * (1 - fc)),
            (1, 1, fr * fc),
        ):
            r = r0 + dr
            c = c0 + dc
            valid = (r >= 0) & (r < h) & (c >= 0) & (c < w)
            rs = np.clip(r, 0, h - 1)
            cs = np.clip(c, 0, w - 1)
            samp = block[np.arange(stop - start)[:, None, None], rs, cs]
            acc += wgt * np.where(valid, samp, 0.0)
        out[start:stop] = acc
    return out


def make_variant(ds: Dataset, variant, seed, patch_source=None,
                 digit_threshold=DIGIT_MASK_THRESHOLD):
    """Generate a synthetic variant of base MNIST-style data.

    rotation: independent uniform angle in [0, 2pi) per image, bilinear,
    zero background. background_random: pixels below the digit threshold
    are replaced by independent uniform [0, 1] samples. background_images:
    background pixels take a random crop from `patch_source` (an [M, H, W]
    pool with H, W >= image size); digit pixels are kept by max-compositing.
    Labels are unchanged; output is deterministic given the seed.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if ds.name != "mnist":
        raise ConfigurationError(f"variants are generated from base mnist, got {ds.name!r}")
    rng = np.random.default_rng(derive_seed(seed, "variant", variant))
    n, h, w = ds.images.shape
    if variant == "rotation":
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
        images = rotate_images(ds.images, angles)
    elif variant == "background_random":
        noise = rng.uniform(0.0, 1.0, size=ds.images.shape)
        images = np.where(ds.images < digit_threshold, noise, ds.images)
    else:  # background_images
        if patch_source is None:
            raise ConfigurationError("background_images needs a patch_source image pool")
        pool = np.asarray(patch_source, dtype=np.float64)
        if pool.ndim != 3 or pool.shape[1] < h or pool.shape[2] < w:
            raise ConfigurationError(
                f"patch_source must be [M, >={h}, >={w}], got shape {pool.shape}"
            )
        which = rng.integers(0, len(pool), size=n)
        tops = rng.integers(0, pool.shape[1] - h + 1, size=n)
        lefts = rng.integers(0, pool.shape[2] - w + 1, size=n)
        crops = np.empty_like(ds.images)
        for i in range(n):
            crops[i] = pool[which[i], tops[i] : tops[i] + h, lefts[i] : lefts[i] + w]
        crops = np.clip(crops, 0.0, 1.0)
        images = np.where(
            ds.images < digit_threshold, crops, np.maximum(ds.images, crops)
        )
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images=images, labels=ds.labels.copy(), name=f"mnist_{variant}")


def synthesize_patch_pool(seed, count=64, size=64):
    """Smooth random textures standing in for natural-image backgrounds.

    Multi-scale uniform noise, upsampled and averaged, rescaled to [0, 1].
    """
    rng = np.random.default_rng(derive_seed(seed, "patch-pool"))
    pool = np.zeros((count, size, size))
    for scale in (4, 8, 16):
        coarse = rng.uniform(0.0, 1.0, size=(count, scale, scale))
        reps = -(-size // scale)  # ceil; crop back below
        pool += np.kron(coarse, np.ones((reps, reps)))[:, :size, :size]
    lo = pool.min(axis=(1, 2), keepdims=True)
    hi = pool.max(axis=(1, 2), keepdims=True)
    return (pool - lo) / np.maximum(hi - lo, 1e-12)


# ---------------------------------------------------------------------------
# normalization


def normalize(train: Dataset, others=()):
    """Affine-normalize all datasets with the training set's pixel mean/std.

    Returns (train, [others...]) as new Datasets carrying the (mean, std)
    pair. The std is floored at 1e-8 so constant data stays finite.
    """
    if len(train) == 0:
        raise DataError("cannot normalize an empty training set")
    mean = float(train.images.mean())
    std = max(float(train.images.std()), 1e-8)

    def apply(ds):
        return replace(ds, images=(ds.images - mean) / std, normalization=(mean, std))

    return apply(train), [apply(ds) for ds in others]
