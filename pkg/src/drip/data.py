"""Datasets: IDX and raw-tensor ingestion, synthetic blobs, splitting, noise, random retention."""
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ParseError, RejectedInputError
from .network import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TENSOR_MAGIC = b"DRIPTNSR"
TENSOR_VERSION = 1


@dataclass(frozen=True)
class LabeledDataset:
    """Inputs ``(N, C, H, W)`` float64 with integer labels in ``[0, class_count)``."""

    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: str = ""

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if inputs.ndim != 4:
            raise RejectedInputError(f"inputs must be (N, C, H, W), got shape {inputs.shape}")
        if inputs.shape[0] != labels.shape[0]:
            raise RejectedInputError("inputs and labels differ in length")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise RejectedInputError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i):
        return self.inputs[i], int(self.labels[i])

    @property
    def input_shape(self):
        return self.inputs.shape[1:]

    def subset(self, indices, provenance=None):
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.class_count,
                              self.provenance if provenance is None else provenance)

    def concat(self, other, provenance=None):
        if other.class_count != self.class_count or other.input_shape != self.input_shape:
            raise RejectedInputError("cannot concatenate datasets with different shapes or class counts")
        return LabeledDataset(np.concatenate([self.inputs, other.inputs]),
                              np.concatenate([self.labels, other.labels]), self.class_count,
                              provenance or f"{self.provenance}+{other.provenance}")


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    train_fraction: float = 0.40
    calibration_fraction: float = 0.20
    production_fraction: float = 0.40

    def __post_init__(self):
        total = sum(Fraction(str(f)) for f in self.fractions)
        if total != 1 or min(self.fractions) < 0:
            raise RejectedInputError("split fractions must be non-negative and sum to 1")

    @property
    def fractions(self):
        return (self.train_fraction, self.calibration_fraction, self.production_fraction)


@dataclass(frozen=True)
class NoiseSpec:
    level_percent: float = 0.0
    label_flip_enabled: bool = True
    pixel_noise_enabled: bool = False
    pixel_noise_salt_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.level_percent <= 100:
            raise RejectedInputError("noise level must lie in [0, 100]")
        if self.level_percent > 0 and not (self.label_flip_enabled or self.pixel_noise_enabled):
            raise RejectedInputError("noise level > 0 needs at least one corruption mode")
        if not 0 <= self.pixel_noise_salt_fraction <= 1:
            raise RejectedInputError("salt fraction must lie in [0, 1]")


# ---------------------------------------------------------------- IDX


def _read_idx(path, magic, ndim):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise ParseError("magic", f"{path}: file shorter than the magic number")
    (found,) = struct.unpack_from(">I", data, 0)
    if found != magic:
        raise ParseError("magic", f"{path}: expected 0x{magic:08x}, found 0x{found:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError("dimensions", f"{path}: truncated header")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise ParseError("data", f"{path}: expected {size} bytes of data, found {len(data) - header}")
    if len(data) - header > size:
        raise ParseError("data", f"{path}: {len(data) - header - size} trailing bytes")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count=None, limit=None):
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ParseError("count", f"{images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    inputs = images[:, None, :, :].astype(np.float64) / 255.0
    return LabeledDataset(inputs, labels.astype(np.int64), class_count, f"idx:{images_path}")


def save_idx(dataset, images_path, labels_path):
    """Write single-channel inputs back out as IDX (pixels rounded to bytes)."""
    n, c, h, w = dataset.inputs.shape
    if c != 1:
        raise RejectedInputError("IDX images are single-channel")
    pixels = np.clip(np.rint(dataset.inputs[:, 0] * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------- raw tensors


def save_tensor(array, path):
    """Raw container: magic, u32 version, u32 ndim, u64 dims, little-endian f64 data."""
    a = np.asarray(array, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<II", TENSOR_VERSION, a.ndim))
        f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        f.write(a.astype("<f8").tobytes())


def load_tensor(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != TENSOR_MAGIC:
        raise ParseError("magic", f"{path}: not a raw tensor container")
    if len(data) < 16:
        raise ParseError("header", f"{path}: truncated header")
    version, ndim = struct.unpack_from("<II", data, 8)
    if version != TENSOR_VERSION:
        raise ParseError("version", f"{path}: unsupported version {version}")
    if len(data) < 16 + 8 * ndim:
        raise ParseError("shape", f"{path}: truncated shape")
    shape = struct.unpack_from(f"<{ndim}Q", data, 16)
    offset = 16 + 8 * ndim
    count = int(np.prod(shape))
    if len(data) - offset != 8 * count:
        raise ParseError("data", f"{path}: expected {8 * count} data bytes, found {len(data) - offset}")
    return np.frombuffer(data, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)


def load_raw(inputs_path, labels_path, class_count=None):
    inputs = load_tensor(inputs_path)
    labels = load_tensor(labels_path).reshape(-1)
    if inputs.ndim == 3:
        inputs = inputs[:, None]
    if np.any(labels != np.round(labels)):
        raise ParseError("labels", "labels must be integral")
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(inputs, labels, class_count, f"raw:{inputs_path}")


# ---------------------------------------------------------------- synthetic


def synth_blobs(class_count, per_class, image_size, seed, noise=0.15, jitter=0.08):
    """Single-channel images, one Gaussian blob per item at a class-specific offset.

    Class ``k`` centres its blob on a ring around the image centre at angle
    ``2*pi*k/class_count``. Blob amplitude, width and position jitter, plus
    additive pixel noise, are drawn per item; pixels are clipped to [0, 1].
    Items are interleaved by class (0, 1, ..., K-1, 0, 1, ...).
    """
    if min(class_count, per_class, image_size) < 1:
        raise RejectedInputError("class_count, per_class and image_size must be positive")
    rng = make_rng(seed)
    s = image_size
    grid = np.arange(s) + 0.5
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    n = class_count * per_class
    labels = np.tile(np.arange(class_count), per_class)
    angle = 2.0 * np.pi * labels / class_count
    radius = 0.28 * s
    cy = s / 2 + radius * np.sin(angle) + rng.normal(0.0, jitter * s, n)
    cx = s / 2 + radius * np.cos(angle) + rng.normal(0.0, jitter * s, n)
    amp = rng.uniform(0.5, 1.0, n)
    width = 0.12 * s * rng.uniform(0.8, 1.25, n)
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    img = amp[:, None, None] * np.exp(-d2 / (2.0 * width[:, None, None] ** 2))
    img = img + rng.normal(0.0, noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return LabeledDataset(img[:, None], labels, class_count,
                          f"synth_blobs(k={class_count},per_class={per_class},size={s},seed={seed})")


# ---------------------------------------------------------------- protocol helpers


def _round_half_up(fraction, n):
    value = Fraction(str(fraction)) * n
    return int((value + Fraction(1, 2)) // 1)


def split_sizes(n, spec):
    n_train = _round_half_up(spec.train_fraction, n)
    n_cal = _round_half_up(spec.calibration_fraction, n)
    return n_train, n_cal, n - n_train - n_cal


def split(dataset, spec):
    """Seeded shuffle then contiguous 40/20/40 cut: (train, calibration, production)."""
    n = len(dataset)
    if n < 3:
        raise RejectedInputError("need at least 3 items to split")
    n_train, n_cal, n_prod = split_sizes(n, spec)
    if n_prod < 0:
        raise RejectedInputError("split fractions leave no room for the production part")
    order = make_rng(spec.seed).permutation(n)
    parts = (order[:n_train], order[n_train:n_train + n_cal], order[n_train + n_cal:])
    names = ("train", "calibration", "production")
    return tuple(dataset.subset(p, f"{dataset.provenance}/{name}") for p, name in zip(parts, names))


def noise_indices(n, spec):
    count = int(Fraction(str(spec.level_percent)) / 100 * n)
    if count == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(make_rng(spec.seed).choice(n, size=count, replace=False))


def inject_noise(dataset, spec):
    """Corrupt a seeded sample of ``floor(level% * n)`` items; returns a new dataset.

    Label flips move to a uniformly chosen *different* class. Pixel noise
    overwrites ``floor(salt_fraction * pixels)`` randomly chosen pixels with
    uniform [0, 1] values. All other items are copied unchanged.
    """
    n = len(dataset)
    idx = noise_indices(n, spec)
    if idx.size == 0:
        return dataset
    if spec.label_flip_enabled and dataset.class_count < 2:
        raise RejectedInputError("label flipping needs at least two classes")
    rng = make_rng([spec.seed, 1])
    inputs = dataset.inputs.copy()
    labels = dataset.labels.copy()
    per_item = dataset.inputs[0].size
    salt = int(Fraction(str(spec.pixel_noise_salt_fraction)) * per_item)
    for i in idx:
        if spec.label_flip_enabled:
            labels[i] = (labels[i] + rng.integers(1, dataset.class_count)) % dataset.class_count
        if spec.pixel_noise_enabled and salt:
            flat = inputs[i].reshape(-1)
            where = rng.choice(per_item, size=salt, replace=False)
            flat[where] = rng.uniform(0.0, 1.0, salt)
    return LabeledDataset(inputs, labels, dataset.class_count,
                          f"{dataset.provenance}/noise({spec.level_percent}%)")


def random_retention(production, keep_count, seed):
    """Sorted indices of a seeded uniform sample without replacement."""
    n = production if isinstance(production, (int, np.integer)) else len(production)
    if not 0 <= keep_count <= n:
        raise RejectedInputError(f"keep_count {keep_count} outside [0, {n}]")
    return np.sort(make_rng(seed).choice(n, size=int(keep_count), replace=False))
