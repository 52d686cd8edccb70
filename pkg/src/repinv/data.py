"""Image datasets: IDX/CIFAR ingestion, quantization, splits and affine digits."""

from __future__ import annotations

import gzip
import importlib.resources
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

SPLITS = ("train", "val", "test")

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataError(ValueError):
    """Malformed input data or an invalid data request."""


@dataclass
class ImageDataset:
    """Quantized images with labels and optional split tags.

    Attributes:
        images: ``uint8`` array ``(N, H, W, C)`` with values in ``[0, levels-1]``.
        labels: ``int64`` array ``(N,)``.
        levels: number of gray levels ``L``.
        num_classes: label alphabet size.
        split: per-example tags from ``SPLITS`` or ``None`` if unsplit.
    """

    images: np.ndarray
    labels: np.ndarray
    levels: int = 256
    num_classes: int = 10
    split: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be N x H x W x C, got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if not 2 <= self.levels <= 256:
            raise DataError(f"levels must be in [2, 256], got {self.levels}")
        if self.images.size and int(self.images.max()) >= self.levels:
            raise DataError(f"pixel value {int(self.images.max())} >= levels {self.levels}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label outside [0, num_classes)")
        if self.split is not None and len(self.split) != len(self.images):
            raise DataError("split tags do not cover every example")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, tag):
        if self.split is None:
            raise DataError("dataset has no split tags")
        keep = self.split == tag
        return replace(self, images=self.images[keep], labels=self.labels[keep], split=self.split[keep])

    def take(self, index):
        split = None if self.split is None else self.split[index]
        return replace(self, images=self.images[index], labels=self.labels[index], split=split)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def load_idx(path):
    """Read a big-endian IDX file (``0x0803`` images or ``0x0801`` labels).

    Gzip-compressed files (``.gz``) are decompressed transparently.

    Returns:
        ``uint8`` array with the header's dimensions.
    """
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise DataError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = math.prod(dims)
    if expected > 2**34:
        raise DataError(f"{path}: dimensions {dims} overflow the supported size")
    actual = len(raw) - header
    if actual != expected:
        raise DataError(f"{path}: payload has {actual} bytes, expected {expected} for dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise DataError(f"IDX writer takes uint8 arrays of rank 1 or 3, got {array.dtype} rank {array.ndim}")
    magic = IDX_LABELS if array.ndim == 1 else IDX_IMAGES
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    atomic_write_bytes(path, payload)


def atomic_write_bytes(path, payload):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Other sources
# ---------------------------------------------------------------------------


def load_cifar10_batch(path):
    """Read a CIFAR-10 binary batch: records of 1 label byte + 3072 planar RGB bytes."""
    with open(path, "rb") as f:
        raw = f.read()
    record = 3073
    if len(raw) == 0 or len(raw) % record:
        raise DataError(f"{path}: size {len(raw)} is not a multiple of {record}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = arr[:, 0].astype(np.int64)
    images = arr[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).copy()
    return ImageDataset(images, labels, levels=256)


def load_mnist_sample():
    """The 5000-digit MNIST sample bundled with ``mlxtend`` (500 per class), 28x28."""
    try:
        path = importlib.resources.files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"
        with path.open("rb") as f:
            table = np.loadtxt(gzip.open(f), delimiter=",", dtype=np.float64)
    except (ModuleNotFoundError, FileNotFoundError) as exc:
        raise DataError("bundled MNIST sample unavailable; install mlxtend or use IDX files") from exc
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28, 1)
    return ImageDataset(images, table[:, -1].astype(np.int64), levels=256)


def from_idx(images_path, labels_path):
    images = load_idx(images_path)
    labels = load_idx(labels_path).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1:
        raise DataError("expected an image file and a label file")
    return ImageDataset(images[..., None], labels, levels=256)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------


def quantize(data, levels):
    """Map 256-level pixels ``v`` to ``floor(v * levels / 256)``.

    Accepts an :class:`ImageDataset` with 256 levels, or a numeric array of
    values in ``[0, 256)``.
    """
    if not 2 <= levels <= 256:
        raise DataError(f"levels must be in [2, 256], got {levels}")
    if isinstance(data, ImageDataset):
        if data.levels != 256:
            raise DataError(f"quantize expects a 256-level dataset, got {data.levels} levels")
        return replace(data, images=quantize(data.images, levels), levels=levels)
    values = np.asarray(data, dtype=np.float64)
    return np.clip(np.floor(values * levels / 256.0), 0, levels - 1).astype(np.uint8)


def downsample2(data):
    """2x2 mean pooling of a 256-level dataset, rounded to the nearest level."""
    x = data.images.astype(np.float64)
    n, h, w, c = x.shape
    pooled = x[:, : h // 2 * 2, : w // 2 * 2].reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
    return replace(data, images=np.rint(pooled).astype(np.uint8))


@dataclass(frozen=True)
class AffineParams:
    rotation: float = 0.0
    scale: tuple[float, float] = (1.0, 1.0)
    shear: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)  # (columns, rows)
    canvas: int = 40

    def __post_init__(self):
        if min(self.scale) <= 0:
            raise DataError(f"scale factors must be positive, got {self.scale}")


AFFINE_RANGES = {"rotation_deg": 20.0, "scale": (0.8, 1.2), "shear": 0.2}


def _forward_matrix(p):
    """Affine map in (row, col) coordinates: rotation . shear . scale."""
    c, s = math.cos(p.rotation), math.sin(p.rotation)
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, p.shear], [0.0, 1.0]])
    scale = np.diag(p.scale)
    a_xy = rot @ shear @ scale
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    return swap @ a_xy @ swap


def warp_image(image, params):
    """Bilinearly resample a ``(H, W, C)`` image onto ``params.canvas``.

    With identity parameters the image lands centred at integer offset
    ``(canvas - H) // 2`` and pixel values are preserved exactly.
    """
    h, w, ch = image.shape
    canvas = params.canvas
    if canvas < h or canvas < w:
        raise DataError(f"canvas {canvas} smaller than source {h}x{w}")
    offset = np.array([(canvas - h) // 2, (canvas - w) // 2], dtype=np.float64)
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([params.translation[1], params.translation[0]], dtype=np.float64)
    inv = np.linalg.inv(_forward_matrix(params))
    # input = inv @ (out - centre - offset - shift) + centre
    in_offset = centre - inv @ (centre + offset + shift)
    out = np.empty((canvas, canvas, ch))
    src = image.astype(np.float64)
    for k in range(ch):
        out[..., k] = ndimage.affine_transform(
            src[..., k], inv, offset=in_offset, output_shape=(canvas, canvas), order=1, mode="constant", cval=0.0
        )
    return out


def _support_extent(image, params):
    """Transformed row/col extent of the non-zero pixels (bilinear support included)."""
    rows, cols = np.nonzero(image.max(axis=-1))
    if len(rows) == 0:
        return None
    h, w = image.shape[:2]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = np.array([(params.canvas - h) // 2, (params.canvas - w) // 2])
    corners = np.array(
        [[r, c] for r in (rows.min() - 1, rows.max() + 1) for c in (cols.min() - 1, cols.max() + 1)], dtype=np.float64
    )
    mapped = (corners - centre) @ _forward_matrix(params).T + centre + offset
    return mapped.min(axis=0), mapped.max(axis=0)


def random_affine(rng, image, canvas, ranges=AFFINE_RANGES):
    """Draw transform parameters whose output keeps the digit inside the canvas."""
    rot = math.radians(rng.uniform(-ranges["rotation_deg"], ranges["rotation_deg"]))
    lo, hi = ranges["scale"]
    scale = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
    shear = float(rng.uniform(-ranges["shear"], ranges["shear"]))
    base = AffineParams(rot, scale, shear, (0.0, 0.0), canvas)
    extent = _support_extent(image, base)
    if extent is None:
        return base
    lo_rc, hi_rc = extent
    t = []
    for axis in (1, 0):  # columns then rows
        a, b = -lo_rc[axis], canvas - 1 - hi_rc[axis]
        t.append(float(rng.uniform(a, b)) if a <= b else (a + b) / 2.0)
    return replace(base, translation=(t[0], t[1]))


def make_affine_digits(source, canvas, seed, ranges=AFFINE_RANGES):
    """Place every source digit on a ``canvas`` under a seeded random affine transform.

    Returns:
        ``(dataset, params)``: the warped dataset (same levels, values rounded
        to the nearest level) and the per-image :class:`AffineParams`.
    """
    h, w = source.shape[:2]
    if canvas < h or canvas < w:
        raise DataError(f"canvas {canvas} smaller than source {h}x{w}")
    rng = np.random.default_rng(seed)
    out = np.empty((len(source), canvas, canvas, source.shape[2]), dtype=np.uint8)
    params = []
    for i, img in enumerate(source.images):
        p = random_affine(rng, img, canvas, ranges)
        warped = warp_image(img, p)
        out[i] = np.clip(np.rint(warped), 0, source.levels - 1).astype(np.uint8)
        params.append(p)
    return replace(source, images=out), params


def split_deterministic(data, fractions, seed):
    """Tag examples train/val/test by a seeded permutation.

    ``fractions`` gives the (train, val, test) shares; boundaries are placed
    at ``rint(cumsum(fractions) * N)``.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0:
        raise DataError(f"need three non-negative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions sum to {sum(fractions)!r}, expected 1")
    n = len(data)
    bounds = np.rint(np.cumsum(fractions) * n).astype(int)
    order = np.random.default_rng(seed).permutation(n)
    tags = np.empty(n, dtype="<U5")
    tags[order[: bounds[0]]] = "train"
    tags[order[bounds[0] : bounds[1]]] = "val"
    tags[order[bounds[1] :]] = "test"
    return replace(data, split=tags)


def desk_mnist(size=14, levels=16, fractions=(0.8, 0.1, 0.1), seed=0, source=None):
    """Desk-scale MNIST: 2x2 mean-pooled to 14x14 (if ``size=14``), quantized, split."""
    raw = source if source is not None else load_mnist_sample()
    if size == 14:
        raw = downsample2(raw)
    elif size != raw.shape[0]:
        raise DataError(f"unsupported image size {size}")
    return split_deterministic(quantize(raw, levels), fractions, seed)


def desk_affine(canvas=20, levels=16, fractions=(0.8, 0.1, 0.1), seed=0, source=None):
    """Affine digits on a ``canvas`` built from the 14x14 downsampled sample."""
    raw = source if source is not None else load_mnist_sample()
    small = downsample2(raw)
    warped, _ = make_affine_digits(small, canvas, seed)
    return split_deterministic(quantize(warped, levels), fractions, seed)
