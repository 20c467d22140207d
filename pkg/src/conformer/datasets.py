"""Datasets: a synthetic shape generator, PNG class folders, and evaluation-time transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

SHAPES = ("circle", "square", "triangle", "cross", "ring", "bar")
SUPERSAMPLE = 4


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Images N x 3 x S x S (float32), integer labels, optional N x 4 pixel boxes (x0, y0, x1, y1), end exclusive."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    boxes: np.ndarray | None = None
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[2] != self.images.shape[3]:
            raise DatasetError(f"images must be N x C x S x S, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetError("labels and images differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes, self.split,
                       None if self.boxes is None else self.boxes[index], list(self.class_names))


def normalize(image: np.ndarray) -> np.ndarray:
    """Per image and channel: mean 0.5, standard deviation 0.25."""
    mean = image.mean(axis=(-2, -1), keepdims=True)
    std = image.std(axis=(-2, -1), keepdims=True)
    return ((image - mean) / np.maximum(std, 1e-6) * 0.25 + 0.5).astype(np.float32)


def _inside(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership in the unit-radius shape, (u, v) in shape-local coordinates."""
    if kind == "circle":
        return u * u + v * v <= 1.0
    if kind == "square":
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if kind == "triangle":
        # equilateral, circumradius 1, apex up
        return (v >= -0.5) & (np.sqrt(3.0) * np.abs(u) <= 1.0 - v)
    if kind == "cross":
        arm = 0.28
        return ((np.abs(u) <= arm) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= arm) & (np.abs(u) <= 1.0))
    if kind == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.45)
    if kind == "bar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.3)
    raise DatasetError(f"unknown shape {kind!r}")


def render_shape(kind: str, size: int, cx: float, cy: float, radius: float, angle: float) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of one shape, by supersampling each pixel."""
    s = SUPERSAMPLE
    out = np.zeros((size, size))
    # every shape lies within its circumscribed circle, so only that square is sampled
    x0, x1 = max(int(cx - radius) - 1, 0), min(int(cx + radius) + 2, size)
    y0, y1 = max(int(cy - radius) - 1, 0), min(int(cy + radius) + 2, size)
    if x0 >= x1 or y0 >= y1:
        return out
    xs = x0 + (np.arange((x1 - x0) * s) + 0.5) / s
    ys = y0 + (np.arange((y1 - y0) * s) + 0.5) / s
    x, y = np.meshgrid(xs, ys)
    c, sn = math.cos(angle), math.sin(angle)
    dx, dy = (x - cx) / radius, (cy - y) / radius
    u, v = c * dx + sn * dy, -sn * dx + c * dy
    mask = _inside(kind, u, v).astype(np.float64)
    out[y0:y1, x0:x1] = mask.reshape(y1 - y0, s, x1 - x0, s).mean(axis=(1, 3))
    return out


def synth_dataset(kind: str = "shapes", classes: int = 4, size: int = 64, count: int = 4096, seed: int = 7,
                  split: str = "train") -> Dataset:
    """Shapes on noise backgrounds, one shape class per label.

    Each shape sits at a uniformly random rotation and at a position drawn
    uniformly from a disc about the image center small enough that the
    shape stays inside the inscribed circle, so the label distribution is
    unchanged by rotating the whole image about its center.
    """
    if kind != "shapes":
        raise DatasetError(f"unknown synthetic dataset kind {kind!r}")
    if not 2 <= classes <= len(SHAPES):
        raise DatasetError(f"classes must be in [2, {len(SHAPES)}]")
    rng = np.random.default_rng(seed)
    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = rng.integers(0, classes, size=count)
    boxes = np.empty((count, 4), dtype=np.int64)
    half = size / 2.0
    for i in range(count):
        radius = rng.uniform(0.16, 0.3) * size
        reach = max(half - radius - 1.0, 0.0)
        rho = reach * math.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * math.pi)
        cx, cy = half + rho * math.cos(phi), half + rho * math.sin(phi)
        angle = rng.uniform(0, 2 * math.pi)
        cover = render_shape(SHAPES[labels[i]], size, cx, cy, radius, angle)
        background = rng.uniform(0.0, 0.4, size=3)[:, None, None] + rng.normal(0.0, 0.08, size=(3, size, size))
        color = rng.uniform(0.6, 1.0, size=3)[:, None, None]
        img = background * (1.0 - cover) + color * cover
        images[i] = normalize(img)
        ys, xs = np.nonzero(cover > 0)
        boxes[i] = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
    return Dataset(images, labels.astype(np.int64), classes, split, boxes, list(SHAPES[:classes]))


def load_image_folder(path: str | Path, split: str = "train") -> Dataset:
    """One subdirectory per class holding PNG files; classes and files in sorted order."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root} has no class subdirectories")
    images, labels = [], []
    size = None
    for label, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.suffix.lower() == ".png")
        if not files:
            raise DatasetError(f"class directory {d} holds no PNG images")
        for f in files:
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            h, w = arr.shape[:2]
            if h != w:
                raise DatasetError(f"{f} is {w}x{h}; images must be square")
            if size is None:
                size = h
            elif h != size:
                raise DatasetError(f"{f} is {h}x{h} but earlier images are {size}x{size}; no implicit resizing")
            images.append(normalize(arr.transpose(2, 0, 1)))
            labels.append(label)
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), len(class_dirs), split,
                   class_names=[d.name for d in class_dirs])


def rotation_matrix(degrees: float) -> np.ndarray:
    rad = math.radians(degrees)
    # snap so multiples of 90 degrees are exact index permutations
    c, s = round(math.cos(rad), 12), round(math.sin(rad), 12)
    return np.array([[c, -s], [s, c]])


def rotate_images(images: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image center, zero fill outside the source.

    Positive angles turn the picture counter-clockwise, as ``np.rot90`` does.
    """
    if degrees % 360 == 0:
        return images.copy()
    h, w = images.shape[-2:]
    rot = rotation_matrix(degrees)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    # output (row, col) samples the input at rot^T applied about the center
    matrix = rot.T
    offset = center - matrix @ center
    out = np.empty_like(images)
    for idx in np.ndindex(images.shape[:-2]):
        out[idx] = ndimage.affine_transform(images[idx], matrix, offset=offset, order=1, mode="constant", cval=0.0)
    return out


def resize_images(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of N x C x H x W images to size x size."""
    h, w = images.shape[-2:]
    if (h, w) == (size, size):
        return images.copy()
    zoom = (1,) * (images.ndim - 2) + (size / h, size / w)
    return ndimage.zoom(images, zoom, order=1, mode="nearest", grid_mode=True).astype(images.dtype)


def synth_split(train: int = 4096, test: int = 512, classes: int = 4, size: int = 64,
                seed: int = 7) -> tuple[Dataset, Dataset]:
    """One seeded draw of ``train + test`` images, split in order into train and test sets."""
    full = synth_dataset(classes=classes, size=size, count=train + test, seed=seed)
    tr, te = full.subset(slice(0, train)), full.subset(slice(train, train + test))
    tr.split, te.split = "train", "test"
    return tr, te
