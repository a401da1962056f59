"""Geometry primitives and the image/annotation containers shared by every module."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SPLITS = ("train", "val", "test")


class DegenerateBoxError(ValueError):
    """Raised when a box collapses to zero area (e.g. after clipping)."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in continuous pixel coordinates, corner form.

    Origin is top-left, x grows rightwards, y downwards. Area is
    ``(xmax - xmin) * (ymax - ymin)``; no "+1" pixel convention.
    """

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self) -> None:
        coords = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise DegenerateBoxError(f"zero-area box {coords}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0.0 when they are disjoint."""
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(N, 4)`` and ``(M, 4)`` corner-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def clip_box(b: BoundingBox, width: float, height: float) -> BoundingBox:
    """Clamp ``b`` to ``[0, width] x [0, height]``.

    Raises DegenerateBoxError if nothing of the box survives.
    """
    if width <= 0 or height <= 0:
        raise ValueError("clip extent must be positive")
    xmin = min(max(b.xmin, 0.0), width)
    xmax = min(max(b.xmax, 0.0), width)
    ymin = min(max(b.ymin, 0.0), height)
    ymax = min(max(b.ymax, 0.0), height)
    if not (xmin < xmax and ymin < ymax):
        raise DegenerateBoxError(f"degenerate after clip: {b.as_tuple()} in {width}x{height}")
    return BoundingBox(xmin, ymin, xmax, ymax)


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit grayscale raster, stored as a read-only ``(height, width)`` uint8 array."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"expected a non-empty 2-D pixel array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if np.issubdtype(arr.dtype, np.integer) and arr.min() >= 0 and arr.max() <= 255:
                arr = arr.astype(np.uint8)
            else:
                raise ValueError(f"pixels must be 8-bit intensities, got dtype {arr.dtype}")
        arr = np.array(arr, dtype=np.uint8, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @classmethod
    def from_list(cls, width: int, height: int, values) -> "GrayImage":
        values = list(values)
        if len(values) != width * height:
            raise ValueError(f"pixel count {len(values)} != {width}x{height}")
        return cls(np.array(values, dtype=np.int64).reshape(height, width))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __hash__(self) -> int:
        return hash((self.pixels.shape, self.pixels.tobytes()))


@dataclass(frozen=True)
class LabeledObject:
    class_name: str
    box: BoundingBox
    difficult: bool = False

    def __post_init__(self) -> None:
        if not self.class_name:
            raise ValueError("class_name must be non-empty")


@dataclass(frozen=True)
class AnnotatedImage:
    """One radiograph plus its labeled objects.

    ``image`` may be ``None`` when only a path reference is carried
    (e.g. after reading CSV or record metadata).
    """

    id: str
    width: int
    height: int
    objects: tuple[LabeledObject, ...] = ()
    split: str = "train"
    image: Optional[GrayImage] = field(default=None, compare=False)
    image_path: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("image id must be non-empty")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.image is not None and (self.image.width, self.image.height) != (self.width, self.height):
            raise ValueError("image raster does not match declared size")
        for obj in self.objects:
            b = obj.box
            if b.xmin < 0 or b.ymin < 0 or b.xmax > self.width or b.ymax > self.height:
                raise ValueError(f"object box {b.as_tuple()} outside {self.width}x{self.height} image {self.id}")

    @property
    def label(self) -> str:
        """Image-level class used by the classifier."""
        return "GSW" if self.objects else "Normal"


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_name: str
    score: float
    box: BoundingBox

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")
