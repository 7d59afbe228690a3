"""Geometric and labeling types shared by every stage of the pipeline.

Boxes use half-open continuous pixel coordinates: a box ``(0, 0, 10, 10)``
covers pixel columns and rows ``0..9`` when rasterized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

BACKGROUND = "background"


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class DegenerateBoxError(InvalidInputError):
    """Raised when clipping collapses a box to zero area."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidInputError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidInputError(f"zero-area or inverted box {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def scaled(self, sx: float, sy: float) -> "BoundingBox":
        return BoundingBox(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in ``[0, 1]``."""
    if not isinstance(a, BoundingBox) or not isinstance(b, BoundingBox):
        raise InvalidInputError("iou expects two BoundingBox instances")
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for ``(n, 4)`` and ``(m, 4)`` arrays of ``x0, y0, x1, y1``."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.minimum(1.0, inter / union)


def clip_box(b: BoundingBox, image_w: float, image_h: float) -> BoundingBox:
    """Clamp ``b`` to ``[0, image_w] x [0, image_h]``."""
    if image_w <= 0 or image_h <= 0:
        raise InvalidInputError(f"image size must be positive, got {image_w}x{image_h}")
    x0 = min(max(b.x_min, 0.0), image_w)
    y0 = min(max(b.y_min, 0.0), image_h)
    x1 = min(max(b.x_max, 0.0), image_w)
    y1 = min(max(b.y_max, 0.0), image_h)
    if not (x0 < x1 and y0 < y1):
        raise DegenerateBoxError(f"box {b.as_tuple()} lies outside a {image_w}x{image_h} image")
    if (x0, y0, x1, y1) == b.as_tuple():
        return b
    return BoundingBox(x0, y0, x1, y1)


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered positive class names plus an optional background channel.

    When ``include_background`` is set, background is channel 0 and the
    positive classes occupy channels ``1..N``; otherwise positives occupy
    ``0..N-1``. A ``class_id`` everywhere in the package is a channel index.
    """

    names: tuple[str, ...]
    include_background: bool = True

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 1:
            raise InvalidInputError("a catalog needs at least one positive class")
        if len(set(self.names)) != len(self.names):
            raise InvalidInputError(f"duplicate class names in {self.names}")
        if BACKGROUND in self.names:
            raise InvalidInputError(f"'{BACKGROUND}' is reserved and cannot be a positive class")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def num_channels(self) -> int:
        return len(self.names) + int(self.include_background)

    @property
    def background_id(self) -> int | None:
        return 0 if self.include_background else None

    @property
    def labels(self) -> tuple[str, ...]:
        """Name of every channel, in channel order."""
        return ((BACKGROUND,) if self.include_background else ()) + self.names

    @property
    def positive_ids(self) -> tuple[int, ...]:
        offset = int(self.include_background)
        return tuple(range(offset, offset + len(self.names)))

    def class_id(self, name: str) -> int:
        try:
            return self.labels.index(name)
        except ValueError:
            raise InvalidInputError(f"unknown class name {name!r}") from None

    def name(self, class_id: int) -> str:
        if not 0 <= class_id < self.num_channels:
            raise InvalidInputError(f"class id {class_id} outside catalog")
        return self.labels[class_id]

    def is_positive(self, class_id: int) -> bool:
        return class_id in self.positive_ids

    def mask_label(self, class_id: int) -> int:
        """Value written into ground-truth index masks, where 0 is always background."""
        if not self.is_positive(class_id):
            raise InvalidInputError(f"class id {class_id} is not a positive class")
        return class_id + (0 if self.include_background else 1)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "include_background": self.include_background}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassCatalog":
        return cls(tuple(d["names"]), bool(d.get("include_background", True)))


@dataclass(frozen=True)
class Annotation:
    image_id: str
    class_id: int
    box: BoundingBox


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0) or math.isnan(self.score):
            raise InvalidInputError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class ScoreMask:
    """Per-pixel, per-channel probabilities stored as a read-only ``(C, H, W)`` array."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32, copy=True)
        if v.ndim != 3 or min(v.shape) < 1:
            raise InvalidInputError(f"score mask must be a non-empty (C, H, W) array, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("score mask contains non-finite values")
        # float32 softmax and bilinear resampling can overshoot by a few ulps
        if v.min() < -1e-5 or v.max() > 1 + 1e-5:
            raise InvalidInputError(f"score mask values outside [0, 1]: [{v.min()}, {v.max()}]")
        np.clip(v, 0.0, 1.0, out=v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def channel_sums(self) -> np.ndarray:
        return self.values.sum(axis=0, dtype=np.float64)

    def argmax(self) -> np.ndarray:
        return self.values.argmax(axis=0)

    def __eq__(self, other):
        if not isinstance(other, ScoreMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.values, other.values))

    __hash__ = None


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)
