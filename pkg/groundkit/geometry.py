"""Continuous box geometry shared by every other module.

Boxes are closed intervals in pixel space, width = x1 - x0 (no +1 pixel
convention). Zero-area boxes are legal values.
"""
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple
import math

import numpy as np

from groundkit.errors import ValidationError


@dataclass(frozen=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValidationError(f"Image dimensions must be integers: {self.width}x{self.height}")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"Image dimensions must be positive: {self.width}x{self.height}")

    @classmethod
    def parse(cls, text: str) -> "ImageDims":
        """Parse a 'WxH' string such as '512x512'."""
        parts = text.lower().split('x')
        if len(parts) != 2:
            raise ValidationError(f"Expected dimensions as WxH, got {text!r}")
        try:
            return cls(int(parts[0]), int(parts[1]))
        except ValueError:
            raise ValidationError(f"Expected dimensions as WxH, got {text!r}")

    def __str__(self):
        return f"{self.width}x{self.height}"


@dataclass(frozen=True)
class PixelBox:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def translate(self, dx: float, dy: float) -> "PixelBox":
        return PixelBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    def scale(self, factor: float) -> "PixelBox":
        return PixelBox(self.x0 * factor, self.y0 * factor, self.x1 * factor, self.y1 * factor)

    def has_nan(self) -> bool:
        return any(math.isnan(v) for v in self.as_tuple())

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "PixelBox":
        return cls(x, y, x + w, y + h)


@dataclass(frozen=True)
class BoxReport:
    """Result of validate_box: an empty violation list means the box is valid."""
    violations: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def valid(self) -> bool:
        return not self.violations


def area(b: PixelBox) -> float:
    return max(0.0, b.x1 - b.x0) * max(0.0, b.y1 - b.y0)


def center(b: PixelBox) -> Tuple[float, float]:
    return ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0)


def diagonal(b: PixelBox) -> float:
    return math.hypot(b.width, b.height)


def iou(a: PixelBox, b: PixelBox) -> float:
    """Intersection over union; 0 when the union area is 0."""
    iw = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    ih = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = iw * ih
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def generalized_iou(a: PixelBox, b: PixelBox) -> float:
    """GIoU in [-1, 1]: IoU minus the share of the enclosing box not covered by the union."""
    iw = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    ih = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = iw * ih
    union = area(a) + area(b) - inter
    enclosing = (max(a.x1, b.x1) - min(a.x0, b.x0)) * (max(a.y1, b.y1) - min(a.y0, b.y0))
    if enclosing <= 0.0:
        return 0.0
    overlap = inter / union if union > 0.0 else 0.0
    return overlap - (enclosing - union) / enclosing


def boxes_to_array(boxes: Sequence[PixelBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def iou_matrix(a: Sequence[PixelBox], b: Sequence[PixelBox]) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b)); same arithmetic as iou()."""
    aa = boxes_to_array(a)
    bb = boxes_to_array(b)
    if len(aa) == 0 or len(bb) == 0:
        return np.zeros((len(aa), len(bb)), dtype=np.float64)

    ix0 = np.maximum(aa[:, None, 0], bb[None, :, 0])
    iy0 = np.maximum(aa[:, None, 1], bb[None, :, 1])
    ix1 = np.minimum(aa[:, None, 2], bb[None, :, 2])
    iy1 = np.minimum(aa[:, None, 3], bb[None, :, 3])
    inter = np.maximum(0.0, ix1 - ix0) * np.maximum(0.0, iy1 - iy0)

    area_a = np.maximum(0.0, aa[:, 2] - aa[:, 0]) * np.maximum(0.0, aa[:, 3] - aa[:, 1])
    area_b = np.maximum(0.0, bb[:, 2] - bb[:, 0]) * np.maximum(0.0, bb[:, 3] - bb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter

    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return np.minimum(out, 1.0)


def validate_box(b: PixelBox, dims: ImageDims) -> BoxReport:
    """Report every violated invariant without touching the input."""
    violations: List[str] = []
    if b.has_nan():
        violations.append("nan-coordinate")
        return BoxReport(tuple(violations))
    if b.x0 > b.x1:
        violations.append("inverted-x")
    if b.y0 > b.y1:
        violations.append("inverted-y")
    if min(b.x0, b.x1) < 0 or max(b.x0, b.x1) > dims.width:
        violations.append("out-of-bounds-x")
    if min(b.y0, b.y1) < 0 or max(b.y0, b.y1) > dims.height:
        violations.append("out-of-bounds-y")
    return BoxReport(tuple(violations))
