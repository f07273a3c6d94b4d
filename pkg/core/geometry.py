"""
Axis-aligned box arithmetic.

Boxes use continuous corner coordinates (x1, y1, x2, y2) with no "+1" pixel
convention. The scalar and vectorised IoU share one arithmetic order so their
results compare bit-for-bit equal.
"""
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np

from core.errors import InputError


@dataclass(frozen=True, slots=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InputError(f"Box coordinates must be finite, got {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InputError(f"Box must have positive width and height, got {coords}")

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "BoundingBox":
        if len(values) != 4:
            raise InputError(f"Box needs exactly 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def to_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def area(b: BoundingBox) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def _intersection(a: BoundingBox, b: BoundingBox) -> float:
    w = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    h = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = _intersection(a, b)
    return inter / (area(a) + area(b) - inter)


def ioa(det: BoundingBox, region: BoundingBox) -> float:
    """Intersection over the area of `det`. Not symmetric."""
    return _intersection(det, region) / area(det)


def boxes_to_array(boxes: Iterable[BoundingBox]) -> np.ndarray:
    arr = np.array([b.to_list() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def _areas(arr: np.ndarray) -> np.ndarray:
    return (arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    w = np.maximum(0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]))
    h = np.maximum(0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]))
    inter = w * h
    return inter / (_areas(a)[:, None] + _areas(b)[None, :] - inter)


def ioa_matrix(dets: np.ndarray, regions: np.ndarray) -> np.ndarray:
    """Pairwise intersection over detection area, shape (N,M)."""
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
    regions = np.asarray(regions, dtype=np.float64).reshape(-1, 4)
    w = np.maximum(0.0, np.minimum(dets[:, None, 2], regions[None, :, 2]) - np.maximum(dets[:, None, 0], regions[None, :, 0]))
    h = np.maximum(0.0, np.minimum(dets[:, None, 3], regions[None, :, 3]) - np.maximum(dets[:, None, 1], regions[None, :, 1]))
    return (w * h) / _areas(dets)[:, None]
