"""Axis-aligned bounding boxes, detections, and IoU geometry.

Coordinates are continuous image coordinates: pixel (row r, col c) covers
the square [c, c+1] x [r, r+1], so a W x H image spans [0, W] x [0, H].
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box for the single detection class "satellite"."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ConfigError(
                f"degenerate box: ({self.x_min}, {self.y_min}, "
                f"{self.x_max}, {self.y_max})"
            )
        if self.class_id != 0:
            raise ConfigError(f"class_id must be 0, got {self.class_id}")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def center(self):
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    @property
    def area(self):
        return self.width * self.height

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class Detection:
    """A detector output: one box plus a sigmoid confidence in [0, 1]."""

    box: BoundingBox
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ConfigError(f"confidence outside [0, 1]: {self.confidence}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two corner-format box arrays.

    a: (N, 4), b: (M, 4) as [x_min, y_min, x_max, y_max]; returns (N, M).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0.0, inter / union, 0.0)
    return out


def boxes_to_array(boxes) -> np.ndarray:
    """List of BoundingBox -> (N, 4) float array (empty -> (0, 4))."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def array_to_boxes(arr) -> list:
    return [BoundingBox(*row) for row in np.asarray(arr, dtype=np.float64).reshape(-1, 4)]


def clip_box(x_min, y_min, x_max, y_max, width, height):
    """Clamp corners to [0, width] x [0, height]; returns None if nothing is left."""
    x0 = min(max(x_min, 0.0), float(width))
    y0 = min(max(y_min, 0.0), float(height))
    x1 = min(max(x_max, 0.0), float(width))
    y1 = min(max(y_max, 0.0), float(height))
    if x0 >= x1 or y0 >= y1:
        return None
    return (x0, y0, x1, y1)
