"""Geometric and vector primitives shared by every other module."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

EPS = 1e-12


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in (left, top, width, height) pixel layout."""

    left: float
    top: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width >= 0 and self.height >= 0):
            raise ValueError(f"box width/height must be >= 0, got {self.width}x{self.height}")

    @property
    def right(self) -> float:
        return self.left + self.width

    @property
    def bottom(self) -> float:
        return self.top + self.height

    @property
    def center(self) -> tuple[float, float]:
        return self.left + 0.5 * self.width, self.top + 0.5 * self.height

    def area(self) -> float:
        return self.width * self.height

    def to_tlwh(self) -> np.ndarray:
        return np.array([self.left, self.top, self.width, self.height], dtype=float)

    def to_xyah(self) -> np.ndarray:
        """Center x, center y, aspect ratio (w/h), height."""
        cx, cy = self.center
        return np.array([cx, cy, self.width / self.height, self.height], dtype=float)

    @classmethod
    def from_xyah(cls, xyah) -> "BoundingBox":
        cx, cy, a, h = (float(x) for x in xyah)
        h = max(h, 0.0)
        w = max(a * h, 0.0)
        return cls(cx - 0.5 * w, cy - 0.5 * h, w, h)

    def scaled(self, factor: float) -> "BoundingBox":
        return BoundingBox(self.left * factor, self.top * factor,
                           self.width * factor, self.height * factor)

    def shifted(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.left + dx, self.top + dy, self.width, self.height)


@dataclass(frozen=True)
class Detection:
    frame: int
    box: BoundingBox
    confidence: float
    embedding: np.ndarray
    gt_identity: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.right, b.right) - max(a.left, b.left)
    h = min(a.bottom, b.bottom) - max(a.top, b.top)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = intersection_area(a, b)
    # areas from edge differences, rounded the same way as the intersection,
    # so that iou(a, a) is exactly 1
    area_a = (a.right - a.left) * (a.bottom - a.top)
    area_b = (b.right - b.left) * (b.bottom - b.top)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)  # rounding can push identical boxes past 1


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU, shape (len(boxes_a), len(boxes_b))."""
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou(a, b)
    return out


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < EPS or nv < EPS:
        return 0.0
    s = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, s))


def l2_normalize(v) -> tuple[np.ndarray, bool]:
    """Return ``(unit_vector, degenerate)``; zero-norm input maps to zeros with ``degenerate=True``."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n < EPS:
        return np.zeros_like(v), True
    return v / n, False


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise l2 normalization with the same zero guard as :func:`l2_normalize`."""
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(n < EPS, 1.0, n)
    return np.where(n < EPS, 0.0, x / safe)
