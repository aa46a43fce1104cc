"""Axis-aligned boxes on the unit square and intersection-over-union."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Box in xyxy format, coordinates normalized to [0, 1], y growing downward."""

    x1: float
    y1: float
    x2: float
    y2: float

    def validate(self) -> None:
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"invalid box coordinates: {self}")
        if self.area <= 0.0:  # subnormal widths can underflow to zero area
            raise ValueError(f"box has zero area: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def iou(b1: BBox, b2: BBox) -> float:
    """Intersection area over union area, in [0, 1]."""
    ix = min(b1.x2, b2.x2) - max(b1.x1, b2.x1)
    iy = min(b1.y2, b2.y2) - max(b1.y1, b2.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = b1.area + b2.area - inter
    return inter / union


def center_distance(b1: BBox, b2: BBox) -> float:
    (cx1, cy1), (cx2, cy2) = b1.center, b2.center
    return ((cx1 - cx2) ** 2 + (cy1 - cy2) ** 2) ** 0.5
