"""Geometric and tensor value types plus the box arithmetic used everywhere else."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

ImageRef = Union[str, Path, np.ndarray]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, top-left corner plus width and height, in pixels.

    Coordinates are continuous; rounding only happens when an image is cropped.
    """

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box width and height must be positive: {vals}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    @property
    def center(self) -> tuple[float, float]:
        return self.cx, self.cy

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.x, self.y, self.w, self.h

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x + dx, self.y + dy, self.w, self.h)

    def scale(self, factor: float) -> "BoundingBox":
        """Scale coordinates and extent together (a change of pixel units)."""
        return BoundingBox(self.x * factor, self.y * factor, self.w * factor, self.h * factor)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corner differences, so iou(a, a) == 1 exactly
    area_a = ((a.x + a.w) - a.x) * ((a.y + a.h) - a.y)
    area_b = ((b.x + b.w) - b.x) * ((b.y + b.h) - b.y)
    return min(1.0, inter / (area_a + area_b - inter))


def center_error(a: BoundingBox, b: BoundingBox) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def iou_array(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Row-wise IoU for two ``(n, 4)`` arrays of ``x, y, w, h`` boxes.

    Rows with non-positive width or height count as zero overlap.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(pred[:, 0] + pred[:, 2], gt[:, 0] + gt[:, 2]) - np.maximum(pred[:, 0], gt[:, 0])
    ih = np.minimum(pred[:, 1] + pred[:, 3], gt[:, 1] + gt[:, 3]) - np.maximum(pred[:, 1], gt[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_p = ((pred[:, 0] + pred[:, 2]) - pred[:, 0]) * ((pred[:, 1] + pred[:, 3]) - pred[:, 1])
    area_g = ((gt[:, 0] + gt[:, 2]) - gt[:, 0]) * ((gt[:, 1] + gt[:, 3]) - gt[:, 1])
    union = area_p + area_g - inter
    valid = (pred[:, 2] > 0) & (pred[:, 3] > 0) & (gt[:, 2] > 0) & (gt[:, 3] > 0)
    out = np.zeros(len(pred))
    np.divide(inter, union, out=out, where=valid & (union > 0))
    return np.minimum(out, 1.0)


class Provenance(str, enum.Enum):
    SELECTED = "selected"
    INTERPOLATED = "interpolated"
    MISSING = "missing"


@dataclass(frozen=True)
class BoxTrack:
    """One optional box per frame, tagged with where it came from."""

    boxes: tuple[Optional[BoundingBox], ...]
    provenance: tuple[Provenance, ...]

    def __post_init__(self):
        if len(self.boxes) != len(self.provenance):
            raise ValueError("boxes and provenance must have equal length")
        for box, tag in zip(self.boxes, self.provenance):
            if (tag is Provenance.MISSING) != (box is None):
                raise ValueError("a frame carries a box iff it is not tagged missing")

    @classmethod
    def from_lists(cls, boxes: Sequence[Optional[BoundingBox]], provenance: Sequence[Provenance]):
        return cls(tuple(boxes), tuple(Provenance(p) for p in provenance))

    def __len__(self) -> int:
        return len(self.boxes)

    def present(self) -> list[int]:
        """Frame indices that carry a box."""
        return [i for i, b in enumerate(self.boxes) if b is not None]

    def selected(self) -> list[int]:
        return [i for i, p in enumerate(self.provenance) if p is Provenance.SELECTED]


class FeatureRole(str, enum.Enum):
    BACKBONE_BLOCK = "backbone_block"
    CONCATENATED = "concatenated"
    BRIDGED_TEMPLATE = "bridged_template"
    BRIDGED_SEARCH = "bridged_search"
    CORRELATION = "correlation"


@dataclass(frozen=True)
class FeatureMap:
    """A single ``C x H x W`` feature tensor with the stage that produced it."""

    data: np.ndarray
    role: FeatureRole

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"feature map must be C x H x W with positive sizes, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map has non-finite entries")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(np.asarray(self.data).shape)


@dataclass
class FrameSequence:
    """Frames of one video, with optional ground truth and attribute tags.

    ``frames`` holds file paths or already-decoded RGB arrays.
    """

    name: str
    frames: list[ImageRef]
    ground_truth: Optional[list[BoundingBox]] = None
    attributes: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError(f"sequence {self.name!r} has no frames")
        if self.ground_truth is not None and len(self.ground_truth) != len(self.frames):
            raise ValueError(
                f"sequence {self.name!r}: {len(self.ground_truth)} boxes for {len(self.frames)} frames"
            )
        self.attributes = frozenset(self.attributes)

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, index: int) -> np.ndarray:
        """Decoded RGB ``uint8`` image for ``index``."""
        from nightadapt.imaging import load_image

        ref = self.frames[index]
        if isinstance(ref, np.ndarray):
            return ref
        return load_image(ref)

    def gt_array(self) -> np.ndarray:
        if self.ground_truth is None:
            raise ValueError(f"sequence {self.name!r} has no ground truth")
        return np.array([b.as_tuple() for b in self.ground_truth], dtype=np.float64)
