"""One-pass evaluation, ranking metrics, illumination attributes and feature projection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol, Sequence, Union

import numpy as np
import torch

from nightadapt.boxes import BoundingBox, FrameSequence, iou_array
from nightadapt.discovery import DiscoveryConfig, context_side
from nightadapt.errors import DataFormatError
from nightadapt.imaging import crop_square, to_gray
from nightadapt.model import SiameseNet, cross_correlate, decode_boxes

PRECISION_THRESHOLD = 20.0
NORM_PRECISION_THRESHOLD = 0.2
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_CURVE_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
NORM_PRECISION_CURVE_THRESHOLDS = np.arange(0, 51, dtype=np.float64) / 100.0

LOW_AMBIENT_INTENSITY = 20.0
DEFAULT_IV_THRESHOLD = 30.0
LONG_TERM_MIN_FRAMES = 1400


class Tracker(Protocol):
    def init(self, frame: np.ndarray, box: BoundingBox) -> None: ...

    def update(self, frame: np.ndarray) -> Optional[BoundingBox]: ...


@dataclass
class TrackResult:
    """Per-frame predictions (``n x 4``); a NaN row marks a frame with no valid box."""

    boxes: np.ndarray
    tracker_name: str
    sequence_name: str


BoxesLike = Union[TrackResult, np.ndarray, Sequence[BoundingBox]]


def as_box_array(boxes: BoxesLike) -> np.ndarray:
    if isinstance(boxes, TrackResult):
        return np.asarray(boxes.boxes, dtype=np.float64).reshape(-1, 4)
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64).reshape(-1, 4)
    return np.array([b.as_tuple() if b is not None else (np.nan,) * 4 for b in boxes],
                    dtype=np.float64).reshape(-1, 4)


def _box_or_nan(box) -> tuple[float, ...]:
    if not isinstance(box, BoundingBox):
        try:
            box = BoundingBox(*box)
        except (TypeError, ValueError):
            return (np.nan,) * 4
    return box.as_tuple()


def run_ope(sequence: FrameSequence, tracker: Tracker, tracker_name: str = "tracker") -> TrackResult:
    """Initialise on frame 0's ground truth, then track every later frame without resets."""
    if sequence.ground_truth is None:
        raise DataFormatError(f"sequence {sequence.name!r} has no ground truth")
    init_box = sequence.ground_truth[0]
    tracker.init(sequence.frame(0), init_box)
    out = [init_box.as_tuple()]
    for i in range(1, len(sequence)):
        out.append(_box_or_nan(tracker.update(sequence.frame(i))))
    return TrackResult(np.array(out, dtype=np.float64), tracker_name, sequence.name)


def _pair(result: BoxesLike, gt: BoxesLike) -> tuple[np.ndarray, np.ndarray]:
    pred, ref = as_box_array(result), as_box_array(gt)
    if len(pred) != len(ref):
        raise DataFormatError(f"{len(pred)} predictions for {len(ref)} ground-truth boxes")
    return pred, ref


def center_errors(result: BoxesLike, gt: BoxesLike, normalized: bool = False) -> np.ndarray:
    pred, ref = _pair(result, gt)
    dx = (pred[:, 0] + pred[:, 2] / 2) - (ref[:, 0] + ref[:, 2] / 2)
    dy = (pred[:, 1] + pred[:, 3] / 2) - (ref[:, 1] + ref[:, 3] / 2)
    if normalized:
        dx, dy = dx / ref[:, 2], dy / ref[:, 3]
    err = np.sqrt(dx * dx + dy * dy)
    return np.where(np.isnan(err), np.inf, err)


def overlaps(result: BoxesLike, gt: BoxesLike) -> np.ndarray:
    pred, ref = _pair(result, gt)
    return iou_array(np.nan_to_num(pred, nan=0.0), ref)


def precision_at(result: BoxesLike, gt: BoxesLike, threshold: float = PRECISION_THRESHOLD) -> float:
    err = center_errors(result, gt)
    return float(np.mean(err <= threshold)) if len(err) else 0.0


def normalized_precision_at(result: BoxesLike, gt: BoxesLike,
                            threshold: float = NORM_PRECISION_THRESHOLD) -> float:
    err = center_errors(result, gt, normalized=True)
    return float(np.mean(err <= threshold)) if len(err) else 0.0


def success_curve(result: BoxesLike, gt: BoxesLike, thresholds=SUCCESS_THRESHOLDS) -> np.ndarray:
    ov = overlaps(result, gt)
    return np.array([np.mean(ov >= t) if len(ov) else 0.0 for t in thresholds])


def success_auc(result: BoxesLike, gt: BoxesLike) -> float:
    return float(np.mean(success_curve(result, gt)))


def precision_curve(result, gt, thresholds=PRECISION_CURVE_THRESHOLDS) -> np.ndarray:
    err = center_errors(result, gt)
    return np.array([np.mean(err <= t) for t in thresholds])


def normalized_precision_curve(result, gt, thresholds=NORM_PRECISION_CURVE_THRESHOLDS) -> np.ndarray:
    err = center_errors(result, gt, normalized=True)
    return np.array([np.mean(err <= t) for t in thresholds])


@dataclass
class Scores:
    precision: float
    norm_precision: float
    success: float
    frames: int


def score(results: Sequence[TrackResult], sequences: Sequence[FrameSequence]) -> Scores:
    """Metrics over all frames of all sequences pooled together (frame-weighted)."""
    if not results:
        return Scores(0.0, 0.0, 0.0, 0)
    pred = np.concatenate([as_box_array(r) for r in results])
    gt = np.concatenate([s.gt_array() for s in sequences])
    return Scores(precision_at(pred, gt), normalized_precision_at(pred, gt), success_auc(pred, gt), len(gt))


# -- attributes ----------------------------------------------------------------------

def illuminance_intensity(frame: np.ndarray, box: BoundingBox) -> float:
    """Mean grayscale intensity of the box enlarged twofold about its centre, clipped to the frame."""
    gray = to_gray(frame)
    h, w = gray.shape
    x0 = int(np.clip(round(box.cx - box.w), 0, w - 1))
    y0 = int(np.clip(round(box.cy - box.h), 0, h - 1))
    x1 = int(np.clip(round(box.cx + box.w), x0 + 1, w))
    y1 = int(np.clip(round(box.cy + box.h), y0 + 1, h))
    return float(gray[y0:y1, x0:x1].mean())


@dataclass
class AttributeReport:
    sequence_name: str
    illuminance: np.ndarray
    ambient_intensity: float
    max_difference: float
    labels: frozenset[str] = field(default_factory=frozenset)


def label_attributes(sequence: FrameSequence, iv_threshold: float = DEFAULT_IV_THRESHOLD) -> AttributeReport:
    """Derive the LAI and IV illumination tags from per-frame local intensity."""
    if sequence.ground_truth is None:
        raise DataFormatError(f"sequence {sequence.name!r} has no ground truth")
    per_frame = np.array([illuminance_intensity(sequence.frame(i), box)
                          for i, box in enumerate(sequence.ground_truth)])
    return attributes_from_intensities(sequence.name, per_frame, iv_threshold)


def attributes_from_intensities(name: str, per_frame: np.ndarray,
                                iv_threshold: float = DEFAULT_IV_THRESHOLD) -> AttributeReport:
    per_frame = np.asarray(per_frame, dtype=np.float64)
    ambient = float(per_frame.mean())
    diff = float(per_frame.max() - per_frame.min())
    labels = set()
    if ambient < LOW_AMBIENT_INTENSITY:
        labels.add("LAI")
    if diff > iv_threshold:
        labels.add("IV")
    return AttributeReport(name, per_frame, ambient, diff, frozenset(labels))


def longterm_subset(sequences: Iterable[FrameSequence], min_frames: int = LONG_TERM_MIN_FRAMES):
    return [s for s in sequences if len(s) > min_frames]


# -- feature projection ------------------------------------------------------------------

def project_features_2d(features: Sequence, tags: Sequence[str]):
    """Flatten, mean-centre and project onto the top two principal axes.

    Returns ``(points, tags)`` with ``points`` an ``n x 2`` array.
    """
    if len(features) < 3:
        raise DataFormatError("need at least 3 features to project")
    if len(tags) != len(features):
        raise DataFormatError("one domain tag per feature required")
    mats = [np.asarray(getattr(f, "data", f), dtype=np.float64).ravel() for f in features]
    if len({m.size for m in mats}) != 1:
        raise DataFormatError("features must share one shape")
    x = np.stack(mats)
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    basis = vt[:2]
    if basis.shape[0] < 2:
        basis = np.vstack([basis, np.zeros((2 - basis.shape[0], x.shape[1]))])
    return x @ basis.T, list(tags)


def domain_probe_accuracy(day: np.ndarray, night: np.ndarray, seed: int = 0,
                          test_fraction: float = 0.5) -> float:
    """Held-out accuracy of a logistic-regression domain classifier on feature vectors."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    x = np.concatenate([day, night]).reshape(len(day) + len(night), -1)
    y = np.r_[np.zeros(len(day)), np.ones(len(night))]
    xtr, xte, ytr, yte = train_test_split(x, y, test_size=test_fraction, random_state=seed, stratify=y)
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    probe.fit(xtr, ytr)
    return float(probe.score(xte, yte))


# -- Siamese tracker inference ------------------------------------------------------------

class SiameseTracker:
    """Runs a trained :class:`SiameseNet` frame by frame."""

    def __init__(self, net: SiameseNet, crop: DiscoveryConfig, window_influence: float = 0.3,
                 size_lr: float = 0.5):
        self.net = net.eval()
        self.crop = crop
        self.window_influence = window_influence
        self.size_lr = size_lr
        self._template = None
        self.box = None

    def _tensor(self, patch):
        return torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float32)).permute(2, 0, 1)[None]

    @torch.no_grad()
    def init(self, frame, box: BoundingBox) -> None:
        self.frame_shape = frame.shape[:2]
        side = context_side(box, self.crop.context_factor)
        patch = crop_square(frame, box.cx, box.cy, side, self.crop.template_size)
        self._template = self.net.bridged(self.net.features(self._tensor(patch)))
        self.box = box
        self._window = None

    @torch.no_grad()
    def update(self, frame) -> BoundingBox:
        box = self.box
        side = context_side(box, self.crop.context_factor) * self.crop.search_size / self.crop.template_size
        patch = crop_square(frame, box.cx, box.cy, side, self.crop.search_size)
        x = self.net.bridged(self.net.features(self._tensor(patch)))
        cls, reg = self.net.head(cross_correlate(self._template, x))
        prob = torch.sigmoid(cls[0, 0]).numpy().astype(np.float64)
        if self._window is None or self._window.shape != prob.shape:
            self._window = np.outer(np.hanning(prob.shape[0] + 2)[1:-1], np.hanning(prob.shape[1] + 2)[1:-1])
        penalized = prob * (1 - self.window_influence) + self._window * self.window_influence
        r, c = np.unravel_index(int(np.argmax(penalized)), prob.shape)
        pred = decode_boxes(reg, self.net.stride, self.crop.search_size)[0, :, r, c].numpy().astype(np.float64)
        scale = self.crop.search_size / side
        half = (self.crop.search_size - 1) / 2.0
        cx = box.cx + (pred[0] + pred[2] / 2 - half) / scale
        cy = box.cy + (pred[1] + pred[3] / 2 - half) / scale
        lr = self.size_lr * prob[r, c]
        w = box.w * (1 - lr) + pred[2] / scale * lr
        h = box.h * (1 - lr) + pred[3] / scale * lr
        fh, fw = self.frame_shape
        cx, cy = float(np.clip(cx, 0, fw)), float(np.clip(cy, 0, fh))
        w, h = float(np.clip(w, 4, fw)), float(np.clip(h, 4, fh))
        self.box = BoundingBox.from_center(cx, cy, w, h)
        return self.box


class OracleTracker:
    """Replays ground truth; a pipeline check, not a tracker."""

    def __init__(self, boxes: Sequence[BoundingBox]):
        self.boxes = list(boxes)
        self.i = 0

    def init(self, frame, box):
        self.i = 0

    def update(self, frame):
        self.i += 1
        return self.boxes[self.i]


def evaluate(sequences: Sequence[FrameSequence], make_tracker: Callable[[FrameSequence], Tracker],
             tracker_name: str = "tracker"):
    results = [run_ope(seq, make_tracker(seq), tracker_name) for seq in sequences]
    return results, score(results, sequences)
