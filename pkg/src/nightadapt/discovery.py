"""Object discovery on unlabeled night video.

Pipeline per sequence: low-light enhancement, saliency masking, one candidate
box per salient component, dynamic-programming linking of candidates across
frames, then linear interpolation over frames the linker skipped. The linked
track is used to crop template/search training patches from the original
(un-enhanced) frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from nightadapt import linking
from nightadapt.boxes import BoundingBox, BoxTrack, Provenance
from nightadapt.errors import ConfigError, EmptyTrackError
from nightadapt.imaging import crop_square, to_gray


@dataclass(frozen=True)
class DiscoveryConfig:
    incremental_reward: float = 1.0
    saliency_threshold: float = 0.5
    min_region_area: float = 16.0
    enhancement_stage: str = "gamma"
    gamma: float = 0.4
    saliency_stage: str = "local_contrast"
    # side of the box filter used for the local mean, as a fraction of the
    # shorter image side
    contrast_window: float = 0.25
    blur_sigma: float = 1.0
    max_candidates: Optional[int] = None
    template_size: int = 127
    search_size: int = 255
    context_factor: float = 0.5

    def __post_init__(self):
        if not self.incremental_reward > 0:
            raise ConfigError("incremental_reward must be > 0", key="incremental_reward")
        if not 0.0 <= self.saliency_threshold <= 1.0:
            raise ConfigError("saliency_threshold must lie in [0, 1]", key="saliency_threshold")
        if self.min_region_area < 0:
            raise ConfigError("min_region_area must be >= 0", key="min_region_area")
        if not self.template_size < self.search_size:
            raise ConfigError("template_size must be smaller than search_size", key="template_size")
        if not self.context_factor > 0:
            raise ConfigError("context_factor must be > 0", key="context_factor")
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0", key="gamma")


@dataclass
class CandidateSet:
    """Candidate boxes for every frame of one sequence (a frame may have none)."""

    boxes: list[list[BoundingBox]] = field(default_factory=list)

    @property
    def frame_count(self) -> int:
        return len(self.boxes)

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        counts = np.array([len(b) for b in self.boxes], dtype=np.int64)
        rows = [box.as_tuple() for frame in self.boxes for box in frame]
        return np.array(rows, dtype=np.float64).reshape(-1, 4), counts


# -- pluggable stages -------------------------------------------------------

Enhancer = Callable[[np.ndarray, DiscoveryConfig], np.ndarray]
SaliencyStage = Callable[[np.ndarray, DiscoveryConfig], np.ndarray]


def _normalized(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if np.issubdtype(image.dtype, np.integer):
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def gamma_enhancer(image: np.ndarray, config: DiscoveryConfig) -> np.ndarray:
    return np.power(np.clip(_normalized(image), 0.0, 1.0), config.gamma)


def local_contrast_saliency(image: np.ndarray, config: DiscoveryConfig) -> np.ndarray:
    gray = to_gray(image)
    if config.blur_sigma > 0:
        gray = ndimage.gaussian_filter(gray, config.blur_sigma)
    window = max(3, int(round(config.contrast_window * min(gray.shape))))
    contrast = np.abs(gray - ndimage.uniform_filter(gray, size=window, mode="reflect"))
    peak = contrast.max()
    if peak <= 1e-12:
        return np.zeros(gray.shape, dtype=bool)
    return contrast / peak > config.saliency_threshold


ENHANCERS: dict[str, Enhancer] = {
    "gamma": gamma_enhancer,
    "none": lambda image, config: _normalized(image),
}
SALIENCY_STAGES: dict[str, SaliencyStage] = {"local_contrast": local_contrast_saliency}


def register_enhancer(name: str, fn: Enhancer) -> None:
    """Make an external enhancer (e.g. a learned model) selectable by name."""
    ENHANCERS[name] = fn


def register_saliency(name: str, fn: SaliencyStage) -> None:
    SALIENCY_STAGES[name] = fn


def enhance_frame(image: np.ndarray, config: DiscoveryConfig) -> np.ndarray:
    """Brighten a frame. Output is float on the normalized [0, 1] scale."""
    try:
        stage = ENHANCERS[config.enhancement_stage]
    except KeyError:
        raise ConfigError(f"unknown enhancer {config.enhancement_stage!r}",
                          key="enhancement_stage") from None
    return stage(image, config)


def detect_salient_regions(image: np.ndarray, config: DiscoveryConfig) -> np.ndarray:
    try:
        stage = SALIENCY_STAGES[config.saliency_stage]
    except KeyError:
        raise ConfigError(f"unknown saliency stage {config.saliency_stage!r}",
                          key="saliency_stage") from None
    return np.asarray(stage(image, config), dtype=bool)


def extract_candidate_boxes(mask: np.ndarray, config: DiscoveryConfig) -> list[BoundingBox]:
    """Tight bounding rectangle of every 8-connected component above the area floor."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=np.ones((3, 3)))
    if n == 0:
        return []
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    boxes = []
    for area, sl in zip(areas, ndimage.find_objects(labels)):
        if area < config.min_region_area:
            continue
        ys, xs = sl
        boxes.append((area, BoundingBox(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start)))
    if config.max_candidates is not None:
        boxes.sort(key=lambda item: -item[0])
        boxes = boxes[: config.max_candidates]
    return [b for _, b in boxes]


# -- linking ----------------------------------------------------------------

def normalized_box_distance(current: BoundingBox, reference: BoundingBox) -> float:
    """Squared offset of ``current`` in units of ``reference``'s size, plus squared log size ratios."""
    return linking.normalized_distance(current.x, current.y, current.w, current.h,
                                       reference.x, reference.y, reference.w, reference.h)


def select_box_sequence_dp(candidates: CandidateSet, config: DiscoveryConfig) -> BoxTrack:
    """Pick at most one box per frame maximising the summed linking reward.

    Each chosen box earns ``incremental_reward`` minus its normalized distance
    to the previously chosen box; frames may be skipped.
    """
    boxes, counts = candidates.flat()
    if len(boxes) == 0:
        raise EmptyTrackError("no frame has a candidate box")
    choice, _ = linking.link_boxes(boxes, counts, float(config.incremental_reward))
    out, tags = [], []
    for t, c in enumerate(choice):
        if c < 0:
            out.append(None)
            tags.append(Provenance.MISSING)
        else:
            out.append(candidates.boxes[t][int(c)])
            tags.append(Provenance.SELECTED)
    return BoxTrack(tuple(out), tuple(tags))


def track_reward(track: BoxTrack, incremental_reward: float) -> float:
    """Linking objective of a track, accumulated frame by frame."""
    total, prev = 0.0, None
    for box, tag in zip(track.boxes, track.provenance):
        if tag is not Provenance.SELECTED:
            continue
        if prev is None:
            total = total + incremental_reward
        else:
            total = total + (incremental_reward - normalized_box_distance(box, prev))
        prev = box
    return total


def interpolate_missing(track: BoxTrack) -> BoxTrack:
    anchors = track.selected()
    if not anchors:
        raise EmptyTrackError("track has no selected frame to interpolate from")
    boxes = list(track.boxes)
    tags = list(track.provenance)
    for left, right in zip(anchors, anchors[1:]):
        a = boxes[left].as_array()
        b = boxes[right].as_array()
        for t in range(left + 1, right):
            if tags[t] is Provenance.MISSING:
                frac = (t - left) / (right - left)
                boxes[t] = BoundingBox(*(a + frac * (b - a)))
                tags[t] = Provenance.INTERPOLATED
    return BoxTrack(tuple(boxes), tuple(tags))


# -- patch cropping ---------------------------------------------------------

def context_side(box: BoundingBox, context_factor: float) -> float:
    """Side of the square template region: box plus a margin on every side."""
    margin = context_factor * (box.w + box.h) / 2.0
    return math.sqrt((box.w + 2 * margin) * (box.h + 2 * margin))


def crop_template(frame: np.ndarray, box: BoundingBox, config: DiscoveryConfig) -> np.ndarray:
    return crop_square(frame, box.cx, box.cy, context_side(box, config.context_factor),
                       config.template_size)


def crop_search(frame: np.ndarray, box: BoundingBox, config: DiscoveryConfig,
                shift: tuple[float, float] = (0.0, 0.0)):
    """Search crop around ``box``; returns the patch and ``box`` in patch coordinates.

    ``shift`` moves the crop centre (frame pixels) so the object is off-centre.
    """
    side = context_side(box, config.context_factor) * config.search_size / config.template_size
    cx, cy = box.cx + shift[0], box.cy + shift[1]
    patch = crop_square(frame, cx, cy, side, config.search_size)
    scale = config.search_size / side
    half = (config.search_size - 1) / 2.0
    in_patch = BoundingBox.from_center(half + scale * (box.cx - cx), half + scale * (box.cy - cy),
                                       box.w * scale, box.h * scale)
    return patch, in_patch


def crop_training_pair(frame_a: np.ndarray, box_a: BoundingBox, frame_b: np.ndarray,
                       box_b: BoundingBox, config: DiscoveryConfig):
    """Template patch from ``frame_a`` and search patch from ``frame_b``.

    Pass the original frames, not enhanced ones.
    """
    template = crop_template(frame_a, box_a, config)
    search, _ = crop_search(frame_b, box_b, config)
    return template, search


# -- full pipeline ----------------------------------------------------------

@dataclass
class DiscoveryResult:
    candidates: CandidateSet
    track: BoxTrack
    objective: float


def discover_candidates(frames: Sequence[np.ndarray], config: DiscoveryConfig) -> CandidateSet:
    out = []
    for frame in frames:
        mask = detect_salient_regions(enhance_frame(frame, config), config)
        out.append(extract_candidate_boxes(mask, config))
    return CandidateSet(out)


def discover_track(frames: Sequence[np.ndarray], config: DiscoveryConfig) -> DiscoveryResult:
    candidates = discover_candidates(frames, config)
    selected = select_box_sequence_dp(candidates, config)
    return DiscoveryResult(candidates, interpolate_missing(selected),
                           track_reward(selected, config.incremental_reward))
