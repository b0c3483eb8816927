"""Synthetic day/night moving-shape videos for smoke tests and toy-scale experiments.

A night frame is the day rendering darkened by a power curve, dimmed, and
corrupted with sensor noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from nightadapt.boxes import BoundingBox, FrameSequence


@dataclass(frozen=True)
class SceneConfig:
    frame_size: int = 96
    n_frames: int = 20
    min_object: float = 10.0
    max_object: float = 20.0
    max_speed: float = 2.5
    night_gamma: float = 2.2
    night_gain: float = 0.6
    night_noise: float = 6.0


def _background(rng, size):
    base = rng.uniform(60, 150, 3)
    tex = ndimage.gaussian_filter(rng.normal(0, 1, (size, size, 3)), sigma=(6, 6, 0))
    tex = tex / (np.abs(tex).max() + 1e-9)
    return base + 40.0 * tex


def _render(bg, box: BoundingBox, color, shape: str):
    img = bg.copy()
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    if shape == "ellipse":
        inside = ((xx - box.cx) / (box.w / 2)) ** 2 + ((yy - box.cy) / (box.h / 2)) ** 2 <= 1.0
    else:
        inside = (xx >= box.x) & (xx < box.x + box.w) & (yy >= box.y) & (yy < box.y + box.h)
    img[inside] = color
    return img


def darken(image: np.ndarray, config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Day-to-night transform: power curve, gain, additive Gaussian noise."""
    x = np.clip(image, 0, 255) / 255.0
    out = 255.0 * config.night_gain * np.power(x, config.night_gamma)
    out = out + rng.normal(0, config.night_noise, out.shape)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def make_scene(rng: np.random.Generator, config: SceneConfig = SceneConfig()):
    """Float day frames and ground-truth boxes of one moving object."""
    size, n = config.frame_size, config.n_frames
    bg = _background(rng, size)
    w, h = rng.uniform(config.min_object, config.max_object, 2)
    x, y = rng.uniform(0, size - w), rng.uniform(0, size - h)
    vx, vy = rng.uniform(-config.max_speed, config.max_speed, 2)
    color = rng.uniform(170, 255, 3)
    color[rng.integers(3)] = rng.uniform(200, 255)
    shape = "ellipse" if rng.random() < 0.5 else "rect"
    frames, boxes = [], []
    for _ in range(n):
        box = BoundingBox(x, y, w, h)
        frames.append(_render(bg, box, color, shape))
        boxes.append(box)
        x, y = x + vx, y + vy
        if not 0 <= x <= size - w:
            vx = -vx
            x = float(np.clip(x, 0, size - w))
        if not 0 <= y <= size - h:
            vy = -vy
            y = float(np.clip(y, 0, size - h))
    return frames, boxes


def make_sequence(rng: np.random.Generator, domain: str, name: str,
                  config: SceneConfig = SceneConfig()) -> FrameSequence:
    frames, boxes = make_scene(rng, config)
    if domain == "night":
        frames = [darken(f, config, rng) for f in frames]
    elif domain == "day":
        frames = [np.clip(np.rint(f), 0, 255).astype(np.uint8) for f in frames]
    else:
        raise ValueError(f"unknown domain {domain!r}")
    return FrameSequence(name, frames, boxes)


def make_corpus(n_sequences: int, domain: str, seed: int,
                config: SceneConfig = SceneConfig()) -> list[FrameSequence]:
    rng = np.random.default_rng(seed)
    return [make_sequence(rng, domain, f"{domain}_{i:04d}", config) for i in range(n_sequences)]
