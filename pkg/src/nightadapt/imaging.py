"""Image decoding, grayscale conversion and square-region cropping."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")

# ITU-R BT.601 luma weights, RGB order
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def load_image(path) -> np.ndarray:
    """Read an 8-bit image file as an RGB ``uint8`` array."""
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def save_image(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(image), 0, 255).astype(np.uint8) if image.dtype != np.uint8 else image
    if arr.ndim == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"cannot write image {path}")


def to_gray(image: np.ndarray) -> np.ndarray:
    """Float64 grayscale on the input's intensity scale."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.float64)
    if image.ndim == 3 and image.shape[2] == 1:
        return image[..., 0].astype(np.float64)
    return image[..., :3].astype(np.float64) @ LUMA_WEIGHTS


def crop_square(image: np.ndarray, cx: float, cy: float, side: float, out_size: int,
                pad_value=None) -> np.ndarray:
    """Resample the square of ``side`` pixels centred on ``(cx, cy)`` to ``out_size``.

    Pixel centres sit on integer coordinates, so with an odd ``out_size`` the
    middle output pixel samples ``(cx, cy)`` exactly. Area outside the image
    is filled with ``pad_value`` (per-channel image mean by default).
    """
    if side <= 0:
        raise ValueError("crop side must be positive")
    img = np.asarray(image)
    if pad_value is None:
        pad_value = img.reshape(-1, img.shape[2]).mean(axis=0) if img.ndim == 3 else float(img.mean())
    scale = out_size / side
    half = (out_size - 1) / 2.0
    m = np.array([[scale, 0.0, half - scale * cx], [0.0, scale, half - scale * cy]])
    border = tuple(float(v) for v in np.atleast_1d(pad_value))
    src = img.astype(np.float32)
    out = cv2.warpAffine(src, m, (out_size, out_size), flags=cv2.INTER_LINEAR,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=border + (0.0,) * (4 - len(border)))
    return out
