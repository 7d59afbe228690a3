"""Small raster helpers: reading, writing, resizing and letterboxing RGB arrays."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .data_model import InvalidInputError


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def image_size(path) -> tuple[int, int]:
    """(width, height) of an image file without decoding the pixels."""
    with Image.open(path) as im:
        return im.size


def save_png(array: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array)).save(path, format="PNG")


def resize(image: np.ndarray, hw: tuple[int, int], interpolation: str = "area") -> np.ndarray:
    h, w = int(hw[0]), int(hw[1])
    if h < 1 or w < 1:
        raise InvalidInputError(f"target size must be positive, got {hw}")
    if image.shape[:2] == (h, w):
        return image.copy()
    flags = {
        "area": cv2.INTER_AREA,
        "linear": cv2.INTER_LINEAR,
        "nearest": cv2.INTER_NEAREST,
    }[interpolation]
    # INTER_AREA degenerates to nearest when enlarging
    if interpolation == "area" and (h > image.shape[0] or w > image.shape[1]):
        flags = cv2.INTER_LINEAR
    return cv2.resize(image, (w, h), interpolation=flags)


def letterbox(image: np.ndarray, hw: tuple[int, int], fill: int = 0) -> np.ndarray:
    """Aspect-preserving resize into ``hw``, centered and padded with ``fill``."""
    th, tw = hw
    h, w = image.shape[:2]
    s = min(th / h, tw / w)
    nh, nw = max(1, min(th, round(h * s))), max(1, min(tw, round(w * s)))
    scaled = resize(image, (nh, nw))
    out = np.full((th, tw) + image.shape[2:], fill, dtype=image.dtype)
    y0, x0 = (th - nh) // 2, (tw - nw) // 2
    out[y0:y0 + nh, x0:x0 + nw] = scaled
    return out
