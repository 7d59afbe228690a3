"""Ground-truth and prediction overlays: ground truth in blue, predictions in red."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .data_model import Annotation, ClassCatalog, Detection

GT_COLOR = (0, 0, 255)
PRED_COLOR = (255, 0, 0)
STROKE = 2


def _clipped(box, width: int, height: int):
    """Integer rectangle corners clipped to the canvas, or None when nothing is visible."""
    x0 = max(0, int(np.floor(box.x_min)))
    y0 = max(0, int(np.floor(box.y_min)))
    x1 = min(width - 1, int(np.ceil(box.x_max)) - 1)
    y1 = min(height - 1, int(np.ceil(box.y_max)) - 1)
    if x0 > x1 or y0 > y1:
        return None
    return x0, y0, x1, y1


def draw_overlay(
    image: np.ndarray,
    annotations: Sequence[Annotation],
    detections: Sequence[Detection],
    catalog: ClassCatalog | None = None,
) -> np.ndarray:
    canvas = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    W, H = canvas.size
    for a in annotations:
        rect = _clipped(a.box, W, H)
        if rect:
            draw.rectangle(rect, outline=GT_COLOR, width=STROKE)
    font = ImageFont.load_default()
    for d in detections:
        rect = _clipped(d.box, W, H)
        if not rect:
            continue
        draw.rectangle(rect, outline=PRED_COLOR, width=STROKE)
        name = catalog.name(d.class_id) if catalog is not None else str(d.class_id)
        label = f"{name} {d.score:.2f}"
        left, top, right, bottom = draw.textbbox((0, 0), label, font=font)
        tx = min(rect[0], max(0, W - (right - left)))
        ty = rect[1] - (bottom - top) - STROKE
        if ty < 0:
            ty = rect[1] + STROKE
        draw.text((tx, ty), label, fill=PRED_COLOR, font=font)
    return np.asarray(canvas)


def render_overlay(
    image: np.ndarray,
    annotations: Sequence[Annotation],
    detections: Sequence[Detection],
    output_path,
    catalog: ClassCatalog | None = None,
) -> Path:
    path = Path(output_path)
    Image.fromarray(draw_overlay(image, annotations, detections, catalog)).save(path, format="PNG")
    return path
