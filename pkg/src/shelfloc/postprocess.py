"""Score masks to scored boxes, plus the sliding-window + NMS baseline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from scipy import ndimage
from torchvision.ops import roi_align

from .data_model import (
    BoundingBox,
    ClassCatalog,
    Detection,
    InvalidInputError,
    ScoreMask,
    clip_box,
    iou,
)
from .fcn import FcnModel, classify_batch, images_to_tensor

DEFAULT_SCALES = (0.8, 1.0, 1.25)
DEFAULT_ASPECT_RATIOS = (0.5, 0.75, 1.0, 1.33, 2.0)


@dataclass(frozen=True)
class DetectParams:
    threshold: float = 0.5
    class_thresholds: Mapping[int, float] = field(default_factory=dict)
    connectivity: int = 8
    min_area_fraction: float = 1e-4
    min_area: float | None = None

    def __post_init__(self):
        for t in (self.threshold, *self.class_thresholds.values()):
            _check_threshold(t)
        if self.connectivity not in (4, 8):
            raise InvalidInputError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.min_area_fraction < 0 or (self.min_area is not None and self.min_area < 0):
            raise InvalidInputError("minimum component area must be non-negative")

    def threshold_for(self, class_id: int) -> float:
        return self.class_thresholds.get(class_id, self.threshold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_thresholds"] = {str(k): v for k, v in self.class_thresholds.items()}
        return d


@dataclass(frozen=True)
class Component:
    pixels: np.ndarray = field(repr=False)  # (k, 2) array of (row, col)
    box: BoundingBox
    area: int


def _check_threshold(t: float) -> None:
    if not 0 < t < 1:
        raise InvalidInputError(f"threshold must be in (0, 1), got {t}")


def binarize(mask_channel: np.ndarray, threshold: float) -> np.ndarray:
    _check_threshold(threshold)
    return np.asarray(mask_channel) >= threshold


def _structure(connectivity: int) -> np.ndarray:
    if connectivity not in (4, 8):
        raise InvalidInputError(f"connectivity must be 4 or 8, got {connectivity}")
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def label_components(grid: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    labels, n = ndimage.label(np.asarray(grid, dtype=bool), structure=_structure(connectivity))
    return labels, n


def connected_components(grid: np.ndarray, connectivity: int = 8) -> list[Component]:
    """Maximal connected sets of true cells, in raster order of their first pixel."""
    labels, n = label_components(grid, connectivity)
    out = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        rows, cols = np.nonzero(labels[sl] == k)
        rows = rows + sl[0].start
        cols = cols + sl[1].start
        box = BoundingBox(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
        out.append(Component(np.stack([rows, cols], axis=1), box, int(rows.size)))
    return out


def detections_from_mask(
    mask: ScoreMask,
    params: DetectParams,
    image_id: str,
    catalog: ClassCatalog | None = None,
    image_hw: Sequence[int] | None = None,
) -> list[Detection]:
    """One detection per surviving connected component of each positive channel.

    Mask cells are stretched uniformly over ``image_hw`` (defaults to the mask
    size); the score is the component's maximum probability.
    """
    H, W = (mask.height, mask.width) if image_hw is None else (int(image_hw[0]), int(image_hw[1]))
    sy, sx = H / mask.height, W / mask.width
    min_area = params.min_area if params.min_area is not None else params.min_area_fraction * H * W
    if catalog is not None:
        if catalog.num_channels != mask.channels:
            raise InvalidInputError(f"mask has {mask.channels} channels, catalog {catalog.num_channels}")
        positives = catalog.positive_ids
    else:
        positives = range(mask.channels)
    dets = []
    for cid in positives:
        channel = mask.values[cid]
        thr = params.threshold_for(cid)
        labels, n = label_components(binarize(channel, thr), params.connectivity)
        if n == 0:
            continue
        index = np.arange(1, n + 1)
        areas = ndimage.sum_labels(np.ones_like(channel), labels, index)
        maxima = ndimage.maximum(channel, labels, index)
        for k, sl in enumerate(ndimage.find_objects(labels)):
            if areas[k] * sx * sy < min_area:
                continue
            box = BoundingBox(sl[1].start * sx, sl[0].start * sy, sl[1].stop * sx, sl[0].stop * sy)
            dets.append(Detection(image_id, cid, clip_box(box, W, H), float(maxima[k])))
    return dets


def _order_key(d: Detection):
    return (-d.score, d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max)


def nms(detections: Iterable[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression; kept detections come back in ranking order."""
    if not 0 < iou_threshold < 1:
        raise InvalidInputError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    kept: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for d in sorted(detections, key=_order_key):
        same = by_class.setdefault(d.class_id, [])
        if all(iou(d.box, k.box) <= iou_threshold for k in same):
            same.append(d)
            kept.append(d)
    return kept


def window_sizes(
    training_hw: Sequence[int], scales: Sequence[float], aspect_ratios: Sequence[float]
) -> list[tuple[int, int]]:
    """Window (h, w) per scale and area-preserving aspect ratio (width/height multiplier)."""
    H0, W0 = training_hw
    sizes = []
    for s in scales:
        for a in aspect_ratios:
            if s <= 0 or a <= 0:
                raise InvalidInputError("scales and aspect ratios must be positive")
            sizes.append((max(1, round(H0 * s / np.sqrt(a))), max(1, round(W0 * s * np.sqrt(a)))))
    return sizes


def sliding_window_baseline(
    fcn_model: FcnModel,
    image: np.ndarray,
    scales: Sequence[float] = DEFAULT_SCALES,
    aspect_ratios: Sequence[float] = DEFAULT_ASPECT_RATIOS,
    stride: float = 0.25,
    score_threshold: float = 0.5,
    nms_iou: float = 0.3,
    image_id: str = "",
) -> list[Detection]:
    """Classify every window and keep those whose best positive probability clears the threshold.

    ``stride`` is a fraction of each window's height and width.
    """
    if not 0 < score_threshold <= 1:
        raise InvalidInputError(f"score_threshold must be in (0, 1], got {score_threshold}")
    if not 0 < stride <= 1:
        raise InvalidInputError(f"stride must be a window fraction in (0, 1], got {stride}")
    cfg = fcn_model.config
    H, W = image.shape[:2]
    H0, W0 = cfg.training_input_hw
    positives = list(range(int(cfg.include_background), cfg.out_channels))
    x = images_to_tensor([image])
    dets = []
    for wh, ww in window_sizes(cfg.training_input_hw, scales, aspect_ratios):
        if wh > H or ww > W:
            continue
        sy, sx = max(1, round(wh * stride)), max(1, round(ww * stride))
        ys = np.arange(0, H - wh + 1, sy)
        xs = np.arange(0, W - ww + 1, sx)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        rois = np.stack(
            [np.zeros(yy.size), xx.ravel(), yy.ravel(), xx.ravel() + ww, yy.ravel() + wh], axis=1
        )
        rois_t = torch.from_numpy(rois).float()
        probs = []
        for i in range(0, len(rois_t), 1024):
            crops = roi_align(x, rois_t[i:i + 1024], output_size=(H0, W0), spatial_scale=1.0, sampling_ratio=2, aligned=True)
            probs.append(classify_batch(fcn_model, crops))
        p = torch.cat(probs)[:, positives].numpy()
        best = p.argmax(1)
        score = p[np.arange(len(p)), best]
        for j in np.nonzero(score >= score_threshold)[0]:
            x0, y0 = float(rois[j, 1]), float(rois[j, 2])
            box = BoundingBox(x0, y0, x0 + ww, y0 + wh)
            dets.append(Detection(image_id, positives[best[j]], box, float(score[j])))
    return nms(dets, nms_iou)


def write_detections(detections: Iterable[Detection], catalog: ClassCatalog, path) -> Path:
    """One JSON object per line: image_id, class, score, x_min, y_min, x_max, y_max."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for d in detections:
            rec = {
                "image_id": d.image_id,
                "class": catalog.name(d.class_id),
                "score": round(d.score, 8),
                "x_min": round(d.box.x_min, 4),
                "y_min": round(d.box.y_min, 4),
                "x_max": round(d.box.x_max, 4),
                "y_max": round(d.box.y_max, 4),
            }
            fh.write(json.dumps(rec) + "\n")
    return path


def read_detections(path, catalog: ClassCatalog) -> list[Detection]:
    dets = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                box = BoundingBox(r["x_min"], r["y_min"], r["x_max"], r["y_max"])
                dets.append(Detection(r["image_id"], catalog.class_id(r["class"]), box, float(r["score"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise InvalidInputError(f"{path}:{n}: bad detection record ({exc})") from None
    return dets
