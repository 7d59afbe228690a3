"""VOC07 11-point average precision and mean AP over classes."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data_model import Annotation, ClassCatalog, Detection, InvalidInputError, boxes_to_array, iou_matrix

logger = logging.getLogger(__name__)

class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.1

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise InvalidInputError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")


@dataclass
class ClassResult:
    ap: float
    tp: int
    fp: int
    num_ground_truth: int
    precision: list[float] = field(default_factory=list, repr=False)
    recall: list[float] = field(default_factory=list, repr=False)


@dataclass
class EvalReport:
    per_class: dict[str, ClassResult]
    mAP: float
    excluded: list[str]
    config: EvalConfig

    @property
    def ap(self) -> dict[str, float]:
        return {k: v.ap for k, v in self.per_class.items()}

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "iou_threshold": self.config.iou_threshold,
            "excluded_classes": self.excluded,
            "classes": {
                name: {"ap": r.ap, "tp": r.tp, "fp": r.fp, "num_ground_truth": r.num_ground_truth}
                for name, r in self.per_class.items()
            },
        }


def ranking_key(d: Detection):
    return (-d.score, d.image_id, d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max)


def match_detections(
    detections: Sequence[Detection], annotations: Sequence[Annotation], iou_threshold: float
) -> list[bool]:
    """TP/FP flag per detection after sorting into ranking order.

    Each detection looks up the same-class ground truth of highest IoU in
    its image; a hit on an already claimed box is a duplicate (FP).
    """
    ordered = sorted(detections, key=ranking_key)
    gt: dict[tuple[str, int], np.ndarray] = {}
    grouped: dict[tuple[str, int], list] = defaultdict(list)
    for a in annotations:
        grouped[(a.image_id, a.class_id)].append(a.box)
    for key, boxes in grouped.items():
        gt[key] = boxes_to_array(boxes)
    claimed = {key: np.zeros(len(v), dtype=bool) for key, v in gt.items()}
    flags = []
    for d in ordered:
        key = (d.image_id, d.class_id)
        boxes = gt.get(key)
        if boxes is None:
            flags.append(False)
            continue
        ious = iou_matrix(np.array([d.box.as_tuple()]), boxes)[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold and not claimed[key][j]:
            claimed[key][j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def precision_recall(flags: Sequence[bool], num_ground_truth: int) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(flags, dtype=bool)
    tp = np.cumsum(f)
    fp = np.cumsum(~f)
    recall = tp / max(num_ground_truth, 1)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return precision, recall


def average_precision_voc07(tp_fp_flags: Sequence[bool], num_ground_truth: int) -> float:
    if num_ground_truth < 1:
        logger.warning("AP requested for a class without ground truth; returning 0")
        return 0.0
    precision, _ = precision_recall(tp_fp_flags, num_ground_truth)
    tp = np.cumsum(np.asarray(tp_fp_flags, dtype=bool))
    ap = 0.0
    for level in range(11):
        # recall >= level/10, compared in integers to dodge 0.1-step rounding
        reach = tp * 10 >= level * num_ground_truth
        ap += precision[reach].max() if reach.any() else 0.0
    return float(ap / 11)


def mean_ap(
    detections: Iterable[Detection],
    annotations: Sequence[Annotation],
    catalog: ClassCatalog,
    config: EvalConfig = EvalConfig(),
) -> EvalReport:
    detections = list(detections)
    per_class: dict[str, ClassResult] = {}
    excluded = []
    for cid in catalog.positive_ids:
        name = catalog.name(cid)
        gts = [a for a in annotations if a.class_id == cid]
        dets = [d for d in detections if d.class_id == cid]
        if not gts:
            excluded.append(name)
            continue
        flags = match_detections(dets, gts, config.iou_threshold)
        precision, recall = precision_recall(flags, len(gts))
        per_class[name] = ClassResult(
            ap=average_precision_voc07(flags, len(gts)),
            tp=int(sum(flags)),
            fp=int(len(flags) - sum(flags)),
            num_ground_truth=len(gts),
            precision=precision.tolist(),
            recall=recall.tolist(),
        )
    if not per_class:
        raise EvaluationError("no positive class has ground truth to evaluate against")
    if excluded:
        logger.warning("classes without ground truth excluded from mAP: %s", ", ".join(excluded))
    m = float(np.mean([r.ap for r in per_class.values()]))
    return EvalReport(per_class, m, excluded, config)


def write_report(report: EvalReport, out_dir, pr_curves: bool = True) -> Path:
    """report.json, a plain-text per-class table, and optional per-class PR point files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    lines = [f"{'class':<24}{'AP':>10}{'TP':>7}{'FP':>7}{'GT':>7}"]
    for name, r in report.per_class.items():
        lines.append(f"{name:<24}{r.ap:>10.4f}{r.tp:>7d}{r.fp:>7d}{r.num_ground_truth:>7d}")
    lines.append(f"{'mAP@' + format(report.config.iou_threshold, 'g'):<24}{report.mAP:>10.4f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    if pr_curves:
        for name, r in report.per_class.items():
            with open(out / f"pr_{name}.csv", "w") as fh:
                fh.write("rank,precision,recall\n")
                for k, (p, rc) in enumerate(zip(r.precision, r.recall), start=1):
                    fh.write(f"{k},{p:.10g},{rc:.10g}\n")
    return out


def annotations_as_detections(annotations: Sequence[Annotation], score: float = 1.0) -> list[Detection]:
    return [Detection(a.image_id, a.class_id, a.box, score) for a in annotations]



def rasterize_annotations(annotations: Sequence[Annotation], image_hw: Sequence[int], catalog: ClassCatalog) -> np.ndarray:
    """Index mask (``mask_label`` per pixel, 0 elsewhere) of one image's ground-truth boxes."""
    H, W = int(image_hw[0]), int(image_hw[1])
    out = np.zeros((H, W), dtype=np.int64)
    for a in annotations:
        b = a.box
        out[max(0, int(b.y_min)):min(H, int(np.ceil(b.y_max))), max(0, int(b.x_min)):min(W, int(np.ceil(b.x_max)))] = (
            catalog.mask_label(a.class_id)
        )
    return out


def wrong_class_pixels(mask: np.ndarray, labels: np.ndarray, catalog: ClassCatalog, threshold: float = 0.5) -> int:
    """Pixels where some positive class other than the true label reaches ``threshold``.

    ``mask`` is ``(C, h, w)`` with channels indexed by class id; ``labels``
    holds ``mask_label`` values at the same resolution.
    """
    if mask.shape[1:] != labels.shape:
        raise InvalidInputError(f"mask {mask.shape[1:]} and labels {labels.shape} differ in size")
    wrong = np.zeros(labels.shape, dtype=bool)
    for cid in catalog.positive_ids:
        wrong |= (mask[cid] >= threshold) & (labels != catalog.mask_label(cid))
    return int(wrong.sum())
