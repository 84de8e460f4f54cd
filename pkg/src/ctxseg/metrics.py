"""Segmentation metrics: confusion-matrix mIoU and region-level mAP.

Ratios are accumulated as exact fractions and converted to float once, so
results do not depend on summation order.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .graph import connected_components


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns prediction."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"extent mismatch: pred {pred.shape} vs gt {gt.shape}")
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray, include_background: bool = False):
    """Per-class IoU (None where the union is empty) and their mean."""
    cm = np.asarray(cm, dtype=np.int64)
    inter = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - inter
    per_class: list[float | None] = []
    acc, count = Fraction(0), 0
    for c in range(cm.shape[0]):
        if union[c] == 0:
            per_class.append(None)
            continue
        iou = Fraction(int(inter[c]), int(union[c]))
        per_class.append(float(iou))
        if c == 0 and not include_background:
            continue
        acc += iou
        count += 1
    return per_class, (float(acc / count) if count else math.nan)


def compute_miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, include_background: bool = False):
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes), include_background)


@dataclass
class _Detection:
    score: float
    image: int
    order: int
    tp: bool


def _regions(mask: np.ndarray, c: int) -> list[np.ndarray]:
    comp, n = connected_components(mask == c)
    return [comp == k for k in range(1, n + 1)]


def match_image(pred: np.ndarray, conf: np.ndarray, gt: np.ndarray, c: int,
                iou_thresh: float = 0.5) -> tuple[list[tuple[float, bool]], int]:
    """Detections of class ``c`` in one image as (score, is_tp), plus GT region count.

    Detections are processed by descending score (ties in raster order) and
    each takes the unmatched GT region of highest IoU when that IoU reaches
    ``iou_thresh``.
    """
    dets = _regions(pred, c)
    gts = _regions(gt, c)
    scores = [float(conf[d].mean()) for d in dets]
    order = sorted(range(len(dets)), key=lambda k: -scores[k])
    used = [False] * len(gts)
    out: list[tuple[float, bool] | None] = [None] * len(dets)
    for k in order:
        best, best_iou = -1, Fraction(-1)
        for g, region in enumerate(gts):
            if used[g]:
                continue
            inter = int(np.count_nonzero(dets[k] & region))
            if inter == 0:
                continue
            iou = Fraction(inter, int(np.count_nonzero(dets[k] | region)))
            if iou > best_iou:
                best, best_iou = g, iou
        tp = best >= 0 and best_iou >= Fraction(iou_thresh)
        if tp:
            used[best] = True
        out[k] = (scores[k], tp)
    return out, len(gts)


def average_precision(dets: Sequence[tuple[float, bool]], n_gt: int) -> Fraction:
    """Area under the interpolated precision-recall curve.

    Detections sharing a score enter the curve together, so the result does
    not depend on tie order.
    """
    if n_gt == 0:
        raise ValueError("AP undefined without ground-truth regions")
    ranked = sorted(dets, key=lambda d: -d[0])
    points: list[tuple[Fraction, Fraction]] = []
    tp = fp = 0
    i = 0
    while i < len(ranked):
        j = i
        while j < len(ranked) and ranked[j][0] == ranked[i][0]:
            tp += ranked[j][1]
            fp += not ranked[j][1]
            j += 1
        points.append((Fraction(tp, n_gt), Fraction(tp, tp + fp)))
        i = j
    ap = Fraction(0)
    prev_recall = Fraction(0)
    for k, (recall, _) in enumerate(points):
        if recall > prev_recall:
            ap += (recall - prev_recall) * max(p for _, p in points[k:])
            prev_recall = recall
    return ap


class MapAccumulator:
    """Collects region detections over many images, then reports per-class AP."""

    def __init__(self, num_classes: int, iou_thresh: float = 0.5):
        self.num_classes = num_classes
        self.iou_thresh = iou_thresh
        self.dets: dict[int, list[tuple[float, bool]]] = {c: [] for c in range(1, num_classes)}
        self.n_gt = {c: 0 for c in range(1, num_classes)}

    def add(self, pred: np.ndarray, conf: np.ndarray, gt: np.ndarray) -> None:
        pred, conf, gt = np.asarray(pred), np.asarray(conf), np.asarray(gt)
        if not (pred.shape == gt.shape == conf.shape):
            raise ValueError(f"extent mismatch: pred {pred.shape}, conf {conf.shape}, gt {gt.shape}")
        if conf.size and (conf.min() < 0 or conf.max() > 1):
            raise ValueError("confidence must lie in [0, 1]")
        present = set(np.unique(pred).tolist()) | set(np.unique(gt).tolist())
        for c in sorted(present - {0}):
            dets, n = match_image(pred, conf, gt, int(c), self.iou_thresh)
            self.dets[int(c)].extend(dets)
            self.n_gt[int(c)] += n

    def result(self) -> tuple[list[float | None], float]:
        per_class: list[float | None] = [None]
        acc, count = Fraction(0), 0
        for c in range(1, self.num_classes):
            if self.n_gt[c] == 0:
                per_class.append(None)
                continue
            ap = average_precision(self.dets[c], self.n_gt[c])
            per_class.append(float(ap))
            acc += ap
            count += 1
        return per_class, (float(acc / count) if count else math.nan)


def compute_map(pred: np.ndarray, conf: np.ndarray, gt: np.ndarray, num_classes: int,
                iou_thresh: float = 0.5):
    acc = MapAccumulator(num_classes, iou_thresh)
    acc.add(pred, conf, gt)
    return acc.result()


@dataclass
class EvalReport:
    class_names: list[str]
    per_class_iou: list[float | None]
    miou: float
    per_class_ap: list[float | None]
    map: float
    confusion: list[list[int]]
    samples: int
    extra: dict = field(default_factory=dict)

    def mean_iou_of(self, class_ids: Sequence[int]) -> float:
        vals = [self.per_class_iou[c] for c in class_ids]
        vals = [0.0 if v is None else v for v in vals]
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        nan_to_none = lambda x: None if (x is None or (isinstance(x, float) and math.isnan(x))) else x  # noqa: E731
        return {
            "classes": self.class_names,
            "per_class_iou": [nan_to_none(v) for v in self.per_class_iou],
            "miou": nan_to_none(self.miou),
            "per_class_ap": [nan_to_none(v) for v in self.per_class_ap],
            "map": nan_to_none(self.map),
            "confusion": self.confusion,
            "samples": self.samples,
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "class", "iou", "ap"])
        for c, name in enumerate(self.class_names):
            iou, ap = self.per_class_iou[c], self.per_class_ap[c]
            w.writerow([c, name, "" if iou is None else repr(iou), "" if ap is None else repr(ap)])
        return buf.getvalue()
