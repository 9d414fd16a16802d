"""Detection scoring: greedy IoU matching, per-class average precision, mAP.

Detections are pooled per class across scenes in descending confidence order,
matched greedily against at-most-once ground truth at a single IoU threshold,
and scored with all-point interpolated average precision (at each achieved
recall level, the maximum precision at that or any higher recall). Classes
without ground truth are excluded from the mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .data import Scene
from .errors import ContractError
from .geometry import Box, iou
from .matching import GroundTruth
from .model import DetectionOutput, ModelConfig, forward


@dataclass(frozen=True)
class ScoredDetection:
    class_id: int
    confidence: float
    box: Box


@dataclass
class ClassResult:
    name: str
    ap: float | None  # None when the class has no ground truth
    tp: int
    fp: int
    gt: int


@dataclass
class APReport:
    iou_thresh: float
    per_class: dict[int, ClassResult]
    mean_ap: float

    def to_json_dict(self) -> dict:
        return {
            "iou_thresh": self.iou_thresh,
            "classes": [
                {"class_id": cid, "name": r.name, "ap": r.ap, "tp": r.tp, "fp": r.fp, "gt": r.gt}
                for cid, r in sorted(self.per_class.items())
            ],
            "map": self.mean_ap,
        }

    def to_table(self) -> str:
        width = max([len(r.name) for r in self.per_class.values()] + [5])
        lines = [f"{'class':<{width}}  {'AP':>7}  {'TP':>4}  {'FP':>4}  {'GT':>4}"]
        for cid in sorted(self.per_class):
            r = self.per_class[cid]
            ap = f"{r.ap:.4f}" if r.ap is not None else "   n/a"
            lines.append(f"{r.name:<{width}}  {ap:>7}  {r.tp:>4}  {r.fp:>4}  {r.gt:>4}")
        lines.append(f"mAP @ IoU {self.iou_thresh:.2f}: {self.mean_ap:.4f}")
        return "\n".join(lines)


def extract_detections(out: DetectionOutput, conf_floor: float = 0.0) -> list[ScoredDetection]:
    """Argmax each query over K+1 classes; drop no-object rows and low scores."""
    probs = out.class_probs.data
    boxes = out.boxes.data
    null_col = probs.shape[1] - 1
    dets = []
    for i in range(probs.shape[0]):
        cid = int(np.argmax(probs[i]))  # ties go to the lowest index
        if cid == null_col:
            continue
        conf = float(probs[i, cid])
        if conf < conf_floor:
            continue
        dets.append(ScoredDetection(cid, conf, Box(*boxes[i])))
    return dets


def match_detections(dets: list[ScoredDetection], gts: list[GroundTruth], iou_thresh: float) -> list[bool]:
    """Greedy TP/FP flags aligned with ``dets`` as given.

    Internally walks detections in descending confidence (ties by input
    index); each detection claims the highest-IoU unmatched same-class ground
    truth at or above the threshold, and each ground truth matches only once.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    taken = [False] * len(gts)
    flags = [False] * len(dets)
    for i in order:
        det = dets[i]
        best_j = -1
        best_v = -1.0
        for j, gt in enumerate(gts):
            if taken[j] or gt.class_id != det.class_id:
                continue
            v = iou(det.box, gt.box)
            if v >= iou_thresh and v > best_v:
                best_v = v
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            flags[i] = True
    return flags


def average_precision(flags: list[bool], num_gt: int) -> float | None:
    """All-point interpolated AP from confidence-ordered TP/FP flags.

    Returns None for num_gt = 0 (undefined, excluded from the mean). Missed
    recall levels contribute zero precision. Precisions are rationals, so the
    sum is carried exactly and rounded once at the end.
    """
    if num_gt < 0:
        raise ContractError("num_gt must be nonnegative")
    if num_gt == 0:
        return None
    if not flags:
        return 0.0
    precision = []
    tp = 0
    for rank, flag in enumerate(flags, start=1):
        tp += bool(flag)
        precision.append(Fraction(tp, rank))
    # max precision at this or any later (higher-recall) cut
    best = Fraction(0)
    total = Fraction(0)
    for rank in range(len(flags) - 1, -1, -1):
        if precision[rank] > best:
            best = precision[rank]
        if flags[rank]:
            total += best
    return float(total / num_gt)


def evaluate_detections(per_scene_dets, per_scene_gts, num_classes: int, iou_thresh: float, names=None) -> APReport:
    """Score already-extracted detections; the model-free core of evaluation."""
    if names is None:
        names = [f"class_{c}" for c in range(num_classes)]
    per_class: dict[int, ClassResult] = {}
    aps = []
    for cid in range(num_classes):
        pooled: list[tuple[float, int, int, bool]] = []
        gt_count = 0
        for s, (dets, gts) in enumerate(zip(per_scene_dets, per_scene_gts)):
            cls_idx = [i for i, d in enumerate(dets) if d.class_id == cid]
            cls_dets = [dets[i] for i in cls_idx]
            cls_gts = [g for g in gts if g.class_id == cid]
            gt_count += len(cls_gts)
            flags = match_detections(cls_dets, cls_gts, iou_thresh)
            pooled.extend((d.confidence, s, i, f) for d, i, f in zip(cls_dets, cls_idx, flags))
        pooled.sort(key=lambda rec: (-rec[0], rec[1], rec[2]))
        ordered_flags = [rec[3] for rec in pooled]
        ap = average_precision(ordered_flags, gt_count)
        tp = sum(ordered_flags)
        per_class[cid] = ClassResult(names[cid], ap, tp, len(ordered_flags) - tp, gt_count)
        if ap is not None:
            aps.append(ap)
    mean_ap = float(np.mean(aps)) if aps else 0.0
    return APReport(iou_thresh, per_class, mean_ap)


def evaluate_dataset(dataset: list[Scene], params, config: ModelConfig, iou_thresh: float = 0.5,
                     names=None, conf_floor: float = 0.0) -> APReport:
    """Run the detector over every scene and score pooled detections."""
    if not dataset:
        raise ContractError("evaluate_dataset needs a nonempty dataset")
    per_scene_dets = []
    per_scene_gts = []
    for scene in dataset:
        out = forward(scene.image, params, config)
        per_scene_dets.append(extract_detections(out, conf_floor))
        per_scene_gts.append(scene.objects)
    return evaluate_detections(per_scene_dets, per_scene_gts, config.num_classes, iou_thresh, names)
