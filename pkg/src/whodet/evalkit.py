"""Detection evaluation: matching, precision/recall/AP, false-positive typing.

Average precision uses the all-points interpolation (area under the monotone
precision envelope over recall), the protocol of the 2010+ VOC evaluations.
Ground truths flagged difficult are excluded from the positive count and
never penalize detections.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .detector import box_iou
from .errors import ValidationError

TP = 1
FP = 0
IGNORED = -1  # best overlap was a difficult ground truth


class FpType(Enum):
    LOCALIZATION = "localization"
    SIMILAR_CATEGORY = "similar_category"
    OTHER_CATEGORY = "other_category"
    BACKGROUND = "background"


@dataclass(frozen=True)
class GroundTruth:
    image: str
    class_label: str
    box: tuple[float, float, float, float]
    difficult: bool = False

    def __post_init__(self):
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise ValidationError(f"ground truth box must have positive size: {self.box}")


@dataclass(frozen=True)
class DetectionRecord:
    """A detection as read from a detections file: image, score and box."""

    image: str
    score: float
    box: tuple[float, float, float, float]
    class_label: str | None = None
    component: int = 0


@dataclass(frozen=True)
class EvalCounts:
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class EvalReport:
    """PR curve, average precision and the F1-optimal operating point."""

    pr_points: tuple[tuple[float, float], ...]  # (recall, precision) per rank
    ap: float
    best_f1: float
    best_threshold: float
    counts: EvalCounts
    degenerate: bool = False  # no ground truth but detections present


@dataclass(frozen=True)
class FpDistribution:
    """Fractions of TP and each FP type among the top detections.

    ``grid`` holds the evaluated values of normalized detection count
    (top detections divided by the number of ground-truth objects);
    ``fractions`` has one row per grid point with columns
    (tp, localization, similar, other, background) summing to one.
    """

    grid: tuple[float, ...]
    fractions: np.ndarray
    recall_strict: tuple[float, ...]
    recall_relaxed: tuple[float, ...]
    total_gt: int


def iou(a, b) -> float:
    """Intersection over union of (x, y, w, h) rectangles; zero area gives 0."""
    return box_iou(tuple(a), tuple(b))


def _require_sorted(dets: Sequence[DetectionRecord]) -> None:
    for prev, cur in zip(dets, dets[1:]):
        if cur.score > prev.score:
            raise ValidationError("detections must be sorted by descending score")


def match_detections(dets: Sequence[DetectionRecord],
                     gts: Sequence[GroundTruth],
                     iou_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Greedy TP/FP assignment of score-sorted detections to one class of GTs.

    Each detection is matched to the unmatched ground truth of its image with
    the highest IoU; a match at or above the threshold makes it a TP and
    consumes the ground truth.  A detection whose best remaining overlap is a
    difficult ground truth is ignored (label -1) rather than counted as FP.

    Returns (labels, matched ground-truth index per detection, -1 if none).
    """
    _require_sorted(dets)
    by_image: dict[str, list[int]] = {}
    for gi, gt in enumerate(gts):
        by_image.setdefault(gt.image, []).append(gi)

    taken = np.zeros(len(gts), dtype=bool)
    labels = np.empty(len(dets), dtype=np.int64)
    matches = np.full(len(dets), -1, dtype=np.int64)
    for di, det in enumerate(dets):
        best_iou, best_gi = 0.0, -1
        best_diff_iou = 0.0
        for gi in by_image.get(det.image, ()):
            gt = gts[gi]
            overlap = box_iou(det.box, gt.box)
            if gt.difficult:
                best_diff_iou = max(best_diff_iou, overlap)
            elif not taken[gi] and overlap > best_iou:
                best_iou, best_gi = overlap, gi
        if best_gi >= 0 and best_iou >= iou_threshold:
            labels[di] = TP
            matches[di] = best_gi
            taken[best_gi] = True
        elif best_diff_iou >= iou_threshold:
            labels[di] = IGNORED
        else:
            labels[di] = FP
    return labels, matches


def _envelope_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def compute_pr_ap(labels: Sequence[int], total_gt: int,
                  scores: Sequence[float] | None = None) -> EvalReport:
    """PR curve, AP and best-F1 operating point from ranked TP/FP labels.

    ``labels`` follow descending score order; entries of -1 (ignored) are
    skipped.  With no ground truth but detections present, AP is defined as 0
    and the report is flagged degenerate.
    """
    if total_gt < 0:
        raise ValidationError("total_gt must not be negative")
    arr = np.asarray(labels, dtype=np.int64)
    if scores is not None and len(scores) != len(arr):
        raise ValidationError("scores must align with labels")
    keep = arr != IGNORED
    arr = arr[keep]
    kept_scores = (np.asarray(scores, dtype=np.float64)[keep]
                   if scores is not None else None)

    tp_cum = np.cumsum(arr == TP)
    fp_cum = np.cumsum(arr == FP)
    ranks = np.arange(1, len(arr) + 1)
    precision = tp_cum / ranks if len(arr) else np.empty(0)
    recall = (tp_cum / total_gt if total_gt > 0
              else np.zeros(len(arr)))

    degenerate = total_gt == 0 and len(arr) > 0
    if degenerate:
        warnings.warn("detections present but no ground truth; AP defined as 0",
                      stacklevel=2)
        ap = 0.0
    elif total_gt == 0:
        ap = 0.0
    else:
        ap = _envelope_ap(recall, precision)

    best_f1 = 0.0
    best_threshold = math.nan
    for i in range(len(arr)):
        p, r = precision[i], recall[i]
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        if f1 > best_f1:
            best_f1 = f1
            best_threshold = float(kept_scores[i]) if kept_scores is not None else math.nan

    tp_total = int(tp_cum[-1]) if len(arr) else 0
    counts = EvalCounts(tp=tp_total,
                        fp=int(fp_cum[-1]) if len(arr) else 0,
                        fn=max(0, total_gt - tp_total))
    return EvalReport(pr_points=tuple(zip(recall.tolist(), precision.tolist())),
                      ap=ap, best_f1=best_f1, best_threshold=best_threshold,
                      counts=counts, degenerate=degenerate)


def classify_fp(det: DetectionRecord,
                gts: Sequence[GroundTruth],
                similarity: Mapping[str, Sequence[str]],
                det_class: str | None = None,
                relaxed_threshold: float = 0.1) -> FpType:
    """Type one false positive by what it overlaps.

    A relaxed overlap (threshold 0.1 instead of 0.5) with a same-class ground
    truth, including duplicates of already-matched ones, is a localization
    error.  Otherwise overlap with a class listed as similar marks a
    similar-category confusion, any other class an other-category confusion,
    and no overlap at all a background false positive.
    """
    cls = det_class if det_class is not None else det.class_label
    if cls is None:
        raise ValidationError("detection class is needed to type a false positive")
    if cls not in similarity:
        warnings.warn(f"class {cls!r} missing from similarity map; "
                      f"treating all other classes as non-similar", stacklevel=2)
    similar = set(similarity.get(cls, ()))

    best_same = 0.0
    best_similar = 0.0
    best_other = 0.0
    for gt in gts:
        if gt.image != det.image or gt.difficult:
            continue
        overlap = box_iou(det.box, gt.box)
        if gt.class_label == cls:
            best_same = max(best_same, overlap)
        elif gt.class_label in similar:
            best_similar = max(best_similar, overlap)
        else:
            best_other = max(best_other, overlap)
    if best_same >= relaxed_threshold:
        return FpType.LOCALIZATION
    if best_similar >= relaxed_threshold:
        return FpType.SIMILAR_CATEGORY
    if best_other >= relaxed_threshold:
        return FpType.OTHER_CATEGORY
    return FpType.BACKGROUND


_TYPE_COLUMNS = (FpType.LOCALIZATION, FpType.SIMILAR_CATEGORY,
                 FpType.OTHER_CATEGORY, FpType.BACKGROUND)

DEFAULT_NSTAR_GRID = tuple(float(2.0 ** e) for e in np.arange(-3, 3.01, 0.5))


def _class_gts(gts: Sequence[GroundTruth], cls: str) -> list[GroundTruth]:
    return [g for g in gts if g.class_label == cls]


def _prepare(dets, gts, cls, similarity, iou_threshold=0.5):
    """Sorted non-ignored detections with labels and FP types for one class."""
    ordered = sorted(dets, key=lambda d: -d.score)
    own = _class_gts(gts, cls)
    labels, matches = match_detections(ordered, own, iou_threshold)
    keep = labels != IGNORED
    ordered = [d for d, k in zip(ordered, keep) if k]
    matches = matches[keep]
    labels = labels[keep]
    types = [classify_fp(d, gts, similarity, det_class=cls) if lab == FP else None
             for d, lab in zip(ordered, labels)]
    total_gt = sum(1 for g in own if not g.difficult)
    return ordered, labels, matches, types, total_gt


def fp_distribution(dets: Sequence[DetectionRecord],
                    gts: Sequence[GroundTruth],
                    class_label: str,
                    similarity: Mapping[str, Sequence[str]],
                    grid: Sequence[float] = DEFAULT_NSTAR_GRID) -> FpDistribution | None:
    """Distribution of TP and FP types over the top-ranked detections.

    At each grid value of the normalized count, the top round(value * number
    of objects) detections are tallied; grid points that round to zero
    detections are omitted.  Also reports recall at the usual 0.5 overlap and
    at the relaxed 0.1 overlap for the same prefixes.  Returns None (with a
    warning) when the class has no ground-truth objects.
    """
    ordered, labels, _, types, total_gt = _prepare(dets, gts, class_label, similarity)
    if total_gt == 0:
        warnings.warn(f"class {class_label!r} has no ground-truth objects; skipped",
                      stacklevel=2)
        return None
    labels10, _ = match_detections(ordered, _class_gts(gts, class_label), 0.1)

    rows = []
    points = []
    strict = []
    relaxed = []
    for value in grid:
        n = int(round(value * total_gt))
        if n == 0:
            continue
        n = min(n, len(ordered))
        if n == 0:
            continue
        head = labels[:n]
        head_types = types[:n]
        row = np.zeros(5)
        row[0] = int(np.sum(head == TP))
        for col, ft in enumerate(_TYPE_COLUMNS, start=1):
            row[col] = sum(1 for t in head_types if t is ft)
        rows.append(row / n)
        points.append(value)
        strict.append(float(np.sum(head == TP)) / total_gt)
        relaxed.append(float(np.sum(labels10[:n] == TP)) / total_gt)
    return FpDistribution(grid=tuple(points),
                          fractions=np.array(rows).reshape(len(rows), 5),
                          recall_strict=tuple(strict),
                          recall_relaxed=tuple(relaxed),
                          total_gt=total_gt)


def impact_analysis(dets: Sequence[DetectionRecord],
                    gts: Sequence[GroundTruth],
                    class_label: str,
                    similarity: Mapping[str, Sequence[str]],
                    iou_threshold: float = 0.5) -> dict:
    """AP gained by removing, or correcting, each false-positive type.

    The removed variant deletes all false positives of one type and
    recomputes AP.  The corrected variant (localization errors only)
    additionally turns each removed detection back into a true positive of
    the best-overlapping uncredited ground truth of its class, each ground
    truth creditable once; detections with no ground truth left to credit
    stay removed, so the corrected AP always dominates the removed AP.
    """
    ordered, labels, matches, types, total_gt = _prepare(
        dets, gts, class_label, similarity, iou_threshold)
    baseline = compute_pr_ap(labels, total_gt).ap

    result = {"baseline_ap": baseline, "types": {}}
    for ft in _TYPE_COLUMNS:
        kept = [lab for lab, t in zip(labels, types) if not (lab == FP and t is ft)]
        removed_ap = compute_pr_ap(kept, total_gt).ap
        entry = {"removed_ap": removed_ap, "removed_delta": removed_ap - baseline}
        if ft is FpType.LOCALIZATION:
            entry.update(_corrected_localization(
                ordered, labels, matches, types, _class_gts(gts, class_label),
                total_gt, baseline))
        result["types"][ft.value] = entry
    return result


def _corrected_localization(ordered, labels, matches, types, own,
                            total_gt, baseline):
    credited = {int(gi) for lab, gi in zip(labels, matches) if lab == TP and gi >= 0}
    corrected_labels = []
    for det, lab, t in zip(ordered, labels, types):
        if lab == TP:
            corrected_labels.append(TP)
        elif lab == FP and t is FpType.LOCALIZATION:
            best_iou, best_gi = 0.0, -1
            for gi, gt in enumerate(own):
                if gi in credited or gt.difficult or gt.image != det.image:
                    continue
                overlap = box_iou(det.box, gt.box)
                if overlap > best_iou:
                    best_iou, best_gi = overlap, gi
            if best_gi >= 0 and best_iou >= 0.1:
                credited.add(best_gi)
                corrected_labels.append(TP)
            # else: stays removed
        elif lab == FP:
            corrected_labels.append(FP)
    corrected_ap = compute_pr_ap(corrected_labels, total_gt).ap
    return {"corrected_ap": corrected_ap, "corrected_delta": corrected_ap - baseline}


def evaluate_class(dets: Sequence[DetectionRecord],
                   gts: Sequence[GroundTruth],
                   class_label: str,
                   iou_threshold: float = 0.5) -> EvalReport:
    """Match and score one class end to end."""
    ordered = sorted(dets, key=lambda d: -d.score)
    own = _class_gts(gts, class_label)
    labels, _ = match_detections(ordered, own, iou_threshold)
    total_gt = sum(1 for g in own if not g.difficult)
    return compute_pr_ap(labels, total_gt, scores=[d.score for d in ordered])
