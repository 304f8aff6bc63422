"""Average precision over an IoU sweep, COCO-style greedy matching."""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Sequence

from ..data import SceneImage
from ..detector import DetectionSet

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class UndefinedBaselineError(ZeroDivisionError):
    pass


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _class_ids(preds: Sequence[DetectionSet], gts: Sequence[SceneImage]) -> list[int]:
    ids = {a.class_id for g in gts for a in g.annotations}
    for p in preds:
        ids.update(int(c) for c in p.class_ids.tolist())
    return sorted(ids)


def _match(preds, gts, iou_thresh, class_id):
    """Greedy matching; returns (tp flags in confidence order, number of GTs)."""
    cands = []  # (score, order, image index, box)
    order = 0
    for i, p in enumerate(preds):
        for d in p.detections():
            if d.class_id == class_id:
                cands.append((d.score, order, i, d.box))
            order += 1
    cands.sort(key=lambda c: (-c[0], c[1]))
    gt_boxes = [g.boxes(class_id) for g in gts]
    used = [[False] * len(b) for b in gt_boxes]
    tp = []
    for _, _, i, box in cands:
        best, best_j = -1.0, -1
        for j, g in enumerate(gt_boxes[i]):
            if used[i][j]:
                continue
            iou = box_iou(box, g)
            if iou >= iou_thresh and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            used[i][best_j] = True
            tp.append(True)
        else:
            tp.append(False)
    return tp, sum(len(b) for b in gt_boxes)


def _all_points_ap(tp: Sequence[bool], npos: int) -> Fraction:
    """Exact all-points interpolated AP.

    Precision and recall are ratios of integer counts, so the area is done
    in rationals; the result does not depend on summation order.
    """
    n_tp = 0
    recall, precision = [], []
    for k, hit in enumerate(tp, start=1):
        n_tp += hit
        recall.append(Fraction(n_tp, npos))
        precision.append(Fraction(n_tp, k))
    # precision envelope, then sum rectangle areas at each recall step
    for k in range(len(precision) - 2, -1, -1):
        precision[k] = max(precision[k], precision[k + 1])
    ap = Fraction(0)
    prev_r = Fraction(0)
    for r, p in zip(recall, precision):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap


def _ap_exact(preds, gts, iou_thresh, class_id) -> Fraction | None:
    if class_id is None:
        aps = [_ap_exact(preds, gts, iou_thresh, c) for c in _class_ids(preds, gts)]
        aps = [a for a in aps if a is not None]
        return sum(aps, Fraction(0)) / len(aps) if aps else None
    tp, npos = _match(preds, gts, iou_thresh, class_id)
    if npos == 0:
        return Fraction(0) if tp else None
    return _all_points_ap(tp, npos)


def _check(preds, gts, iou_thresh=None):
    if iou_thresh is not None and not 0 < iou_thresh < 1:
        raise ValueError("iou_thresh must lie in (0, 1)")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} images")


def average_precision(
    preds: Sequence[DetectionSet], gts: Sequence[SceneImage], iou_thresh: float, class_id: int | None = None
) -> float | None:
    """AP for one class (or the mean over classes when ``class_id`` is None).

    ``preds[i]`` belongs to ``gts[i]``. Returns ``None`` when there is neither
    ground truth nor a prediction to score.
    """
    _check(preds, gts, iou_thresh)
    ap = _ap_exact(preds, gts, iou_thresh, class_id)
    return None if ap is None else float(ap)


def ap_sweep(preds, gts, class_id: int | None = None) -> list[float | None]:
    return [average_precision(preds, gts, t, class_id) for t in IOU_THRESHOLDS]


def _map_exact(preds, gts, class_id=None) -> Fraction | None:
    vals = [_ap_exact(preds, gts, t, class_id) for t in IOU_THRESHOLDS]
    vals = [v for v in vals if v is not None]
    return sum(vals, Fraction(0)) / len(vals) if vals else None


def map_50_95(preds: Sequence[DetectionSet], gts: Sequence[SceneImage]) -> float:
    """Mean AP over IoU thresholds 0.50:0.05:0.95 (NaN if nothing is defined)."""
    _check(preds, gts)
    m = _map_exact(preds, gts)
    return math.nan if m is None else float(m)


def per_class_map(preds, gts) -> dict[int, float]:
    _check(preds, gts)
    out = {}
    for c in _class_ids(preds, gts):
        m = _map_exact(preds, gts, c)
        if m is not None:
            out[c] = float(m)
    return out


def normalized_map(map_patched: float, map_clean: float) -> float:
    """Patched mAP as a percentage of the clean mAP."""
    if not map_clean > 0:
        raise UndefinedBaselineError(f"clean mAP is {map_clean}; normalisation baseline undefined")
    return 100.0 * (map_patched / map_clean)  # ratio first: equal inputs give exactly 100
