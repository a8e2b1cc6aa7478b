"""COCO-protocol AP/AR with SODA area subsets and ignore regions.

Matching follows the COCO reference: detections are visited by descending
score (ties by detection index) and each takes the unmatched GT of highest
IoU.  GTs outside the evaluated area subset are ignored instead of dropped, so
detections that land on them are neither true nor false positives.  Ignore
regions behave like COCO crowd boxes: overlap is measured as intersection over
detection area and a region can absorb any number of detections.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import AREA_BOUNDS, box_area, box_iou, intersection_over_first

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

# (lo, hi] area ranges
AREA_RANGES = {
    "all": (-np.inf, np.inf),
    "eS": (0.0, AREA_BOUNDS[0]),
    "rS": (AREA_BOUNDS[0], AREA_BOUNDS[1]),
    "gS": (AREA_BOUNDS[1], AREA_BOUNDS[2]),
    "N": (AREA_BOUNDS[2], np.inf),
}


@dataclass
class Detections:
    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, float).reshape(-1, 4)
        self.scores = np.asarray(self.scores, float).reshape(-1)
        self.labels = np.asarray(self.labels, np.int64).reshape(-1)


@dataclass
class GroundTruth:
    boxes: np.ndarray
    labels: np.ndarray
    ignores: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, float).reshape(-1, 4)
        self.labels = np.asarray(self.labels, np.int64).reshape(-1)
        self.ignores = np.asarray(self.ignores, float).reshape(-1, 4)


@dataclass
class EvalReport:
    AP: float = 0.0
    AP50: float = 0.0
    AP75: float = 0.0
    AP_eS: float = 0.0
    AP_rS: float = 0.0
    AP_gS: float = 0.0
    AP_N: float = 0.0
    AR: float = 0.0
    AR_eS: float = 0.0
    AR_rS: float = 0.0
    AR_gS: float = 0.0
    AR_N: float = 0.0
    per_class_AP: Dict[int, float] = field(default_factory=dict)
    num_gts: Dict[str, int] = field(default_factory=dict)

    SUMMARY = ("AP", "AP50", "AP75", "AP_eS", "AP_rS", "AP_gS", "AP_N", "AR", "AR_eS", "AR_rS", "AR_gS", "AR_N")

    def summary(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in self.SUMMARY}

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class_AP"] = {str(k): v for k, v in self.per_class_AP.items()}
        return json.dumps(d, indent=2)

    def table(self) -> str:
        lines = [f"{k:>6s}  {100 * v:6.2f}" for k, v in self.summary().items()]
        lines += [f" cls{c:<3d}  {100 * v:6.2f}" for c, v in sorted(self.per_class_AP.items())]
        return "\n".join(lines)


def _in_range(areas, rng):
    lo, hi = rng
    return (areas > lo) & (areas <= hi)


def _match_image(det_boxes, gt_boxes, gt_ignore, crowd_boxes, area_rng, thresholds):
    """Per-threshold matches for one image and class.

    Returns ``(matched, ignored)`` boolean arrays of shape (T, D).
    """
    nd = len(det_boxes)
    gts = np.concatenate([gt_boxes, crowd_boxes])
    ig = np.concatenate([gt_ignore, np.ones(len(crowd_boxes), bool)])
    crowd = np.concatenate([np.zeros(len(gt_boxes), bool), np.ones(len(crowd_boxes), bool)])
    # visit non-ignored GTs first
    order = np.argsort(ig, kind="stable")
    gts, ig, crowd = gts[order], ig[order], crowd[order]
    if len(gts) and nd:
        ious = box_iou(det_boxes, gts)
        if crowd.any():
            ious[:, crowd] = intersection_over_first(det_boxes, gts[crowd])
    else:
        ious = np.zeros((nd, len(gts)))
    T = len(thresholds)
    matched = np.zeros((T, nd), bool)
    det_ig = np.zeros((T, nd), bool)
    for ti, t in enumerate(thresholds):
        taken = np.zeros(len(gts), bool)
        for d in range(nd):
            best, m = min(t, 1 - 1e-10), -1
            for g in range(len(gts)):
                if taken[g] and not crowd[g]:
                    continue
                if m > -1 and not ig[m] and ig[g]:
                    break
                if ious[d, g] < best:
                    continue
                best, m = ious[d, g], g
            if m == -1:
                continue
            matched[ti, d] = True
            det_ig[ti, d] = ig[m]
            taken[m] = True
    outside = ~_in_range(box_area(det_boxes), area_rng) if nd else np.zeros(0, bool)
    det_ig |= ~matched & outside[None, :]
    return matched, det_ig


def _average_precision(scores, tps, fps, npos):
    order = np.argsort(-scores, kind="mergesort")
    tp = np.cumsum(tps[order]).astype(float)
    fp = np.cumsum(fps[order]).astype(float)
    if len(tp) == 0:
        return 0.0, 0.0
    rc = tp / npos
    pr = tp / np.maximum(tp + fp, np.finfo(float).eps)
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    idx = np.searchsorted(rc, RECALL_POINTS, side="left")
    q = np.where(idx < len(pr), pr[np.minimum(idx, len(pr) - 1)], 0.0)
    return float(q.mean()), float(rc[-1])


def evaluate(
    detections: Sequence[Detections],
    ground_truths: Sequence[GroundTruth],
    num_classes: Optional[int] = None,
    max_dets: int = 100,
    thresholds=IOU_THRESHOLDS,
) -> EvalReport:
    """AP/AR over IoU 0.50:0.95 overall and per area subset."""
    if len(detections) != len(ground_truths):
        raise ValueError("need one detection set per image")
    thresholds = np.asarray(thresholds, float)
    labels = set()
    for gt in ground_truths:
        labels.update(int(c) for c in gt.labels)
    if num_classes is not None:
        labels = set(range(1, num_classes + 1))
    report = EvalReport()
    for name, rng in AREA_RANGES.items():
        ap_cls, ar_cls = {}, {}
        n_total = 0
        for c in sorted(labels):
            all_scores, all_tp, all_fp = [], [], []
            npos = 0
            for det, gt in zip(detections, ground_truths):
                dm = det.labels == c
                d_boxes, d_scores = det.boxes[dm], det.scores[dm]
                # stable: equal scores keep detection-index order
                order = np.argsort(-d_scores, kind="mergesort")[:max_dets]
                d_boxes, d_scores = d_boxes[order], d_scores[order]
                g_boxes = gt.boxes[gt.labels == c]
                g_ig = ~_in_range(box_area(g_boxes), rng) if len(g_boxes) else np.zeros(0, bool)
                npos += int((~g_ig).sum())
                matched, ig = _match_image(d_boxes, g_boxes, g_ig, gt.ignores, rng, thresholds)
                all_scores.append(d_scores)
                all_tp.append(matched & ~ig)
                all_fp.append(~matched & ~ig)
            n_total += npos
            if npos == 0:
                continue
            scores = np.concatenate(all_scores)
            tps = np.concatenate(all_tp, axis=1)
            fps = np.concatenate(all_fp, axis=1)
            res = [_average_precision(scores, tps[t], fps[t], npos) for t in range(len(thresholds))]
            ap_cls[c] = np.array([r[0] for r in res])
            ar_cls[c] = np.array([r[1] for r in res])
        report.num_gts[name] = n_total
        if not ap_cls:
            continue
        ap = np.mean(list(ap_cls.values()), axis=0)
        ar = np.mean(list(ar_cls.values()), axis=0)
        suffix = "" if name == "all" else f"_{name}"
        setattr(report, "AP" + suffix, float(ap.mean()))
        setattr(report, "AR" + suffix, float(ar.mean()))
        if name == "all":
            t50 = np.flatnonzero(np.isclose(thresholds, 0.5))
            t75 = np.flatnonzero(np.isclose(thresholds, 0.75))
            report.AP50 = float(ap[t50[0]]) if len(t50) else 0.0
            report.AP75 = float(ap[t75[0]]) if len(t75) else 0.0
            report.per_class_AP = {c: float(v.mean()) for c, v in ap_cls.items()}
    return report


def write_table(rows: Sequence[Dict[str, object]], path=None, delimiter=",") -> str:
    """Delimited table with a header from the first row's keys."""
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), delimiter=delimiter, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
