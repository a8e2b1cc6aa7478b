"""Diagnostics: anchor coverage per size subset and proposal quality."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .anchors import AnchorGrid, build_grid, mine_anchors
from .geometry import SUBSETS, box_iou, subset_indices

SUBSET_NAMES = tuple(s.value for s in SUBSETS)
HQ_IOU = 0.5
AR_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)


@dataclass
class AnchorIoUAudit:
    max_ious: np.ndarray  # per GT
    subsets: np.ndarray  # per GT subset index
    mined_dynamic: np.ndarray  # positives per GT under the dynamic threshold
    mined_fixed: np.ndarray  # positives per GT under a fixed threshold
    fixed_threshold: float = 0.7

    def mean_max_iou(self) -> Dict[str, float]:
        return {n: float(self.max_ious[self.subsets == i].mean()) if np.any(self.subsets == i) else float("nan")
                for i, n in enumerate(SUBSET_NAMES)}

    def mean_mined(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for i, n in enumerate(SUBSET_NAMES):
            m = self.subsets == i
            out[n] = {
                "dynamic": float(self.mined_dynamic[m].mean()) if m.any() else float("nan"),
                "fixed": float(self.mined_fixed[m].mean()) if m.any() else float("nan"),
                "num_gts": int(m.sum()),
            }
        return out

    def histogram(self, bins: int = 20) -> Dict[str, np.ndarray]:
        edges = np.linspace(0, 1, bins + 1)
        return {n: np.histogram(self.max_ious[self.subsets == i], edges)[0] for i, n in enumerate(SUBSET_NAMES)}

    def rows(self) -> List[dict]:
        mm = self.mean_mined()
        return [
            {
                "subset": n,
                "num_gts": mm[n]["num_gts"],
                "mean_max_iou": v,
                "mined_dynamic": mm[n]["dynamic"],
                f"mined_fixed_{self.fixed_threshold:g}": mm[n]["fixed"],
            }
            for n, v in self.mean_max_iou().items()
        ]


def audit_anchor_iou(records, anchor_scale: float = 4.0, levels=None, fixed_threshold: float = 0.7, grid_cache=None) -> AnchorIoUAudit:
    """Per-GT maximum anchor IoU over all levels (or only ``levels``) plus
    mined-anchor counts under the dynamic and a fixed threshold."""
    grids = {} if grid_cache is None else grid_cache
    ious, subs, dyn, fix = [], [], [], []
    for r in records:
        if not len(r.boxes):
            continue
        key = (r.width, r.height)
        if key not in grids:
            grids[key] = build_grid(r.width, r.height, anchor_scale)
        grid: AnchorGrid = grids[key]
        if levels is not None:
            grid = grid.select_levels(levels)
        ious.append(box_iou(grid.anchors, r.boxes).max(axis=0))
        subs.append(subset_indices(r.boxes))
        dyn.append(mine_anchors(grid, r.boxes).positives_per_gt())
        fix.append(mine_anchors(grid, r.boxes, thresholds=fixed_threshold).positives_per_gt())
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
    return AnchorIoUAudit(cat(ious, float), cat(subs, np.int64), cat(dyn, np.int64), cat(fix, np.int64), fixed_threshold)


@dataclass
class ProposalAudit:
    """High-quality proposal counts and recall, per subset."""

    hq_per_gt: Dict[str, float]
    recall: Dict[str, float]
    num_gts: Dict[str, int]
    hq_total: int = 0

    def row(self, **extra) -> dict:
        out = dict(extra)
        out.update({f"HQ_{n}": self.hq_per_gt[n] for n in ("all",) + SUBSET_NAMES})
        out.update({f"AR_{n}" if n != "all" else "AR": self.recall[n] for n in ("all",) + SUBSET_NAMES})
        return out


def audit_proposals(proposals: Sequence[np.ndarray], gt_boxes: Sequence[np.ndarray], cap: int = 300) -> ProposalAudit:
    """Count proposals with IoU > 0.5 per GT and the mean best-IoU recall.

    Only the first ``cap`` proposals of each image are used.
    """
    counts, best, subs = [], [], []
    for props, gts in zip(proposals, gt_boxes):
        gts = np.asarray(gts, float).reshape(-1, 4)
        if not len(gts):
            continue
        props = np.asarray(props, float).reshape(-1, 4)[:cap]
        subs.append(subset_indices(gts))
        if len(props):
            iou = box_iou(props, gts)
            counts.append((iou > HQ_IOU).sum(axis=0))
            best.append(iou.max(axis=0))
        else:
            counts.append(np.zeros(len(gts), np.int64))
            best.append(np.zeros(len(gts)))
    counts = np.concatenate(counts) if counts else np.zeros(0, np.int64)
    best = np.concatenate(best) if best else np.zeros(0)
    subs = np.concatenate(subs) if subs else np.zeros(0, np.int64)
    hq, rec, ng = {}, {}, {}
    for name, mask in [("all", np.ones(len(subs), bool))] + [(n, subs == i) for i, n in enumerate(SUBSET_NAMES)]:
        ng[name] = int(mask.sum())
        if not mask.any():
            hq[name], rec[name] = 0.0, 0.0
            continue
        hq[name] = float(counts[mask].mean())
        rec[name] = float(np.mean([(best[mask] >= t).mean() for t in AR_THRESHOLDS]))
    return ProposalAudit(hq, rec, ng, int(counts.sum()))
