"""Single-anchor-per-location grids and positive-anchor mining."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import box_area, box_iou, intersection_over_first

DEFAULT_STRIDES = (4, 8, 16, 32)

NEGATIVE = -1
IGNORE = -2


def dynamic_threshold(w, h, gamma=0.15, floor=0.25, base=0.20, ref_size=12.0):
    """Area-dependent positive IoU threshold.

    ``max(floor, base + gamma * ln(sqrt(w*h) / ref_size))``.  Accepts scalars or
    arrays; returns a float for scalar input.
    """
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError("dynamic_threshold: box width and height must be positive")
    t = np.maximum(floor, base + gamma * np.log(np.sqrt(w * h) / ref_size))
    return float(t) if t.ndim == 0 else t


def _level_name(stride: int) -> str:
    return f"P{int(round(math.log2(stride)))}"


@dataclass
class AnchorLevel:
    name: str
    stride: int
    feat_h: int
    feat_w: int
    anchors: np.ndarray  # (feat_h * feat_w, 4), row-major over the feature map


@dataclass
class AnchorGrid:
    image_w: int
    image_h: int
    levels: List[AnchorLevel]
    anchors: np.ndarray = field(init=False)
    level_ids: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.levels:
            self.anchors = np.concatenate([lv.anchors for lv in self.levels], axis=0)
            self.level_ids = np.concatenate(
                [np.full(len(lv.anchors), i, dtype=np.int64) for i, lv in enumerate(self.levels)]
            )
        else:
            self.anchors = np.zeros((0, 4))
            self.level_ids = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def strides(self) -> Tuple[int, ...]:
        return tuple(lv.stride for lv in self.levels)

    @property
    def feature_sizes(self) -> List[Tuple[int, int]]:
        return [(lv.feat_h, lv.feat_w) for lv in self.levels]

    def level_slices(self) -> List[slice]:
        out, start = [], 0
        for lv in self.levels:
            out.append(slice(start, start + len(lv.anchors)))
            start += len(lv.anchors)
        return out

    def select_levels(self, names: Sequence[str]) -> "AnchorGrid":
        return AnchorGrid(self.image_w, self.image_h, [lv for lv in self.levels if lv.name in names])


def build_grid(image_w, image_h, anchor_scale=4.0, strides=DEFAULT_STRIDES) -> AnchorGrid:
    """One square anchor of side ``anchor_scale * stride`` per feature cell.

    Feature map size per level is ``ceil(dim / stride)``; cell ``(i, j)`` is
    centred at ``(stride * (j + 0.5), stride * (i + 0.5))``.
    """
    levels = []
    for s in strides:
        fh, fw = math.ceil(image_h / s), math.ceil(image_w / s)
        cy, cx = np.meshgrid((np.arange(fh) + 0.5) * s, (np.arange(fw) + 0.5) * s, indexing="ij")
        half = 0.5 * anchor_scale * s
        cx, cy = cx.ravel(), cy.ravel()
        anchors = np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)
        levels.append(AnchorLevel(_level_name(s), int(s), fh, fw, anchors))
    return AnchorGrid(int(image_w), int(image_h), levels)


@dataclass
class Assignment:
    """Per-anchor labels: a GT index (positive), ``NEGATIVE`` or ``IGNORE``."""

    labels: np.ndarray
    max_ious: np.ndarray  # IoU with the assigned GT, 0 for non-positives
    num_gts: int

    @property
    def positive_mask(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def negative_mask(self) -> np.ndarray:
        return self.labels == NEGATIVE

    @property
    def ignore_mask(self) -> np.ndarray:
        return self.labels == IGNORE

    def positives_per_gt(self) -> np.ndarray:
        pos = self.labels[self.labels >= 0]
        return np.bincount(pos, minlength=self.num_gts)[: self.num_gts]

    def matched(self, gt_index: int) -> np.ndarray:
        return np.flatnonzero(self.labels == gt_index)

    @property
    def unmatched_gts(self) -> int:
        return int(np.sum(self.positives_per_gt() == 0))


def _anchors_of(grid) -> np.ndarray:
    a = grid.anchors if isinstance(grid, AnchorGrid) else grid
    return np.asarray(a, dtype=np.float64).reshape(-1, 4)


def _mark_ignored(labels, anchors, ignores, ignore_overlap):
    ignores = np.asarray(ignores if ignores is not None else np.zeros((0, 4)), float).reshape(-1, 4)
    if len(ignores) and len(anchors):
        cover = intersection_over_first(anchors, ignores).max(axis=1)
        labels[cover > ignore_overlap] = IGNORE
    return labels


def mine_anchors(
    grid,
    gts,
    ignores=None,
    gamma=0.15,
    floor=0.25,
    base=0.20,
    ref_size=12.0,
    ignore_overlap=0.5,
    thresholds=None,
) -> Assignment:
    """Area-based anchor mining over every pyramid level.

    An anchor is positive for GT ``g`` when ``IoU > T_a(g)``.  Anchors clearing
    several GTs go to the largest IoU; ties go to the smaller GT, then the lower
    index.  Anchors whose area is more than ``ignore_overlap`` covered by an
    ignore region are ignored.  ``thresholds`` overrides the per-GT ``T_a``
    (used for fixed-threshold comparisons).
    """
    anchors = _anchors_of(grid)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    labels = np.full(len(anchors), NEGATIVE, dtype=np.int64)
    best = np.zeros(len(anchors))
    if len(gts) and len(anchors):
        if thresholds is None:
            thr = dynamic_threshold(gts[:, 2] - gts[:, 0], gts[:, 3] - gts[:, 1], gamma, floor, base, ref_size)
        else:
            thr = np.broadcast_to(np.asarray(thresholds, float), (len(gts),))
        ious = box_iou(anchors, gts)
        eligible = ious > np.atleast_1d(thr)[None, :]
        masked = np.where(eligible, ious, -1.0)
        top = masked.max(axis=1)
        has = top >= 0
        labels[has] = masked[has].argmax(axis=1)
        best[has] = top[has]
        # ties: smaller GT area first, then lower index
        ties = has & ((masked == top[:, None]).sum(axis=1) > 1)
        areas = box_area(gts)
        for a in np.flatnonzero(ties):
            cand = np.flatnonzero(masked[a] == top[a])
            labels[a] = cand[np.lexsort((cand, areas[cand]))][0]
    labels = _mark_ignored(labels, anchors, ignores, ignore_overlap)
    best[labels < 0] = 0.0
    return Assignment(labels, best, len(gts))


def assign_fixed(grid, gts, pos_thr=0.7, neg_thr=0.3, ignores=None, min_pos_iou=0.0, ignore_overlap=0.5):
    """Classical max-IoU assignment with low-quality rescue.

    Anchors with best IoU ``>= pos_thr`` are positive, ``< neg_thr`` negative,
    the rest ignored.  Each GT additionally claims its best anchor(s) when that
    IoU exceeds ``min_pos_iou``.
    """
    anchors = _anchors_of(grid)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    labels = np.full(len(anchors), NEGATIVE, dtype=np.int64)
    best = np.zeros(len(anchors))
    if len(gts) and len(anchors):
        ious = box_iou(anchors, gts)
        arg = ious.argmax(axis=1)
        mx = ious[np.arange(len(anchors)), arg]
        labels[(mx >= neg_thr) & (mx < pos_thr)] = IGNORE
        pos = mx >= pos_thr
        labels[pos] = arg[pos]
        best[pos] = mx[pos]
        gt_best = ious.max(axis=0)
        for g in range(len(gts)):
            if gt_best[g] > min_pos_iou:
                for a in np.flatnonzero(ious[:, g] == gt_best[g]):
                    labels[a] = g
                    best[a] = gt_best[g]
    labels = _mark_ignored(labels, anchors, ignores, ignore_overlap)
    best[labels < 0] = 0.0
    return Assignment(labels, best, len(gts))
