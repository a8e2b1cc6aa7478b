"""Axis-aligned box arithmetic.

Boxes use the corner convention ``(x1, y1, x2, y2)`` in continuous pixel
coordinates, so ``area = (x2 - x1) * (y2 - y1)`` exactly.  The array
functions accept either numpy arrays or torch tensors of shape ``(..., 4)``
and return the same kind they were given; torch inputs keep their autograd
graph.
"""

from __future__ import annotations

import enum
import math
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

# subset upper bounds on box area (inclusive); anything above the last is Normal
AREA_BOUNDS = (144.0, 400.0, 1024.0)


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def is_valid(self) -> bool:
        return (
            all(math.isfinite(v) for v in self)
            and self.x2 >= self.x1
            and self.y2 >= self.y1
        )


class BoxDelta(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


class AreaSubset(str, enum.Enum):
    eS = "eS"
    rS = "rS"
    gS = "gS"
    Normal = "Normal"

    @property
    def index(self) -> int:
        return SUBSETS.index(self)


SUBSETS = (AreaSubset.eS, AreaSubset.rS, AreaSubset.gS, AreaSubset.Normal)


def _is_torch(x) -> bool:
    return isinstance(x, torch.Tensor)


def _as_array(x):
    if _is_torch(x):
        return x
    return np.asarray(x, dtype=np.float64)


def _stack(parts, x):
    if _is_torch(x):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def box_area(boxes):
    b = _as_array(boxes)
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def box_iou(boxes1, boxes2):
    """Pairwise IoU matrix of shape ``(N, M)``.

    Pairs with zero union (two coinciding degenerate boxes) get IoU 1 when the
    boxes are identical and 0 otherwise.
    """
    b1 = _as_array(boxes1).reshape(-1, 4)
    b2 = _as_array(boxes2).reshape(-1, 4)
    if _is_torch(b1):
        lt = torch.maximum(b1[:, None, :2], b2[None, :, :2])
        rb = torch.minimum(b1[:, None, 2:], b2[None, :, 2:])
        wh = (rb - lt).clamp(min=0)
    else:
        lt = np.maximum(b1[:, None, :2], b2[None, :, :2])
        rb = np.minimum(b1[:, None, 2:], b2[None, :, 2:])
        wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(b1)[:, None] + box_area(b2)[None, :] - inter
    if _is_torch(b1):
        same = (b1[:, None, :] == b2[None, :, :]).all(-1)
        safe = torch.where(union > 0, union, torch.ones_like(union))
        return torch.where(union > 0, inter / safe, same.to(inter.dtype))
    same = (b1[:, None, :] == b2[None, :, :]).all(-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), same.astype(float))
    return out


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two single boxes."""
    return float(box_iou(np.asarray(a, float), np.asarray(b, float))[0, 0])


def intersection_over_first(boxes1, boxes2):
    """``|a ∩ b| / |a|`` for every pair; 0 where ``a`` is degenerate."""
    b1 = np.asarray(boxes1, float).reshape(-1, 4)
    b2 = np.asarray(boxes2, float).reshape(-1, 4)
    lt = np.maximum(b1[:, None, :2], b2[None, :, :2])
    rb = np.minimum(b1[:, None, 2:], b2[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area = box_area(b1)[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(area > 0, inter / np.where(area > 0, area, 1.0), 0.0)


def elementwise_iou(pred, target, eps: float = 0.0):
    """IoU between matching rows of two ``(N, 4)`` arrays."""
    p = _as_array(pred)
    t = _as_array(target)
    if _is_torch(p):
        lt = torch.maximum(p[..., :2], t[..., :2])
        rb = torch.minimum(p[..., 2:], t[..., 2:])
        wh = (rb - lt).clamp(min=0)
    else:
        lt = np.maximum(p[..., :2], t[..., :2])
        rb = np.minimum(p[..., 2:], t[..., 2:])
        wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(p) + box_area(t) - inter
    return inter / (union + eps)


def iou_loss(pred, target):
    """Linear IoU loss ``1 - IoU`` per row, clamped to ``[0, 1]``.

    Raises ``ValueError`` when any target has non-positive area; such a box
    cannot serve as a regression target.
    """
    t = _as_array(target)
    p = _as_array(pred)
    if _is_torch(t):
        if bool((box_area(t) <= 0).any()):
            raise ValueError("iou_loss: regression target has non-positive area")
        if not _is_torch(p):
            p = torch.as_tensor(p, dtype=t.dtype)
        # pred can collapse during training; union stays >= area(target) > 0
        return (1.0 - elementwise_iou(p, t)).clamp(0.0, 1.0)
    if np.any(box_area(t) <= 0):
        raise ValueError("iou_loss: regression target has non-positive area")
    return np.clip(1.0 - elementwise_iou(p, t), 0.0, 1.0)


def _centers(b):
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def encode(target, anchor):
    """Regression deltas mapping ``anchor`` onto ``target``.

    ``dx = (cx_t - cx_a) / w_a``, ``dy`` likewise, ``dw = log(w_t / w_a)``,
    ``dh = log(h_t / h_a)``.
    """
    t = _as_array(target)
    a = _as_array(anchor)
    tx, ty, tw, th = _centers(t)
    ax, ay, aw, ah = _centers(a)
    if bool((aw <= 0).any()) or bool((ah <= 0).any()):
        raise ValueError("encode: anchor must have positive width and height")
    if bool((tw <= 0).any()) or bool((th <= 0).any()):
        raise ValueError("encode: target must have positive width and height")
    log = torch.log if _is_torch(t) else np.log
    return _stack([(tx - ax) / aw, (ty - ay) / ah, log(tw / aw), log(th / ah)], t)


# exp() overflow guard for the size deltas, as in most detection code
MAX_LOG_RATIO = math.log(1000.0 / 16)


def decode(deltas, anchor, image_size: Optional[Tuple[float, float]] = None):
    """Inverse of :func:`encode`.

    ``image_size`` is ``(width, height)``; when given the decoded boxes are
    clipped to ``[0, width] x [0, height]``.
    """
    d = _as_array(deltas)
    a = _as_array(anchor)
    ax, ay, aw, ah = _centers(a)
    if bool((aw <= 0).any()) or bool((ah <= 0).any()):
        raise ValueError("decode: anchor must have positive width and height")
    if _is_torch(d):
        dw = d[..., 2].clamp(max=MAX_LOG_RATIO)
        dh = d[..., 3].clamp(max=MAX_LOG_RATIO)
        exp = torch.exp
    else:
        dw = np.minimum(d[..., 2], MAX_LOG_RATIO)
        dh = np.minimum(d[..., 3], MAX_LOG_RATIO)
        exp = np.exp
    cx = ax + d[..., 0] * aw
    cy = ay + d[..., 1] * ah
    w = aw * exp(dw)
    h = ah * exp(dh)
    out = _stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], d)
    if image_size is not None:
        out = clip_boxes(out, image_size)
    return out


def clip_boxes(boxes, image_size: Tuple[float, float]):
    width, height = image_size
    b = _as_array(boxes)
    if _is_torch(b):
        return _stack(
            [
                b[..., 0].clamp(0, width),
                b[..., 1].clamp(0, height),
                b[..., 2].clamp(0, width),
                b[..., 3].clamp(0, height),
            ],
            b,
        )
    return np.stack(
        [
            np.clip(b[..., 0], 0, width),
            np.clip(b[..., 1], 0, height),
            np.clip(b[..., 2], 0, width),
            np.clip(b[..., 3], 0, height),
        ],
        axis=-1,
    )


def classify_area(box: Sequence[float]) -> AreaSubset:
    """SODA-style area subset of a single box."""
    area = float(box_area(np.asarray(box, float)))
    if not area > 0:
        raise ValueError(f"classify_area: box {tuple(box)} has zero area")
    return SUBSETS[int(np.searchsorted(AREA_BOUNDS, area, side="left"))]


def subset_indices(boxes) -> np.ndarray:
    """Vectorised :func:`classify_area`: subset index 0..3 per box."""
    areas = box_area(np.asarray(boxes, float).reshape(-1, 4))
    if np.any(areas <= 0):
        raise ValueError("subset_indices: zero-area box")
    return np.searchsorted(AREA_BOUNDS, areas, side="left").astype(np.int64)
