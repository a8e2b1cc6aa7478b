"""Coarse-to-fine region proposal network.

Stage 1 regresses every anchor mined by :func:`~cfinet.anchors.mine_anchors`
(no scores).  The stage-1 boxes then steer an adaptive 3x3 convolution whose
taps are bilinearly sampled on a lattice spanning each refined box, and stage 2
predicts a second regression plus one objectness logit per location.

A conventional single-stage RPN with a fixed IoU threshold lives here too; it
is the baseline of the ablation runs and shares the proposal emitter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import nms

from .anchors import AnchorGrid, assign_fixed, mine_anchors
from .geometry import decode, encode, iou_loss


@dataclass
class RPNOutput:
    deltas1: Optional[torch.Tensor]  # (B, A, 4) coarse deltas, None for the baseline RPN
    refined: torch.Tensor  # (B, A, 4) stage-1 boxes (anchors for the baseline), no grad
    deltas2: torch.Tensor  # (B, A, 4) relative to ``refined``
    logits: torch.Tensor  # (B, A)


@dataclass
class ProposalSet:
    boxes: torch.Tensor  # (K, 4)
    scores: torch.Tensor  # (K,) objectness, descending

    def __len__(self) -> int:
        return len(self.boxes)


def _check_levels(features: Sequence[torch.Tensor], grid: AnchorGrid):
    if len(features) != len(grid.levels):
        raise ValueError(f"{len(features)} feature levels but the anchor grid has {len(grid.levels)}")
    for f, lv in zip(features, grid.levels):
        if tuple(f.shape[-2:]) != (lv.feat_h, lv.feat_w):
            raise ValueError(
                f"level {lv.name}: feature map {tuple(f.shape[-2:])} does not match grid {(lv.feat_h, lv.feat_w)}"
            )


def _flatten(maps: Sequence[torch.Tensor]) -> torch.Tensor:
    # (B, K, H, W) per level -> (B, sum H*W, K), row-major like the grid
    return torch.cat([m.permute(0, 2, 3, 1).reshape(m.shape[0], -1, m.shape[1]) for m in maps], dim=1)


def native_boxes(grid: AnchorGrid) -> np.ndarray:
    """The 3x3 receptive window (side ``3 * stride``) of every location."""
    out = []
    for lv in grid.levels:
        ctr = 0.5 * (lv.anchors[:, :2] + lv.anchors[:, 2:])
        half = 1.5 * lv.stride
        out.append(np.concatenate([ctr - half, ctr + half], axis=1))
    return np.concatenate(out, axis=0)


def sampling_points(boxes: torch.Tensor, stride: float) -> torch.Tensor:
    """Nine tap positions per box in feature-map coordinates.

    ``boxes`` is ``(..., 4)`` in pixels; returns ``(..., 9, 2)`` as ``(u, v)``
    with taps ordered row-major over ``(ky, kx)``.  Pixel ``p`` maps to
    feature coordinate ``p / stride - 0.5`` so cell centres sit on integers.
    """
    cx = 0.5 * (boxes[..., 0] + boxes[..., 2]) / stride - 0.5
    cy = 0.5 * (boxes[..., 1] + boxes[..., 3]) / stride - 0.5
    bw = (boxes[..., 2] - boxes[..., 0]).clamp(min=0) / stride
    bh = (boxes[..., 3] - boxes[..., 1]).clamp(min=0) / stride
    k = torch.tensor([-1.0, 0.0, 1.0], dtype=boxes.dtype, device=boxes.device)
    ky, kx = torch.meshgrid(k, k, indexing="ij")
    u = cx[..., None] + kx.reshape(-1) * bw[..., None] / 3.0
    v = cy[..., None] + ky.reshape(-1) * bh[..., None] / 3.0
    return torch.stack([u, v], dim=-1)


def bilinear_sample(feature: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample ``feature`` (B, C, H, W) at ``points`` (B, N, 2) -> (B, C, N).

    Points outside the map read zeros, matching zero padding.
    """
    _, _, h, w = feature.shape
    gx = (2.0 * points[..., 0] + 1.0) / w - 1.0
    gy = (2.0 * points[..., 1] + 1.0) / h - 1.0
    grid = torch.stack([gx, gy], dim=-1)[:, None]  # (B, 1, N, 2)
    out = F.grid_sample(feature, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out[:, :, 0]


def adaptive_conv(feature: torch.Tensor, boxes: torch.Tensor, stride: float, weight, bias=None) -> torch.Tensor:
    """3x3 convolution with taps placed inside ``boxes``.

    ``feature`` is (B, C, H, W), ``boxes`` (B, H*W, 4) in pixels, ``weight``
    (C_out, C, 3, 3).  Output is (B, C_out, H, W).
    """
    b, c, h, w = feature.shape
    pts = sampling_points(boxes, stride).reshape(b, h * w * 9, 2)
    taps = bilinear_sample(feature, pts).reshape(b, c, h * w, 9)
    out = torch.einsum("bcnk,ock->bon", taps, weight.reshape(weight.shape[0], c, 9))
    if bias is not None:
        out = out + bias[None, :, None]
    return out.reshape(b, -1, h, w)


def align_features(features, refined: torch.Tensor, grid: AnchorGrid, weight, bias=None) -> List[torch.Tensor]:
    """Apply :func:`adaptive_conv` level by level; ``refined`` is (B, A, 4)."""
    _check_levels(features, grid)
    out = []
    for f, lv, sl in zip(features, grid.levels, grid.level_slices()):
        out.append(adaptive_conv(f, refined[:, sl], lv.stride, weight, bias))
    return out


def _sample(pos_idx, neg_idx, num, pos_fraction, rng: np.random.Generator):
    n_pos = min(len(pos_idx), int(num * pos_fraction))
    pos = rng.choice(pos_idx, n_pos, replace=False) if n_pos < len(pos_idx) else pos_idx
    n_neg = min(len(neg_idx), num - len(pos))
    neg = rng.choice(neg_idx, n_neg, replace=False) if n_neg < len(neg_idx) else neg_idx
    return np.sort(pos), np.sort(neg)


def combine_crpn_loss(reg_coarse, reg_fine, cls, alpha1=9.0, alpha2=0.9):
    return alpha1 * (reg_coarse + reg_fine) + alpha2 * cls


def crpn_loss(coarse_pred, coarse_target, fine_pred, fine_target, logits, labels, alpha1=9.0, alpha2=0.9):
    """Two-stage proposal loss.

    ``*_pred``/``*_target`` are decoded boxes of the positives of each stage;
    an empty stage contributes 0.  ``logits``/``labels`` cover the sampled
    stage-2 anchors.  Returns a dict with ``loss`` and its components.
    """
    ref = logits
    zero = ref.new_zeros(())
    reg_c = iou_loss(coarse_pred, coarse_target).mean() if len(coarse_pred) else zero
    reg_f = iou_loss(fine_pred, fine_target).mean() if len(fine_pred) else zero
    cls = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype)) if len(logits) else zero
    return {
        "loss": combine_crpn_loss(reg_c, reg_f, cls, alpha1, alpha2),
        "reg_coarse": reg_c,
        "reg_fine": reg_f,
        "cls": cls,
    }


def emit_proposals(
    boxes: torch.Tensor,
    scores: torch.Tensor,
    level_ids: np.ndarray,
    image_size: Tuple[int, int],
    cap: int,
    nms_thr: Optional[float] = 0.7,
    pre_nms_top_k: int = 1000,
    min_size: float = 1.0,
    score_floor: float = 0.0,
) -> ProposalSet:
    """Clip, filter, per-level top-k, cross-level NMS and cap.

    ``boxes`` are already-decoded (A, 4) proposals for one image.
    ``nms_thr=None`` disables suppression.
    """
    if cap <= 0:
        raise ValueError("proposal cap must be positive")
    boxes = boxes.detach()
    scores = scores.detach()
    w, h = image_size
    boxes = torch.stack(
        [boxes[:, 0].clamp(0, w), boxes[:, 1].clamp(0, h), boxes[:, 2].clamp(0, w), boxes[:, 3].clamp(0, h)], dim=1
    )
    lv = torch.as_tensor(level_ids, device=boxes.device)
    keep = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size) & (scores > score_floor)
    idx = torch.nonzero(keep).flatten()
    chosen = []
    for level in torch.unique(lv[idx]):
        li = idx[lv[idx] == level]
        if len(li) > pre_nms_top_k:
            li = li[torch.topk(scores[li], pre_nms_top_k).indices]
        chosen.append(li)
    if not chosen:
        return ProposalSet(boxes.new_zeros((0, 4)), scores.new_zeros(0))
    idx = torch.cat(chosen)
    # stable order: score desc, then anchor index
    idx = idx[torch.argsort(idx)]
    idx = idx[torch.argsort(scores[idx], descending=True, stable=True)]
    if nms_thr is not None and nms_thr < 1.0:
        kept = nms(boxes[idx].float(), scores[idx].float(), nms_thr)
        idx = idx[kept]
    idx = idx[:cap]
    return ProposalSet(boxes[idx], scores[idx])


class CoarseToFineRPN(nn.Module):
    def __init__(
        self,
        in_channels: int,
        feat_channels: Optional[int] = None,
        alpha1: float = 9.0,
        alpha2: float = 0.9,
        gamma: float = 0.15,
        stage2_pos_iou: float = 0.65,
        stage2_neg_iou: float = 0.3,
        stage2_min_pos_iou: float = 0.0,
        num_samples: int = 256,
        pos_fraction: float = 0.5,
    ):
        super().__init__()
        feat = feat_channels or in_channels
        self.coarse_conv = nn.Conv2d(in_channels, feat, 3, padding=1)
        self.coarse_reg = nn.Conv2d(feat, 4, 1)
        self.adapt_weight = nn.Parameter(torch.empty(feat, in_channels, 3, 3))
        self.adapt_bias = nn.Parameter(torch.zeros(feat))
        self.fine_out = nn.Conv2d(feat, 5, 1)
        self.alpha1, self.alpha2, self.gamma = alpha1, alpha2, gamma
        self.stage2_pos_iou = stage2_pos_iou
        self.stage2_neg_iou = stage2_neg_iou
        self.stage2_min_pos_iou = stage2_min_pos_iou
        self.num_samples, self.pos_fraction = num_samples, pos_fraction
        self.reset_parameters()

    def reset_parameters(self):
        # hidden layers He-initialised, predictors small
        nn.init.kaiming_normal_(self.coarse_conv.weight, nonlinearity="relu")
        nn.init.kaiming_normal_(self.adapt_weight, nonlinearity="relu")
        for m in (self.coarse_reg, self.fine_out):
            nn.init.normal_(m.weight, std=0.01)
        for b in (self.coarse_conv.bias, self.coarse_reg.bias, self.fine_out.bias, self.adapt_bias):
            nn.init.zeros_(b)

    def zero_(self):
        """Zero every weight and bias; the pipeline then returns the anchors."""
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def coarse_regress(self, features, grid: AnchorGrid) -> torch.Tensor:
        _check_levels(features, grid)
        return _flatten([self.coarse_reg(F.relu(self.coarse_conv(f))) for f in features])

    def fine_stage(self, aligned) -> Tuple[torch.Tensor, torch.Tensor]:
        out = _flatten([self.fine_out(F.relu(a)) for a in aligned])
        return out[..., :4], out[..., 4]

    def forward(self, features, grid: AnchorGrid) -> RPNOutput:
        deltas1 = self.coarse_regress(features, grid)
        anchors = torch.as_tensor(grid.anchors, dtype=deltas1.dtype, device=deltas1.device)
        refined = decode(deltas1, anchors).detach()
        aligned = align_features(features, refined, grid, self.adapt_weight, self.adapt_bias)
        deltas2, logits = self.fine_stage(aligned)
        return RPNOutput(deltas1, refined, deltas2, logits)

    def loss(self, out: RPNOutput, grid: AnchorGrid, gt_boxes, ignores, rng: np.random.Generator):
        anchors_np = grid.anchors
        anchors = torch.as_tensor(anchors_np, dtype=out.deltas1.dtype)
        cp, ct, fp, ft, lg, lb = [], [], [], [], [], []
        for b, gts in enumerate(gt_boxes):
            gts = np.asarray(gts, float).reshape(-1, 4)
            ign = ignores[b] if ignores is not None else None
            a1 = mine_anchors(anchors_np, gts, ign, gamma=self.gamma)
            pos1 = a1.labels >= 0
            gts_t = torch.as_tensor(gts, dtype=anchors.dtype)
            if pos1.any():
                cp.append(decode(out.deltas1[b, pos1], anchors[pos1]))
                ct.append(gts_t[a1.labels[pos1]])
            refined = out.refined[b].numpy().astype(np.float64)
            a2 = assign_fixed(
                refined, gts, self.stage2_pos_iou, self.stage2_neg_iou, ign, min_pos_iou=self.stage2_min_pos_iou
            )
            pos, neg = _sample(
                np.flatnonzero(a2.labels >= 0), np.flatnonzero(a2.negative_mask), self.num_samples, self.pos_fraction, rng
            )
            if len(pos):
                fp.append(decode(out.deltas2[b, pos], out.refined[b, pos]))
                ft.append(gts_t[a2.labels[pos]])
            sel = np.concatenate([pos, neg])
            lg.append(out.logits[b, sel])
            lb.append(torch.cat([out.logits.new_ones(len(pos)), out.logits.new_zeros(len(neg))]))
        cat = lambda xs: torch.cat(xs) if xs else anchors.new_zeros((0, 4))
        return crpn_loss(
            cat(cp), cat(ct), cat(fp), cat(ft), torch.cat(lg), torch.cat(lb), self.alpha1, self.alpha2
        )

    def proposals(self, out: RPNOutput, grid: AnchorGrid, image_size, cap, nms_thr=0.7, pre_nms_top_k=1000, score_floor=0.0):
        boxes = decode(out.deltas2.detach(), out.refined)
        scores = torch.sigmoid(out.logits.detach())
        return [
            emit_proposals(boxes[b], scores[b], grid.level_ids, image_size, cap, nms_thr, pre_nms_top_k, score_floor=score_floor)
            for b in range(boxes.shape[0])
        ]


class StandardRPN(nn.Module):
    """Single-stage RPN: fixed-threshold assignment, L1 delta regression."""

    def __init__(
        self,
        in_channels: int,
        feat_channels: Optional[int] = None,
        pos_iou: float = 0.7,
        neg_iou: float = 0.3,
        min_pos_iou: float = 0.3,
        num_samples: int = 256,
        pos_fraction: float = 0.5,
    ):
        super().__init__()
        feat = feat_channels or in_channels
        self.conv = nn.Conv2d(in_channels, feat, 3, padding=1)
        self.out = nn.Conv2d(feat, 5, 1)
        self.pos_iou, self.neg_iou, self.min_pos_iou = pos_iou, neg_iou, min_pos_iou
        self.num_samples, self.pos_fraction = num_samples, pos_fraction
        nn.init.kaiming_normal_(self.conv.weight, nonlinearity="relu")
        nn.init.normal_(self.out.weight, std=0.01)
        nn.init.zeros_(self.conv.bias)
        nn.init.zeros_(self.out.bias)

    def forward(self, features, grid: AnchorGrid) -> RPNOutput:
        _check_levels(features, grid)
        out = _flatten([self.out(F.relu(self.conv(f))) for f in features])
        anchors = torch.as_tensor(grid.anchors, dtype=out.dtype).expand(out.shape[0], -1, -1)
        return RPNOutput(None, anchors, out[..., :4], out[..., 4])

    def loss(self, out: RPNOutput, grid: AnchorGrid, gt_boxes, ignores, rng: np.random.Generator):
        anchors_np = grid.anchors
        dp, dt, lg, lb = [], [], [], []
        for b, gts in enumerate(gt_boxes):
            gts = np.asarray(gts, float).reshape(-1, 4)
            ign = ignores[b] if ignores is not None else None
            a = assign_fixed(anchors_np, gts, self.pos_iou, self.neg_iou, ign, min_pos_iou=self.min_pos_iou)
            pos, neg = _sample(
                np.flatnonzero(a.labels >= 0), np.flatnonzero(a.negative_mask), self.num_samples, self.pos_fraction, rng
            )
            if len(pos):
                dp.append(out.deltas2[b, pos])
                dt.append(torch.as_tensor(encode(gts[a.labels[pos]], anchors_np[pos]), dtype=out.deltas2.dtype))
            sel = np.concatenate([pos, neg])
            lg.append(out.logits[b, sel])
            lb.append(torch.cat([out.logits.new_ones(len(pos)), out.logits.new_zeros(len(neg))]))
        zero = out.logits.new_zeros(())
        reg = F.l1_loss(torch.cat(dp), torch.cat(dt)) * 4 if dp else zero
        logits = torch.cat(lg)
        cls = F.binary_cross_entropy_with_logits(logits, torch.cat(lb).to(logits.dtype)) if len(logits) else zero
        return {"loss": reg + cls, "reg_coarse": zero, "reg_fine": reg, "cls": cls}

    proposals = CoarseToFineRPN.proposals
