"""Two-stage detector: tiny backbone + pyramid, proposal network, RoI head and
the training-only feature-imitation branch."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms, roi_align

from .anchors import AnchorGrid, build_grid
from .config import DetectorConfig
from .crpn import CoarseToFineRPN, ProposalSet, StandardRPN
from .evaluation import Detections
from .geometry import box_iou, decode, encode, intersection_over_first
from .imitation import (
    ExemplarSet,
    FIConfig,
    Feat2Embed,
    augment_boxes,
    instance_quality,
    update_and_sample,
    weighted_fi_loss,
)

STRIDES = (4, 8, 16, 32)
# RoI-head delta normalisation
TARGET_STDS = (0.1, 0.1, 0.2, 0.2)
PIXEL_MEAN, PIXEL_STD = 127.5, 63.75


def _conv(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.GroupNorm(min(8, cout), cout), nn.ReLU(inplace=True))


class TinyBackbone(nn.Module):
    """Four stride-2 stages producing maps at 1/4, 1/8, 1/16 and 1/32."""

    def __init__(self, channels=(16, 32, 64, 96)):
        super().__init__()
        self.stem = _conv(3, channels[0], 2)
        stages, cin = [], channels[0]
        for c in channels:
            stages.append(nn.Sequential(_conv(cin, c, 2), _conv(c, c, 1)))
            cin = c
        self.stages = nn.ModuleList(stages)
        self.out_channels = tuple(channels)

    def forward(self, x):
        x = self.stem(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


class LateralPyramid(nn.Module):
    """1x1 laterals, top-down nearest upsampling with summation, 3x3 smoothing."""

    def __init__(self, in_channels: Sequence[int], channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in in_channels)

    def forward(self, feats):
        lat = [l(f) for l, f in zip(self.lateral, feats)]
        for i in range(len(lat) - 1, 0, -1):
            lat[i - 1] = lat[i - 1] + F.interpolate(lat[i], size=lat[i - 1].shape[-2:], mode="nearest")
        return [o(x) for o, x in zip(self.output, lat)]


def roi_levels(boxes: torch.Tensor, num_levels: int = 4, finest_scale: float = 56.0) -> torch.Tensor:
    scale = torch.sqrt((boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0))
    return torch.floor(torch.log2(scale / finest_scale + 1e-6)).clamp(0, num_levels - 1).long()


def extract_rois(feats: Sequence[torch.Tensor], rois: torch.Tensor, output_size: int = 7, sampling_ratio: int = 2) -> torch.Tensor:
    """Bilinear RoI pooling with scale-based level routing.

    ``rois`` is (R, 5) rows of ``(batch_index, x1, y1, x2, y2)``.
    """
    out = feats[0].new_zeros((len(rois), feats[0].shape[1], output_size, output_size))
    if len(rois) == 0:
        return out
    lv = roi_levels(rois[:, 1:], len(feats))
    for i, (f, s) in enumerate(zip(feats, STRIDES)):
        idx = torch.nonzero(lv == i).flatten()
        if len(idx):
            out[idx] = roi_align(f, rois[idx], output_size, 1.0 / s, sampling_ratio=sampling_ratio, aligned=True)
    return out


def _with_batch_index(boxes: torch.Tensor, b: int) -> torch.Tensor:
    return torch.cat([boxes.new_full((len(boxes), 1), float(b)), boxes], dim=1)


class RoIHead(nn.Module):
    def __init__(self, channels: int, num_classes: int, roi_size: int = 7, hidden: int = 256):
        super().__init__()
        self.fc1 = nn.Linear(channels * roi_size * roi_size, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.reg = nn.Linear(hidden, 4)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.normal_(self.reg.weight, std=0.001)
        nn.init.zeros_(self.cls.bias)
        nn.init.zeros_(self.reg.bias)

    def forward(self, x):
        x = F.relu(self.fc2(F.relu(self.fc1(x.flatten(1)))))
        return self.cls(x), self.reg(x)


def _sample(pos, neg, num, frac, rng):
    n_pos = min(len(pos), int(num * frac))
    pos = rng.choice(pos, n_pos, replace=False) if n_pos < len(pos) else pos
    n_neg = min(len(neg), num - len(pos))
    neg = rng.choice(neg, n_neg, replace=False) if n_neg < len(neg) else neg
    return np.sort(pos), np.sort(neg)


@dataclass
class Target:
    boxes: np.ndarray
    labels: np.ndarray
    ignores: np.ndarray


def total_loss(crpn, cls, reg, fi, alpha3: float):
    """Proposal loss plus head losses plus the weighted imitation term."""
    return crpn + cls + reg + alpha3 * fi


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.fpn_channels
        self.backbone = TinyBackbone(cfg.backbone_channels)
        self.neck = LateralPyramid(self.backbone.out_channels, c)
        if cfg.rpn == "crpn":
            self.rpn = CoarseToFineRPN(
                c, c, cfg.alpha1, cfg.alpha2, cfg.gamma, cfg.stage2_pos_iou, cfg.stage2_neg_iou,
                num_samples=cfg.rpn_num_samples, pos_fraction=cfg.rpn_pos_fraction,
            )
            self.anchor_scale = cfg.crpn_anchor_scale
        else:
            self.rpn = StandardRPN(
                c, c, cfg.rpn_pos_iou, cfg.rpn_neg_iou, num_samples=cfg.rpn_num_samples, pos_fraction=cfg.rpn_pos_fraction
            )
            self.anchor_scale = cfg.rpn_anchor_scale
        self.head = RoIHead(c, cfg.num_classes, cfg.roi_size, cfg.head_hidden)
        self.feat2embed = Feat2Embed(c, cfg.roi_size) if cfg.use_fi else None
        self.fi_cfg = FIConfig(cfg.t_hq, cfg.t_lq, cfg.betas, cfg.n_pos, cfg.n_neg, cfg.min_hq_predictions, cfg.tau)
        self.exemplars = self.new_exemplar_set()
        self.fi_calls = 0
        self.last_tiers: List[str] = []
        self._grids: Dict[Tuple[int, int], AnchorGrid] = {}

    def new_exemplar_set(self, rare_classes=()) -> ExemplarSet:
        return ExemplarSet(self.cfg.num_classes, self.cfg.exemplar_capacity, self.cfg.rare_capacity, rare_classes)

    def grid(self, width: int, height: int) -> AnchorGrid:
        key = (int(width), int(height))
        if key not in self._grids:
            self._grids[key] = build_grid(width, height, self.anchor_scale, STRIDES)
        return self._grids[key]

    def pool(self, feats, rois: torch.Tensor) -> torch.Tensor:
        return extract_rois(feats, rois, self.cfg.roi_size, self.cfg.roi_sampling_ratio)

    def features(self, images: torch.Tensor) -> List[torch.Tensor]:
        return self.neck(self.backbone((images - PIXEL_MEAN) / PIXEL_STD))

    def _rpn(self, images):
        h, w = images.shape[-2:]
        grid = self.grid(w, h)
        feats = self.features(images)
        return feats, grid, self.rpn(feats, grid)

    @torch.no_grad()
    def propose(self, images: torch.Tensor, cap: Optional[int] = None) -> List[ProposalSet]:
        h, w = images.shape[-2:]
        _, grid, out = self._rpn(images)
        return self.rpn.proposals(out, grid, (w, h), cap or self.cfg.test_proposals, self.cfg.rpn_nms, self.cfg.pre_nms_top_k)

    # ------------------------------------------------------------------
    def forward_train(self, images: torch.Tensor, targets: Sequence[Target], rng: np.random.Generator) -> Dict[str, torch.Tensor]:
        """Loss components and their total for one batch."""
        cfg = self.cfg
        h, w = images.shape[-2:]
        feats, grid, out = self._rpn(images)
        rpn_losses = self.rpn.loss(out, grid, [t.boxes for t in targets], [t.ignores for t in targets], rng)
        proposals = self.rpn.proposals(out, grid, (w, h), cfg.train_proposals, cfg.rpn_nms, cfg.pre_nms_top_k)

        rois, labels, reg_t, pos_mask, owner, neg_rows = [], [], [], [], [], []
        offset = 0
        for b, (t, props) in enumerate(zip(targets, proposals)):
            gts = t.boxes
            cand = np.concatenate([props.boxes.numpy().astype(np.float64), gts], axis=0)
            is_gt = np.r_[np.zeros(len(props), bool), np.ones(len(gts), bool)]
            if len(gts):
                iou = box_iou(cand, gts)
                arg, mx = iou.argmax(1), iou.max(1)
            else:
                arg, mx = np.zeros(len(cand), np.int64), np.zeros(len(cand))
            pos = mx >= cfg.roi_pos_iou
            neg = ~pos
            if len(t.ignores):
                neg &= intersection_over_first(cand, t.ignores).max(1) <= 0.5
            p, n = _sample(np.flatnonzero(pos), np.flatnonzero(neg), cfg.roi_num_samples, cfg.roi_pos_fraction, rng)
            sel = np.concatenate([p, n])
            rois.append(_with_batch_index(torch.as_tensor(cand[sel], dtype=torch.float32), b))
            lab = np.zeros(len(sel), np.int64)
            lab[: len(p)] = t.labels[arg[p]]
            labels.append(lab)
            rt = np.zeros((len(sel), 4))
            if len(p):
                rt[: len(p)] = encode(gts[arg[p]], cand[p]) / TARGET_STDS
            reg_t.append(rt)
            pm = np.zeros(len(sel), bool)
            pm[: len(p)] = True
            pos_mask.append(pm)
            # GT index of positives that are real proposals (not GT copies)
            own = np.full(len(sel), -1)
            own[: len(p)] = np.where(is_gt[p], -1, arg[p])
            owner.append(own)
            neg_rows.append(offset + len(p) + np.arange(len(n)))
            offset += len(sel)

        rois_t = torch.cat(rois)
        roi_feats = self.pool(feats, rois_t)
        cls_logits, reg = self.head(roi_feats)
        labels_t = torch.as_tensor(np.concatenate(labels))
        pm = torch.as_tensor(np.concatenate(pos_mask))
        loss_cls = F.cross_entropy(cls_logits, labels_t) if len(labels_t) else cls_logits.sum() * 0
        if pm.any():
            rt = torch.as_tensor(np.concatenate(reg_t)[pm.numpy()], dtype=reg.dtype)
            loss_reg = F.smooth_l1_loss(reg[pm], rt, beta=1.0, reduction="sum") / int(pm.sum())
        else:
            loss_reg = reg.sum() * 0

        zero = loss_cls.new_zeros(())
        loss_fi = zero
        if self.feat2embed is not None:
            loss_fi = self._imitation(
                feats, targets, rois_t, roi_feats, cls_logits, reg, np.concatenate(owner), np.concatenate(neg_rows), (w, h), rng
            )
        total = total_loss(rpn_losses["loss"], loss_cls, loss_reg, loss_fi, cfg.alpha3)
        return {
            "crpn": rpn_losses["loss"],
            "crpn_reg_coarse": rpn_losses["reg_coarse"].detach(),
            "crpn_reg_fine": rpn_losses["reg_fine"].detach(),
            "crpn_cls": rpn_losses["cls"].detach(),
            "cls": loss_cls,
            "reg": loss_reg,
            "fi": loss_fi,
            "total": total,
        }

    def _imitation(self, feats, targets, rois, roi_feats, cls_logits, reg, owner, neg_rows, image_size, rng):
        self.fi_calls += 1
        probs = torch.softmax(cls_logits.detach(), dim=1).numpy()
        stds = torch.as_tensor(TARGET_STDS, dtype=reg.dtype)
        pred_boxes = decode((reg.detach() * stds).double(), rois[:, 1:].double()).numpy()
        batch_idx = rois[:, 0].long().numpy()
        labels, gt_feats_boxes, qualities, anchors, gt_ref = [], [], [], [], []
        for b, t in enumerate(targets):
            if not len(t.boxes):
                continue
            gt_feats_boxes.append(_with_batch_index(torch.as_tensor(t.boxes, dtype=torch.float32), b))
            for g in range(len(t.boxes)):
                s = np.flatnonzero((batch_idx == b) & (owner == g))
                ious = box_iou(pred_boxes[s], t.boxes[g : g + 1])[:, 0] if len(s) else np.zeros(0)
                qualities.append(instance_quality(probs[s], ious, int(t.labels[g])))
                labels.append(int(t.labels[g]))
                anchors.append(s)
                gt_ref.append((b, g))
        if not labels:
            return roi_feats.new_zeros(())
        gt_feats = self.pool(feats, torch.cat(gt_feats_boxes))
        anchor_feats = [roi_feats[s] if len(s) else gt_feats[i : i + 1] for i, s in enumerate(anchors)]

        def augment(i):
            b, g = gt_ref[i]
            boxes = augment_boxes(targets[b].boxes[g], image_size)
            return self.pool(feats, _with_batch_index(torch.as_tensor(boxes, dtype=torch.float32), b))

        bg_pool = roi_feats[torch.as_tensor(neg_rows, dtype=torch.long)]
        groups = update_and_sample(
            labels, gt_feats, qualities, anchor_feats, len(bg_pool), self.exemplars, augment, self.fi_cfg, rng
        )
        self.last_tiers = [g.tier for g in groups]
        return weighted_fi_loss(self.feat2embed, groups, self.fi_cfg, roi_feats, bg_pool)

    # ------------------------------------------------------------------
    @torch.no_grad()
    def forward_infer(self, images: torch.Tensor) -> List[Detections]:
        """Detections per image; the imitation branch is never touched."""
        cfg = self.cfg
        h, w = images.shape[-2:]
        feats, grid, out = self._rpn(images)
        proposals = self.rpn.proposals(out, grid, (w, h), cfg.test_proposals, cfg.rpn_nms, cfg.pre_nms_top_k)
        rois = torch.cat([_with_batch_index(p.boxes.float(), b) for b, p in enumerate(proposals)])
        if len(rois) == 0:
            return [Detections(np.zeros((0, 4)), np.zeros(0), np.zeros(0)) for _ in proposals]
        cls_logits, reg = self.head(self.pool(feats, rois))
        probs = torch.softmax(cls_logits, dim=1)
        boxes = decode(reg * torch.as_tensor(TARGET_STDS), rois[:, 1:], (w, h))
        results = []
        for b in range(len(proposals)):
            m = rois[:, 0] == b
            pb, pp = boxes[m], probs[m, 1:]
            k = pp.shape[1]
            scores = pp.reshape(-1)
            cls = torch.arange(1, k + 1).repeat(len(pb))
            bx = pb.repeat_interleave(k, dim=0)
            keep = scores > cfg.score_thr
            keep &= ((bx[:, 2] - bx[:, 0]) > 0) & ((bx[:, 3] - bx[:, 1]) > 0)
            bx, scores, cls = bx[keep], scores[keep], cls[keep]
            kept = batched_nms(bx, scores, cls, cfg.det_nms)[: cfg.max_dets]
            results.append(Detections(bx[kept].numpy(), scores[kept].numpy(), cls[kept].numpy()))
        return results


def gradient_coverage(model: nn.Module) -> List[str]:
    """Names of parameters that have not received a non-zero gradient."""
    return [n for n, p in model.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
