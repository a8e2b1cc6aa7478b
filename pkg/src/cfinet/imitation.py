"""Feature imitation: instance quality, exemplar queues, embedding and loss."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .geometry import clip_boxes

log = logging.getLogger(__name__)

EMBED_DIM = 128
HIDDEN_DIM = 512

TRANSLATIONS = tuple((s, s) for s in (0.1, -0.1, 0.2, -0.2)) + tuple((s, -s) for s in (0.1, -0.1, 0.2, -0.2))
ZOOMS = (0.8, 0.85, 0.9, 0.95, 1.05, 1.1, 1.15, 1.2)


def instance_quality(class_probs, ious, gt_label: int) -> Tuple[float, int]:
    """Mean of ``p[gt_label] * IoU`` over predictions whose argmax is ``gt_label``.

    ``class_probs`` is (M, N+1) with background in column 0, so foreground label
    ``c`` indexes column ``c``.  Returns ``(IQ, M')``; IQ is 0 when no
    prediction qualifies.
    """
    probs = np.asarray(class_probs, dtype=np.float64).reshape(len(ious), -1) if len(ious) else np.zeros((0, 1))
    ious = np.asarray(ious, dtype=np.float64)
    if len(ious) == 0:
        return 0.0, 0
    keep = probs.argmax(axis=1) == gt_label
    m = int(keep.sum())
    if m == 0:
        return 0.0, 0
    return float(np.mean(probs[keep, gt_label] * ious[keep])), m


def quality_tier(iq: float, t_lq: float = 0.3, t_hq: float = 0.65) -> str:
    if iq >= t_hq:
        return "high"
    return "mid" if iq >= t_lq else "low"


class ExemplarSet:
    """Per-class FIFO queues of raw RoI features.

    Rare classes get ``rare_capacity`` slots and half the positive samples.
    """

    def __init__(self, num_classes: int, capacity: int = 256, rare_capacity: int = 128, rare_classes=()):
        self.num_classes = num_classes
        self.capacity = capacity
        self.rare_capacity = rare_capacity
        self.rare = set(int(c) for c in rare_classes)
        self.queues: Dict[int, deque] = {
            c: deque(maxlen=self.capacity_of(c)) for c in range(1, num_classes + 1)
        }

    def capacity_of(self, label: int) -> int:
        return self.rare_capacity if label in self.rare else self.capacity

    def positives_for(self, label: int, n_pos: int) -> int:
        return n_pos // 2 if label in self.rare else n_pos

    def push(self, label: int, feature: torch.Tensor):
        if label not in self.queues:
            raise KeyError(f"unknown class {label}")
        self.queues[label].append(feature.detach())

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def size(self, label: int) -> int:
        return len(self.queues[label])

    def sample(self, label: int, n: int, rng: np.random.Generator) -> List[torch.Tensor]:
        q = self.queues[label]
        k = min(n, len(q))
        if k == 0:
            return []
        return [q[i] for i in sorted(rng.choice(len(q), k, replace=False))]

    def others(self, label: int) -> List[torch.Tensor]:
        return [f for c, q in self.queues.items() if c != label for f in q]

    def occupancy(self) -> Dict[int, int]:
        return {c: len(q) for c, q in self.queues.items()}


def rare_classes_from_counts(counts: Dict[int, int], fraction: float = 0.01) -> List[int]:
    """Classes whose GT count is below ``fraction`` of the median class count."""
    if not counts:
        return []
    median = float(np.median(list(counts.values())))
    return sorted(c for c, n in counts.items() if n < fraction * median)


class Feat2Embed(nn.Module):
    """Three unpadded 3x3 convs (7 -> 5 -> 3 -> 1), then a 512-512-128 MLP."""

    def __init__(self, in_channels: int, roi_size: int = 7, hidden: int = HIDDEN_DIM, dim: int = EMBED_DIM):
        super().__init__()
        if roi_size != 7:
            raise ValueError("Feat2Embed expects 7x7 RoI features")
        self.roi_size = roi_size
        self.convs = nn.Sequential(
            nn.Conv2d(in_channels, in_channels, 3),
            nn.ReLU(inplace=True),
            nn.Conv2d(in_channels, in_channels, 3),
            nn.ReLU(inplace=True),
            nn.Conv2d(in_channels, in_channels, 3),
            nn.ReLU(inplace=True),
        )
        self.mlp = nn.Sequential(
            nn.Linear(in_channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden),
            nn.ReLU(inplace=True),
        )
        self.embed = nn.Linear(hidden, dim)

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or tuple(x.shape[-2:]) != (self.roi_size, self.roi_size):
            raise ValueError(f"Feat2Embed expects (K, C, 7, 7) input, got {tuple(x.shape)}")
        z = self.convs(x).flatten(1)
        return F.normalize(self.embed(self.mlp(z)), dim=1)

    def forward(self, x: torch.Tensor, frozen: bool = False) -> torch.Tensor:
        if not frozen:
            return self._forward(x)
        # same weights, cut out of the graph
        params = {k: v.detach() for k, v in self.named_parameters()}
        return functional_call(self, params, (x,))


def augment_boxes(box, image_size: Tuple[float, float]) -> np.ndarray:
    """Eight translated and eight rescaled copies of ``box``, clipped.

    A copy that degenerates after clipping is replaced by the original box.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    w, h = x2 - x1, y2 - y1
    cx, cy = x1 + 0.5 * w, y1 + 0.5 * h
    out = [[x1 + sw * w, y1 + sh * h, x2 + sw * w, y2 + sh * h] for sw, sh in TRANSLATIONS]
    out += [[cx - 0.5 * z * w, cy - 0.5 * z * h, cx + 0.5 * z * w, cy + 0.5 * z * h] for z in ZOOMS]
    out = clip_boxes(np.asarray(out), image_size)
    bad = (out[:, 2] <= out[:, 0]) | (out[:, 3] <= out[:, 1])
    out[bad] = [x1, y1, x2, y2]
    return out


def augment_gamma(box, image_size, extract: Callable[[np.ndarray], torch.Tensor]) -> torch.Tensor:
    """RoI features of the 16 augmented boxes; ``extract`` maps (16, 4) boxes to (16, C, 7, 7)."""
    return extract(augment_boxes(box, image_size))


def fi_loss(anchors: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """Supervised-contrastive imitation loss averaged over anchor embeddings.

    For anchor ``v_j``: ``-1/|P+| * sum_p log(exp(v_j.v_p/tau) / sum_{i in P} exp(v_j.v_i/tau))``
    where ``P = P+ ∪ P-``.  Zero when there are no positives or no anchors.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if len(positives) == 0 or len(anchors) == 0:
        return anchors.new_zeros(())
    bank = torch.cat([positives, negatives], dim=0) if len(negatives) else positives
    logits = anchors @ bank.T / tau  # (J, |P|)
    log_denom = torch.logsumexp(logits, dim=1, keepdim=True)
    log_prob = logits[:, : len(positives)] - log_denom
    return (-log_prob.mean(dim=1)).mean()


@dataclass
class ImitationGroup:
    """Everything one GT contributes to the imitation loss."""

    label: int
    iq: float
    tier: str
    anchors: torch.Tensor  # current RoI features (J, C, 7, 7)
    pos_current: Optional[torch.Tensor] = None  # augmented features of a high-quality GT
    pos_exemplar: List[torch.Tensor] = field(default_factory=list)
    neg_current: List[int] = field(default_factory=list)  # rows of the background pool
    neg_exemplar: List[torch.Tensor] = field(default_factory=list)

    @property
    def num_pos(self) -> int:
        n = 0 if self.pos_current is None else len(self.pos_current)
        return n + len(self.pos_exemplar)

    @property
    def num_neg(self) -> int:
        return len(self.neg_current) + len(self.neg_exemplar)


@dataclass
class FIConfig:
    t_hq: float = 0.65
    t_lq: float = 0.3
    betas: Tuple[float, float, float] = (0.5, 0.1, 0.05)  # low, mid, high
    n_pos: int = 64
    n_neg: int = 64
    min_hq_predictions: int = 2
    tau: float = 0.6

    def beta(self, tier: str) -> float:
        return {"low": self.betas[0], "mid": self.betas[1], "high": self.betas[2]}[tier]


def update_and_sample(
    gt_labels: Sequence[int],
    gt_features: torch.Tensor,
    qualities: Sequence[Tuple[float, int]],
    anchor_features: Sequence[torch.Tensor],
    num_bg: int,
    exemplars: ExemplarSet,
    augment: Callable[[int], torch.Tensor],
    cfg: FIConfig,
    rng: np.random.Generator,
) -> List[ImitationGroup]:
    """One pass of exemplar maintenance and positive/negative selection.

    ``qualities[i]`` is ``(IQ, M')`` for GT ``i``; ``anchor_features[i]`` the
    current RoI features whose embeddings are pulled (J_i, C, 7, 7);
    ``num_bg`` the size of the background RoI pool; ``augment(i)`` returns the
    16 augmented RoI features of GT ``i``.  Negatives are drawn uniformly from
    the background pool and the other classes' queues before the GT is
    pushed.  A GT that is not high quality and whose class queue is empty is
    skipped.
    """
    groups = []
    for i, label in enumerate(gt_labels):
        label = int(label)
        iq, m_prime = qualities[i]
        others = exemplars.others(label)
        pool_size = num_bg + len(others)
        k = min(cfg.n_neg, pool_size)
        picks = np.sort(rng.choice(pool_size, k, replace=False)) if k else np.zeros(0, dtype=int)
        g = ImitationGroup(label, iq, quality_tier(iq, cfg.t_lq, cfg.t_hq), anchor_features[i])
        g.neg_current = [int(p) for p in picks if p < num_bg]
        g.neg_exemplar = [others[p - num_bg] for p in picks if p >= num_bg]
        if iq >= cfg.t_hq and m_prime >= cfg.min_hq_predictions:
            exemplars.push(label, gt_features[i])
            g.pos_current = augment(i)
        else:
            g.pos_exemplar = exemplars.sample(label, exemplars.positives_for(label, cfg.n_pos), rng)
            if not g.pos_exemplar:
                log.debug("class %d exemplar queue empty; GT %d skipped", label, i)
                continue
        groups.append(g)
    return groups


def embed_groups(embed: Feat2Embed, groups: Sequence[ImitationGroup], bg_pool: Optional[torch.Tensor] = None):
    """Embeddings ``(anchors, positives, negatives)`` for every group.

    All current features go through one trainable pass and every distinct
    exemplar feature through one frozen pass.
    """
    current, spans = [], []
    for g in groups:
        a = len(g.anchors)
        p = 0 if g.pos_current is None else len(g.pos_current)
        current.append(g.anchors)
        if p:
            current.append(g.pos_current)
        spans.append((a, p))
    used_bg = sorted({i for g in groups for i in g.neg_current})
    if used_bg:
        current.append(bg_pool[used_bg])
    cur = embed(torch.cat(current)) if current else None
    bg_row = {i: n for n, i in enumerate(used_bg)}
    bg_off = sum(a + p for a, p in spans)

    ex_index: Dict[int, int] = {}
    ex_feats = []
    for g in groups:
        for f in g.pos_exemplar + g.neg_exemplar:
            if id(f) not in ex_index:
                ex_index[id(f)] = len(ex_feats)
                ex_feats.append(f)
    ex = embed(torch.stack(ex_feats), frozen=True) if ex_feats else None

    out, off = [], 0
    for g, (a, p) in zip(groups, spans):
        anchors = cur[off : off + a]
        pos = [cur[off + a : off + a + p]]
        off += a + p
        if g.pos_exemplar:
            pos.append(ex[[ex_index[id(f)] for f in g.pos_exemplar]])
        neg = []
        if g.neg_current:
            neg.append(cur[[bg_off + bg_row[i] for i in g.neg_current]])
        if g.neg_exemplar:
            neg.append(ex[[ex_index[id(f)] for f in g.neg_exemplar]])
        empty = anchors.new_zeros((0, anchors.shape[1]))
        out.append((anchors, torch.cat(pos), torch.cat(neg) if neg else empty))
    return out


def weighted_fi_loss(embed: Feat2Embed, groups: Sequence[ImitationGroup], cfg: FIConfig, ref: torch.Tensor, bg_pool=None) -> torch.Tensor:
    """Tier-weighted imitation loss averaged over contributing GTs."""
    if not groups:
        return ref.new_zeros(())
    total = ref.new_zeros(())
    for g, (a, p, n) in zip(groups, embed_groups(embed, groups, bg_pool)):
        total = total + cfg.beta(g.tier) * fi_loss(a, p, n, cfg.tau)
    return total / len(groups)


def queue_report(exemplars: ExemplarSet, tiers: Iterable[str], epoch: int) -> List[str]:
    """Line-per-record diagnostic dump of queue occupancy and tier counts."""
    counts = {"low": 0, "mid": 0, "high": 0}
    for t in tiers:
        counts[t] += 1
    lines = [f"epoch={epoch} class={c} occupancy={n} capacity={exemplars.capacity_of(c)}" for c, n in exemplars.occupancy().items()]
    lines.append(f"epoch={epoch} tiers low={counts['low']} mid={counts['mid']} high={counts['high']}")
    return lines
