"""Training loop, evaluation pass and versioned checkpoints."""

from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import DetectorConfig
from .data import DatasetRecord
from .detector import Detector, Target
from .evaluation import EvalReport, GroundTruth, evaluate
from .imitation import rare_classes_from_counts

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cfinet-checkpoint"
CHECKPOINT_VERSION = 1
SIZE_DIVISOR = 32


class NonFiniteLoss(RuntimeError):
    pass


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def collate(records: Sequence[DatasetRecord], flips: Optional[Sequence[bool]] = None) -> Tuple[torch.Tensor, List[Target]]:
    """Stack images into a zero-padded batch (sizes rounded up to 32) and
    apply optional horizontal flips to images and boxes alike."""
    h = max(r.height for r in records)
    w = max(r.width for r in records)
    h, w = (math.ceil(v / SIZE_DIVISOR) * SIZE_DIVISOR for v in (h, w))
    batch = torch.zeros((len(records), 3, h, w))
    targets = []
    for i, r in enumerate(records):
        img = torch.as_tensor(np.ascontiguousarray(r.load_image())).permute(2, 0, 1).float()
        boxes, ignores = r.boxes.copy(), r.ignores.copy()
        if flips is not None and flips[i]:
            img = img.flip(-1)
            for b in (boxes, ignores):
                if len(b):
                    b[:, [0, 2]] = r.width - b[:, [2, 0]]
        batch[i, :, : r.height, : r.width] = img
        targets.append(Target(boxes, r.labels.copy(), ignores))
    return batch, targets


def lr_at(cfg: DetectorConfig, iteration: int, epoch: int) -> float:
    lr = cfg.lr * cfg.lr_gamma ** sum(epoch >= s for s in cfg.lr_steps)
    if iteration < cfg.warmup_iters:
        k = iteration / cfg.warmup_iters
        lr *= cfg.warmup_ratio + (1 - cfg.warmup_ratio) * k
    return lr


@torch.no_grad()
def predict(model: Detector, records: Sequence[DatasetRecord], batch_size: int = 8):
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(records), batch_size):
        images, _ = collate(records[i : i + batch_size])
        out.extend(model.forward_infer(images))
    model.train(was_training)
    return out


def evaluate_model(model: Detector, records: Sequence[DatasetRecord]) -> EvalReport:
    dets = predict(model, records)
    gts = [GroundTruth(r.boxes, r.labels, r.ignores) for r in records]
    return evaluate(dets, gts, max_dets=model.cfg.max_dets)


@dataclass
class TrainResult:
    model: Detector
    history: List[Dict[str, float]] = field(default_factory=list)
    evals: List[Dict[str, float]] = field(default_factory=list)
    iterations: int = 0
    seconds: float = 0.0


def train(
    cfg: DetectorConfig,
    records: Sequence[DatasetRecord],
    val_records: Sequence[DatasetRecord] = (),
    log_path: Optional[Path] = None,
    epoch_callback: Optional[Callable[[Detector, int], Optional[Dict[str, float]]]] = None,
    model: Optional[Detector] = None,
) -> TrainResult:
    """Plain SGD training with linear warmup and step decay.

    Every iteration appends one JSON line (components plus total) to
    ``log_path``.  A non-finite loss aborts with the offending batch ids.
    ``epoch_callback`` may add metrics to the epoch summary; a truthy
    ``"stop"`` entry ends training early.
    """
    seed_everything(cfg.seed)
    model = model or Detector(cfg)
    counts: Dict[int, int] = {}
    for r in records:
        for c in r.labels:
            counts[int(c)] = counts.get(int(c), 0) + 1
    model.exemplars = model.new_exemplar_set(rare_classes_from_counts(counts, cfg.rare_fraction))
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)
    log_fh = open(log_path, "a") if log_path is not None else None
    start = time.time()
    it = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(records))
            for s in range(0, len(order), cfg.batch_size):
                if cfg.max_iters is not None and it >= cfg.max_iters:
                    break
                ids = order[s : s + cfg.batch_size]
                batch = [records[i] for i in ids]
                images, targets = collate(batch, rng.random(len(batch)) < cfg.flip_prob)
                for g in opt.param_groups:
                    g["lr"] = lr_at(cfg, it, epoch)
                losses = model.forward_train(images, targets, rng)
                row = {k: float(v.detach()) for k, v in losses.items()}
                if not all(math.isfinite(v) for v in row.values()):
                    raise NonFiniteLoss(f"non-finite loss at iteration {it}, images {[batch[i].image_id for i in range(len(batch))]}: {row}")
                opt.zero_grad()
                losses["total"].backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                row.update(iteration=it, epoch=epoch, lr=opt.param_groups[0]["lr"])
                result.history.append(row)
                if log_fh:
                    log_fh.write(json.dumps(row) + "\n")
                it += 1
            if cfg.max_iters is not None and it >= cfg.max_iters and epoch < cfg.epochs - 1:
                log.info("max_iters=%d reached in epoch %d", cfg.max_iters, epoch)
            summary = {"epoch": epoch, "iterations": it}
            if val_records:
                summary.update(evaluate_model(model, val_records).summary())
            if epoch_callback is not None:
                summary.update(epoch_callback(model, epoch) or {})
            result.evals.append(summary)
            if log_fh:
                log_fh.write(json.dumps({"eval": summary}) + "\n")
                log_fh.flush()
            if summary.get("stop") or (cfg.max_iters is not None and it >= cfg.max_iters):
                break
    finally:
        if log_fh:
            log_fh.close()
    result.iterations = it
    result.seconds = time.time() - start
    return result


def save_checkpoint(path, model: Detector, epoch: int):
    """Weights and config; the exemplar queues are training state and are not saved."""
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": model.cfg.to_dict(),
            "epoch": epoch,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> Tuple[Detector, int]:
    ck = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(ck, dict) or ck.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a detector checkpoint")
    if ck.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ck.get('version')}")
    model = Detector(DetectorConfig.from_dict(ck["config"]))
    model.load_state_dict(ck["state_dict"])
    model.eval()
    return model, int(ck["epoch"])
