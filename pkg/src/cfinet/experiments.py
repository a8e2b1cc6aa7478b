"""Experiment drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .audit import AnchorIoUAudit, audit_anchor_iou, audit_proposals
from .config import ABLATIONS, DetectorConfig, RunConfig
from .data import DatasetRecord, SyntheticSpec, generate, load_coco
from .detector import Detector
from .training import collate, train

log = logging.getLogger(__name__)

VAL_SEED_OFFSET = 10_000


def build_datasets(run: RunConfig) -> Tuple[List[DatasetRecord], List[DatasetRecord]]:
    """Training and validation records.

    Synthetic validation images come from a disjoint seed; with an annotation
    file the last ``val_images`` records are held out (or, for very small
    sets, the training records double as validation).
    """
    if run.annotations:
        records, report = load_coco(run.annotations)
        log.info("loaded %d images, %d boxes (%d degenerate dropped)", report.num_images, report.num_boxes, report.dropped_degenerate)
        if len(records) > 2 * run.val_images > 0:
            return records[: -run.val_images], records[-run.val_images :]
        return records, records
    train_recs = list(generate(run.data))
    spec = run.data.to_dict()
    spec.update(num_images=run.val_images, seed=run.data.seed + VAL_SEED_OFFSET)
    return train_recs, list(generate(SyntheticSpec(**spec)))


@dataclass
class AnchorAuditResult:
    coverage: AnchorIoUAudit  # max-IoU statistics on the single-stage grid
    mining: AnchorIoUAudit  # mined-anchor counts on the coarse-to-fine grid

    def rows(self) -> List[dict]:
        cov = {r["subset"]: r for r in self.coverage.rows()}
        out = []
        for r in self.mining.rows():
            n = r["subset"]
            out.append(
                {
                    "subset": n,
                    "num_gts": r["num_gts"],
                    "mean_max_iou": cov[n]["mean_max_iou"],
                    "mean_max_iou_fine_grid": r["mean_max_iou"],
                    "mined_dynamic": r["mined_dynamic"],
                    f"mined_fixed_{self.mining.fixed_threshold:g}": r[f"mined_fixed_{self.mining.fixed_threshold:g}"],
                }
            )
        return out


def anchor_audit(records: Sequence[DatasetRecord], cfg: DetectorConfig, fixed_threshold: float = 0.7) -> AnchorAuditResult:
    return AnchorAuditResult(
        audit_anchor_iou(records, cfg.rpn_anchor_scale, fixed_threshold=fixed_threshold),
        audit_anchor_iou(records, cfg.crpn_anchor_scale, fixed_threshold=fixed_threshold),
    )


def proposal_audit_callback(records: Sequence[DatasetRecord], cap: int = 300, batch_size: int = 8):
    """Epoch callback that counts high-quality proposals on ``records``."""

    def callback(model: Detector, epoch: int) -> Dict[str, float]:
        was_training = model.training
        model.eval()
        props = []
        for i in range(0, len(records), batch_size):
            images, _ = collate(records[i : i + batch_size])
            props.extend(p.boxes.numpy() for p in model.propose(images, cap))
        model.train(was_training)
        return audit_proposals(props, [r.boxes for r in records], cap).row()

    return callback


def compare_proposals(
    cfg: DetectorConfig, train_records, eval_records, cap: int = 300
) -> Dict[str, List[Dict[str, float]]]:
    """Train the fixed-threshold and coarse-to-fine proposal variants (no
    imitation branch) and audit their proposals after every epoch."""
    out = {}
    for name, rpn in (("RPN", "rpn"), ("CRPN", "crpn")):
        res = train(
            cfg.replace(rpn=rpn, use_fi=False), train_records, epoch_callback=proposal_audit_callback(eval_records, cap)
        )
        out[name] = res.evals
    return out


def run_ablation(cfg: DetectorConfig, train_records, val_records, names: Optional[Sequence[str]] = None) -> List[dict]:
    """One row per configuration with the final validation metrics."""
    rows = []
    for name in names or ABLATIONS:
        res = train(cfg.replace(**ABLATIONS[name]), train_records, val_records)
        last = res.evals[-1]
        row = {"config": name}
        row.update({k: float(last[k]) for k in ("AP", "AP_eS", "AP_rS", "AP_gS", "AP50")})
        row["iterations"] = res.iterations
        row["seconds"] = round(res.seconds, 1)
        rows.append(row)
    return rows

