"""Command-line entry point.

Every subcommand writes into a fresh run directory that holds the effective
configuration, the seed and a version stamp.  Outputs are assembled in a
temporary sibling directory and only renamed into place on success.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
import time
from importlib import metadata
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import yaml

from . import plotting
from .audit import SUBSET_NAMES
from .config import ABLATIONS, RunConfig, load_run_config
from .data import generate, write_coco
from .evaluation import write_table
from .experiments import anchor_audit, build_datasets, compare_proposals, run_ablation
from .training import evaluate_model, load_checkpoint, predict, save_checkpoint, train

log = logging.getLogger("cfinet")

OUTPUT_ROOT_ENV = "CFINET_OUTPUT_ROOT"
EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    """Bad flags, configuration or inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override applied after the file, e.g. detector.lr=0.02 (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for detector.seed")
    common.add_argument("--out", type=Path, help=f"run directory (default: ${OUTPUT_ROOT_ENV}/<command>-<time>)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="cfinet", description="Small-object detector: training, evaluation and audits.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", parents=[common], help="render a synthetic dataset with COCO annotations")
    g.add_argument("--images", type=int, help="number of images (overrides data.num_images)")

    sub.add_parser("train", parents=[common], help="train a detector and evaluate on the validation split")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--overlays", type=int, default=2, help="number of detection overlay images to render")

    a = sub.add_parser("audit-anchors", parents=[common], help="per-subset anchor IoU and mining statistics")
    a.add_argument("--images", type=int, help="number of synthetic images (overrides data.num_images)")
    a.add_argument("--fixed-threshold", type=float, default=0.7)

    q = sub.add_parser("audit-proposals", parents=[common], help="high-quality proposal counts, RPN vs CRPN")
    q.add_argument("--cap", type=int, default=300)

    b = sub.add_parser("ablate", parents=[common], help="train the four ablation configurations")
    b.add_argument("--only", nargs="+", choices=list(ABLATIONS), help="subset of configurations")
    return p


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"detector.seed={args.seed}")
    if getattr(args, "images", None) is not None:
        if args.images < 0:
            raise UserError("--images must be non-negative")
        overrides.append(f"data.num_images={args.images}")
    if args.config is not None and not args.config.is_file():
        raise UserError(f"config file {args.config} not found")
    try:
        return load_run_config(args.config, overrides)
    except (ValueError, TypeError, yaml.YAMLError) as exc:
        raise UserError(f"invalid configuration: {exc}") from exc


def run_directory(args) -> Path:
    if args.out is not None:
        return args.out
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"


def write_stamp(work: Path, run: RunConfig, argv: List[str]):
    run.dump(work / "config.yaml")
    (work / "seed").write_text(f"{run.detector.seed}\n")
    stamp = {
        "package": package_version(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "platform": platform.platform(),
        "argv": argv,
    }
    (work / "version.json").write_text(json.dumps(stamp, indent=2) + "\n")


# ----------------------------------------------------------------------
def cmd_gen_synth(args, run: RunConfig, work: Path):
    records = list(generate(run.data))
    write_coco(records, work / "annotations.json", image_dir="images", num_classes=run.data.num_classes)
    manifest = {
        "num_images": len(records),
        "num_boxes": int(sum(len(r.boxes) for r in records)),
        "annotations": "annotations.json",
        "images": [f"images/{r.image_id:06d}.png" for r in records],
        "data": run.data.to_dict(),
    }
    (work / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(records)} images")


def _eval_outputs(work: Path, report, prefix: str = "eval"):
    (work / f"{prefix}.json").write_text(report.to_json() + "\n")
    write_table([dict(metric=k, value=v) for k, v in report.summary().items()], work / f"{prefix}.csv")
    (work / f"{prefix}.txt").write_text(report.table() + "\n")


def cmd_train(args, run: RunConfig, work: Path):
    train_recs, val_recs = build_datasets(run)
    if not train_recs:
        raise UserError("training set is empty")
    res = train(run.detector, train_recs, val_recs, log_path=work / "metrics.jsonl")
    save_checkpoint(work / "checkpoint.pt", res.model, len(res.evals))
    report = evaluate_model(res.model, val_recs)
    _eval_outputs(work, report)
    write_table(res.evals, work / "epochs.csv")
    print(report.table())


def cmd_eval(args, run: RunConfig, work: Path):
    if not args.checkpoint.is_file():
        raise UserError(f"checkpoint {args.checkpoint} not found")
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except (ValueError, RuntimeError) as exc:
        raise UserError(str(exc)) from exc
    _, val_recs = build_datasets(run)
    report = evaluate_model(model, val_recs)
    _eval_outputs(work, report)
    dets = predict(model, val_recs[: args.overlays])
    for r, d in zip(val_recs, dets):
        keep = d.scores >= 0.3
        plotting.draw_boxes(r.load_image(), d.boxes[keep], work / f"overlay_{r.image_id}.png", d.labels[keep], ignores=r.ignores)
    print(report.table())


def cmd_audit_anchors(args, run: RunConfig, work: Path):
    records = list(generate(run.data))
    res = anchor_audit(records, run.detector, args.fixed_threshold)
    rows = res.rows()
    write_table(rows, work / "anchor_audit.csv")
    (work / "anchor_audit.json").write_text(json.dumps(rows, indent=2) + "\n")
    plotting.anchor_iou_histograms(res.coverage, work / "anchor_iou_hist.png")
    plotting.anchor_iou_histograms(res.mining, work / "anchor_iou_hist_fine_grid.png")
    print(write_table(rows))


def cmd_audit_proposals(args, run: RunConfig, work: Path):
    train_recs, val_recs = build_datasets(run)
    curves = compare_proposals(run.detector, train_recs, val_recs, args.cap)
    rows = [dict(model=name, **ev) for name, evs in curves.items() for ev in evs]
    write_table(rows, work / "proposal_audit.csv")
    (work / "proposal_audit.json").write_text(json.dumps(rows, indent=2) + "\n")
    for s in SUBSET_NAMES:
        plotting.hq_proposal_curves({k: [e[f"HQ_{s}"] for e in v] for k, v in curves.items()}, work / f"hq_proposals_{s}.png", s)
    print(write_table(rows))


def cmd_ablate(args, run: RunConfig, work: Path):
    train_recs, val_recs = build_datasets(run)
    rows = run_ablation(run.detector, train_recs, val_recs, args.only)
    write_table(rows, work / "ablation.csv")
    (work / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    header = f"{'config':<10s}" + "".join(f"{m:>8s}" for m in ("AP", "AP_eS", "AP_rS", "AP_gS"))
    lines = [header] + [f"{r['config']:<10s}" + "".join(f"{100 * r[m]:8.1f}" for m in ("AP", "AP_eS", "AP_rS", "AP_gS")) for r in rows]
    (work / "ablation.txt").write_text("\n".join(lines) + "\n")
    plotting.ablation_bars(rows, work / "ablation.png")
    print("\n".join(lines))


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "audit-anchors": cmd_audit_anchors,
    "audit-proposals": cmd_audit_proposals,
    "ablate": cmd_ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run = resolve_config(args)
        final = run_directory(args)
        if final.exists() and any(final.iterdir()):
            raise UserError(f"output directory {final} exists and is not empty")
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    final.parent.mkdir(parents=True, exist_ok=True)
    work = Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))
    try:
        write_stamp(work, run, argv)
        COMMANDS[args.command](args, run, work)
    except UserError as exc:
        shutil.rmtree(work, ignore_errors=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        shutil.rmtree(work, ignore_errors=True)
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    if final.exists():
        final.rmdir()
    work.rename(final)
    print(f"run directory: {final}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
