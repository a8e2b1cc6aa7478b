"""Detector configuration and layered run configs (YAML file < key=value overrides)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

import yaml

from .data import SyntheticSpec


@dataclass
class DetectorConfig:
    num_classes: int = 9
    # architecture
    backbone_channels: Tuple[int, ...] = (16, 32, 64, 96)
    fpn_channels: int = 64
    rpn: str = "crpn"  # "crpn" or "rpn" (fixed-threshold single stage)
    use_fi: bool = True
    crpn_anchor_scale: float = 4.0
    rpn_anchor_scale: float = 8.0
    roi_size: int = 7
    roi_sampling_ratio: int = 2
    head_hidden: int = 256
    # proposal network
    gamma: float = 0.15
    alpha1: float = 9.0
    alpha2: float = 0.9
    stage2_pos_iou: float = 0.65
    stage2_neg_iou: float = 0.3
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_num_samples: int = 256
    rpn_pos_fraction: float = 0.5
    rpn_nms: float = 0.7
    pre_nms_top_k: int = 1000
    train_proposals: int = 1000
    test_proposals: int = 300
    # RoI head
    roi_num_samples: int = 512
    roi_pos_fraction: float = 0.25
    roi_pos_iou: float = 0.5
    score_thr: float = 0.05
    det_nms: float = 0.5
    max_dets: int = 100
    # feature imitation
    alpha3: float = 0.5
    tau: float = 0.6
    t_hq: float = 0.65
    t_lq: float = 0.3
    betas: Tuple[float, float, float] = (0.5, 0.1, 0.05)
    n_pos: int = 64
    n_neg: int = 64
    min_hq_predictions: int = 2
    exemplar_capacity: int = 256
    rare_capacity: int = 128
    rare_fraction: float = 0.01
    # optimisation
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 12
    lr_steps: Tuple[int, ...] = (8, 11)
    lr_gamma: float = 0.1
    batch_size: int = 4
    warmup_iters: int = 100
    warmup_ratio: float = 0.001
    grad_clip: Optional[float] = 10.0
    flip_prob: float = 0.5
    max_iters: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        for name in ("backbone_channels", "betas", "lr_steps"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if self.rpn not in ("crpn", "rpn"):
            raise ValueError(f"rpn must be 'crpn' or 'rpn', got {self.rpn!r}")
        if not 0 < self.t_lq < self.t_hq < 1:
            raise ValueError("need 0 < t_lq < t_hq < 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if len(self.backbone_channels) != 4:
            raise ValueError("backbone_channels needs one entry per stage (4)")
        if len(self.betas) != 3 or any(b < 0 for b in self.betas):
            raise ValueError("betas must be three non-negative weights")
        for name in ("alpha1", "alpha2", "alpha3", "lr", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("num_classes", "fpn_channels", "train_proposals", "test_proposals", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "DetectorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown detector config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "DetectorConfig":
        return dataclasses.replace(self, **kw)


ABLATIONS = {
    "baseline": {"rpn": "rpn", "use_fi": False},
    "+CRPN": {"rpn": "crpn", "use_fi": False},
    "+FI": {"rpn": "rpn", "use_fi": True},
    "+CRPN+FI": {"rpn": "crpn", "use_fi": True},
}


@dataclass
class RunConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    val_images: int = 16
    annotations: Optional[str] = None  # COCO file; synthetic data when unset

    def to_dict(self) -> Dict[str, Any]:
        return {
            "detector": self.detector.to_dict(),
            "data": self.data.to_dict(),
            "val_images": self.val_images,
            "annotations": self.annotations,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {"detector", "data", "val_images", "annotations"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        data = d.get("data") or {}
        bad = set(data) - {f.name for f in fields(SyntheticSpec)}
        if bad:
            raise ValueError(f"unknown data config keys: {sorted(bad)}")
        return cls(
            DetectorConfig.from_dict(d.get("detector") or {}),
            SyntheticSpec(**data),
            int(d.get("val_images", 16)),
            d.get("annotations"),
        )

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def parse_override(item: str) -> Tuple[str, Any]:
    if "=" not in item:
        raise ValueError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def apply_overrides(d: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Set dotted keys, e.g. ``detector.lr=0.02`` or ``data.num_images=50``."""
    d = yaml.safe_load(yaml.safe_dump(d))  # deep copy
    for item in overrides:
        key, value = parse_override(item)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = value
    return d


def load_run_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    base: Dict[str, Any] = RunConfig().to_dict()
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a mapping")
        for section, values in loaded.items():
            if isinstance(values, dict) and isinstance(base.get(section), dict):
                base[section].update(values)
            else:
                base[section] = values
    return RunConfig.from_dict(apply_overrides(base, overrides))
