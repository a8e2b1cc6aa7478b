"""Datasets: a deterministic synthetic small-object generator, COCO-style
annotation I/O and large-image patch splitting."""

from __future__ import annotations

import colorsys
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .geometry import AREA_BOUNDS, intersection_over_first, subset_indices

log = logging.getLogger(__name__)

IGNORE_CATEGORY = "ignore"


@dataclass
class DatasetRecord:
    image_id: int
    width: int
    height: int
    boxes: np.ndarray  # (N, 4) float64, corner convention
    labels: np.ndarray  # (N,) int64 in [1, num_classes]
    ignores: np.ndarray  # (K, 4)
    image: Optional[np.ndarray] = None  # (H, W, 3) uint8
    file_name: Optional[str] = None
    root: Optional[str] = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.ignores = np.asarray(self.ignores, dtype=np.float64).reshape(-1, 4)

    def load_image(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.file_name is None:
            raise FileNotFoundError(f"record {self.image_id}: no image data or file name")
        path = Path(self.root or ".") / self.file_name
        if not path.exists():
            raise FileNotFoundError(f"record {self.image_id}: image file {path} not found")
        return np.asarray(Image.open(path).convert("RGB"))

    @property
    def subsets(self) -> np.ndarray:
        return subset_indices(self.boxes) if len(self.boxes) else np.zeros(0, dtype=np.int64)

    def same_annotations(self, other: "DatasetRecord") -> bool:
        return (
            self.image_id == other.image_id
            and (self.width, self.height) == (other.width, other.height)
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.ignores, other.ignores)
        )


# ---------------------------------------------------------------------------
# synthetic data

# area range actually drawn for each subset; eS starts at 4x4 so shapes stay visible
SUBSET_AREA_RANGES = ((16.0, AREA_BOUNDS[0]), (AREA_BOUNDS[0], AREA_BOUNDS[1]), (AREA_BOUNDS[1], AREA_BOUNDS[2]), (AREA_BOUNDS[2], 4096.0))
SHAPES = ("rect", "ellipse", "triangle")


@dataclass
class SyntheticSpec:
    num_images: int = 100
    image_size: Tuple[int, int] = (128, 128)  # (width, height)
    num_classes: int = 9
    subset_weights: Tuple[float, float, float, float] = (0.4, 0.3, 0.2, 0.1)
    objects_per_image: Tuple[int, int] = (3, 8)
    noise: float = 0.04
    ignore_prob: float = 0.15
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.subset_weights = tuple(float(v) for v in self.subset_weights)
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        w = np.asarray(self.subset_weights)
        if len(w) != 4 or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError(f"subset weights must be 4 non-negative values summing to 1, got {self.subset_weights}")
        if self.objects_per_image[0] > self.objects_per_image[1]:
            raise ValueError("objects_per_image must be (min, max)")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def class_style(label: int, num_classes: int) -> Tuple[Tuple[int, int, int], str]:
    hue = (label - 1) / max(num_classes, 1)
    r, g, b = colorsys.hsv_to_rgb(hue, 0.9, 0.95)
    return (int(r * 255), int(g * 255), int(b * 255)), SHAPES[(label - 1) % len(SHAPES)]


def _draw_size(rng: np.random.Generator, subset: int) -> Tuple[int, int]:
    lo, hi = SUBSET_AREA_RANGES[subset]
    while True:
        area = rng.uniform(lo, hi)
        aspect = np.exp(rng.uniform(np.log(1 / 1.5), np.log(1.5)))
        w = max(4, int(round(np.sqrt(area * aspect))))
        h = max(4, int(round(area / w)))
        a = w * h
        if lo < a <= hi or (subset == 0 and 0 < a <= hi):
            return w, h


def _overlaps(box, placed, margin=1.0) -> bool:
    for p in placed:
        if box[0] < p[2] + margin and p[0] < box[2] + margin and box[1] < p[3] + margin and p[1] < box[3] + margin:
            return True
    return False


def render(spec: SyntheticSpec, image_id: int) -> DatasetRecord:
    """Render one image; depends only on ``(spec, image_id)``."""
    rng = np.random.default_rng([spec.seed, image_id])
    width, height = spec.image_size
    n = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    boxes, labels, placed = [], [], []
    for _ in range(n):
        subset = int(rng.choice(4, p=spec.subset_weights))
        label = int(rng.integers(1, spec.num_classes + 1))
        w, h = _draw_size(rng, subset)
        if w > width or h > height:
            continue
        for _attempt in range(100):
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            box = (x, y, x + w, y + h)
            if not _overlaps(box, placed):
                boxes.append(box)
                labels.append(label)
                placed.append(box)
                break
    ignores = []
    if rng.random() < spec.ignore_prob:
        for _attempt in range(100):
            s = int(rng.integers(10, 25))
            if s > min(width, height):
                break
            x, y = int(rng.integers(0, width - s + 1)), int(rng.integers(0, height - s + 1))
            box = (x, y, x + s, y + s)
            if not _overlaps(box, placed):
                ignores.append(box)
                placed.append(box)
                break

    # low-frequency grey background plus pixel noise
    base = rng.uniform(70, 150)
    yy, xx = np.mgrid[0:height, 0:width]
    phase = rng.uniform(0, 2 * np.pi, 2)
    bg = base + 20 * np.sin(xx / width * 2 * np.pi + phase[0]) * np.cos(yy / height * 2 * np.pi + phase[1])
    canvas = np.repeat(bg[..., None], 3, axis=2)
    img = Image.fromarray(np.clip(canvas, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for (x1, y1, x2, y2), label in zip(boxes, labels):
        color, shape = class_style(label, spec.num_classes)
        xy = [x1, y1, x2 - 1, y2 - 1]
        if shape == "rect":
            draw.rectangle(xy, fill=color)
        elif shape == "ellipse":
            draw.ellipse(xy, fill=color)
        else:
            draw.polygon([(x1, y2 - 1), ((x1 + x2 - 1) / 2, y1), (x2 - 1, y2 - 1)], fill=color)
    arr = np.asarray(img).astype(np.float64)
    for x1, y1, x2, y2 in ignores:
        arr[y1:y2, x1:x2] = rng.uniform(0, 255, (y2 - y1, x2 - x1, 3))
    arr += rng.normal(0, spec.noise * 255, arr.shape)
    image = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    return DatasetRecord(image_id, width, height, np.asarray(boxes, float), np.asarray(labels), np.asarray(ignores, float), image)


def generate(spec: SyntheticSpec, start: int = 0) -> Iterator[DatasetRecord]:
    for image_id in range(start, start + spec.num_images):
        yield render(spec, image_id)


# ---------------------------------------------------------------------------
# COCO-style annotations


class CocoFormatError(ValueError):
    pass


@dataclass
class LoadReport:
    num_images: int = 0
    num_boxes: int = 0
    num_ignores: int = 0
    dropped_degenerate: int = 0
    missing_images: List[int] = field(default_factory=list)
    category_names: List[str] = field(default_factory=list)


def save_image(path: Path, image: np.ndarray):
    Image.fromarray(image).save(path)


def write_coco(records: Sequence[DatasetRecord], path, image_dir: Optional[str] = None, category_names=None, num_classes=None):
    """Write records as a COCO-style JSON file.

    Ignore regions become annotations of an extra ``ignore`` category with
    ``iscrowd``/``ignore`` set.  When ``image_dir`` is given (relative to the
    JSON file), in-memory images are saved there as PNG.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = num_classes or (len(category_names) if category_names else max([int(r.labels.max()) for r in records if len(r.labels)] or [0]))
    names = list(category_names) if category_names else [f"class_{c}" for c in range(1, n + 1)]
    cats = [{"id": c, "name": names[c - 1]} for c in range(1, n + 1)]
    cats.append({"id": n + 1, "name": IGNORE_CATEGORY})
    images, anns = [], []
    for r in records:
        fname = r.file_name
        if image_dir is not None and r.image is not None:
            fname = f"{image_dir}/{r.image_id:06d}.png"
            (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
            save_image(path.parent / fname, r.image)
        images.append({"id": int(r.image_id), "width": int(r.width), "height": int(r.height), "file_name": fname})
        for b, c in zip(r.boxes, r.labels):
            anns.append(_ann(len(anns) + 1, r.image_id, int(c), b, ignore=False))
        for b in r.ignores:
            anns.append(_ann(len(anns) + 1, r.image_id, n + 1, b, ignore=True))
    with open(path, "w") as fh:
        json.dump({"images": images, "annotations": anns, "categories": cats}, fh, indent=1)
    return path


def _ann(ann_id, image_id, cat, b, ignore):
    x1, y1, x2, y2 = (float(v) for v in b)
    return {
        "id": ann_id,
        "image_id": int(image_id),
        "category_id": cat,
        "bbox": [x1, y1, x2 - x1, y2 - y1],
        "area": (x2 - x1) * (y2 - y1),
        "iscrowd": int(ignore),
        "ignore": int(ignore),
    }


def load_coco(path, image_root=None) -> Tuple[List[DatasetRecord], LoadReport]:
    """Read a COCO-style annotation file into records.

    Categories are remapped to contiguous ids ``1..N`` in ascending source-id
    order (an ``ignore`` category is excluded).  Annotations flagged ``ignore``
    or ``iscrowd`` become ignore regions.  Zero-width or zero-height boxes are
    dropped and counted.
    """
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise CocoFormatError(f"{path}: malformed JSON at line {e.lineno}, column {e.colno} (offset {e.pos}): {e.msg}") from e
    try:
        raw_cats = sorted(data["categories"], key=lambda c: c["id"])
        images = data["images"]
        anns = data["annotations"]
    except (KeyError, TypeError) as e:
        raise CocoFormatError(f"{path}: missing COCO section {e}") from e
    ignore_ids = {c["id"] for c in raw_cats if c.get("name") == IGNORE_CATEGORY}
    cats = [c for c in raw_cats if c["id"] not in ignore_ids]
    remap = {c["id"]: i + 1 for i, c in enumerate(cats)}
    report = LoadReport(category_names=[c.get("name", str(c["id"])) for c in cats])
    root = Path(image_root) if image_root is not None else path.parent
    per_image = {img["id"]: ([], [], []) for img in images}
    for a in anns:
        try:
            x, y, w, h = (float(v) for v in a["bbox"])
            img_id, cat = a["image_id"], a["category_id"]
        except (KeyError, TypeError, ValueError) as e:
            raise CocoFormatError(f"{path}: bad annotation {a.get('id', '?')}: {e}") from e
        if img_id not in per_image:
            raise CocoFormatError(f"{path}: annotation {a.get('id', '?')} references unknown image {img_id}")
        if w <= 0 or h <= 0:
            report.dropped_degenerate += 1
            continue
        boxes, labels, ignores = per_image[img_id]
        if a.get("ignore", 0) or a.get("iscrowd", 0) or cat in ignore_ids:
            ignores.append([x, y, x + w, y + h])
        elif cat in remap:
            boxes.append([x, y, x + w, y + h])
            labels.append(remap[cat])
        else:
            raise CocoFormatError(f"{path}: annotation {a.get('id', '?')} has unknown category {cat}")
    records = []
    for img in images:
        boxes, labels, ignores = per_image[img["id"]]
        rec = DatasetRecord(
            int(img["id"]), int(img["width"]), int(img["height"]), boxes, labels, ignores,
            file_name=img.get("file_name"), root=str(root),
        )
        if rec.file_name and not (root / rec.file_name).exists():
            report.missing_images.append(rec.image_id)
        report.num_boxes += len(boxes)
        report.num_ignores += len(ignores)
        records.append(rec)
    report.num_images = len(records)
    if report.dropped_degenerate:
        log.info("%s: dropped %d degenerate boxes", path, report.dropped_degenerate)
    return records, report


# ---------------------------------------------------------------------------
# patch splitting


@dataclass
class Patch:
    x0: float
    y0: float
    x1: float
    y1: float
    boxes: np.ndarray  # patch-local
    labels: np.ndarray
    ignores: np.ndarray  # patch-local
    source: np.ndarray  # indices of the kept source GTs


def window_starts(dim: float, patch: float, stride: float) -> List[float]:
    if dim <= patch:
        return [0.0]
    last = dim - patch
    starts = [float(s) for s in np.arange(0, last, stride)]
    if not starts or starts[-1] < last:
        starts.append(float(last))
    return starts


def split_patches(width, height, boxes, labels=None, ignores=None, patch=800, stride=650, keep_ratio=0.5) -> List[Patch]:
    """Cut an image into overlapping windows.

    Window starts are multiples of ``stride``; the last one is clamped so the
    window ends at the border.  A GT stays in a window when at least
    ``keep_ratio`` of its area is inside (clipped to the window); a smaller
    fragment becomes an ignore region.
    """
    boxes = np.asarray(boxes, float).reshape(-1, 4)
    labels = np.zeros(len(boxes), np.int64) if labels is None else np.asarray(labels, np.int64)
    ignores = np.zeros((0, 4)) if ignores is None else np.asarray(ignores, float).reshape(-1, 4)
    pw, ph = min(patch, width), min(patch, height)
    out = []
    for y0 in window_starts(height, patch, stride):
        for x0 in window_starts(width, patch, stride):
            win = np.array([[x0, y0, x0 + pw, y0 + ph]])
            kept, frag, src = [], [], []
            if len(boxes):
                inside = intersection_over_first(boxes, win)[:, 0]
                clipped = _clip_to(boxes, win[0])
                for i in range(len(boxes)):
                    if inside[i] >= keep_ratio:
                        kept.append(clipped[i])
                        src.append(i)
                    elif inside[i] > 0:
                        frag.append(clipped[i])
            if len(ignores):
                ig_in = intersection_over_first(ignores, win)[:, 0] > 0
                frag.extend(_clip_to(ignores[ig_in], win[0]))
            off = np.array([x0, y0, x0, y0])
            out.append(
                Patch(
                    x0, y0, x0 + pw, y0 + ph,
                    np.asarray(kept, float).reshape(-1, 4) - off,
                    labels[src] if src else np.zeros(0, np.int64),
                    np.asarray(frag, float).reshape(-1, 4) - off,
                    np.asarray(src, np.int64),
                )
            )
    return out


def _clip_to(boxes, win):
    b = np.asarray(boxes, float).reshape(-1, 4).copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], win[0], win[2])
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], win[1], win[3])
    return b


def crop_record(record: DatasetRecord, p: Patch, image_id: int, resize: Optional[int] = None) -> DatasetRecord:
    """Materialise a patch as its own record; ``resize`` rescales to a square side."""
    img = record.load_image()
    x0, y0, x1, y1 = (int(round(v)) for v in (p.x0, p.y0, p.x1, p.y1))
    crop = img[y0:y1, x0:x1]
    boxes, ignores = p.boxes.copy(), p.ignores.copy()
    w, h = x1 - x0, y1 - y0
    if resize:
        sx, sy = resize / w, resize / h
        crop = np.asarray(Image.fromarray(crop).resize((resize, resize), Image.BILINEAR))
        scale = np.array([sx, sy, sx, sy])
        boxes, ignores, w, h = boxes * scale, ignores * scale, resize, resize
    return DatasetRecord(image_id, w, h, boxes, p.labels, ignores, crop)
