"""Synthetic document-scene generation, labeled/unlabeled splitting, and
COCO-format annotation/prediction ingestion.

Scenes are small grayscale rasters: light paper with darker text-line
banding, and noise-textured rectangles standing in for tables. Generated
intensities are quantized to 1/255 steps so the JSON-lines persistence
(base-64 of raw bytes) round-trips bit-exactly.
"""

from __future__ import annotations

import base64
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detector import Raster
from .geometry import BBox, GroundTruthBox, Prediction

FORMAT_VERSION = "1"


@dataclass(frozen=True, eq=False)
class Scene:
    """One synthetic page: raster plus its table boxes.

    Unlabeled training scenes carry an empty `gt_boxes`; their hidden boxes
    live only in the split's evaluation view.
    """

    id: str
    raster: Raster
    gt_boxes: Tuple[GroundTruthBox, ...]


@dataclass(frozen=True)
class LayoutConfig:
    """Scene recipe. Table sizes are bimodal, echoing documents that mix
    small inline tables with large full-width ones; the two size classes
    also exercise the coarse and fine detector grids at their natural
    working points."""

    raster_width: int = 64
    raster_height: int = 64
    tables_min: int = 1
    tables_max: int = 3
    small_table_prob: float = 1.0
    small_size_min: float = 0.16
    small_size_max: float = 0.21
    table_size_min: float = 0.40
    table_size_max: float = 0.48
    table_mean: float = 0.38
    table_std: float = 0.05
    # per-table ink-density spread: individual tables print darker or
    # lighter, so the detection threshold is only estimable from many tables
    table_level_std: float = 0.07
    line_mean: float = 0.68
    line_std: float = 0.05
    paper_level: float = 0.95
    # large tables carry ruling lines (borderless small tables do not),
    # mirroring real documents and giving the texture statistics a signature
    # that tells ruled interiors apart from plain dark regions
    rule_period: int = 5
    rule_level: float = 0.6
    page_margin: int = 4
    # placement follows a page layout grid (documents align tables to
    # column/row slots); centers sit on a coarse lattice for large tables
    # and a fine lattice for small ones, plus a little jitter
    layout_cols: int = 6
    layout_rows: int = 5
    fine_layout: int = 20
    placement_jitter: float = 0.02

    def __post_init__(self) -> None:
        if self.raster_width < 8 or self.raster_height < 8:
            raise ValueError("raster too small to carry table texture")
        if not 1 <= self.tables_min <= self.tables_max:
            raise ValueError("table count range is empty")
        if not 0.0 < self.table_size_min <= self.table_size_max <= 1.0:
            raise ValueError("table size range is empty")
        if not 0.0 < self.small_size_min <= self.small_size_max <= 1.0:
            raise ValueError("small table size range is empty")
        if not 0.0 <= self.small_table_prob <= 1.0:
            raise ValueError("small table probability must lie in [0, 1]")
        spread = abs(self.table_mean - self.line_mean)
        if spread <= 3.0 * max(self.table_std, self.line_std):
            raise ValueError(
                "table and background textures must be separated by more "
                "than 3 sigma of their noise"
            )


@dataclass(frozen=True)
class Dataset:
    scenes: Tuple[Scene, ...]
    layout: LayoutConfig


@dataclass(frozen=True)
class SplitSpec:
    labeled_fraction: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(
                f"labeled fraction must lie in (0, 1], got {self.labeled_fraction}"
            )


@dataclass(frozen=True)
class Split:
    """Training views: unlabeled scenes have their boxes stripped; the
    hidden boxes are kept aside strictly for evaluation."""

    labeled: Tuple[Scene, ...]
    unlabeled: Tuple[Scene, ...]
    hidden_gt: Dict[str, Tuple[GroundTruthBox, ...]]


def _rects_overlap(a: Tuple[int, int, int, int], b: Tuple[int, int, int, int]) -> bool:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return not (ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0)


def generate_scene(rng: np.random.Generator, cfg: LayoutConfig = LayoutConfig(),
                   scene_id: str = "scene-00000") -> Scene:
    """One deterministic scene for a given generator state.

    Tables are rejection-sampled to be pairwise disjoint in pixel space, so
    ground-truth boxes never overlap. If a table cannot be placed within
    100 tries the target count drops by one; reaching zero is an error.
    """
    w, h = cfg.raster_width, cfg.raster_height
    values = np.full((h, w), cfg.paper_level, dtype=np.float64)

    # text-line banding: two dark rows every four, inside the page margins
    margin = cfg.page_margin
    line_rows = (np.arange(h) % 4 >= 2) & (np.arange(h) >= margin) & (np.arange(h) < h - margin)
    values[line_rows, margin:w - margin] = rng.normal(
        cfg.line_mean, cfg.line_std, size=(int(line_rows.sum()), w - 2 * margin)
    )

    target_count = int(rng.integers(cfg.tables_min, cfg.tables_max + 1))
    rects: List[Tuple[int, int, int, int]] = []
    ruled_flags: List[bool] = []
    while len(rects) < target_count:
        placed = False
        for _ in range(100):
            small = rng.random() < cfg.small_table_prob
            if small:
                lo, hi = cfg.small_size_min, cfg.small_size_max
            else:
                lo, hi = cfg.table_size_min, cfg.table_size_max
            slots_x, slots_y = cfg.layout_cols, cfg.layout_rows
            bw = rng.uniform(lo, hi)
            bh = rng.uniform(lo, hi)
            jitter = cfg.placement_jitter
            cx = (int(rng.integers(0, slots_x)) + 0.5) / slots_x + rng.uniform(-jitter, jitter)
            cy = (int(rng.integers(0, slots_y)) + 0.5) / slots_y + rng.uniform(-jitter, jitter)
            x0 = int(round((cx - bw / 2) * w))
            x1 = int(round((cx + bw / 2) * w))
            y0 = int(round((cy - bh / 2) * h))
            y1 = int(round((cy + bh / 2) * h))
            if x0 < margin or y0 < margin or x1 > w - margin or y1 > h - margin:
                continue
            if x1 - x0 < 2 or y1 - y0 < 2:
                continue
            rect = (x0, y0, x1, y1)
            if any(_rects_overlap(rect, r) for r in rects):
                continue
            rects.append(rect)
            ruled_flags.append(not small)
            placed = True
            break
        if not placed:
            target_count -= 1
            if target_count == 0:
                raise RuntimeError(
                    f"scene generation failed: could not place any table "
                    f"({scene_id})"
                )

    boxes: List[GroundTruthBox] = []
    for (x0, y0, x1, y1), ruled in zip(rects, ruled_flags):
        level = rng.normal(cfg.table_mean, cfg.table_level_std)
        values[y0:y1, x0:x1] = rng.normal(
            level, cfg.table_std, size=(y1 - y0, x1 - x0)
        )
        if ruled:
            period = max(cfg.rule_period, 2)
            values[y0 + 2:y1:period, x0:x1] = cfg.rule_level
            values[y0:y1, x0 + 2:x1:period] = cfg.rule_level
        boxes.append(
            GroundTruthBox(
                box=BBox(
                    cx=(x0 + x1) / (2.0 * w),
                    cy=(y0 + y1) / (2.0 * h),
                    w=(x1 - x0) / w,
                    h=(y1 - y0) / h,
                )
            )
        )

    values = np.clip(values, 0.0, 1.0)
    values = np.round(values * 255.0) / 255.0
    return Scene(
        id=scene_id,
        raster=Raster(width=w, height=h, values=values),
        gt_boxes=tuple(boxes),
    )


def generate_dataset(count: int, seed: int,
                     cfg: LayoutConfig = LayoutConfig()) -> Dataset:
    """`count` scenes with per-scene generator streams derived from the seed,
    so generation order (or parallel generation) cannot change the output."""
    if count < 1:
        raise ValueError(f"dataset size must be >= 1, got {count}")
    scenes = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        scenes.append(generate_scene(rng, cfg, scene_id=f"scene-{i:05d}"))
    return Dataset(scenes=tuple(scenes), layout=cfg)


def split_dataset(dataset: Dataset, spec: SplitSpec) -> Split:
    """Seeded shuffle; the first ceil(fraction*n) scenes keep their labels,
    the rest are stripped (hidden boxes retained for evaluation only)."""
    scenes = dataset.scenes
    if not scenes:
        raise ValueError("cannot split an empty dataset")
    n = len(scenes)
    order = np.random.default_rng(spec.seed).permutation(n)
    n_labeled = math.ceil(spec.labeled_fraction * n)
    labeled = tuple(scenes[i] for i in order[:n_labeled])
    hidden = {}
    stripped = []
    for i in order[n_labeled:]:
        s = scenes[i]
        hidden[s.id] = s.gt_boxes
        stripped.append(Scene(id=s.id, raster=s.raster, gt_boxes=()))
    return Split(labeled=labeled, unlabeled=tuple(stripped), hidden_gt=hidden)


# --- JSON-lines dataset persistence -----------------------------------------

def _scene_to_line(scene: Scene) -> str:
    raw = np.round(scene.raster.values * 255.0).astype(np.uint8).tobytes()
    return json.dumps(
        {
            "id": scene.id,
            "width": scene.raster.width,
            "height": scene.raster.height,
            "raster": base64.b64encode(raw).decode("ascii"),
            "boxes": [[b.box.cx, b.box.cy, b.box.w, b.box.h] for b in scene.gt_boxes],
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def _scene_from_line(line: str) -> Scene:
    obj = json.loads(line)
    w, h = obj["width"], obj["height"]
    raw = np.frombuffer(base64.b64decode(obj["raster"]), dtype=np.uint8)
    if raw.size != w * h:
        raise ValueError(f"scene {obj['id']}: raster payload size mismatch")
    values = raw.reshape(h, w).astype(np.float64) / 255.0
    boxes = tuple(GroundTruthBox(box=BBox(*b)) for b in obj["boxes"])
    return Scene(id=obj["id"], raster=Raster(width=w, height=h, values=values),
                 gt_boxes=boxes)


def save_dataset(dataset: Dataset, path) -> None:
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "layout": asdict(dataset.layout),
            "scene_count": len(dataset.scenes),
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(header + "\n")
        for scene in dataset.scenes:
            f.write(_scene_to_line(scene) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: bad header line: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported format version {header.get('format_version')!r}"
        )
    layout = LayoutConfig(**header["layout"])
    scenes = tuple(_scene_from_line(line) for line in lines[1:] if line)
    return Dataset(scenes=scenes, layout=layout)


# --- COCO-format ingestion ---------------------------------------------------

CocoImage = Tuple[int, Tuple[int, int], List[GroundTruthBox]]


def load_coco_annotations(path, table_category_id: int = 1) -> List[CocoImage]:
    """Standard COCO annotation JSON -> [(image id, (width, height), boxes)].

    Pixel [x, y, w, h] boxes are converted to normalized center form.
    Annotations with other category ids are skipped (with one warning
    carrying the count).
    """
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(
            f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e

    try:
        images = {
            int(img["id"]): (int(img["width"]), int(img["height"]))
            for img in payload["images"]
        }
    except (KeyError, TypeError) as e:
        raise ValueError(f"{path}: annotation file lacks a valid images list") from e

    boxes_by_image: Dict[int, List[GroundTruthBox]] = {i: [] for i in images}
    skipped = 0
    for ann in payload.get("annotations", []):
        if int(ann.get("category_id", -1)) != table_category_id:
            skipped += 1
            continue
        image_id = int(ann["image_id"])
        if image_id not in images:
            raise ValueError(f"{path}: annotation references unknown image {image_id}")
        x, y, bw, bh = (float(v) for v in ann["bbox"])
        w, h = images[image_id]
        boxes_by_image[image_id].append(
            GroundTruthBox(
                box=BBox(cx=(x + bw / 2) / w, cy=(y + bh / 2) / h, w=bw / w, h=bh / h)
            )
        )
    if skipped:
        warnings.warn(f"{path}: skipped {skipped} annotations with other category ids")

    return [(image_id, images[image_id], boxes_by_image[image_id])
            for image_id in images]


def load_predictions(path, annotations: Sequence[CocoImage]) -> List[Tuple[int, Prediction]]:
    """COCO results-format JSON -> [(image id, Prediction)], normalized
    against the companion annotation file's image sizes."""
    sizes = {image_id: size for image_id, size, _ in annotations}
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(
                f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}"
            ) from e
    out: List[Tuple[int, Prediction]] = []
    for det in payload:
        image_id = int(det["image_id"])
        if image_id not in sizes:
            raise ValueError(f"{path}: prediction references unknown image {image_id}")
        score = float(det["score"])
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"{path}: score {score} outside [0, 1]")
        x, y, bw, bh = (float(v) for v in det["bbox"])
        w, h = sizes[image_id]
        out.append(
            (
                image_id,
                Prediction(
                    box=BBox(cx=(x + bw / 2) / w, cy=(y + bh / 2) / h,
                             w=bw / w, h=bh / h),
                    score=score,
                ),
            )
        )
    return out


def write_coco_annotations(path, items: Sequence[CocoImage],
                           table_category_id: int = 1) -> None:
    images = [
        {"id": image_id, "width": size[0], "height": size[1]}
        for image_id, size, _ in items
    ]
    annotations = []
    ann_id = 1
    for image_id, size, boxes in items:
        w, h = size
        for b in boxes:
            x1, y1, x2, y2 = b.box.corners()
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": table_category_id,
                    "bbox": [x1 * w, y1 * h, (x2 - x1) * w, (y2 - y1) * h],
                    "area": (x2 - x1) * w * (y2 - y1) * h,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": table_category_id, "name": "table"}],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))


def write_coco_predictions(path, preds: Sequence[Tuple[int, Prediction]],
                           annotations: Sequence[CocoImage],
                           table_category_id: int = 1) -> None:
    sizes = {image_id: size for image_id, size, _ in annotations}
    payload = []
    for image_id, p in preds:
        if image_id not in sizes:
            raise ValueError(f"prediction references unknown image {image_id}")
        w, h = sizes[image_id]
        x1, y1, x2, y2 = p.box.corners()
        payload.append(
            {
                "image_id": image_id,
                "category_id": table_category_id,
                "bbox": [x1 * w, y1 * h, (x2 - x1) * w, (y2 - y1) * h],
                "score": p.score,
            }
        )
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))
