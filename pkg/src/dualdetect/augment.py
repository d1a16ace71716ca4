"""Weak and strong augmentation over scenes, with replayable transform
records so boxes produced on one view can be mapped exactly onto another.

The weak view is a horizontal-flip coin flip. The strong view composes
flip, scale-crop (boxes clipped, mostly-lost boxes dropped), patch erasure,
and additive raster noise. Every applied operation and its parameters go
into a TransformRecord; applying a record to its source scene reproduces
the augmented scene bit-exactly, and map_boxes bridges any two records of
the same source scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import Scene
from .detector import Raster
from .geometry import BBox, GroundTruthBox

EraseWindow = Tuple[int, int, int, int, float]  # x0, y0, x1, y1, fill value


@dataclass(frozen=True)
class TransformRecord:
    """Replayable description of one augmentation draw.

    `crop` is a pixel window in the post-flip source frame. Geometric
    components (flip, crop) move boxes; erases and noise only touch the
    raster.
    """

    scene_id: str
    source_width: int
    source_height: int
    flip: bool = False
    crop: Optional[Tuple[int, int, int, int]] = None
    min_box_area_frac: float = 0.3
    erases: Tuple[EraseWindow, ...] = ()
    noise_sigma: float = 0.0
    noise_seed: Optional[int] = None


def _flip_box(b: BBox) -> BBox:
    return BBox(cx=1.0 - b.cx, cy=b.cy, w=b.w, h=b.h)


def _crop_boxes(
    boxes: Sequence[BBox],
    crop: Tuple[int, int, int, int],
    width: int,
    height: int,
    min_area_frac: float,
) -> List[Optional[BBox]]:
    """Map boxes into the crop window's unit square.

    Returns None in place of boxes that keep less than `min_area_frac` of
    their original area (or fall outside entirely).
    """
    x0, y0, x1, y1 = crop
    wx0, wy0 = x0 / width, y0 / height
    ww, wh = (x1 - x0) / width, (y1 - y0) / height
    out: List[Optional[BBox]] = []
    for b in boxes:
        bx1, by1, bx2, by2 = b.corners()
        ix1, iy1 = max(bx1, wx0), max(by1, wy0)
        ix2, iy2 = min(bx2, wx0 + ww), min(by2, wy0 + wh)
        if ix2 <= ix1 or iy2 <= iy1:
            out.append(None)
            continue
        kept = (ix2 - ix1) * (iy2 - iy1)
        if kept / (b.w * b.h) < min_area_frac:
            out.append(None)
            continue
        nx1, ny1 = (ix1 - wx0) / ww, (iy1 - wy0) / wh
        nx2, ny2 = (ix2 - wx0) / ww, (iy2 - wy0) / wh
        out.append(BBox(cx=(nx1 + nx2) / 2, cy=(ny1 + ny2) / 2,
                        w=nx2 - nx1, h=ny2 - ny1))
    return out


def _uncrop_box(b: BBox, crop: Tuple[int, int, int, int],
                width: int, height: int) -> BBox:
    x0, y0, x1, y1 = crop
    wx0, wy0 = x0 / width, y0 / height
    ww, wh = (x1 - x0) / width, (y1 - y0) / height
    bx1, by1, bx2, by2 = b.corners()
    sx1, sy1 = wx0 + bx1 * ww, wy0 + by1 * wh
    sx2, sy2 = wx0 + bx2 * ww, wy0 + by2 * wh
    return BBox(cx=(sx1 + sx2) / 2, cy=(sy1 + sy2) / 2, w=sx2 - sx1, h=sy2 - sy1)


def apply_record(scene: Scene, record: TransformRecord) -> Scene:
    """Replay a transform record against its source scene."""
    if record.scene_id != scene.id:
        raise ValueError(
            f"record belongs to scene {record.scene_id!r}, got {scene.id!r}"
        )
    values = scene.raster.values
    boxes = [g.box for g in scene.gt_boxes]
    sources = [g.source_index for g in scene.gt_boxes]

    if record.flip:
        values = values[:, ::-1].copy()
        boxes = [_flip_box(b) for b in boxes]

    if record.crop is not None:
        x0, y0, x1, y1 = record.crop
        mapped = _crop_boxes(boxes, record.crop, record.source_width,
                             record.source_height, record.min_box_area_frac)
        keep = [i for i, b in enumerate(mapped) if b is not None]
        boxes = [mapped[i] for i in keep]
        sources = [sources[i] for i in keep]
        values = values[y0:y1, x0:x1].copy()

    if record.erases:
        values = values.copy()
        for ex0, ey0, ex1, ey1, fill in record.erases:
            values[ey0:ey1, ex0:ex1] = fill

    if record.noise_sigma > 0.0:
        noise_rng = np.random.default_rng(record.noise_seed)
        values = np.clip(
            values + noise_rng.normal(0.0, record.noise_sigma, size=values.shape),
            0.0, 1.0,
        )

    h, w = values.shape
    gt = tuple(
        GroundTruthBox(box=b, source_index=s) for b, s in zip(boxes, sources)
    )
    return Scene(id=scene.id, raster=Raster(width=w, height=h, values=values),
                 gt_boxes=gt)


def weak_augment(scene: Scene, rng: np.random.Generator) -> Tuple[Scene, TransformRecord]:
    """Horizontal flip with probability 0.5; boxes mirrored exactly."""
    record = TransformRecord(
        scene_id=scene.id,
        source_width=scene.raster.width,
        source_height=scene.raster.height,
        flip=bool(rng.random() < 0.5),
    )
    return apply_record(scene, record), record


def strong_augment(
    scene: Scene,
    rng: np.random.Generator,
    *,
    crop_prob: float = 0.15,
    crop_min_frac: float = 0.6,
    min_box_area_frac: float = 0.3,
    max_erase: int = 2,
    max_erase_area: float = 0.10,
    noise_prob: float = 0.5,
    max_noise_sigma: float = 0.06,
) -> Tuple[Scene, TransformRecord]:
    """Composition of flip, scale-crop, patch erasure, and raster noise.

    A crop that would drop every ground-truth box is redrawn up to 10
    times, then skipped. Erase windows are filled with the raster median,
    a stand-in for the paper background.
    """
    w, h = scene.raster.width, scene.raster.height
    flip = bool(rng.random() < 0.5)
    boxes_after_flip = [
        _flip_box(g.box) if flip else g.box for g in scene.gt_boxes
    ]

    crop: Optional[Tuple[int, int, int, int]] = None
    if rng.random() < crop_prob:
        for _ in range(10):
            cw = max(1, int(round(rng.uniform(crop_min_frac, 1.0) * w)))
            ch = max(1, int(round(rng.uniform(crop_min_frac, 1.0) * h)))
            cx0 = int(rng.integers(0, w - cw + 1))
            cy0 = int(rng.integers(0, h - ch + 1))
            candidate = (cx0, cy0, cx0 + cw, cy0 + ch)
            if not scene.gt_boxes:
                crop = candidate
                break
            mapped = _crop_boxes(boxes_after_flip, candidate, w, h, min_box_area_frac)
            if any(b is not None for b in mapped):
                crop = candidate
                break

    view_w, view_h = (crop[2] - crop[0], crop[3] - crop[1]) if crop else (w, h)

    erases: List[EraseWindow] = []
    n_erase = int(rng.integers(0, max_erase + 1))
    if n_erase:
        flipped = scene.raster.values[:, ::-1] if flip else scene.raster.values
        view = flipped[crop[1]:crop[3], crop[0]:crop[2]] if crop else flipped
        fill = float(np.median(view))
        for _ in range(n_erase):
            frac = rng.uniform(0.01, max_erase_area)
            aspect = rng.uniform(0.5, 2.0)
            ew = int(round(math.sqrt(frac * view_w * view_h * aspect)))
            eh = int(round(math.sqrt(frac * view_w * view_h / aspect)))
            ew = min(max(ew, 1), view_w)
            eh = min(max(eh, 1), view_h)
            ex0 = int(rng.integers(0, view_w - ew + 1))
            ey0 = int(rng.integers(0, view_h - eh + 1))
            erases.append((ex0, ey0, ex0 + ew, ey0 + eh, fill))

    noise_sigma = 0.0
    noise_seed: Optional[int] = None
    if rng.random() < noise_prob:
        noise_sigma = float(rng.uniform(0.02, max_noise_sigma))
        noise_seed = int(rng.integers(0, 2**31 - 1))

    record = TransformRecord(
        scene_id=scene.id,
        source_width=w,
        source_height=h,
        flip=flip,
        crop=crop,
        min_box_area_frac=min_box_area_frac,
        erases=tuple(erases),
        noise_sigma=noise_sigma,
        noise_seed=noise_seed,
    )
    return apply_record(scene, record), record


def map_boxes(
    boxes: Sequence[GroundTruthBox],
    from_record: TransformRecord,
    to_record: TransformRecord,
) -> List[GroundTruthBox]:
    """Carry boxes from one augmented view of a scene into another.

    Applies the inverse of `from_record`'s geometric components, then
    `to_record`'s; boxes that fall outside the target view (per its crop
    drop rule) are removed.
    """
    if from_record.scene_id != to_record.scene_id:
        raise ValueError(
            f"records come from different scenes: {from_record.scene_id!r} "
            f"vs {to_record.scene_id!r}"
        )
    # back into the source frame
    source_boxes: List[BBox] = []
    for g in boxes:
        b = g.box
        if from_record.crop is not None:
            b = _uncrop_box(b, from_record.crop, from_record.source_width,
                            from_record.source_height)
        if from_record.flip:
            b = _flip_box(b)
        source_boxes.append(b)

    # forward into the target frame
    out_boxes: List[Optional[BBox]] = []
    flipped = [_flip_box(b) if to_record.flip else b for b in source_boxes]
    if to_record.crop is not None:
        out_boxes = _crop_boxes(flipped, to_record.crop, to_record.source_width,
                                to_record.source_height, to_record.min_box_area_frac)
    else:
        out_boxes = list(flipped)

    result: List[GroundTruthBox] = []
    for g, b in zip(boxes, out_boxes):
        if b is not None:
            result.append(GroundTruthBox(box=b, source_index=g.source_index))
    return result
