"""Anchor-less detection head: grid responsibility, target encoding, decoding, NMS.

The head tensor has ``6 * k`` channels on a G x G lattice.  Channels
``6*g .. 6*g+5`` hold the raw (pre-sigmoid) x, y, w, h, objectness and class
values of grid ``g``.  Cell ``(i, j)`` is column ``i``, row ``j``, i.e. tensor
element ``[n, c, j, i]``.

Grid ``g`` (0-based here) handles boxes whose square-root area fraction lies
in ``(g/k, (g+1)/k]``.  For a box inside the image, its IoU with the whole
image equals its area fraction ``w*h``, so the scale score is ``sqrt(w*h)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from yolopeds.tensor import ShapeError, sigmoid

CHANNELS = ("x", "y", "w", "h", "obj", "cls")


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise ValueError(f"BBox.{name}={v} outside [0, 1]")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def to_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]


def gt_box(cx, cy, w, h) -> BBox:
    """A ground-truth box; unlike predictions it must have positive area."""
    box = BBox(float(cx), float(cy), float(w), float(h))
    if box.area <= 0:
        raise ValueError(f"ground-truth box {box} has zero area")
    return box


@dataclass(frozen=True)
class HeadConfig:
    grid_size: int = 10
    grid_count: int = 5
    image_width: int = 320
    image_height: int = 320
    obj_threshold: float = 0.5
    cls_threshold: float = 0.5
    nms_iou: float = 0.45

    def __post_init__(self):
        if self.grid_size < 1 or self.grid_count < 1:
            raise ValueError("grid size and grid count must be >= 1")
        for name in ("obj_threshold", "cls_threshold", "nms_iou"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")

    @property
    def slots(self) -> int:
        return self.grid_size * self.grid_size * self.grid_count

    @property
    def channels(self) -> int:
        return len(CHANNELS) * self.grid_count


@dataclass
class ResponsibilityMap:
    """Selector ``S[i, j, g]`` plus the encoded targets of each active slot."""

    selector: np.ndarray  # (G, G, k) uint8
    targets: np.ndarray  # (G, G, k, 4): tx, ty, tw, th
    assigned: np.ndarray  # (G, G, k) ground-truth index, -1 where inactive
    dropped: int = 0

    @property
    def n_assigned(self) -> int:
        return int(self.selector.sum())

    def active_slots(self):
        return [tuple(int(v) for v in s) for s in np.argwhere(self.selector)]


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    objectness: float
    cls: float
    grid: int
    cell: tuple[int, int] = field(default=(0, 0))

    def to_json(self, image: str) -> dict:
        return {
            "image": image,
            "cx": self.bbox.cx, "cy": self.bbox.cy, "w": self.bbox.w, "h": self.bbox.h,
            "obj": self.objectness, "cls": self.cls, "grid": self.grid,
        }


def iou(a: BBox, b: BBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corners as the intersection, so iou(a, a) is exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def scale_score(box: BBox) -> float:
    return math.sqrt(box.area)


def grid_for_score(score: float, k: int) -> int:
    """0-based grid g with g/k < score <= (g+1)/k; a score of 0 maps to grid 0."""
    for g in range(k):
        if score <= (g + 1) / k:
            return g
    return k - 1


def cell_for(box: BBox, grid_size: int) -> tuple[int, int]:
    i = min(int(box.cx * grid_size), grid_size - 1)
    j = min(int(box.cy * grid_size), grid_size - 1)
    return i, j


def assign_responsibility(gt_boxes, cfg: HeadConfig) -> ResponsibilityMap:
    G, k = cfg.grid_size, cfg.grid_count
    sel = np.zeros((G, G, k), dtype=np.uint8)
    targets = np.zeros((G, G, k, 4), dtype=np.float64)
    assigned = np.full((G, G, k), -1, dtype=np.int64)
    dropped = 0
    for idx, box in enumerate(gt_boxes):
        i, j = cell_for(box, G)
        for g in range(grid_for_score(scale_score(box), k), k):
            if not sel[i, j, g]:
                break
        else:
            dropped += 1  # every remaining slot at this cell is taken
            continue
        sel[i, j, g] = 1
        assigned[i, j, g] = idx
        targets[i, j, g] = (box.cx * G - i, box.cy * G - j, box.w, box.h)
    return ResponsibilityMap(sel, targets, assigned, dropped)


def split_head(head: np.ndarray, cfg: HeadConfig) -> np.ndarray:
    """View a (1, 6k, G, G) head tensor as (6, G_i, G_j, k) raw channels."""
    if head.ndim != 4 or head.shape[0] != 1:
        raise ShapeError(f"expected a single-image head tensor, got {head.shape}")
    if head.shape[1] != cfg.channels:
        raise ShapeError(f"head has {head.shape[1]} channels, expected {cfg.channels} (6 x {cfg.grid_count})")
    if head.shape[2:] != (cfg.grid_size, cfg.grid_size):
        raise ShapeError(f"head grid {head.shape[2:]} != {cfg.grid_size}x{cfg.grid_size}")
    k, G = cfg.grid_count, cfg.grid_size
    # (k, 6, j, i) -> (6, i, j, k)
    return head[0].reshape(k, len(CHANNELS), G, G).transpose(1, 3, 2, 0)


def merge_head(parts: np.ndarray) -> np.ndarray:
    """Inverse of :func:`split_head`."""
    six, G, _, k = parts.shape
    return parts.transpose(3, 0, 2, 1).reshape(1, six * k, G, G)


def decode_boxes(raw: np.ndarray, grid_size: int) -> np.ndarray:
    """Predicted (cx, cy, w, h) for every slot, shape (4, G, G, k)."""
    G = grid_size
    i = np.arange(G)[:, None, None]
    j = np.arange(G)[None, :, None]
    return np.stack([
        (i + sigmoid(raw[0])) / G,
        (j + sigmoid(raw[1])) / G,
        sigmoid(raw[2]),
        sigmoid(raw[3]),
    ])


def decode(head: np.ndarray, cfg: HeadConfig) -> list[Detection]:
    raw = split_head(np.asarray(head, dtype=np.float64), cfg)
    boxes = decode_boxes(raw, cfg.grid_size)
    obj = sigmoid(raw[4])
    cls = sigmoid(raw[5])
    keep = (obj > cfg.obj_threshold) & (cls > cfg.cls_threshold)
    dets = []
    for i, j, g in np.argwhere(keep):
        cx, cy, w, h = (float(np.clip(v, 0.0, 1.0)) for v in boxes[:, i, j, g])
        dets.append(Detection(BBox(cx, cy, w, h), float(obj[i, j, g]), float(cls[i, j, g]),
                              int(g), (int(i), int(j))))
    return sort_detections(dets)


def sort_detections(dets):
    return sorted(dets, key=lambda d: (-d.objectness, d.grid, d.cell))


def nms(dets, iou_threshold: float) -> list[Detection]:
    """Greedy suppression across all grids; ties broken by lower (grid, i, j)."""
    kept: list[Detection] = []
    for d in sort_detections(dets):
        if all(iou(d.bbox, k.bbox) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def encode(resp: ResponsibilityMap, cfg: HeadConfig, background: float = -20.0) -> np.ndarray:
    """Raw head tensor whose decoded boxes reproduce the assigned targets exactly.

    Inactive slots get ``background`` in every channel; active slots get a
    large positive objectness and class logit.
    """
    def logit(p):
        p = np.clip(p, 1e-12, 1 - 1e-12)
        return np.log(p) - np.log1p(-p)

    G, k = cfg.grid_size, cfg.grid_count
    raw = np.full((len(CHANNELS), G, G, k), background, dtype=np.float64)
    on = resp.selector.astype(bool)
    for c in range(4):
        raw[c][on] = logit(resp.targets[..., c][on])
    raw[4][on] = -background
    raw[5][on] = -background
    return merge_head(raw)
