"""Box geometry: center-form boxes, IoU, anchor lattices and the anchor/box
regression parameterization shared by both detection branches.

Boxes are stored center-form ``(cx, cy, w, h)``; corner form ``(x1, y1, x2, y2)``
only appears at I/O boundaries. Array helpers operate on ``(..., 4)`` arrays in
the same center layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

DEFAULT_RATIOS = (0.33, 0.5, 1.0, 2.0, 3.0)


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extent must be positive, got w={self.w}, h={self.h}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValueError(f"box has non-finite coordinates: {self}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        """Top-left corner plus extent, the OTB annotation layout."""
        return cls(x + w / 2.0, y + h / 2.0, w, h)

    @classmethod
    def from_array(cls, a) -> "BBox":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def xywh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)

    @property
    def area(self) -> float:
        return self.w * self.h

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.cx + dx, self.cy + dy, self.w, self.h)

    def clamp_to(self, frame_w: float, frame_h: float, min_size: float = 1.0) -> "BBox":
        """Clip to ``[0, frame_w] x [0, frame_h]``, keeping at least ``min_size`` extent."""
        x1, y1, x2, y2 = self.corners()
        x1 = min(max(x1, 0.0), frame_w - min_size)
        y1 = min(max(y1, 0.0), frame_h - min_size)
        x2 = min(max(x2, x1 + min_size), frame_w)
        y2 = min(max(y2, y1 + min_size), frame_h)
        return BBox.from_corners(x1, y1, x2, y2)


class RegDelta(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


def iou(a: BBox, b: BBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return float(min(inter / union, 1.0))


def center_to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def corners_to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([(boxes[..., :2] + boxes[..., 2:]) / 2.0,
                           boxes[..., 2:] - boxes[..., :2]], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between center-form arrays ``a`` (N, 4) and ``b`` (M, 4)."""
    ca = center_to_corners(np.atleast_2d(a))
    cb = center_to_corners(np.atleast_2d(b))
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.minimum(np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0), 1.0)


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise IoU of two (N, 4) center-form arrays."""
    ca = center_to_corners(a)
    cb = center_to_corners(b)
    wh = np.clip(np.minimum(ca[..., 2:], cb[..., 2:]) - np.maximum(ca[..., :2], cb[..., :2]), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = ((ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
             + (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1]) - inter)
    return np.minimum(np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0), 1.0)


@dataclass(frozen=True)
class AnchorGrid:
    """Anchor lattice over a ``feat_w`` x ``feat_h`` score map.

    ``scales`` are anchor areas in pixels²; ``offset`` moves the whole lattice,
    which is how valid correlation outputs are registered back onto the search
    crop (an output cell sits at the center of its correlation window).
    """

    feat_w: int
    feat_h: int
    stride: float = 8.0
    scales: tuple[float, ...] = (4096.0,)
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    offset: tuple[float, float] = field(default=(0.0, 0.0))

    def __post_init__(self):
        if not self.scales or not self.ratios:
            raise ValueError("anchor grid needs at least one scale and one ratio")
        if self.feat_w < 1 or self.feat_h < 1:
            raise ValueError(f"empty anchor grid {self.feat_w}x{self.feat_h}")

    @property
    def k(self) -> int:
        return len(self.scales) * len(self.ratios)

    @property
    def count(self) -> int:
        return self.feat_w * self.feat_h * self.k

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return (self.offset[0] + (i + 0.5) * self.stride, self.offset[1] + (j + 0.5) * self.stride)

    def shapes(self) -> np.ndarray:
        """Per-anchor (w, h), scale-major then ratio; ratio is w:h."""
        out = []
        for area in self.scales:
            for r in self.ratios:
                out.append((math.sqrt(area * r), math.sqrt(area / r)))
        return np.asarray(out, dtype=np.float64)


def gen_anchors(g: AnchorGrid) -> np.ndarray:
    """All anchors of ``g`` as an (feat_h * feat_w * k, 4) center-form array.

    Flat index is ``(j * feat_w + i) * k + a`` for cell column ``i``, row ``j``
    and anchor ``a``; this is the order every score/box field uses.
    """
    shapes = g.shapes()
    xs = g.offset[0] + (np.arange(g.feat_w) + 0.5) * g.stride
    ys = g.offset[1] + (np.arange(g.feat_h) + 0.5) * g.stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((g.feat_h, g.feat_w, g.k, 4), dtype=np.float64)
    out[..., 0] = cx[..., None]
    out[..., 1] = cy[..., None]
    out[..., 2] = shapes[:, 0]
    out[..., 3] = shapes[:, 1]
    return out.reshape(-1, 4)


def encode_box(anchor: BBox, target: BBox) -> RegDelta:
    return RegDelta((target.cx - anchor.cx) / anchor.w,
                    (target.cy - anchor.cy) / anchor.h,
                    math.log(target.w / anchor.w),
                    math.log(target.h / anchor.h))


def decode_box(anchor: BBox, delta: Sequence[float],
               frame_size: tuple[float, float] | None = None) -> BBox:
    dx, dy, dw, dh = (float(v) for v in delta)
    box = BBox(anchor.cx + dx * anchor.w, anchor.cy + dy * anchor.h,
               anchor.w * math.exp(dw), anchor.h * math.exp(dh))
    if frame_size is not None:
        box = box.clamp_to(*frame_size)
    return box


def encode_boxes(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(anchors.shape, targets.shape), dtype=np.float64)
    out[..., 0] = (targets[..., 0] - anchors[..., 0]) / anchors[..., 2]
    out[..., 1] = (targets[..., 1] - anchors[..., 1]) / anchors[..., 3]
    out[..., 2] = np.log(targets[..., 2] / anchors[..., 2])
    out[..., 3] = np.log(targets[..., 3] / anchors[..., 3])
    return out


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray, max_log_scale: float = 4.0) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(anchors.shape, deltas.shape), dtype=np.float64)
    out[..., 0] = anchors[..., 0] + deltas[..., 0] * anchors[..., 2]
    out[..., 1] = anchors[..., 1] + deltas[..., 1] * anchors[..., 3]
    out[..., 2] = anchors[..., 2] * np.exp(np.clip(deltas[..., 2], -max_log_scale, max_log_scale))
    out[..., 3] = anchors[..., 3] * np.exp(np.clip(deltas[..., 3], -max_log_scale, max_log_scale))
    return out
