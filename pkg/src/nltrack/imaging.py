"""Frame I/O and square crop-and-resize with an invertible coordinate transform."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from nltrack.geometry import BBox

IMAGE_SUFFIXES = (".png", ".ppm", ".jpg", ".jpeg", ".bmp")


def load_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_frame(path, frame: np.ndarray) -> None:
    Image.fromarray(np.asarray(frame, dtype=np.uint8), mode="RGB").save(path)


def list_frames(directory) -> list[Path]:
    directory = Path(directory)
    img_dir = directory / "img" if (directory / "img").is_dir() else directory
    return sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def context_side(w: float, h: float, context: float = 0.5) -> float:
    """Side of the square exemplar region around a ``w`` x ``h`` target."""
    pad = context * (w + h)
    return math.sqrt((w + pad) * (h + pad))


@dataclass(frozen=True)
class CropTransform:
    """``crop = (frame - origin) * scale``; ``side`` is the crop extent in frame pixels."""

    origin_x: float
    origin_y: float
    scale: float
    out_size: int

    @property
    def side(self) -> float:
        return self.out_size / self.scale

    @property
    def center(self) -> tuple[float, float]:
        half = self.side / 2.0
        return (self.origin_x + half, self.origin_y + half)

    def point_to_crop(self, x: float, y: float) -> tuple[float, float]:
        return ((x - self.origin_x) * self.scale, (y - self.origin_y) * self.scale)

    def point_to_frame(self, x: float, y: float) -> tuple[float, float]:
        return (x / self.scale + self.origin_x, y / self.scale + self.origin_y)

    def box_to_crop(self, box: BBox) -> BBox:
        cx, cy = self.point_to_crop(box.cx, box.cy)
        return BBox(cx, cy, box.w * self.scale, box.h * self.scale)

    def box_to_frame(self, box: BBox) -> BBox:
        cx, cy = self.point_to_frame(box.cx, box.cy)
        return BBox(cx, cy, box.w / self.scale, box.h / self.scale)


def crop_transform(center: tuple[float, float], side: float, out_size: int,
                   frame_shape: tuple[int, ...] | None = None) -> CropTransform:
    """Transform for a ``side``-pixel square at ``center`` resampled to ``out_size``.

    With ``frame_shape`` the center is clamped into the frame so the crop never
    lies fully outside it.
    """
    cx, cy = center
    if frame_shape is not None:
        fh, fw = frame_shape[:2]
        cx = min(max(cx, 0.0), float(fw))
        cy = min(max(cy, 0.0), float(fh))
    side = max(float(side), 1.0)
    return CropTransform(cx - side / 2.0, cy - side / 2.0, out_size / side, out_size)


def crop(frame: np.ndarray, tf: CropTransform, pad_value=None) -> np.ndarray:
    """Resample the region described by ``tf``; out-of-frame pixels take the frame mean."""
    if pad_value is None:
        pad_value = frame.reshape(-1, frame.shape[-1]).mean(axis=0)
    m = np.array([[tf.scale, 0.0, -tf.origin_x * tf.scale],
                  [0.0, tf.scale, -tf.origin_y * tf.scale]])
    # warpAffine samples pixel centers at integer coordinates; shift by half a pixel both ways
    m[:, 2] += 0.5 * tf.scale - 0.5
    return cv2.warpAffine(np.ascontiguousarray(frame), m, (tf.out_size, tf.out_size),
                          flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT,
                          borderValue=tuple(float(v) for v in np.broadcast_to(pad_value, (3,))))
