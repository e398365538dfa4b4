"""Motion guidance: mean optical flow inside a box between consecutive frames."""

from __future__ import annotations

from typing import Protocol

import numpy as np

from nltrack import kernels
from nltrack.geometry import BBox


class FlowProvider(Protocol):
    def mean_flow(self, frame_prev: np.ndarray, frame_cur: np.ndarray, region: BBox) -> tuple[float, float]: ...


class ZeroFlow:
    """Constant-position motion model."""

    def mean_flow(self, frame_prev, frame_cur, region):
        return (0.0, 0.0)


class ConstantFlow:
    def __init__(self, vx: float, vy: float):
        self.v = (float(vx), float(vy))

    def mean_flow(self, frame_prev, frame_cur, region):
        return self.v


def _block_origins(lo: int, hi: int, block: int) -> list[int]:
    if hi - lo <= block:
        return [(lo + hi - block) // 2]
    n = (hi - lo) // block
    start = lo + ((hi - lo) - n * block) // 2
    return [start + i * block for i in range(n)]


class BlockMatchingFlow:
    """Exhaustive block matching with a sum-of-absolute-differences criterion.

    The region is tiled with ``block``-pixel blocks; each block takes the
    displacement within ``radius`` that minimizes SAD. Exact ties resolve to the
    smallest displacement, so textureless blocks report zero motion.
    """

    def __init__(self, block: int = 16, radius: int = 16):
        self.block = block
        self.radius = radius
        r = np.arange(-radius, radius + 1)
        dy, dx = np.meshgrid(r, r, indexing="ij")
        self._dx, self._dy = dx.ravel(), dy.ravel()
        self._order = np.lexsort((dx.ravel(), dy.ravel(), dx.ravel() ** 2 + dy.ravel() ** 2))

    def block_flow(self, prev: np.ndarray, cur: np.ndarray, x0: int, y0: int) -> tuple[int, int]:
        costs = kernels.sad_costs(prev, cur, x0, y0, self.block, self.radius).ravel()
        best = costs.min()
        if not np.isfinite(best):
            return (0, 0)
        # first minimum in order of increasing |d|
        tol = 1e-9 * max(best, 1.0)
        i = next(i for i in self._order if costs[i] <= best + tol)
        return int(self._dx[i]), int(self._dy[i])

    def mean_flow(self, frame_prev, frame_cur, region):
        h, w = frame_cur.shape[:2]
        if frame_prev.shape != frame_cur.shape or h < self.block or w < self.block:
            return (0.0, 0.0)
        x1, y1, x2, y2 = (int(round(v)) for v in region.corners())
        x1, y1 = max(x1, 0), max(y1, 0)
        x2, y2 = min(x2, w), min(y2, h)
        if x2 - x1 < 1 or y2 - y1 < 1:
            return (0.0, 0.0)
        prev = np.ascontiguousarray(frame_prev, dtype=np.float64)
        cur = np.ascontiguousarray(frame_cur, dtype=np.float64)
        if prev.ndim == 2:
            prev, cur = prev[..., None], cur[..., None]
        flows = []
        for by in _block_origins(y1, y2, self.block):
            for bx in _block_origins(x1, x2, self.block):
                bx = min(max(bx, 0), w - self.block)
                by = min(max(by, 0), h - self.block)
                flows.append(self.block_flow(prev, cur, bx, by))
        v = np.mean(np.asarray(flows, dtype=np.float64), axis=0)
        return (float(v[0]), float(v[1]))
