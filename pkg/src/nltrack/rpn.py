"""Visual-exemplar and natural-language region proposal branches.

Both branches correlate a projected search map against a kernel (a projected
exemplar map, or the NL kernel) channel by channel, then an output head maps the
correlation channels to ``2k`` classification and ``4k`` regression channels.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from typing import Hashable, Sequence

import numpy as np

from nltrack.backends import Model, NLKernel, ProjectionHead
from nltrack.geometry import DEFAULT_RATIOS, AnchorGrid, BBox, decode_boxes, gen_anchors
from nltrack.tensor import ShapeError, depthwise_xcorr, foreground_softmax, gaussian_window


_anchors = lru_cache(maxsize=128)(gen_anchors)


class Source(str, enum.Enum):
    VISUAL = "visual"
    NL = "nl"


class EmptyMemory(LookupError):
    """No exemplars to select from; the caller has to fall back to the NL branch."""


@dataclass(frozen=True)
class Detection:
    score: float
    box: BBox
    source: Source
    exemplar_id: Hashable | None = None
    anchor: int = -1


@dataclass(frozen=True)
class AnchorConfig:
    stride: int = 8
    scales: tuple[float, ...] = (4096.0,)
    ratios: tuple[float, ...] = DEFAULT_RATIOS

    @property
    def k(self) -> int:
        return len(self.scales) * len(self.ratios)

    def grid_for(self, out_h: int, out_w: int, kernel_h: int, kernel_w: int) -> AnchorGrid:
        """Anchors for a valid-correlation output; each cell sits at its window center."""
        off = ((kernel_w - 1) / 2.0 * self.stride, (kernel_h - 1) / 2.0 * self.stride)
        return AnchorGrid(out_w, out_h, self.stride, tuple(self.scales), tuple(self.ratios), off)


def correlate_head(projected_search: np.ndarray, kernel: np.ndarray, out_head: ProjectionHead) -> np.ndarray:
    corr = depthwise_xcorr(projected_search, kernel) / (kernel.shape[1] * kernel.shape[2])
    return out_head.apply(corr)


def _check_k(model: Model, cls: np.ndarray, reg: np.ndarray) -> None:
    if cls.shape[0] != 2 * model.k or reg.shape[0] != 4 * model.k:
        raise ShapeError(f"heads produce {cls.shape[0]}/{reg.shape[0]} channels, expected "
                         f"{2 * model.k}/{4 * model.k} for k={model.k}")


def nl_rpn_forward(search_feat: np.ndarray, nlk: NLKernel, model: Model,
                   projected: tuple[np.ndarray, np.ndarray] | None = None):
    h = model.heads
    px_cls, px_reg = projected or (h["nl_cls_x"].apply(search_feat), h["nl_reg_x"].apply(search_feat))
    cls = correlate_head(px_cls, nlk.cls_kernel, h["nl_cls_out"])
    reg = correlate_head(px_reg, nlk.reg_kernel, h["nl_reg_out"])
    _check_k(model, cls, reg)
    return cls, reg


def project_search(search_feat: np.ndarray, model: Model, branch: str = "siam"):
    h = model.heads
    return h[f"{branch}_cls_x"].apply(search_feat), h[f"{branch}_reg_x"].apply(search_feat)


def project_exemplar(exemplar_feat: np.ndarray, model: Model):
    h = model.heads
    return h["siam_cls_z"].apply(exemplar_feat), h["siam_reg_z"].apply(exemplar_feat)


def siam_rpn_forward(search_feat: np.ndarray, exemplar_feat: np.ndarray, model: Model,
                     projected: tuple[np.ndarray, np.ndarray] | None = None,
                     kernels: tuple[np.ndarray, np.ndarray] | None = None):
    """One exemplar against one search map. ``projected``/``kernels`` let callers
    reuse projections across exemplars."""
    h = model.heads
    px_cls, px_reg = projected or project_search(search_feat, model)
    pz_cls, pz_reg = kernels or project_exemplar(exemplar_feat, model)
    cls = correlate_head(px_cls, pz_cls, h["siam_cls_out"])
    reg = correlate_head(px_reg, pz_reg, h["siam_reg_out"])
    _check_k(model, cls, reg)
    return cls, reg


def select_best_exemplar(per_exemplar: Sequence[tuple]) -> Hashable:
    """Exemplar whose score map holds the highest foreground probability.

    Entries are ``(exemplar_id, score_map)`` or ``(exemplar_id, score_map, born_at)``;
    ties go to the earliest ``born_at``, then the smallest id.
    """
    if not per_exemplar:
        raise EmptyMemory("no exemplars in memory")
    best_key, best_id = None, None
    for entry in per_exemplar:
        ex_id, sm = entry[0], entry[1]
        born = entry[2] if len(entry) > 2 else 0
        peak = float(foreground_softmax(sm).max())
        key = (-peak, born, ex_id)
        if best_key is None or key < best_key:
            best_key, best_id = key, ex_id
    return best_id


@dataclass(frozen=True)
class WindowParams:
    sigma_factor: float = 0.2
    center: tuple[float, float] | None = None


def reg_field(reg_map: np.ndarray) -> np.ndarray:
    """``(4k, H, W)`` -> ``(H * W * k, 4)`` in anchor order."""
    k4, h, w = reg_map.shape
    return reg_map.reshape(k4 // 4, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)


def extract_detection(score_map: np.ndarray, reg_map: np.ndarray, grid: AnchorGrid,
                      window: WindowParams | None = None, source: Source = Source.VISUAL,
                      exemplar_id: Hashable | None = None) -> Detection:
    """Softmax, optional Gaussian window, argmax, decode.

    The window only decides which anchor wins; the reported score is the
    winner's un-windowed foreground probability.
    """
    fg = foreground_softmax(score_map)
    if fg.shape != (grid.feat_h, grid.feat_w, grid.k) or reg_map.shape[1:] != fg.shape[:2]:
        raise ShapeError(f"score field {fg.shape}, reg map {reg_map.shape} and "
                         f"grid {grid.feat_h}x{grid.feat_w}x{grid.k} disagree")
    sel = fg
    if window is not None:
        sel = gaussian_window(fg, window.center, window.sigma_factor * min(fg.shape[:2]))
    idx = int(np.argmax(sel.ravel()))
    anchor = _anchors(grid)[idx]
    box = decode_boxes(anchor, reg_field(reg_map)[idx])
    return Detection(float(fg.ravel()[idx]), BBox.from_array(box), source, exemplar_id, idx)


def proposals(score_map: np.ndarray, reg_map: np.ndarray, grid: AnchorGrid):
    """All per-anchor scores and decoded boxes."""
    return foreground_softmax(score_map).ravel(), decode_boxes(_anchors(grid), reg_field(reg_map))
