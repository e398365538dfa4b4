"""Dense feature-map kernels: depth-wise correlation, foreground softmax and
the center-biased Gaussian window.

Feature maps are float64 arrays laid out ``(channels, height, width)``.
A score map has ``2k`` channels with anchor ``a`` at ``(2a, 2a + 1)`` =
(background, foreground); a regression map has ``4k`` channels with anchor
``a`` at ``4a .. 4a + 3`` = (dx, dy, dw, dh). Per-anchor fields derived from
them are laid out ``(height, width, k)`` so that ``field.ravel()`` lines up
with :func:`nltrack.geometry.gen_anchors`.
"""

from __future__ import annotations

import numpy as np

from nltrack import kernels


class ShapeError(ValueError):
    pass


def check_feature_map(fm: np.ndarray, name: str = "feature map") -> np.ndarray:
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 3 or min(fm.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty (C, H, W) array, got shape {fm.shape}")
    if not np.all(np.isfinite(fm)):
        raise ShapeError(f"{name} has non-finite entries")
    return fm


def depthwise_xcorr(search: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid, stride-1, per-channel cross-correlation of ``kernel`` over ``search``."""
    search = check_feature_map(search, "search map")
    kernel = check_feature_map(kernel, "kernel")
    if (kernel.shape[0] != search.shape[0] or kernel.shape[1] > search.shape[1]
            or kernel.shape[2] > search.shape[2]):
        raise ShapeError(f"cannot correlate kernel (C,H,W)={kernel.shape} over search (C,H,W)={search.shape}")
    return kernels.depthwise_xcorr(search, kernel)


def foreground_softmax(score_map: np.ndarray) -> np.ndarray:
    """Foreground probability per anchor, shape ``(H, W, k)``."""
    score_map = np.asarray(score_map, dtype=np.float64)
    if score_map.ndim != 3 or score_map.shape[0] % 2:
        raise ShapeError(f"score map needs an even channel count, got shape {score_map.shape}")
    bg = score_map[0::2]
    fg = score_map[1::2]
    # two-class softmax == logistic of the logit gap; computed stably on both signs
    z = fg - bg
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out.transpose(1, 2, 0)


def gaussian_weights(height: int, width: int, center: tuple[float, float], sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    d2 = (xs - center[0]) ** 2 + (ys - center[1]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def gaussian_window(field: np.ndarray, center: tuple[float, float] | None = None,
                    sigma: float | None = None) -> np.ndarray:
    """Multiply an ``(H, W)`` or ``(H, W, k)`` field by a 2-D Gaussian of cell distance.

    ``center`` is ``(x, y)`` in cell coordinates and defaults to the map center;
    ``sigma`` defaults to ``0.2 * min(H, W)`` cells.
    """
    field = np.asarray(field, dtype=np.float64)
    h, w = field.shape[:2]
    if center is None:
        center = ((w - 1) / 2.0, (h - 1) / 2.0)
    if sigma is None:
        sigma = 0.2 * min(h, w)
    weights = gaussian_weights(h, w, center, sigma)
    if field.ndim == 3:
        weights = weights[..., None]
    return field * weights
