"""Pure-numpy versions of the hot kernels.

Used when the compiled ``_ext`` module is unavailable, and as the reference
the compiled versions are benchmarked against.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def depthwise_xcorr(search, kernel):
    _, kh, kw = kernel.shape
    windows = sliding_window_view(search, (kh, kw), axis=(1, 2))
    return np.einsum("chwij,cij->chw", windows, kernel, optimize=True)


def sad_costs(prev, cur, x0, y0, block, radius):
    """SAD of the ``block`` x ``block`` patch of ``prev`` at (x0, y0) against
    every displacement within ``radius`` in ``cur``. Out-of-frame displacements
    get ``inf``. Returns a (2r+1, 2r+1) array indexed ``[dy + r, dx + r]``.
    """
    h, w = cur.shape[:2]
    ref = prev[y0:y0 + block, x0:x0 + block]
    n = 2 * radius + 1
    costs = np.full((n, n), np.inf)
    ylo, yhi = max(-radius, -y0), min(radius, h - block - y0)
    xlo, xhi = max(-radius, -x0), min(radius, w - block - x0)
    if ylo > yhi or xlo > xhi:
        return costs
    region = cur[y0 + ylo:y0 + yhi + block, x0 + xlo:x0 + xhi + block]
    win = sliding_window_view(region, (block, block), axis=(0, 1))
    diff = np.abs(win - ref.transpose(2, 0, 1)[None, None] if ref.ndim == 3 else win - ref)
    costs[ylo + radius:yhi + radius + 1, xlo + radius:xhi + radius + 1] = diff.reshape(
        diff.shape[0], diff.shape[1], -1).sum(axis=-1)
    return costs


def octant(gx, gy):
    """Index of the 45-degree sector holding angle atan2(gy, gx) in [0, 2 pi),
    decided by exact comparisons so that every implementation agrees on boundaries."""
    ax, ay = np.abs(gx), np.abs(gy)
    upper = (gy > 0) | ((gy == 0) & (gx >= 0))
    return np.select(
        [upper & (gx > 0) & (ay < ax), upper & (gx > 0), upper & (ay > ax), upper,
         (gx < 0) & (ay < ax), gx < 0, ay > ax],
        [0, 1, 2, 3, 4, 5, 6], 7).astype(np.int64)


def cell_stats(img, stride, grad_gain):
    """Per-cell color statistics and gradient-orientation histogram of a uint8 RGB image.

    Returns ``(16, H // stride, W // stride)``: mean r, g, b (each minus 0.45),
    saturation, r - g, (r + g) / 2 - b, luminance - 0.45, 4 * luminance std,
    then 8 orientation bins of gradient magnitude scaled by ``grad_gain``.
    """
    img = img.astype(np.float64) / 255.0
    h, w = img.shape[:2]
    s = stride
    hc, wc = h // s, w // s
    ncell = hc * wc
    cell = ((np.arange(h) // s)[:, None] * wc + (np.arange(w) // s)[None, :]).ravel()
    r, g, b = img[..., 0].ravel(), img[..., 1].ravel(), img[..., 2].ravel()
    lum = (r + g + b) / 3.0
    sat = np.maximum(np.maximum(r, g), b) - np.minimum(np.minimum(r, g), b)
    area = float(s * s)

    def pool(values):
        return np.bincount(cell, weights=values, minlength=ncell) / area

    mean_lum = pool(lum)
    spread = np.sqrt(np.maximum(pool(lum * lum) - mean_lum ** 2, 0.0)) * 4.0
    color = [pool(r) - 0.45, pool(g) - 0.45, pool(b) - 0.45, pool(sat), pool(r - g),
             pool(0.5 * (r + g) - b), mean_lum - 0.45, spread]

    gy, gx = np.gradient(lum.reshape(h, w))
    mag = np.sqrt(gx * gx + gy * gy).ravel()
    bins = octant(gx, gy).ravel()
    hist = np.bincount(cell * 8 + bins, weights=mag, minlength=ncell * 8).reshape(ncell, 8)
    grad = hist.T * (grad_gain / area)
    return np.concatenate([np.stack(color), grad], axis=0).reshape(16, hc, wc)
