"""Hot-kernel dispatch: the compiled extension when it was built, numpy otherwise.

Set ``NLTRACK_PURE_PYTHON=1`` to force the numpy path.
"""

import os

import numpy as np

from nltrack import _kernels

try:
    if os.environ.get("NLTRACK_PURE_PYTHON"):
        raise ImportError("pure-python kernels forced by environment")
    from nltrack import _ext as _impl
    BACKEND = "compiled"
except ImportError:
    _impl = _kernels
    BACKEND = "numpy"


def depthwise_xcorr(search: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return _impl.depthwise_xcorr(np.ascontiguousarray(search, dtype=np.float64),
                                 np.ascontiguousarray(kernel, dtype=np.float64))


def sad_costs(prev: np.ndarray, cur: np.ndarray, x0: int, y0: int, block: int, radius: int) -> np.ndarray:
    prev = np.ascontiguousarray(prev, dtype=np.float64)
    cur = np.ascontiguousarray(cur, dtype=np.float64)
    if prev.ndim == 2:
        prev, cur = prev[..., None], cur[..., None]
    return _impl.sad_costs(prev, cur, int(x0), int(y0), int(block), int(radius))


def cell_stats(img: np.ndarray, stride: int, grad_gain: float) -> np.ndarray:
    return _impl.cell_stats(np.ascontiguousarray(img, dtype=np.uint8), int(stride), float(grad_gain))
