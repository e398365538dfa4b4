# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; same signatures and semantics as ``_kernels``."""

import numpy as np
cimport cython
from libc.math cimport fabs, sqrt


def depthwise_xcorr(const double[:, :, ::1] search, const double[:, :, ::1] kernel):
    cdef Py_ssize_t c = search.shape[0], h = search.shape[1], w = search.shape[2]
    cdef Py_ssize_t kh = kernel.shape[1], kw = kernel.shape[2]
    cdef Py_ssize_t oh = h - kh + 1, ow = w - kw + 1
    out = np.zeros((c, oh, ow), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t ch, y, x, u, v
    cdef double acc, kv
    for ch in range(c):
        for y in range(oh):
            for x in range(ow):
                acc = 0.0
                for v in range(kh):
                    for u in range(kw):
                        acc = acc + search[ch, y + v, x + u] * kernel[ch, v, u]
                o[ch, y, x] = acc
    return out


def sad_costs(const double[:, :, ::1] prev, const double[:, :, ::1] cur,
              Py_ssize_t x0, Py_ssize_t y0, Py_ssize_t block, Py_ssize_t radius):
    cdef Py_ssize_t h = cur.shape[0], w = cur.shape[1], nc = cur.shape[2]
    cdef Py_ssize_t n = 2 * radius + 1
    costs = np.full((n, n), np.inf)
    cdef double[:, ::1] cv = costs
    cdef Py_ssize_t dx, dy, y, x, ch
    cdef double acc
    for dy in range(-radius, radius + 1):
        if y0 + dy < 0 or y0 + dy + block > h:
            continue
        for dx in range(-radius, radius + 1):
            if x0 + dx < 0 or x0 + dx + block > w:
                continue
            acc = 0.0
            for y in range(block):
                for x in range(block):
                    for ch in range(nc):
                        acc = acc + fabs(cur[y0 + dy + y, x0 + dx + x, ch] - prev[y0 + y, x0 + x, ch])
            cv[dy + radius, dx + radius] = acc
    return costs


cdef inline Py_ssize_t _octant(double gx, double gy) nogil:
    cdef double ax = fabs(gx), ay = fabs(gy)
    if gy > 0 or (gy == 0 and gx >= 0):
        if gx > 0:
            return 0 if ay < ax else 1
        return 2 if ay > ax else 3
    if gx < 0:
        return 4 if ay < ax else 5
    return 6 if ay > ax else 7


def cell_stats(const unsigned char[:, :, ::1] img, Py_ssize_t stride, double grad_gain):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef Py_ssize_t hc = h // stride, wc = w // stride
    out = np.zeros((16, hc, wc), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    lum_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] lum = lum_arr
    cdef Py_ssize_t y, x, cy, cx, bin_
    cdef double r, g, b, l, mx, mn, gx, gy, mag
    cdef double area = <double>(stride * stride)
    for y in range(h):
        cy = y // stride
        for x in range(w):
            cx = x // stride
            r = img[y, x, 0] / 255.0
            g = img[y, x, 1] / 255.0
            b = img[y, x, 2] / 255.0
            l = (r + g + b) / 3.0
            lum[y, x] = l
            mx = r if r > g else g
            mx = mx if mx > b else b
            mn = r if r < g else g
            mn = mn if mn < b else b
            o[0, cy, cx] += r
            o[1, cy, cx] += g
            o[2, cy, cx] += b
            o[3, cy, cx] += mx - mn
            o[4, cy, cx] += r - g
            o[5, cy, cx] += 0.5 * (r + g) - b
            o[6, cy, cx] += l
            o[7, cy, cx] += l * l
    for y in range(h):
        cy = y // stride
        for x in range(w):
            cx = x // stride
            # np.gradient: central differences inside, one-sided at the borders
            if h == 1:
                gy = 0.0
            elif y == 0:
                gy = lum[1, x] - lum[0, x]
            elif y == h - 1:
                gy = lum[h - 1, x] - lum[h - 2, x]
            else:
                gy = (lum[y + 1, x] - lum[y - 1, x]) / 2.0
            if w == 1:
                gx = 0.0
            elif x == 0:
                gx = lum[y, 1] - lum[y, 0]
            elif x == w - 1:
                gx = lum[y, w - 1] - lum[y, w - 2]
            else:
                gx = (lum[y, x + 1] - lum[y, x - 1]) / 2.0
            mag = sqrt(gx * gx + gy * gy)
            o[8 + _octant(gx, gy), cy, cx] += mag
    cdef double m
    for cy in range(hc):
        for cx in range(wc):
            for bin_ in range(8):
                o[bin_, cy, cx] /= area
            m = o[6, cy, cx]
            l = o[7, cy, cx] - m * m
            o[7, cy, cx] = sqrt(l if l > 0 else 0.0) * 4.0
            o[0, cy, cx] -= 0.45
            o[1, cy, cx] -= 0.45
            o[2, cy, cx] -= 0.45
            o[6, cy, cx] -= 0.45
            for bin_ in range(8):
                o[8 + bin_, cy, cx] *= grad_gain / area
    return out
