# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core.

Must stay bit-identical to fineflow.kernels._npk: floating-point expression
trees match, col2im keeps (ki, kj) as the outer accumulation order, and the
build disables FMA contraction. Any change here needs the same change there.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor
from libc.string cimport memcpy

cnp.import_array()


cdef inline int _first_valid(int offset, int stride) nogil:
    # smallest index i >= 0 with i*stride - offset >= 0
    if offset <= 0:
        return 0
    return (offset + stride - 1) // stride


cdef inline int _last_valid(int limit, int offset, int stride, int count) nogil:
    # largest index i <= count-1 with i*stride - offset <= limit-1
    cdef int top = limit - 1 + offset
    if top < 0:
        return -1
    top //= stride
    return top if top < count else count - 1


def im2col(cnp.float64_t[:, :, :, ::1] x, int kh, int kw, int stride,
           int pt, int pl, int ho, int wo):
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out = np.zeros((n, c * kh * kw, ho * wo), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] cols = out
    cdef int b, ch, ki, kj, oy, ox, row, iy, oy_lo, oy_hi, ox_lo, ox_hi, ix0
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(kh):
                    oy_lo = _first_valid(pt - ki, stride)
                    oy_hi = _last_valid(h, pt - ki, stride, ho)
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        ox_lo = _first_valid(pl - kj, stride)
                        ox_hi = _last_valid(w, pl - kj, stride, wo)
                        ix0 = kj - pl
                        for oy in range(oy_lo, oy_hi + 1):
                            iy = oy * stride + ki - pt
                            if stride == 1 and ox_hi >= ox_lo:
                                # contiguous row gather: plain copy
                                memcpy(&cols[b, row, oy * wo + ox_lo],
                                       &x[b, ch, iy, ox_lo + ix0],
                                       (ox_hi - ox_lo + 1) * sizeof(double))
                            else:
                                for ox in range(ox_lo, ox_hi + 1):
                                    cols[b, row, oy * wo + ox] = x[b, ch, iy, ox * stride + ix0]
    return out


def col2im(cnp.float64_t[:, :, ::1] dcols, int n, int c, int h, int w,
           int kh, int kw, int stride, int pt, int pl, int ho, int wo):
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef cnp.float64_t[:, :, :, ::1] dx = out
    cdef int b, ch, ki, kj, oy, ox, row, iy, oy_lo, oy_hi, ox_lo, ox_hi, ix0
    with nogil:
        for b in range(n):
            for ch in range(c):
                # (ki, kj) must stay the outer accumulation order: the numpy
                # backend adds one full (ki, kj) slab at a time.
                for ki in range(kh):
                    oy_lo = _first_valid(pt - ki, stride)
                    oy_hi = _last_valid(h, pt - ki, stride, ho)
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        ox_lo = _first_valid(pl - kj, stride)
                        ox_hi = _last_valid(w, pl - kj, stride, wo)
                        ix0 = kj - pl
                        for oy in range(oy_lo, oy_hi + 1):
                            iy = oy * stride + ki - pt
                            for ox in range(ox_lo, ox_hi + 1):
                                dx[b, ch, iy, ox * stride + ix0] += dcols[b, row, oy * wo + ox]
    return out


cdef inline long long _clip(long long v, long long lo, long long hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def warp_bilinear(cnp.float64_t[:, :, ::1] src, cnp.float64_t[:, ::1] matrix,
                  int out_h, int out_w, bint fill_zero):
    cdef int c = src.shape[0], h = src.shape[1], w = src.shape[2]
    cdef double m00 = matrix[0, 0], m01 = matrix[0, 1], m02 = matrix[0, 2]
    cdef double m10 = matrix[1, 0], m11 = matrix[1, 1], m12 = matrix[1, 2]
    out = np.empty((c, out_h, out_w), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] o = out
    cdef int ch, y, x
    cdef double sx, sy, fx, fy, v00, v01, v10, v11, top, bot
    cdef long long x0, y0, x1, y1, x0c, x1c, y0c, y1c
    for y in range(out_h):
        for x in range(out_w):
            sx = (m00 * x + m01 * y) + m02
            sy = (m10 * x + m11 * y) + m12
            fx = sx - floor(sx)
            fy = sy - floor(sy)
            x0 = <long long> floor(sx)
            y0 = <long long> floor(sy)
            x1 = x0 + 1
            y1 = y0 + 1
            x0c = _clip(x0, 0, w - 1)
            x1c = _clip(x1, 0, w - 1)
            y0c = _clip(y0, 0, h - 1)
            y1c = _clip(y1, 0, h - 1)
            for ch in range(c):
                if fill_zero:
                    v00 = src[ch, y0c, x0c] if (0 <= y0 < h and 0 <= x0 < w) else 0.0
                    v01 = src[ch, y0c, x1c] if (0 <= y0 < h and 0 <= x1 < w) else 0.0
                    v10 = src[ch, y1c, x0c] if (0 <= y1 < h and 0 <= x0 < w) else 0.0
                    v11 = src[ch, y1c, x1c] if (0 <= y1 < h and 0 <= x1 < w) else 0.0
                else:
                    v00 = src[ch, y0c, x0c]
                    v01 = src[ch, y0c, x1c]
                    v10 = src[ch, y1c, x0c]
                    v11 = src[ch, y1c, x1c]
                top = (1.0 - fx) * v00 + fx * v01
                bot = (1.0 - fx) * v10 + fx * v11
                o[ch, y, x] = (1.0 - fy) * top + fy * bot
    return out
