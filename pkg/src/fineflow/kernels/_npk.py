"""Pure-numpy kernel implementations (fallback backend).

These mirror the compiled Cython kernels bit-for-bit. Floating-point
arithmetic uses identical expression trees and identical accumulation order;
gather/scatter steps may be organized differently (e.g. explicit zero
padding here versus implicit bounds checks in C) because data movement is
exact either way.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad_extents(h: int, w: int, kh: int, kw: int, stride: int, pt: int, pl: int,
                 ho: int, wo: int) -> tuple[int, int]:
    hp = (ho - 1) * stride + kh
    wp = (wo - 1) * stride + kw
    return hp - h - pt, wp - w - pl  # bottom, right


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pt: int, pl: int,
           ho: int, wo: int) -> np.ndarray:
    """Gather conv windows of [N,C,H,W] into [N, C*kh*kw, ho*wo].

    (pt, pl) are the top/left zero-padding offsets; out-of-range taps read 0.
    Column index runs row-major over output positions; row index runs
    row-major over (channel, ki, kj).
    """
    n, c, h, w = x.shape
    pb, pr = _pad_extents(h, w, kh, kw, stride, pt, pl, ho, wo)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt or pb or pl or pr else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [N, C, ho, wo, kh, kw] -> [N, C, kh, kw, ho*wo] -> [N, C*kh*kw, L]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(dcols: np.ndarray, n: int, c: int, h: int, w: int, kh: int, kw: int,
           stride: int, pt: int, pl: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add column gradients back to [N,C,H,W]; taps that fell in the
    padding are dropped. Accumulation order over (ki, kj) is part of the
    backend contract.
    """
    pb, pr = _pad_extents(h, w, kh, kw, stride, pt, pl, ho, wo)
    d6 = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += d6[
                :, :, ki, kj, :, :
            ]
    out = dxp[:, :, pt : pt + h, pl : pl + w]
    return out if out.base is None else np.ascontiguousarray(out)


def warp_bilinear(
    src: np.ndarray, matrix: np.ndarray, out_h: int, out_w: int, fill_zero: bool
) -> np.ndarray:
    """Inverse-map resample of [C,H,W] float64 planes through a 2x3 matrix.

    Output pixel (x, y) samples the source at
        sx = m00*x + m01*y + m02,  sy = m10*x + m11*y + m12
    with bilinear weights. Out-of-range taps read 0 when fill_zero, else the
    clamped edge pixel.
    """
    c, h, w = src.shape
    m = matrix
    xs = np.arange(out_w, dtype=np.float64)
    ys = np.arange(out_h, dtype=np.float64)
    sx = (m[0, 0] * xs[None, :] + m[0, 1] * ys[:, None]) + m[0, 2]
    sy = (m[1, 0] * xs[None, :] + m[1, 1] * ys[:, None]) + m[1, 2]

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y1, 0, h - 1)

    out = np.empty((c, out_h, out_w), dtype=np.float64)
    if fill_zero:
        vx0 = (x0 >= 0) & (x0 < w)
        vx1 = (x1 >= 0) & (x1 < w)
        vy0 = (y0 >= 0) & (y0 < h)
        vy1 = (y1 >= 0) & (y1 < h)
        m00 = vy0 & vx0
        m01 = vy0 & vx1
        m10 = vy1 & vx0
        m11 = vy1 & vx1
        for ch in range(c):
            plane = src[ch]
            v00 = np.where(m00, plane[y0c, x0c], 0.0)
            v01 = np.where(m01, plane[y0c, x1c], 0.0)
            v10 = np.where(m10, plane[y1c, x0c], 0.0)
            v11 = np.where(m11, plane[y1c, x1c], 0.0)
            top = (1.0 - fx) * v00 + fx * v01
            bot = (1.0 - fx) * v10 + fx * v11
            out[ch] = (1.0 - fy) * top + fy * bot
    else:
        for ch in range(c):
            plane = src[ch]
            top = (1.0 - fx) * plane[y0c, x0c] + fx * plane[y0c, x1c]
            bot = (1.0 - fx) * plane[y1c, x0c] + fx * plane[y1c, x1c]
            out[ch] = (1.0 - fy) * top + fy * bot
    return out
