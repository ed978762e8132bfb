"""Numba-jitted implementations of the hot kernels.

Same contracts as numpy_backend; explicit loops compiled with @njit.
Single-threaded on purpose: bit-reproducibility matters more here than
core count, and the accumulation order is fixed.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_forward(xp, kernel, stride, out_h, out_w):
    n, _, _, cin = xp.shape
    kh, kw, _, cout = kernel.shape
    y = np.zeros((n, out_h, out_w, cout))
    for b in range(n):
        for i in range(out_h):
            for j in range(out_w):
                for u in range(kh):
                    for v in range(kw):
                        hi = i * stride + u
                        wi = j * stride + v
                        for ci in range(cin):
                            xv = xp[b, hi, wi, ci]
                            for co in range(cout):
                                y[b, i, j, co] += xv * kernel[u, v, ci, co]
    return y


@njit(cache=True)
def conv2d_backward_input(dy, kernel, stride, pad_h, pad_w):
    n, out_h, out_w, cout = dy.shape
    kh, kw, cin, _ = kernel.shape
    dxp = np.zeros((n, pad_h, pad_w, cin))
    for b in range(n):
        for i in range(out_h):
            for j in range(out_w):
                for u in range(kh):
                    for v in range(kw):
                        hi = i * stride + u
                        wi = j * stride + v
                        for co in range(cout):
                            g = dy[b, i, j, co]
                            for ci in range(cin):
                                dxp[b, hi, wi, ci] += g * kernel[u, v, ci, co]
    return dxp


@njit(cache=True)
def conv2d_backward_kernel(xp, dy, kh, kw, stride):
    n, out_h, out_w, cout = dy.shape
    cin = xp.shape[3]
    dk = np.zeros((kh, kw, cin, cout))
    for b in range(n):
        for i in range(out_h):
            for j in range(out_w):
                for u in range(kh):
                    for v in range(kw):
                        hi = i * stride + u
                        wi = j * stride + v
                        for ci in range(cin):
                            xv = xp[b, hi, wi, ci]
                            for co in range(cout):
                                dk[u, v, ci, co] += xv * dy[b, i, j, co]
    return dk


@njit(cache=True)
def bilinear_sample(images, src_y, src_x):
    b, h, w, c = images.shape
    out = np.empty_like(images)
    for n in range(b):
        for i in range(h):
            for j in range(w):
                ys = min(max(src_y[n, i, j], 0.0), h - 1.0)
                xs = min(max(src_x[n, i, j], 0.0), w - 1.0)
                y0 = int(np.floor(ys))
                x0 = int(np.floor(xs))
                y1 = min(y0 + 1, h - 1)
                x1 = min(x0 + 1, w - 1)
                wy = ys - y0
                wx = xs - x0
                for ch in range(c):
                    top = images[n, y0, x0, ch] * (1.0 - wx) + images[n, y0, x1, ch] * wx
                    bot = images[n, y1, x0, ch] * (1.0 - wx) + images[n, y1, x1, ch] * wx
                    out[n, i, j, ch] = top * (1.0 - wy) + bot * wy
    return out
