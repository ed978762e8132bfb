"""Pure-numpy implementations of the hot kernels.

Convolutions are expressed as kh*kw strided-slice contractions so the heavy
lifting stays inside BLAS-backed tensordot calls. All arrays are float64,
NHWC layout, kernels are cross-correlation (no flip) with layout
[kh, kw, Cin, Cout].
"""

import numpy as np


def conv2d_forward(xp, kernel, stride, out_h, out_w):
    """Strided cross-correlation on an already-padded input xp[N,Hp,Wp,Ci]."""
    n = xp.shape[0]
    kh, kw, _, cout = kernel.shape
    y = np.zeros((n, out_h, out_w, cout))
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, u:u + (out_h - 1) * stride + 1:stride,
                    v:v + (out_w - 1) * stride + 1:stride, :]
            y += np.tensordot(xs, kernel[u, v], axes=([3], [0]))
    return y


def conv2d_backward_input(dy, kernel, stride, pad_h, pad_w):
    """Gradient w.r.t. the padded input; returns dxp[N,Hp,Wp,Ci]."""
    n, out_h, out_w, _ = dy.shape
    kh, kw, cin, _ = kernel.shape
    dxp = np.zeros((n, pad_h, pad_w, cin))
    for u in range(kh):
        for v in range(kw):
            dxp[:, u:u + (out_h - 1) * stride + 1:stride,
                v:v + (out_w - 1) * stride + 1:stride, :] += \
                np.tensordot(dy, kernel[u, v], axes=([3], [1]))
    return dxp


def conv2d_backward_kernel(xp, dy, kh, kw, stride):
    """Gradient w.r.t. the kernel from padded input and output gradient."""
    _, out_h, out_w, cout = dy.shape
    cin = xp.shape[3]
    dk = np.zeros((kh, kw, cin, cout))
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, u:u + (out_h - 1) * stride + 1:stride,
                    v:v + (out_w - 1) * stride + 1:stride, :]
            dk[u, v] = np.tensordot(xs, dy, axes=([0, 1, 2], [0, 1, 2]))
    return dk


def bilinear_sample(images, src_y, src_x):
    """Sample images[b,H,W,C] at float coords with clamp-to-edge borders.

    src_y/src_x have shape [b,H,W]; returns an array shaped like images.
    """
    b, h, w, c = images.shape
    ys = np.clip(src_y, 0.0, h - 1.0)
    xs = np.clip(src_x, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    bi = np.arange(b)[:, None, None]
    v00 = images[bi, y0, x0]
    v01 = images[bi, y0, x1]
    v10 = images[bi, y1, x0]
    v11 = images[bi, y1, x1]
    top = v00 * (1.0 - wx) + v01 * wx
    bot = v10 * (1.0 - wx) + v11 * wx
    return top * (1.0 - wy) + bot * wy
