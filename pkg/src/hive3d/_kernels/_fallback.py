"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_native.pyx`` with the same signature and
the same floating-point accumulation order, so the two backends agree
bit-for-bit.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "python"


def vol2col(xp, kernel, stride, out_shape):
    """Gather sliding 3D patches of a padded volume into a column matrix.

    Parameters
    ----------
    xp : ndarray, shape (B, C, Dp, Hp, Wp)
        Padded input volume.
    kernel, stride, out_shape : tuple of 3 ints

    Returns
    -------
    ndarray, shape (B, C*kd*kh*kw, Do*Ho*Wo)
        Row ``(c, u, v, q)`` holds ``xp[b, c, d*sd+u, h*sh+v, w*sw+q]``.
    """
    B, C = xp.shape[:2]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do, ho, wo = out_shape
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, : (do - 1) * sd + 1 : sd, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4))
    return cols.reshape(B, C * kd * kh * kw, do * ho * wo)


def col2vol(cols, padded_shape, kernel, stride, out_shape):
    """Scatter-add a column matrix back onto a padded volume (adjoint of vol2col)."""
    B, C = padded_shape[:2]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do, ho, wo = out_shape
    g = cols.reshape(B, C, kd, kh, kw, do, ho, wo)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for u in range(kd):
        for v in range(kh):
            for q in range(kw):
                out[
                    :,
                    :,
                    u : u + sd * (do - 1) + 1 : sd,
                    v : v + sh * (ho - 1) + 1 : sh,
                    q : q + sw * (wo - 1) + 1 : sw,
                ] += g[:, :, u, v, q]
    return out


def maxpool3d_forward(x, window, stride, out_shape):
    """Window maxima and the flat (d, h, w) index of each winner.

    Ties resolve to the first index in row-major window order.
    """
    B, C, D, H, W = x.shape
    wd, wh, ww = window
    sd, sh, sw = stride
    do, ho, wo = out_shape
    win = sliding_window_view(x, (wd, wh, ww), axis=(2, 3, 4))
    win = win[:, :, : (do - 1) * sd + 1 : sd, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    flat = win.reshape(B, C, do, ho, wo, wd * wh * ww)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    lu, rem = np.divmod(local, wh * ww)
    lv, lq = np.divmod(rem, ww)
    od = np.arange(do).reshape(do, 1, 1) * sd
    oh = np.arange(ho).reshape(1, ho, 1) * sh
    ow = np.arange(wo).reshape(1, 1, wo) * sw
    index = ((od + lu) * H + (oh + lv)) * W + (ow + lq)
    return np.ascontiguousarray(out), index.astype(np.int64)


def maxpool3d_backward(grad_out, index, in_shape):
    B, C = in_shape[:2]
    n = in_shape[2] * in_shape[3] * in_shape[4]
    g = np.zeros((B * C, n), dtype=grad_out.dtype)
    rows = np.repeat(np.arange(B * C), index[0, 0].size)
    np.add.at(g, (rows, index.reshape(-1)), grad_out.reshape(-1))
    return g.reshape(in_shape)


def stroke_segment(img, x0, y0, x1, y1, half_width, alpha):
    """Composite one anti-aliased segment onto a float32 image in place.

    Coverage is ``clip(half_width + 0.5 - dist, 0, 1)`` where ``dist`` is the
    distance from the pixel center (integer coordinates) to the segment; the
    pixel becomes ``old * (1 - alpha * coverage)``.
    """
    H, W = img.shape
    reach = half_width + 0.5
    c0 = max(int(np.floor(min(x0, x1) - reach)), 0)
    c1 = min(int(np.ceil(max(x0, x1) + reach)), W - 1)
    r0 = max(int(np.floor(min(y0, y1) - reach)), 0)
    r1 = min(int(np.ceil(max(y0, y1) + reach)), H - 1)
    if c0 > c1 or r0 > r1:
        return
    px = np.arange(c0, c1 + 1, dtype=np.float64)[None, :]
    py = np.arange(r0, r1 + 1, dtype=np.float64)[:, None]
    dx = x1 - x0
    dy = y1 - y0
    ll = dx * dx + dy * dy
    if ll > 0.0:
        t = ((px - x0) * dx + (py - y0) * dy) / ll
        t = np.minimum(np.maximum(t, 0.0), 1.0)
    else:
        t = np.zeros((r1 - r0 + 1, c1 - c0 + 1))
    ex = px - (x0 + t * dx)
    ey = py - (y0 + t * dy)
    dist = np.sqrt(ex * ex + ey * ey)
    cov = np.minimum(np.maximum(reach - dist, 0.0), 1.0)
    region = img[r0 : r1 + 1, c0 : c1 + 1]
    region[...] = (region.astype(np.float64) * (1.0 - alpha * cov)).astype(np.float32)
