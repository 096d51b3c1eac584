# cython: language_level=3
"""Compiled hot kernels. Semantics and accumulation order mirror _fallback.py."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, ceil
from libc.string cimport memcpy

cnp.import_array()

NAME = "native"

ctypedef fused real:
    float
    double


def vol2col(real[:, :, :, :, ::1] xp, kernel, stride, out_shape):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t Dp = xp.shape[2], Hp = xp.shape[3], Wp = xp.shape[4]
    cdef Py_ssize_t kd = kernel[0], kh = kernel[1], kw = kernel[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t do = out_shape[0], ho = out_shape[1], wo = out_shape[2]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, C * kd * kh * kw, do * ho * wo), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t b, c, u, v, q, d, h, w
    cdef real* src
    cdef real* dst
    cdef real* line
    with nogil:
        for b in range(B):
            for c in range(C):
                src = &xp[b, c, 0, 0, 0]
                dst = &cols[b, c * kd * kh * kw, 0]
                for u in range(kd):
                    for v in range(kh):
                        for q in range(kw):
                            for d in range(do):
                                for h in range(ho):
                                    line = src + ((d * sd + u) * Hp + h * sh + v) * Wp + q
                                    if sw == 1:
                                        memcpy(dst, line, wo * sizeof(real))
                                    else:
                                        for w in range(wo):
                                            dst[w] = line[w * sw]
                                    dst = dst + wo
    return out


def col2vol(real[:, :, ::1] cols, padded_shape, kernel, stride, out_shape):
    cdef Py_ssize_t B = padded_shape[0], C = padded_shape[1]
    cdef Py_ssize_t Dp = padded_shape[2], Hp = padded_shape[3], Wp = padded_shape[4]
    cdef Py_ssize_t kd = kernel[0], kh = kernel[1], kw = kernel[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t do = out_shape[0], ho = out_shape[1], wo = out_shape[2]
    dtype = np.float32 if real is float else np.float64
    result = np.zeros(tuple(padded_shape), dtype=dtype)
    cdef real[:, :, :, :, ::1] out = result
    cdef Py_ssize_t b, c, u, v, q, d, h, w
    cdef real* src
    cdef real* dst
    cdef real* line
    with nogil:
        for b in range(B):
            for c in range(C):
                dst = &out[b, c, 0, 0, 0]
                src = &cols[b, c * kd * kh * kw, 0]
                for u in range(kd):
                    for v in range(kh):
                        for q in range(kw):
                            for d in range(do):
                                for h in range(ho):
                                    line = dst + ((d * sd + u) * Hp + h * sh + v) * Wp + q
                                    if sw == 1:
                                        for w in range(wo):
                                            line[w] += src[w]
                                    else:
                                        for w in range(wo):
                                            line[w * sw] += src[w]
                                    src = src + wo
    return result


def maxpool3d_forward(real[:, :, :, :, ::1] x, window, stride, out_shape):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t wd = window[0], wh = window[1], ww = window[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t do = out_shape[0], ho = out_shape[1], wo = out_shape[2]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, C, do, ho, wo), dtype=dtype)
    idx_arr = np.empty((B, C, do, ho, wo), dtype=np.int64)
    cdef real[:, :, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, c, d, h, w, u, v, q, zd, zh, zw
    cdef real best, val
    cdef cnp.int64_t besti
    with nogil:
        for b in range(B):
            for c in range(C):
                for d in range(do):
                    for h in range(ho):
                        for w in range(wo):
                            zd = d * sd
                            zh = h * sh
                            zw = w * sw
                            best = x[b, c, zd, zh, zw]
                            besti = (zd * H + zh) * W + zw
                            for u in range(wd):
                                for v in range(wh):
                                    for q in range(ww):
                                        val = x[b, c, zd + u, zh + v, zw + q]
                                        if val > best:
                                            best = val
                                            besti = ((zd + u) * H + zh + v) * W + zw + q
                            out[b, c, d, h, w] = best
                            idx[b, c, d, h, w] = besti
    return out_arr, idx_arr


def maxpool3d_backward(real[:, :, :, :, ::1] grad_out, cnp.int64_t[:, :, :, :, ::1] index, in_shape):
    cdef Py_ssize_t B = grad_out.shape[0], C = grad_out.shape[1]
    cdef Py_ssize_t do = grad_out.shape[2], ho = grad_out.shape[3], wo = grad_out.shape[4]
    cdef Py_ssize_t n = in_shape[2] * in_shape[3] * in_shape[4]
    dtype = np.float32 if real is float else np.float64
    result = np.zeros((B, C, n), dtype=dtype)
    cdef real[:, :, ::1] g = result
    cdef Py_ssize_t b, c, d, h, w
    with nogil:
        for b in range(B):
            for c in range(C):
                for d in range(do):
                    for h in range(ho):
                        for w in range(wo):
                            g[b, c, index[b, c, d, h, w]] += grad_out[b, c, d, h, w]
    return result.reshape(tuple(in_shape))


def stroke_segment(float[:, ::1] img, double x0, double y0, double x1, double y1,
                   double half_width, double alpha):
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1]
    cdef double reach = half_width + 0.5
    cdef Py_ssize_t c0 = <Py_ssize_t>floor(min(x0, x1) - reach)
    cdef Py_ssize_t c1 = <Py_ssize_t>ceil(max(x0, x1) + reach)
    cdef Py_ssize_t r0 = <Py_ssize_t>floor(min(y0, y1) - reach)
    cdef Py_ssize_t r1 = <Py_ssize_t>ceil(max(y0, y1) + reach)
    if c0 < 0:
        c0 = 0
    if r0 < 0:
        r0 = 0
    if c1 > W - 1:
        c1 = W - 1
    if r1 > H - 1:
        r1 = H - 1
    cdef double dx = x1 - x0, dy = y1 - y0
    cdef double ll = dx * dx + dy * dy
    cdef double px, py, t, ex, ey, dist, cov, a, b2
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(r0, r1 + 1):
            py = <double>i
            for j in range(c0, c1 + 1):
                px = <double>j
                if ll > 0.0:
                    a = (px - x0) * dx
                    b2 = (py - y0) * dy
                    t = (a + b2) / ll
                    if t < 0.0:
                        t = 0.0
                    if t > 1.0:
                        t = 1.0
                else:
                    t = 0.0
                ex = px - (x0 + t * dx)
                ey = py - (y0 + t * dy)
                dist = sqrt(ex * ex + ey * ey)
                cov = reach - dist
                if cov < 0.0:
                    cov = 0.0
                if cov > 1.0:
                    cov = 1.0
                img[i, j] = <float>(<double>img[i, j] * (1.0 - alpha * cov))
