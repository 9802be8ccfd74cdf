# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Signatures and semantics mirror ``_fallback``."""

import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _out_size(Py_ssize_t n, int k, int stride, int pad) nogil:
    return (n + 2 * pad - k) // stride + 1


cdef inline (Py_ssize_t, Py_ssize_t) _valid_cols(Py_ssize_t j, int pad, int stride,
                                                Py_ssize_t W, Py_ssize_t Wo) nogil:
    # output columns ox with 0 <= ox*stride + j - pad < W
    cdef Py_ssize_t lo = 0, hi = Wo
    while lo < Wo and lo * stride + j - pad < 0:
        lo += 1
    while hi > lo and (hi - 1) * stride + j - pad >= W:
        hi -= 1
    return lo, hi


def im2col(const real[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = _out_size(H, k, stride, pad), Wo = _out_size(W, k, stride, pad)
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, C * k * k, Ho * Wo), dtype=dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, row, lo, hi
    cdef real* dst
    cdef const real* src
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        row = (c * k + i) * k + j
                        lo, hi = _valid_cols(j, pad, stride, W, Wo)
                        for oy in range(Ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H or lo >= hi:
                                continue
                            dst = &o[b, row, oy * Wo]
                            src = &x[b, c, iy, 0]
                            if stride == 1:
                                for ox in range(lo, hi):
                                    dst[ox] = src[ox + j - pad]
                            else:
                                for ox in range(lo, hi):
                                    dst[ox] = src[ox * stride + j - pad]
    return out


def col2im(const real[:, :, ::1] cols, shape, int k, int stride, int pad):
    cdef Py_ssize_t B = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Ho = _out_size(H, k, stride, pad), Wo = _out_size(W, k, stride, pad)
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, row, lo, hi
    cdef real* dst
    cdef const real* src
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        row = (c * k + i) * k + j
                        lo, hi = _valid_cols(j, pad, stride, W, Wo)
                        for oy in range(Ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H or lo >= hi:
                                continue
                            src = &cols[b, row, oy * Wo]
                            dst = &o[b, c, iy, 0]
                            if stride == 1:
                                for ox in range(lo, hi):
                                    dst[ox + j - pad] += src[ox]
                            else:
                                for ox in range(lo, hi):
                                    dst[ox * stride + j - pad] += src[ox]
    return out


def maxpool2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], Ho = x.shape[2] // 2, Wo = x.shape[3] // 2
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, C, Ho, Wo), dtype=dtype)
    arg = np.empty((B, C, Ho, Wo), dtype=np.uint8)
    cdef real[:, :, :, ::1] o = out
    cdef unsigned char[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, c, y, xx
    cdef real best, v
    cdef unsigned char pos
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(Ho):
                    for xx in range(Wo):
                        best = x[b, c, 2 * y, 2 * xx]
                        pos = 0
                        v = x[b, c, 2 * y, 2 * xx + 1]
                        if v > best:
                            best = v
                            pos = 1
                        v = x[b, c, 2 * y + 1, 2 * xx]
                        if v > best:
                            best = v
                            pos = 2
                        v = x[b, c, 2 * y + 1, 2 * xx + 1]
                        if v > best:
                            best = v
                            pos = 3
                        o[b, c, y, xx] = best
                        a[b, c, y, xx] = pos
    return out, arg


def maxpool2_backward(real[:, :, :, ::1] grad, unsigned char[:, :, :, ::1] arg):
    cdef Py_ssize_t B = grad.shape[0], C = grad.shape[1], Ho = grad.shape[2], Wo = grad.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, C, 2 * Ho, 2 * Wo), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t b, c, y, xx
    cdef unsigned char p
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(Ho):
                    for xx in range(Wo):
                        p = arg[b, c, y, xx]
                        o[b, c, 2 * y + (p >> 1), 2 * xx + (p & 1)] = grad[b, c, y, xx]
    return out


def nms(boxes, scores, double iou_thresh):
    cdef double[:, ::1] bx = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t[::1] order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable").astype(np.intp)
    cdef Py_ssize_t n = order.shape[0]
    keep = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] kp = keep
    cdef unsigned char[::1] dead = np.zeros(n, dtype=np.uint8)
    cdef Py_ssize_t a, b, i, j, nkeep = 0
    cdef double iw, ih, inter, union, ai, aj
    with nogil:
        for a in range(n):
            i = order[a]
            if dead[i]:
                continue
            kp[nkeep] = i
            nkeep += 1
            ai = (bx[i, 2] - bx[i, 0]) * (bx[i, 3] - bx[i, 1])
            for b in range(a + 1, n):
                j = order[b]
                if dead[j]:
                    continue
                iw = min(bx[i, 2], bx[j, 2]) - max(bx[i, 0], bx[j, 0])
                ih = min(bx[i, 3], bx[j, 3]) - max(bx[i, 1], bx[j, 1])
                if iw <= 0.0 or ih <= 0.0:
                    continue
                inter = iw * ih
                aj = (bx[j, 2] - bx[j, 0]) * (bx[j, 3] - bx[j, 1])
                union = ai + aj - inter
                if union > 0.0 and inter / union > iou_thresh:
                    dead[j] = 1
    return keep[:nkeep].copy()


def polygon_coverage(verts, int height, int width, int ss):
    cdef double[:, ::1] v = np.ascontiguousarray(verts, dtype=np.float64)
    cov = np.zeros((height, width), dtype=np.float64)
    cdef double[:, ::1] cv = cov
    cdef Py_ssize_t m = v.shape[0]
    cdef int c0 = max(<int>np.floor(np.min(verts[:, 0])), 0)
    cdef int c1 = min(<int>np.ceil(np.max(verts[:, 0])), width)
    cdef int r0 = max(<int>np.floor(np.min(verts[:, 1])), 0)
    cdef int r1 = min(<int>np.ceil(np.max(verts[:, 1])), height)
    cdef int r, c, sy, sx, count
    cdef Py_ssize_t e, f
    cdef double px, py, xa, ya, xb, yb, xint, norm = 1.0 / (ss * ss)
    cdef bint inside
    with nogil:
        for r in range(r0, r1):
            for c in range(c0, c1):
                count = 0
                for sy in range(ss):
                    py = r + (sy + 0.5) / ss
                    for sx in range(ss):
                        px = c + (sx + 0.5) / ss
                        inside = False
                        for e in range(m):
                            f = e + 1 if e + 1 < m else 0
                            xa = v[e, 0]
                            ya = v[e, 1]
                            xb = v[f, 0]
                            yb = v[f, 1]
                            if ya == yb:
                                continue
                            if (ya > py) != (yb > py):
                                xint = xa + (py - ya) * (xb - xa) / (yb - ya)
                                if px < xint:
                                    inside = not inside
                        if inside:
                            count += 1
                cv[r, c] = count * norm
    return cov
