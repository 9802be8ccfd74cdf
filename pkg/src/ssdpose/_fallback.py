"""Pure NumPy implementations of the hot kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature and semantics; ``ssdpose.kernels`` picks one at import time.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    """Unfold ``x[B, C, H, W]`` into columns ``[B, C*k*k, Ho*Wo]``.

    Row order is ``(c, ki, kj)`` so a weight tensor ``[Cout, C, k, k]``
    reshaped to ``[Cout, C*k*k]`` multiplies the result directly.
    """
    B, C, H, W = x.shape
    Ho, Wo = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * k * k, Ho * Wo)


def col2im(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to ``shape``."""
    B, C, H, W = shape
    Ho, Wo = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, i, j]
    return np.ascontiguousarray(out[:, :, pad:pad + H, pad:pad + W])


def maxpool2_forward(x):
    """2x2/stride-2 max pool. Returns ``(out, arg)`` with ``arg`` in 0..3
    (row-major window position of the first maximum)."""
    B, C, H, W = x.shape
    win = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.uint8)


def maxpool2_backward(grad, arg):
    B, C, Ho, Wo = grad.shape
    win = np.zeros((B, C, Ho, Wo, 4), dtype=grad.dtype)
    np.put_along_axis(win, arg[..., None].astype(np.intp), grad[..., None], axis=-1)
    return np.ascontiguousarray(win.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)).reshape(B, C, 2 * Ho, 2 * Wo)


def nms(boxes, scores, iou_thresh):
    """Greedy NMS over corner-form boxes.

    Candidates are visited by descending score (ties: lower index first); a
    candidate is dropped when its IoU with an already kept box exceeds
    ``iou_thresh``. Returns kept indices in visiting order.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0.0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0.0, None)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        order = rest[iou <= iou_thresh]
    return np.asarray(keep, dtype=np.intp)


def polygon_coverage(verts, height, width, ss):
    """Fraction of ``ss*ss`` sub-samples per pixel inside a polygon (even-odd rule).

    ``verts`` is ``[m, 2]`` in pixel units (x right, y down); pixel ``(r, c)``
    spans ``[c, c+1) x [r, r+1)``.
    """
    verts = np.asarray(verts, dtype=np.float64)
    cov = np.zeros((height, width), dtype=np.float64)
    c0 = max(int(np.floor(verts[:, 0].min())), 0)
    c1 = min(int(np.ceil(verts[:, 0].max())), width)
    r0 = max(int(np.floor(verts[:, 1].min())), 0)
    r1 = min(int(np.ceil(verts[:, 1].max())), height)
    if c1 <= c0 or r1 <= r0:
        return cov
    off = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(c0, c1)[:, None] + off[None, :]).ravel()
    ys = (np.arange(r0, r1)[:, None] + off[None, :]).ravel()
    px, py = np.meshgrid(xs, ys)
    inside = np.zeros(px.shape, dtype=bool)
    xa, ya = verts[:, 0], verts[:, 1]
    xb, yb = np.roll(xa, -1), np.roll(ya, -1)
    for e in range(len(verts)):
        if ya[e] == yb[e]:
            continue
        crosses = (ya[e] > py) != (yb[e] > py)
        with np.errstate(over="ignore"):  # near-horizontal edge: +-inf is the right limit
            xint = xa[e] + (py - ya[e]) * (xb[e] - xa[e]) / (yb[e] - ya[e])
        inside ^= crosses & (px < xint)
    counts = inside.reshape(r1 - r0, ss, c1 - c0, ss).sum(axis=(1, 3))
    cov[r0:r1, c0:c1] = counts / float(ss * ss)
    return cov
