"""Differentiable operations.

Images are ``[B, C, H, W]``; :func:`conv2d` and :func:`max_pool2` also take a
single ``[C, H, W]`` image. Convolution is cross-correlation (no kernel
flip).
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import Tensor, record


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record("mul", ad * bd, (a, b), bw)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return record("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return record("concat", data, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def gather_last(a: Tensor, index) -> Tensor:
    """Select ``a[..., index[...], :]`` from ``a[..., G, n]``; result ``[..., n]``."""
    idx = np.asarray(index, dtype=np.intp)
    if a.ndim < 2 or idx.shape != a.shape[:-2]:
        raise ValueError(f"gather_last: index shape {idx.shape} does not fit tensor shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-2]):
        raise ValueError(f"gather_last: index out of range for group axis of size {a.shape[-2]}")
    sel = idx[..., None, None]
    out = np.take_along_axis(a.data, sel, axis=-2)[..., 0, :]
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, sel, g[..., None, :], axis=-2)
        return (full,)

    return record("gather", out, (a,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                  lambda g: (g * mask,), pattern=mask)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), weight, bias, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects input [B,C,H,W] and weights [Cout,Cin,k,k]; got input {x.shape}, weights {weight.shape}")
    B, C, H, W = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != C:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} has {C} channels, weights {weight.shape} expect {cin}")
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"conv2d supports square 1x1 or 3x3 kernels, got weights {weight.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match weights {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    k = kh
    ho, wo = _conv_out(H, k, stride, padding), _conv_out(W, k, stride, padding)

    xd = np.ascontiguousarray(x.data)
    if k == 1 and stride == 1 and padding == 0:
        cols = xd.reshape(B, C, H * W)
    else:
        cols = kernels.im2col(xd, k, stride, padding)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, cout, ho, wo)

    def bw(g):
        g2 = g.reshape(B, cout, ho * wo)
        dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        dcols = np.ascontiguousarray(np.matmul(w2.T, g2))
        if k == 1 and stride == 1 and padding == 0:
            dx = dcols.reshape(B, C, H, W)
        else:
            dx = kernels.col2im(dcols, (B, C, H, W), k, stride, padding)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, bw)


def _conv_out(n, k, stride, pad):
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv2d output size ({n} + 2*{pad} - {k})/{stride} + 1 is not a positive integer")
    return span // stride + 1


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2. Ties go to the first element in row-major
    window order."""
    if x.ndim == 3:
        c, h, w = x.shape
        return reshape(max_pool2(reshape(x, (1, c, h, w))), (c, h // 2, w // 2))
    if x.ndim != 4:
        raise ValueError(f"max_pool2 expects [B,C,H,W] or [C,H,W], got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"max_pool2 needs even spatial size, got {x.shape}")
    out, arg = kernels.maxpool2_forward(np.ascontiguousarray(x.data))
    return record("max_pool2", out, (x,),
                  lambda g: (kernels.maxpool2_backward(np.ascontiguousarray(g, dtype=out.dtype), arg),),
                  pattern=arg)


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def xent_per_row(logits: np.ndarray, target) -> np.ndarray:
    """Non-differentiable per-row ``-log softmax(logits)[target]``."""
    t = np.asarray(target, dtype=np.intp)
    return -np.take_along_axis(log_softmax(logits), t[..., None], axis=-1)[..., 0]


def softmax_xent(logits: Tensor, target, weights=None) -> Tensor:
    """Weighted sum over rows of ``-log softmax(logits)[target]``.

    ``logits`` is ``[..., n]`` and ``target`` an integer array of shape
    ``[...]`` (a plain int for a single row). Rows with weight 0 get exactly
    zero gradient.
    """
    z = logits.data
    n = z.shape[-1]
    if n < 2:
        raise ValueError(f"softmax_xent needs at least 2 classes, got {n}")
    t = np.asarray(target, dtype=np.intp)
    if t.shape != z.shape[:-1]:
        raise ValueError(f"softmax_xent target shape {t.shape} does not match logits {z.shape}")
    if t.size and (t.min() < 0 or t.max() >= n):
        raise ValueError(f"softmax_xent target out of range [0, {n})")
    w = np.ones(t.shape, dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype)
    if w.shape != t.shape:
        raise ValueError(f"softmax_xent weights shape {w.shape} does not match targets {t.shape}")
    logp = log_softmax(z)
    nll = -np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    loss = np.asarray((w * nll).sum(), dtype=z.dtype)

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, t[..., None], np.take_along_axis(p, t[..., None], axis=-1) - 1, axis=-1)
        return (p * (w * g)[..., None],)

    return record("softmax_xent", loss, (logits,), bw)


def smooth_l1(pred: Tensor, target, weights=None) -> Tensor:
    """Sum of ``0.5 d^2`` (|d| < 1) or ``|d| - 0.5`` over ``d = pred - target``."""
    target = as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1 shape mismatch: pred {pred.shape} vs target {target.shape}")
    d = pred.data - target.data
    ad = np.abs(d)
    quad = ad < 1.0
    f = np.where(quad, 0.5 * d * d, ad - 0.5)
    w = np.ones_like(d) if weights is None else np.broadcast_to(np.asarray(weights, dtype=d.dtype), d.shape)
    loss = np.asarray((w * f).sum(), dtype=pred.dtype)

    def bw(g):
        gd = g * w * np.where(quad, d, np.sign(d))
        return gd, -gd

    return record("smooth_l1", loss, (pred, target), bw)
