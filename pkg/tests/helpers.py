"""Independent reference implementations used as test oracles."""

import math
import sys

import numpy as np

from ssdpose import nn

FD_STEP = 1e-3

# acceptance verdicts: criterion number -> (ok, title, detail); printed by conftest
ACCEPTANCE = {}


def report_criterion(n, ok, title, detail):
    ACCEPTANCE[n] = (bool(ok), title, detail)
    print(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}", file=sys.stderr)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, arr, step=FD_STEP, coords=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(len(idx) if coords is not None else flat.size)
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * step)
    return out


def conv2d_loops(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation, x [C,H,W], w [O,C,k,k]."""
    C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                s = b[o]
                for c in range(C):
                    for di in range(k):
                        for dj in range(k):
                            s += xp[c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                out[o, i, j] = s
    return out


def maxpool_loops(x):
    C, H, W = x.shape
    out = np.zeros((C, H // 2, W // 2))
    for c in range(C):
        for i in range(H // 2):
            for j in range(W // 2):
                out[c, i, j] = max(x[c, 2 * i, 2 * j], x[c, 2 * i, 2 * j + 1],
                                   x[c, 2 * i + 1, 2 * j], x[c, 2 * i + 1, 2 * j + 1])
    return out


def iou_scalar(a, b):
    """IoU of corner tuples with plain float arithmetic."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def nms_bruteforce(corners, scores, thresh):
    """O(n^2) greedy NMS: walk a fully sorted list, compare against every kept box."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(iou_scalar(corners[i], corners[j]) <= thresh for j in kept):
            kept.append(i)
    return kept


def pr_envelope_ap(tp_flags, n_gt):
    """AP by enumerating rank cutoffs and integrating the precision envelope
    over recall levels."""
    points = []
    hits = 0
    for k, t in enumerate(tp_flags, 1):
        hits += t
        points.append((hits / n_gt, hits / k))
    levels = sorted({r for r, _ in points} | {0.0})
    area = 0.0
    prev = 0.0
    for r in levels:
        if r == 0.0:
            continue
        p = max(pp for rr, pp in points if rr >= r)
        area += (r - prev) * p
        prev = r
    return area


def loss_oracle(cls, loc, pose, labels, offsets, pose_t, n_classes, n_bins, sharing, alpha1, alpha2, ratio):
    """Scalar re-computation of the joint loss, one box and one term at a time."""
    B, A, _ = cls.shape

    def nll(row, t):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        return lse - row[t]

    def sl1(d):
        return 0.5 * d * d if abs(d) < 1 else abs(d) - 0.5

    l_cls = l_loc = l_pose = 0.0
    n = 0
    for b in range(B):
        pos = [a for a in range(A) if labels[b, a] > 0]
        n += len(pos)
        bg = [a for a in range(A) if labels[b, a] == 0]
        bg_sorted = sorted(bg, key=lambda a: (-nll(list(cls[b, a]), 0), a))
        negs = bg_sorted[:int(math.floor(ratio * len(pos)))]
        for a in pos:
            l_cls += nll(list(cls[b, a]), int(labels[b, a]))
            l_loc += sum(sl1(loc[b, a, k] - offsets[b, a, k]) for k in range(4))
            if sharing == "share":
                row = list(pose[b, a])
            else:
                c = int(labels[b, a]) - 1
                row = list(pose[b, a, c * n_bins:(c + 1) * n_bins])
            l_pose += nll(row, int(pose_t[b, a]))
        for a in negs:
            l_cls += nll(list(cls[b, a]), 0)
    return l_cls, l_loc, l_pose, n, (l_cls + alpha1 * l_loc + alpha2 * l_pose) / n


def tensor(a, grad=True):
    return nn.Tensor(np.array(a, dtype=np.float64), requires_grad=grad)


def tiny_detector(sharing="share", n_bins=4, seed=0, dtype=np.float64, input_size=16):
    """Small float64 detector for gradient checks (2x2 and 1x1 prediction grids)."""
    from ssdpose.anchors import make_layer_specs
    from ssdpose.model import HeadConfig, NetworkSpec, build

    spec = NetworkSpec(input_size, 1, (4, 4, 6, 6), (6,))
    layers = make_layer_specs(spec.grid_sizes(), (1.0, 2.0, 0.5), 0.3, 0.8)
    head = HeadConfig(3, n_bins, sharing, tuple(ls.boxes_per_cell for ls in layers))
    return build(spec, head, layers, seed, dtype=dtype)


def network_fd_check(net, images, targets, names_and_coords, step=FD_STEP, negatives=None):
    """Compare tape gradients of the composite loss with central differences.

    Negatives are frozen to the mask mined at the base point. A coordinate is
    skipped when relu masks or pool argmaxes differ at theta +/- step (a kink
    lies inside the stencil). Returns ``(errors, skipped)``.
    """
    from ssdpose import nn

    net.zero_grad()
    with nn.Tape() as tape:
        base = net.loss(images, targets, negatives=negatives)
        tape.backward(base.total)
    neg = base.negatives
    errors, skipped = [], 0
    for name, flat_index in names_and_coords:
        p = net.params[name]
        analytic = float(p.grad.reshape(-1)[flat_index])
        flat = p.data.reshape(-1)
        old = flat[flat_index]
        vals, pats = [], []
        for delta in (step, -step):
            flat[flat_index] = old + delta
            with nn.Tape() as t:
                vals.append(net.loss(images, targets, negatives=neg).l_total)
            pats.append([n.pattern for n in t.nodes if n.pattern is not None])
        flat[flat_index] = old
        if any(not np.array_equal(a, b) for a, b in zip(*pats)):
            skipped += 1
            continue
        numeric = (vals[0] - vals[1]) / (2 * step)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    return errors, skipped
