"""Training targets for the detector and the joint detection/pose loss.

Class index convention inside the network: logit 0 is background and
object class ``c`` (0-based) is logit ``c + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .anchors import BoxGeom, DefaultBoxSet, encode_offsets, iou_matrix

SHARE = "share"
SEPARATE = "separate"


@dataclass(frozen=True)
class GroundTruthObject:
    class_id: int
    box: BoxGeom
    azimuth: float  # degrees, normalized into [0, 360)

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        object.__setattr__(self, "azimuth", normalize_azimuth(self.azimuth))


def normalize_azimuth(az: float) -> float:
    a = float(az) % 360.0
    return 0.0 if a == 360.0 else a  # tiny negatives wrap to 360.0 in floating point


def pose_bin(azimuth, n_bins: int):
    """Centered bin index: bin ``k`` covers ``[k*w - w/2, k*w + w/2)`` with
    ``w = 360/n_bins``. Works on scalars and arrays."""
    if n_bins < 1:
        raise ValueError(f"n_bins must be positive, got {n_bins}")
    az = np.mod(np.asarray(azimuth, dtype=np.float64), 360.0)
    b = np.floor(az * n_bins / 360.0 + 0.5).astype(np.int64) % n_bins
    return int(b) if b.ndim == 0 else b


def bin_center(b, n_bins: int):
    return np.asarray(b, dtype=np.float64) * (360.0 / n_bins) if np.ndim(b) else float(b) * 360.0 / n_bins


@dataclass
class MatchAssignment:
    gt_index: np.ndarray   # [A]; -1 for background
    iou: np.ndarray        # [A]; IoU with the assigned gt (0 for background)
    forced: np.ndarray     # [A] bool; assigned by the best-default rule

    @property
    def n_matched(self) -> int:
        return int((self.gt_index >= 0).sum())

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index >= 0


def match(defaults: DefaultBoxSet, gts: Sequence[GroundTruthObject], threshold: float = 0.5,
          force_best: bool = True) -> MatchAssignment:
    """Assign default boxes to ground truth.

    A default goes to its highest-IoU gt (ties: lower gt index) when that IoU
    exceeds ``threshold``. With ``force_best``, each gt additionally claims
    one default of its own: pairs are taken greedily by descending IoU so no
    two gts compete for the same forced default; only overlapping pairs are
    forced.
    """
    n = len(defaults)
    if n == 0:
        raise ValueError("match needs a non-empty default box set")
    gt_index = np.full(n, -1, dtype=np.intp)
    best_iou = np.zeros(n, dtype=np.float64)
    forced = np.zeros(n, dtype=bool)
    if not gts:
        return MatchAssignment(gt_index, best_iou, forced)

    gt_corners = np.array([g.box.corners for g in gts], dtype=np.float64)
    ious = iou_matrix(defaults.corners, gt_corners)  # [A, G]
    arg = ious.argmax(axis=1)
    top = ious[np.arange(n), arg]
    pos = top > threshold
    gt_index[pos] = arg[pos]
    best_iou[pos] = top[pos]

    if force_best:
        work = ious.copy()
        for _ in range(len(gts)):
            flat = int(work.argmax())  # first occurrence: lowest default, then lowest gt
            d, g = divmod(flat, work.shape[1])
            if work[d, g] <= 0:
                break
            gt_index[d] = g
            best_iou[d] = ious[d, g]
            forced[d] = True
            work[d, :] = -1.0
            work[:, g] = -1.0
    return MatchAssignment(gt_index, best_iou, forced)


def hard_negative_mining(per_box_cls_loss: np.ndarray, assignment_or_positive, neg_pos_ratio: float = 3.0) -> np.ndarray:
    """Indices of the ``floor(ratio * N)`` background boxes with the largest
    classification loss (descending; ties: lower box index)."""
    pos = assignment_or_positive.positive if isinstance(assignment_or_positive, MatchAssignment) \
        else np.asarray(assignment_or_positive, dtype=bool)
    loss = np.asarray(per_box_cls_loss, dtype=np.float64)
    quota = int(math.floor(neg_pos_ratio * int(pos.sum())))
    if quota <= 0:
        return np.zeros(0, dtype=np.intp)
    bg = np.flatnonzero(~pos)
    order = np.argsort(-loss[bg], kind="stable")
    return bg[order[:quota]]


@dataclass
class ImageTargets:
    labels: np.ndarray      # [A] int; 0 = background
    offsets: np.ndarray     # [A, 4] encoded regression targets (zeros on background)
    pose: np.ndarray        # [A] int pose-bin target (0 on background)
    assignment: MatchAssignment


def encode_targets(defaults: DefaultBoxSet, gts: Sequence[GroundTruthObject], n_bins: int,
                   threshold: float = 0.5, force_best: bool = True) -> ImageTargets:
    a = match(defaults, gts, threshold, force_best)
    n = len(defaults)
    labels = np.zeros(n, dtype=np.intp)
    offsets = np.zeros((n, 4), dtype=np.float64)
    pose = np.zeros(n, dtype=np.intp)
    pos = a.positive
    if pos.any():
        idx = a.gt_index[pos]
        labels[pos] = np.array([gts[i].class_id + 1 for i in idx])
        g = np.array([gts[i].box.as_array() for i in idx])
        offsets[pos] = encode_offsets(g, defaults.boxes[pos])
        pose[pos] = pose_bin(np.array([gts[i].azimuth for i in idx]), n_bins)
    return ImageTargets(labels, offsets, pose, a)


@dataclass
class BatchTargets:
    labels: np.ndarray      # [B, A]
    offsets: np.ndarray     # [B, A, 4]
    pose: np.ndarray        # [B, A]

    @classmethod
    def stack(cls, items: Sequence[ImageTargets]) -> "BatchTargets":
        return cls(np.stack([t.labels for t in items]), np.stack([t.offsets for t in items]),
                   np.stack([t.pose for t in items]))

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0


@dataclass
class LossBreakdown:
    l_cls: float
    l_loc: float
    l_pose: float
    n_matched: int
    alpha1: float
    alpha2: float
    l_total: float
    skip: bool = False
    total: Optional[nn.Tensor] = field(default=None, repr=False)
    negatives: Optional[np.ndarray] = field(default=None, repr=False)  # [B, A] bool

    def as_record(self) -> dict:
        return {"l_cls": self.l_cls, "l_loc": self.l_loc, "l_pose": self.l_pose,
                "l_total": self.l_total, "n_matched": self.n_matched}


def mine_negatives(cls_logits: np.ndarray, labels: np.ndarray, neg_pos_ratio: float) -> np.ndarray:
    """Per-image hard negative mask ``[B, A]`` from background-class loss."""
    bg_loss = nn.xent_per_row(cls_logits, np.zeros(labels.shape, dtype=np.intp))
    neg = np.zeros(labels.shape, dtype=bool)
    for b in range(labels.shape[0]):
        neg[b, hard_negative_mining(bg_loss[b], labels[b] > 0, neg_pos_ratio)] = True
    return neg


def total_loss(cls_logits: nn.Tensor, loc: nn.Tensor, pose_logits: nn.Tensor, targets: BatchTargets,
               n_classes: int, n_bins: int, pose_sharing: str = SHARE, alpha1: float = 1.0,
               alpha2: float = 1.5, neg_pos_ratio: float = 3.0,
               negatives: Optional[np.ndarray] = None) -> LossBreakdown:
    """Joint loss ``(L_cls + alpha1 L_loc + alpha2 L_pose) / N``.

    Prediction tensors are ``[B, A, n_classes+1]``, ``[B, A, 4]`` and
    ``[B, A, P]`` with ``P = n_bins`` (share) or ``n_classes * n_bins``
    (separate). ``negatives`` overrides hard negative mining with a fixed
    ``[B, A]`` mask. When no box is matched the result has ``skip=True`` and
    no loss tensor.
    """
    B, A = targets.labels.shape
    p = n_bins if pose_sharing == SHARE else n_classes * n_bins
    expected = {"class": (B, A, n_classes + 1), "loc": (B, A, 4), "pose": (B, A, p)}
    for name, t in (("class", cls_logits), ("loc", loc), ("pose", pose_logits)):
        if t.shape != expected[name]:
            raise ValueError(f"{name} predictions have shape {t.shape}, head config expects {expected[name]}")

    pos = targets.positive
    n = int(pos.sum())
    if n == 0:
        return LossBreakdown(0.0, 0.0, 0.0, 0, alpha1, alpha2, 0.0, skip=True,
                             negatives=np.zeros((B, A), dtype=bool))
    if negatives is None:
        negatives = mine_negatives(cls_logits.data, targets.labels, neg_pos_ratio)
    negatives = negatives & ~pos

    posw = pos.astype(cls_logits.dtype)
    l_cls = nn.softmax_xent(cls_logits, targets.labels, weights=(pos | negatives).astype(cls_logits.dtype))
    l_loc = nn.smooth_l1(loc, targets.offsets.astype(loc.dtype), weights=posw[..., None])
    if pose_sharing == SHARE:
        pose_sel = pose_logits
    else:
        grouped = nn.reshape(pose_logits, (B, A, n_classes, n_bins))
        pose_sel = nn.gather_last(grouped, np.maximum(targets.labels - 1, 0))
    l_pose = nn.softmax_xent(pose_sel, targets.pose, weights=posw)

    total = (l_cls + l_loc * alpha1 + l_pose * alpha2) * (1.0 / n)
    return LossBreakdown(l_cls.item(), l_loc.item(), l_pose.item(), n, alpha1, alpha2, total.item(),
                         total=total, negatives=negatives)


def sample_patch(image: np.ndarray, gts: Sequence[GroundTruthObject], rng: np.random.Generator,
                 overlaps: Sequence[float] = (0.7, 0.9), scale_range=(0.3, 1.0), aspect_range=(0.5, 2.0),
                 max_trials: int = 50, out_size: Optional[int] = None):
    """Random training crop.

    Picks uniformly among the whole image and one min-IoU crop per entry of
    ``overlaps``. A crop is accepted once some gt reaches the chosen IoU with
    it; after ``max_trials`` failures the whole image is used. Objects whose
    center falls inside the crop are kept, clipped, and re-expressed in crop
    coordinates; azimuths are unchanged. The crop is resampled (bilinear) to
    ``out_size`` (default: the input size). ``image`` is ``[C, H, W]``.

    Returns ``(image, gts, crop_corners)``; ``crop_corners`` is ``None`` for
    the whole image.
    """
    if not gts:
        raise ValueError("sample_patch needs at least one ground-truth object")
    choice = int(rng.integers(len(overlaps) + 1))
    if choice == 0:
        return image, list(gts), None
    min_iou = overlaps[choice - 1]
    gt_corners = np.array([g.box.corners for g in gts])
    for _ in range(max_trials):
        s = rng.uniform(*scale_range)
        ar = rng.uniform(*aspect_range)
        w, h = s * math.sqrt(ar), s / math.sqrt(ar)
        if w > 1 or h > 1:
            continue
        x0 = rng.uniform(0, 1 - w)
        y0 = rng.uniform(0, 1 - h)
        crop = np.array([x0, y0, x0 + w, y0 + h])
        if iou_matrix(crop, gt_corners).max() >= min_iou:
            kept = remap_to_crop(gts, crop)
            if kept:
                return crop_and_resize(image, crop, out_size), kept, crop
    return image, list(gts), None


def remap_to_crop(gts: Sequence[GroundTruthObject], crop) -> list:
    x0, y0, x1, y1 = crop
    cw, ch = x1 - x0, y1 - y0
    out = []
    for g in gts:
        if not (x0 <= g.box.cx < x1 and y0 <= g.box.cy < y1):
            continue
        bx0, by0, bx1, by1 = g.box.corners
        nx0, nx1 = (max(bx0, x0) - x0) / cw, (min(bx1, x1) - x0) / cw
        ny0, ny1 = (max(by0, y0) - y0) / ch, (min(by1, y1) - y0) / ch
        if nx1 <= nx0 or ny1 <= ny0:
            continue
        out.append(GroundTruthObject(g.class_id, BoxGeom.from_corners(nx0, ny0, nx1, ny1), g.azimuth))
    return out


def crop_and_resize(image: np.ndarray, crop, out_size: Optional[int] = None) -> np.ndarray:
    """Bilinear resample of the normalized ``crop`` of ``image[C, H, W]``."""
    c, h, w = image.shape
    oh = ow = out_size or h
    x0, y0, x1, y1 = crop
    xs = (x0 + (np.arange(ow) + 0.5) / ow * (x1 - x0)) * w - 0.5
    ys = (y0 + (np.arange(oh) + 0.5) / oh * (y1 - y0)) * h - 0.5
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    xi = np.minimum(np.floor(xs).astype(np.intp), w - 2)
    yi = np.minimum(np.floor(ys).astype(np.intp), h - 2)
    fx = (xs - xi).astype(image.dtype)
    fy = (ys - yi).astype(image.dtype)
    top = image[:, yi][:, :, xi] * (1 - fx) + image[:, yi][:, :, xi + 1] * fx
    bot = image[:, yi + 1][:, :, xi] * (1 - fx) + image[:, yi + 1][:, :, xi + 1] * fx
    return (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(image.dtype)
