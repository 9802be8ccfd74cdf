"""Turn raw per-box predictions into detections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels, nn
from .anchors import BoxGeom, DefaultBoxSet, decode_offsets, center_to_corners
from .targets import SHARE, bin_center, pose_bin


@dataclass(frozen=True)
class Detection:
    class_id: int      # object class, 0-based
    score: float
    box: BoxGeom
    pose_bin: int
    pose_conf: float
    image_id: str = ""


def nms(corners: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy NMS; kept indices in descending-score order (ties: lower index)."""
    if len(scores) == 0:
        return np.zeros(0, dtype=np.intp)
    return kernels.nms(np.ascontiguousarray(corners, dtype=np.float64), np.asarray(scores, dtype=np.float64),
                       float(iou_thresh))


def detect(cls_logits: np.ndarray, loc: np.ndarray, pose_logits: np.ndarray, defaults: DefaultBoxSet,
           n_classes: int, n_bins: int, pose_sharing: str = SHARE, score_thresh: float = 0.05,
           nms_iou: float = 0.45, top_k: int = 200, image_id: str = "") -> list:
    """Detections for one image from ``[A, ...]`` prediction arrays.

    Per class: keep boxes whose softmax posterior exceeds ``score_thresh``,
    decode, run NMS, then keep the ``top_k`` best over all classes.
    """
    probs = nn.softmax(np.asarray(cls_logits, dtype=np.float64))
    boxes = decode_offsets(np.asarray(loc, dtype=np.float64), defaults.boxes)
    corners = center_to_corners(boxes)
    z = np.asarray(pose_logits, dtype=np.float64)
    if pose_sharing != SHARE:
        z = z.reshape(len(defaults), n_classes, n_bins)
    pose_p = nn.softmax(z)
    valid = (boxes[:, 2] > 0) & (boxes[:, 3] > 0)

    cand = []  # (score, box index, class)
    for c in range(1, n_classes + 1):
        idx = np.flatnonzero((probs[:, c] > score_thresh) & valid)
        if idx.size == 0:
            continue
        keep = idx[nms(corners[idx], probs[idx, c], nms_iou)]
        cand.extend((probs[i, c], i, c) for i in keep)
    cand.sort(key=lambda t: (-t[0], t[1], t[2]))

    out = []
    for score, i, c in cand[:top_k]:
        pp = pose_p[i] if pose_sharing == SHARE else pose_p[i, c - 1]
        b = int(pp.argmax())
        out.append(Detection(c - 1, float(score), BoxGeom(*map(float, boxes[i])), b, float(pp[b]), image_id))
    return out


def merge_bins(fine_bin, n_fine: int, n_coarse: int):
    """Map a fine pose bin to the coarse bin containing its center angle."""
    if n_coarse < 1 or n_fine < n_coarse:
        raise ValueError(f"merge_bins needs 1 <= n_coarse <= n_fine, got n_fine={n_fine}, n_coarse={n_coarse}")
    fb = np.asarray(fine_bin)
    if np.any(fb < 0) or np.any(fb >= n_fine):
        raise ValueError(f"fine bin index out of range [0, {n_fine}): {fine_bin}")
    return pose_bin(bin_center(fine_bin, n_fine), n_coarse)


def rebin(b, n_from: int, n_to: int):
    """Express bin ``b`` of an ``n_from`` partition at ``n_to`` bins via its
    center angle (``merge_bins`` when coarsening)."""
    if n_to <= n_from:
        return merge_bins(b, n_from, n_to)
    return pose_bin(bin_center(b, n_from), n_to)


def run_detector(net, images: np.ndarray, image_ids=None, score_thresh: float = 0.05, nms_iou: float = 0.45,
                 top_k: int = 200, batch_size: int = 64) -> dict:
    """Forward ``images [N, C, H, W]`` through ``net`` and detect; returns
    ``{image_id: [Detection]}``."""
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(images))]
    out = {}
    for s in range(0, len(images), batch_size):
        pred = net.forward(images[s:s + batch_size])
        for j in range(pred.cls.shape[0]):
            iid = ids[s + j]
            out[iid] = detect(pred.cls.data[j], pred.loc.data[j], pred.pose.data[j], net.defaults,
                              net.head.n_classes, net.head.n_pose_bins, net.head.pose_sharing,
                              score_thresh, nms_iou, top_k, image_id=iid)
    return out


# --- detections file --------------------------------------------------------
# One detection per line:
#   image_id class_id score xmin ymin xmax ymax pose_bin pose_conf
# preceded by a "# ssdpose-detections n_bins=<N>" header. Floats use repr so
# a parse/serialize round trip is exact.

DETECTIONS_HEADER = "# ssdpose-detections"


def format_detections(detections: dict, n_bins: int) -> str:
    lines = [f"{DETECTIONS_HEADER} n_bins={n_bins}"]
    for iid, dets in detections.items():
        if any(c.isspace() for c in iid):
            raise ValueError(f"image id {iid!r} contains whitespace")
        for d in dets:
            nums = " ".join(repr(float(v)) for v in d.box.corners)
            lines.append(f"{iid} {int(d.class_id)} {float(d.score)!r} {nums} {int(d.pose_bin)} {float(d.pose_conf)!r}")
    return "\n".join(lines) + "\n"


def parse_detections(text: str):
    """Inverse of :func:`format_detections`; returns ``(detections, n_bins)``
    where ``n_bins`` is None if the header is missing."""
    out: dict = {}
    n_bins = None
    for no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if tok.startswith("n_bins="):
                    n_bins = int(tok.split("=", 1)[1])
            continue
        parts = line.split()
        if len(parts) != 9:
            raise ValueError(f"detections line {no}: expected 9 fields, got {len(parts)}")
        iid = parts[0]
        x0, y0, x1, y1 = map(float, parts[3:7])
        det = Detection(int(parts[1]), float(parts[2]), BoxGeom.from_corners(x0, y0, x1, y1),
                        int(parts[7]), float(parts[8]), iid)
        out.setdefault(iid, []).append(det)
    return out, n_bins
