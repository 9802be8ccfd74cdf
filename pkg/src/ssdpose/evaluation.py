"""Detection AP and viewpoint-aware AVP.

A detection is a true positive for AP when it overlaps an unclaimed
same-class ground-truth box with IoU > 0.5 (best unclaimed IoU wins, ties to
the lower gt index); for AVP its pose bin must also equal the ground-truth
bin. Both curves use all-points interpolation.

Pose bins at an evaluation granularity ``n`` are derived from the detector's
native ``n_det`` bins. With ``gt_binning="consistent"`` (default) a coarser
``n`` maps both the detection and the ground truth through the same
fine-to-coarse merge, so every coarse bin is a union of native bins; a finer
``n`` bins the detection's bin-center angle. ``"direct"`` bins ground-truth
azimuths at ``n`` directly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .anchors import iou_matrix
from .inference import merge_bins, rebin
from .targets import pose_bin

CONSISTENT = "consistent"
DIRECT = "direct"


class EvaluationError(ValueError):
    pass


def average_precision(tp: np.ndarray, n_gt: int):
    """All-points interpolated AP for score-sorted TP flags.

    Returns ``(ap, recall, precision)``; recall/precision are per rank.
    """
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0:
        return float("nan"), np.zeros(0), np.zeros(0)
    ctp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    precision = ctp / ranks
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return ap, recall, precision


def eval_bins(det_bin: int, gt_azimuth: float, n_det: int, n: int, gt_binning: str = CONSISTENT):
    """``(detection bin, ground-truth bin)`` at ``n`` bins."""
    if gt_binning == DIRECT:
        return int(rebin(det_bin, n_det, n)), pose_bin(gt_azimuth, n)
    if gt_binning != CONSISTENT:
        raise ValueError(f"gt_binning must be {CONSISTENT!r} or {DIRECT!r}")
    if n <= n_det:
        return int(merge_bins(det_bin, n_det, n)), int(merge_bins(pose_bin(gt_azimuth, n_det), n_det, n))
    return int(rebin(det_bin, n_det, n)), pose_bin(gt_azimuth, n)


@dataclass
class EvalReport:
    n_classes: int
    bins: tuple
    det_bins: int
    gt_binning: str
    n_gt: dict                       # class -> count
    ap: dict                         # class -> AP (nan when the class has no gt)
    avp: dict                        # n_bins -> class -> AVP
    pr: dict = field(default_factory=dict, repr=False)  # (metric, class) -> (recall, precision)
    class_names: tuple = ()

    def _mean(self, values: Mapping) -> float:
        v = [values[c] for c in range(self.n_classes) if self.n_gt.get(c, 0) > 0]
        return float(np.mean(v)) if v else float("nan")

    @property
    def mAP(self) -> float:
        return self._mean(self.ap)

    def mAVP(self, n_bins: int) -> float:
        return self._mean(self.avp[n_bins])

    def name(self, c: int) -> str:
        return self.class_names[c] if c < len(self.class_names) else f"class{c}"

    def to_dict(self) -> dict:
        def num(x):
            return None if x != x else float(x)

        return {
            "det_bins": self.det_bins,
            "gt_binning": self.gt_binning,
            "bins": list(self.bins),
            "mAP": num(self.mAP),
            "mAVP": {str(n): num(self.mAVP(n)) for n in self.bins},
            "classes": {
                self.name(c): {
                    "n_gt": self.n_gt.get(c, 0),
                    "AP": num(self.ap[c]),
                    "AVP": {str(n): num(self.avp[n][c]) for n in self.bins},
                }
                for c in range(self.n_classes)
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self) -> str:
        head = f"{'class':<10}{'n_gt':>6}{'AP':>8}" + "".join(f"{'AVP@' + str(n):>9}" for n in self.bins)
        rows = [head, "-" * len(head)]
        for c in range(self.n_classes):
            rows.append(f"{self.name(c):<10}{self.n_gt.get(c, 0):>6}{self.ap[c]:>8.4f}"
                        + "".join(f"{self.avp[n][c]:>9.4f}" for n in self.bins))
        rows.append("-" * len(head))
        rows.append(f"{'mean':<10}{'':>6}{self.mAP:>8.4f}" + "".join(f"{self.mAVP(n):>9.4f}" for n in self.bins))
        return "\n".join(rows)

    def write_pr_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "class", "rank", "recall", "precision"])
            for (metric, c), (rec, prec) in sorted(self.pr.items(), key=lambda kv: (kv[0][0], kv[0][1])):
                for k, (r, p) in enumerate(zip(rec, prec), 1):
                    w.writerow([metric, self.name(c), k, repr(float(r)), repr(float(p))])


def evaluate(detections: Mapping[str, Sequence], ground_truth: Mapping[str, Sequence], n_bins_list: Sequence[int],
             det_bins: int, n_classes: int | None = None, gt_binning: str = CONSISTENT,
             class_names: Sequence[str] = ()) -> EvalReport:
    """AP and AVP per class.

    ``detections`` maps image id to Detection lists whose ``pose_bin`` uses
    ``det_bins`` bins; ``ground_truth`` maps image id to GroundTruthObject
    lists. Ties in score keep input order (images, then detections).
    """
    unknown = [i for i in detections if i not in ground_truth]
    if unknown:
        raise EvaluationError(f"detections reference image id {unknown[0]!r} that has no ground truth")
    bins = tuple(int(n) for n in n_bins_list)
    if n_classes is None:
        ids = [g.class_id for gs in ground_truth.values() for g in gs]
        ids += [d.class_id for ds in detections.values() for d in ds]
        n_classes = max(ids) + 1 if ids else 0

    gt_corners = {i: np.array([g.box.corners for g in gs]).reshape(-1, 4) for i, gs in ground_truth.items()}
    report = EvalReport(n_classes, bins, det_bins, gt_binning, {}, {}, {n: {} for n in bins},
                        class_names=tuple(class_names))
    for c in range(n_classes):
        n_gt = sum(1 for gs in ground_truth.values() for g in gs if g.class_id == c)
        dets = [(d.score, img, d) for img, ds in detections.items() for d in ds if d.class_id == c]
        order = sorted(range(len(dets)), key=lambda k: -dets[k][0])
        claimed = {img: np.zeros(len(gs), dtype=bool) for img, gs in ground_truth.items()}
        tp = np.zeros(len(dets))
        tp_view = {n: np.zeros(len(dets)) for n in bins}
        for rank, k in enumerate(order):
            _, img, d = dets[k]
            gts = ground_truth[img]
            if not gts:
                continue
            ious = iou_matrix(np.array(d.box.corners), gt_corners[img])[0]
            ok = np.array([g.class_id == c for g in gts]) & ~claimed[img] & (ious > 0.5)
            if not ok.any():
                continue
            j = int(np.argmax(np.where(ok, ious, -1.0)))
            claimed[img][j] = True
            tp[rank] = 1
            for n in bins:
                db, gb = eval_bins(d.pose_bin, gts[j].azimuth, det_bins, n, gt_binning)
                tp_view[n][rank] = float(db == gb)
        report.n_gt[c] = n_gt
        report.ap[c], rec, prec = average_precision(tp, n_gt)
        report.pr[("AP", c)] = (rec, prec)
        for n in bins:
            report.avp[n][c], rec, prec = average_precision(tp_view[n], n_gt)
            report.pr[(f"AVP@{n}", c)] = (rec, prec)
    return report


def evaluate_merged(detections, ground_truth, n_fine: int, n_coarse, n_classes=None, class_names=()) -> EvalReport:
    """Evaluate fine-bin detections at coarser granularities through
    :func:`merge_bins` (ground truth binned consistently)."""
    coarse = [n_coarse] if np.isscalar(n_coarse) else list(n_coarse)
    for n in coarse:
        if n > n_fine:
            raise EvaluationError(f"cannot merge {n_fine} fine bins into {n} coarser bins")
    return evaluate(detections, ground_truth, coarse, n_fine, n_classes, CONSISTENT, class_names)


def comparison_table(reports: Mapping[str, EvalReport], bins: Sequence[int]) -> str:
    """mAP / mAVP per model, one row each."""
    head = f"{'Method':<24}{'mAP':>8}" + "".join(f"{str(n) + ' View':>10}" for n in bins)
    rows = [head, "-" * len(head)]
    for name, r in reports.items():
        rows.append(f"{name:<24}{r.mAP:>8.4f}" + "".join(
            f"{r.mAVP(n):>10.4f}" if n in r.avp else f"{'-':>10}" for n in bins))
    return "\n".join(rows)
