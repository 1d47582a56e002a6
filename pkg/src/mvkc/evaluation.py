"""Viewpoint metrics: median geodesic error, accuracy at theta, and AVP-n."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .estimator import AngleBinning, encode_bin
from .geometry import EulerPose, pose_error_deg, wrap_azimuth

IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class PoseRecord:
    image: str
    pred: EulerPose
    gt: EulerPose

    @property
    def error_deg(self) -> float:
        return pose_error_deg(self.pred, self.gt)


@dataclass(frozen=True)
class Detection:
    image: str
    box: tuple[float, float, float, float]
    score: float
    azimuth: float

    def __post_init__(self):
        _check_box(self.box)
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")


@dataclass(frozen=True)
class GroundTruthObject:
    image: str
    box: tuple[float, float, float, float]
    azimuth: float
    difficult: bool = False

    def __post_init__(self):
        _check_box(self.box)


def _check_box(box):
    x0, y0, x1, y1 = box
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"invalid box {box}")


def _errors(records: Sequence[PoseRecord]) -> list[float]:
    if not records:
        raise ValueError("no pose records")
    return [r.error_deg for r in records]


def med_err(records: Sequence[PoseRecord]) -> float:
    """Median geodesic error in degrees (lower median for even counts)."""
    errs = sorted(_errors(records))
    return errs[(len(errs) - 1) // 2]


def acc_theta(records: Sequence[PoseRecord], theta: float) -> float:
    """Fraction of records whose geodesic error is strictly below ``theta`` radians."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    errs = _errors(records)
    limit = math.degrees(theta)
    return sum(e < limit for e in errs) / len(errs)


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _interpolated_ap(tp: np.ndarray, fp: np.ndarray, n_pos: int) -> float:
    """Area under the every-point interpolated precision/recall curve."""
    if n_pos == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    rec = ctp / n_pos
    prec = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def match_detections(detections: Sequence[Detection], ground_truth: Sequence[GroundTruthObject],
                     n_views: int | None = None, iou_threshold: float = IOU_THRESHOLD):
    """Greedy score-ordered matching.

    Returns per-detection ``tp``/``fp`` arrays (in descending score order) and
    the number of ground truths. Difficult objects are dropped before
    matching, so they neither match detections nor count toward recall. With
    ``n_views`` set, a localised detection only counts as a true positive if
    its azimuth falls in the same of ``n_views`` centred sectors as the ground
    truth; either way it consumes that ground truth.
    """
    binning = AngleBinning(n_views, "azimuth") if n_views is not None else None
    by_image = defaultdict(list)
    for g in ground_truth:
        if not g.difficult:
            by_image[g.image].append(g)
    n_pos = sum(len(gts) for gts in by_image.values())
    taken = {img: [False] * len(gts) for img, gts in by_image.items()}
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        det = detections[i]
        gts = by_image.get(det.image, [])
        best, best_iou = -1, 0.0
        for j, g in enumerate(gts):
            o = iou(det.box, g.box)
            if o > best_iou:
                best, best_iou = j, o
        if best < 0 or best_iou < iou_threshold:
            fp[rank] = 1
            continue
        g = gts[best]
        if taken[det.image][best]:
            fp[rank] = 1
            continue
        taken[det.image][best] = True
        if binning is None or (
            encode_bin(wrap_azimuth(det.azimuth), binning) == encode_bin(wrap_azimuth(g.azimuth), binning)
        ):
            tp[rank] = 1
        else:
            fp[rank] = 1
    return tp, fp, n_pos


def average_precision(detections, ground_truth, iou_threshold: float = IOU_THRESHOLD) -> float:
    tp, fp, n_pos = match_detections(detections, ground_truth, None, iou_threshold)
    return _interpolated_ap(tp, fp, n_pos)


def avp_n(detections: Sequence[Detection], ground_truth: Sequence[GroundTruthObject], n: int,
          iou_threshold: float = IOU_THRESHOLD) -> float:
    """Average viewpoint precision with ``n`` azimuth sectors."""
    if n < 1:
        raise ValueError("number of views must be at least 1")
    if n == 1:
        return average_precision(detections, ground_truth, iou_threshold)
    tp, fp, n_pos = match_detections(detections, ground_truth, n, iou_threshold)
    return _interpolated_ap(tp, fp, n_pos)


ACC_THRESHOLDS = {"pi/6": math.pi / 6, "pi/8": math.pi / 8, "pi/12": math.pi / 12}


def metric_report(records=None, detections=None, ground_truth=None, avp_views=(4,)) -> dict:
    """Metric report in the CLI's JSON layout; sections without inputs are omitted."""
    report = {}
    if records:
        report["med_err"] = med_err(records)
        report["acc"] = {k: acc_theta(records, t) for k, t in ACC_THRESHOLDS.items()}
    if detections is not None and ground_truth is not None:
        report["avp"] = {str(n): avp_n(detections, ground_truth, n) for n in avp_views}
    return report
