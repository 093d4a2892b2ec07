"""Detection quality scoring: rotated-IoU matching and average precision.

Detections from all frames are pooled, sorted by score, and matched
greedily within their own frame (each true box claims at most one
detection).  AP integrates the precision envelope over recall; the
11-point variant samples it at fixed recall levels instead.

Degenerate-input conventions, chosen so sweeps never divide by zero:
no truth and no detections scores 1.0, no truth with detections 0.0,
truth with no detections 0.0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import iou_matrix


def match_frame(dets: list, gts: list, iou_thresh: float = 0.5) -> list:
    """True/false flag per detection, in input order.

    Detections are visited in descending score order (ties keep input
    order); each claims the still-unclaimed true box of highest IoU,
    provided that IoU clears the threshold.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in (0, 1]")
    n, m = len(dets), len(gts)
    flags = [False] * n
    if n == 0 or m == 0:
        return flags
    ious = iou_matrix(dets, gts)
    order = np.argsort(-np.array([d.score for d in dets]), kind="stable")
    used = [False] * m
    for i in order:
        cand = [k for k in range(m) if not used[k] and ious[i, k] >= iou_thresh]
        if cand:
            j = max(cand, key=lambda k: (ious[i, k], -k))
            used[j] = True
            flags[i] = True
    return flags


def average_precision(
    frames: list, iou_thresh: float = 0.5, eleven_point: bool = False
) -> float:
    """AP over pooled frames; `frames` is a list of (detections, truths)."""
    rows = []
    n_gt = 0
    for dets, gts in frames:
        flags = match_frame(dets, gts, iou_thresh)
        n_gt += len(gts)
        rows.extend((d.score, f) for d, f in zip(dets, flags))
    if n_gt == 0:
        return 1.0 if not rows else 0.0
    if not rows:
        return 0.0
    scores = np.array([s for s, _ in rows])
    tp = np.array([1.0 if f else 0.0 for _, f in rows])
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    if eleven_point:
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            at = precision[recall >= r - 1e-12]
            total += float(at.max()) if at.size else 0.0
        return total / 11.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    r_prev = 0.0
    for p, r in zip(envelope, recall):
        ap += (r - r_prev) * p
        r_prev = r
    return float(ap)


@dataclass(frozen=True)
class ApSummary:
    ap: float
    n_gt: int
    n_det: int
    n_tp: int


def evaluate_frames(
    frame_results: list, iou_thresh: float = 0.5, eleven_point: bool = False
) -> ApSummary:
    """Score a list of pipeline FrameResult objects."""
    pairs = [(fr.detections, fr.gt) for fr in frame_results]
    n_tp = sum(
        sum(match_frame(d, g, iou_thresh)) for d, g in pairs
    )
    return ApSummary(
        ap=average_precision(pairs, iou_thresh, eleven_point),
        n_gt=sum(len(g) for _, g in pairs),
        n_det=sum(len(d) for d, _ in pairs),
        n_tp=int(n_tp),
    )
