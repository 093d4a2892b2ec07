"""Pure-Python geometry kernels: rotated-rectangle IoU and greedy NMS.

This is the fallback twin of the compiled extension `_kernels_cy`; the
two must perform the same float64 operations in the same order so either
backend gives bit-identical results.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND = "python"


def _corners(x, y, l, w, yaw):
    """Counterclockwise corners of an oriented rectangle."""
    c = math.cos(yaw)
    s = math.sin(yaw)
    hl = 0.5 * l
    hw = 0.5 * w
    return [
        (x + hl * c - hw * s, y + hl * s + hw * c),
        (x - hl * c - hw * s, y - hl * s + hw * c),
        (x - hl * c + hw * s, y - hl * s - hw * c),
        (x + hl * c + hw * s, y + hl * s - hw * c),
    ]


def _clip_edge(poly, x1, y1, ex, ey):
    """Keep the part of `poly` on the left of the directed edge."""
    if not poly:
        return poly
    res = []
    px, py = poly[-1]
    sp = ex * (py - y1) - ey * (px - x1)
    for cx, cy in poly:
        sc = ex * (cy - y1) - ey * (cx - x1)
        if sc >= 0.0:
            if sp < 0.0:
                t = sp / (sp - sc)
                res.append((px + t * (cx - px), py + t * (cy - py)))
            res.append((cx, cy))
        elif sp >= 0.0:
            t = sp / (sp - sc)
            res.append((px + t * (cx - px), py + t * (cy - py)))
        px, py, sp = cx, cy, sc
    return res


def _poly_area(poly):
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    px, py = poly[-1]
    for cx, cy in poly:
        acc += px * cy - cx * py
        px, py = cx, cy
    return 0.5 * acc


def rect_intersection_area(a, b):
    """Intersection area of two oriented rectangles given as 5-tuples."""
    poly = _corners(a[0], a[1], a[2], a[3], a[4])
    clip = _corners(b[0], b[1], b[2], b[3], b[4])
    px, py = clip[-1]
    for cx, cy in clip:
        poly = _clip_edge(poly, px, py, cx - px, cy - py)
        if not poly:
            return 0.0
        px, py = cx, cy
    area = _poly_area(poly)
    return area if area > 0.0 else 0.0


def _pair_key_less(a, b):
    for i in range(5):
        if a[i] < b[i]:
            return True
        if a[i] > b[i]:
            return False
    return False


def rect_iou(a, b):
    """IoU of two oriented rectangles (x, y, l, w, yaw).

    Arguments are canonically ordered internally so the result is exactly
    symmetric; identical rectangles short-circuit to 1.0.
    """
    a = tuple(float(v) for v in a[:5])
    b = tuple(float(v) for v in b[:5])
    if a == b:
        return 1.0
    if _pair_key_less(b, a):
        a, b = b, a
    inter = rect_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a[2] * a[3] + b[2] * b[3] - inter
    iou = inter / union
    if iou > 1.0:
        return 1.0
    return iou


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU of two (n, 5) / (m, 5) float64 arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64)
    boxes_b = np.asarray(boxes_b, dtype=np.float64)
    n, m = boxes_a.shape[0], boxes_b.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            out[i, j] = rect_iou(boxes_a[i], boxes_b[j])
    return out


def nms_ordered(boxes, thresh):
    """Greedy suppression over (n, 5) boxes already in priority order.

    Returns positions (into the given order) whose IoU with every
    earlier kept box is <= thresh.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    n = boxes.shape[0]
    kept = []
    for i in range(n):
        ok = True
        for j in kept:
            if rect_iou(boxes[i], boxes[j]) > thresh:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept
