"""Planar-box geometry: poses, frame transforms, rotated IoU and NMS.

The IoU/NMS kernels come from the compiled extension when it is
available; setting COOPBEV_PURE=1 (or a failed build) selects the
pure-Python twin.  Both produce bit-identical results.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

if os.environ.get("COOPBEV_PURE") == "1":
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels_cy as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as _impl

BACKEND: str = _impl.BACKEND

_TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.remainder(a, _TWO_PI)
    if r <= -math.pi:
        r += _TWO_PI
    return r


@dataclass(frozen=True)
class Pose2D:
    """Planar pose: position (x, y) in meters and heading in radians."""

    x: float
    y: float
    heading: float

    def __post_init__(self):
        for v in (self.x, self.y, self.heading):
            if not math.isfinite(v):
                raise ValueError("pose values must be finite")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def to_world(self, x: float, y: float) -> tuple:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return (self.x + c * x - s * y, self.y + s * x + c * y)

    def from_world(self, x: float, y: float) -> tuple:
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx, dy = x - self.x, y - self.y
        return (c * dx + s * dy, -s * dx + c * dy)


IDENTITY_POSE = Pose2D(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class BBox7:
    """Oriented 3-D box: center (x, y, z), size (l, w, h), yaw, plus a score.

    yaw is normalized into (-pi, pi] on construction; sizes must be
    strictly positive and the score must lie in [0, 1].
    """

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float
    score: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.l, self.w, self.h, self.yaw, self.score)
        for v in vals:
            if not math.isfinite(v):
                raise ValueError("box values must be finite")
        if self.l <= 0.0 or self.w <= 0.0 or self.h <= 0.0:
            raise ValueError("box sizes must be strictly positive")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def footprint5(self) -> tuple:
        return (self.x, self.y, self.l, self.w, self.yaw)

    def as_array7(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.z, self.l, self.w, self.h, self.yaw],
            dtype=np.float64,
        )


def transform_box(b: BBox7, src: Pose2D, dst: Pose2D) -> BBox7:
    """Re-express a box given in the `src` frame in the `dst` frame.

    Planar motion only: z and the box sizes are unchanged and the yaw
    shifts by the heading difference.
    """
    wx, wy = src.to_world(b.x, b.y)
    nx, ny = dst.from_world(wx, wy)
    return BBox7(
        nx, ny, b.z, b.l, b.w, b.h,
        wrap_angle(b.yaw + src.heading - dst.heading),
        b.score,
    )


def sample_pose_noise(
    rng: np.random.Generator, sigma_xy: float, sigma_heading: float
) -> Pose2D:
    """Draw a pose perturbation: N(0, sigma_xy) on x and y, N(0, sigma_heading) on heading."""
    if sigma_xy < 0.0 or sigma_heading < 0.0:
        raise ValueError("noise scales must be non-negative")
    dx = rng.normal(0.0, sigma_xy)
    dy = rng.normal(0.0, sigma_xy)
    dh = rng.normal(0.0, sigma_heading)
    return Pose2D(dx, dy, dh)


def perturb_pose(pose: Pose2D, noise: Pose2D) -> Pose2D:
    return Pose2D(pose.x + noise.x, pose.y + noise.y, pose.heading + noise.heading)


def _footprints_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        arr = np.ascontiguousarray(boxes[:, :5], dtype=np.float64)
    else:
        arr = np.array([b.footprint5() for b in boxes], dtype=np.float64)
        arr = arr.reshape(-1, 5)
    if arr.size:
        if (arr[:, 2] <= 0.0).any() or (arr[:, 3] <= 0.0).any():
            raise ValueError("degenerate box: zero or negative footprint side")
    return arr


def rotated_iou_bev(a: BBox7, b: BBox7) -> float:
    """Exact IoU of the two boxes' rotated BEV footprints.

    Symmetric to the bit: arguments are ordered canonically inside the
    kernel before clipping.
    """
    if a.l <= 0.0 or a.w <= 0.0 or b.l <= 0.0 or b.w <= 0.0:
        raise ValueError("degenerate box: zero or negative footprint side")
    return float(_impl.rect_iou(np.array(a.footprint5()), np.array(b.footprint5())))


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise BEV IoU between two box collections, shape (n, m)."""
    a = _footprints_array(boxes_a)
    b = _footprints_array(boxes_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    return np.asarray(_impl.iou_matrix(a, b), dtype=np.float64)


def nms(boxes, iou_thresh: float, scores=None) -> list:
    """Greedy NMS keeping boxes whose IoU with every kept box is <= thresh.

    Boxes are visited in descending score order with ties broken by the
    lower input index; returns kept input indices in visit order.  A
    `scores` array overrides the ranking keys without touching the boxes
    (callers can rank at reduced precision for tie stability).
    """
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in [0, 1]")
    n = len(boxes)
    if n == 0:
        return []
    if scores is None:
        scores = np.array([b.score for b in boxes], dtype=np.float64)
    else:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (n,):
            raise ValueError("scores must have one entry per box")
    order = np.argsort(-scores, kind="stable")
    arr = _footprints_array(boxes)[order]
    kept_pos = _impl.nms_ordered(arr, float(iou_thresh))
    return [int(order[p]) for p in kept_pos]
