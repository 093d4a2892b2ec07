"""Per-cell box decoding and detection losses on BEV feature maps.

A single linear pair (classification and regression) decodes boxes from
any feature map, so the coarse per-agent decode and the post-fusion
decode share parameters by construction.  Sizes come from a fixed
anchor; regression provides in-cell center offsets and the yaw sine,
which is invertible over the heading range the scenes use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import BBox7
from .scene import DESC_OCC, DESC_OFF_X, DESC_OFF_Y, DESC_SIN, GridSpec

REG_DIM = 3  # dx (cells), dy (cells), sin(yaw)
MAX_CENTER_OFFSET = 1.5  # cells, decode-time clip


@dataclass(frozen=True)
class AnchorSpec:
    l: float = 4.5
    w: float = 2.0
    h: float = 1.6

    def __post_init__(self):
        if min(self.l, self.w, self.h) <= 0:
            raise ValueError("anchor sides must be positive")

    @property
    def z(self) -> float:
        return self.h / 2.0


@dataclass
class DetectionParams:
    w_cls: Tensor  # (C, 2) background/foreground logits
    b_cls: Tensor  # (2,)
    w_reg: Tensor  # (C, REG_DIM)
    b_reg: Tensor  # (REG_DIM,)

    def __post_init__(self):
        c = self.w_cls.data.shape[0]
        if self.w_cls.data.shape != (c, 2) or self.b_cls.data.shape != (2,):
            raise ValueError("classification head must be (C, 2) with (2,) bias")
        if self.w_reg.data.shape != (c, REG_DIM) or self.b_reg.data.shape != (REG_DIM,):
            raise ValueError("regression head must be (C, 3) with (3,) bias")

    @property
    def channels(self) -> int:
        return self.w_cls.data.shape[0]

    def tensors(self) -> list:
        return [self.w_cls, self.b_cls, self.w_reg, self.b_reg]

    @staticmethod
    def random(channels: int, rng: np.random.Generator) -> "DetectionParams":
        s = 1.0 / math.sqrt(channels)
        return DetectionParams(
            Tensor(rng.normal(0.0, s, size=(channels, 2)), requires_grad=True),
            Tensor(np.zeros(2), requires_grad=True),
            Tensor(rng.normal(0.0, s, size=(channels, REG_DIM)), requires_grad=True),
            Tensor(np.zeros(REG_DIM), requires_grad=True),
        )

    @staticmethod
    def reference(channels: int) -> "DetectionParams":
        """Reads the identity-encoded descriptor channels directly."""
        if channels < 8:
            raise ValueError("reference head needs the 8 descriptor channels")
        w_cls = np.zeros((channels, 2))
        w_cls[DESC_OCC, 1] = 4.0
        b_cls = np.array([0.0, -2.0])
        w_reg = np.zeros((channels, REG_DIM))
        w_reg[DESC_OFF_X, 0] = 1.0
        w_reg[DESC_OFF_Y, 1] = 1.0
        w_reg[DESC_SIN, 2] = 1.0
        return DetectionParams(
            Tensor(w_cls, requires_grad=True),
            Tensor(b_cls, requires_grad=True),
            Tensor(w_reg, requires_grad=True),
            Tensor(np.zeros(REG_DIM), requires_grad=True),
        )


def decode_heads(fmap: Tensor, params: DetectionParams):
    """Apply both heads: returns (cls_logits (HW, 2), reg (HW, REG_DIM))."""
    c, h, w = fmap.data.shape
    if c != params.channels:
        raise ValueError("feature channels do not match the heads")
    flat = ad.transpose(ad.reshape(fmap, (c, h * w)))
    cls_logits = ad.add(ad.matmul(flat, params.w_cls), params.b_cls)
    reg = ad.add(ad.matmul(flat, params.w_reg), params.b_reg)
    return cls_logits, reg


def _np_fg_scores(cls_logits: np.ndarray) -> np.ndarray:
    shifted = cls_logits - cls_logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e[:, 1] / e.sum(axis=1)


def decode_boxes(
    fmap: Tensor,
    params: DetectionParams,
    grid: GridSpec,
    score_floor: float,
    anchor: AnchorSpec = AnchorSpec(),
):
    """Boxes from every cell whose foreground score clears the floor.

    Plain-numpy evaluation path; returns (boxes, cells (n, 2) int array).
    """
    if not 0.0 <= score_floor <= 1.0:
        raise ValueError("score_floor must be within [0, 1]")
    cls_logits, reg = decode_heads(fmap, params)
    scores = _np_fg_scores(cls_logits.data)
    keep = np.flatnonzero(scores >= score_floor)
    boxes = []
    cells = []
    for k in keep:
        r, c = divmod(int(k), grid.w)
        cx, cy = grid.cell_center(r, c)
        dx = float(np.clip(reg.data[k, 0], -MAX_CENTER_OFFSET, MAX_CENTER_OFFSET))
        dy = float(np.clip(reg.data[k, 1], -MAX_CENTER_OFFSET, MAX_CENTER_OFFSET))
        sin_yaw = float(np.clip(reg.data[k, 2], -1.0, 1.0))
        boxes.append(
            BBox7(
                cx + dx * grid.cell_size,
                cy + dy * grid.cell_size,
                anchor.z,
                anchor.l,
                anchor.w,
                anchor.h,
                math.asin(sin_yaw),
                float(scores[k]),
            )
        )
        cells.append((r, c))
    return boxes, np.array(cells, dtype=np.intp).reshape(-1, 2)


@dataclass
class DetectionTargets:
    cls: np.ndarray  # (HW,) 0 background / 1 foreground
    reg: np.ndarray  # (HW, REG_DIM), meaningful at positive cells
    pos_cells: np.ndarray  # (n_pos,) flat indices
    n_collisions: int  # ground-truth boxes sharing an occupied cell
    ignore: np.ndarray = None  # (HW,) 1 excludes the cell from the cls loss

    def __post_init__(self):
        if self.ignore is None:
            self.ignore = np.zeros_like(self.cls)


def _footprint_cells(b, grid: GridSpec, margin: float) -> np.ndarray:
    """Flat indices of cells whose center lies in the box, inflated by margin."""
    hl, hw = b.l / 2.0 + margin, b.w / 2.0 + margin
    rad = math.hypot(hl, hw)
    r0 = max(0, int(math.floor((b.x - rad - grid.x_min) / grid.cell_size)))
    r1 = min(grid.h - 1, int(math.ceil((b.x + rad - grid.x_min) / grid.cell_size)))
    c0 = max(0, int(math.floor((b.y - rad - grid.y_min) / grid.cell_size)))
    c1 = min(grid.w - 1, int(math.ceil((b.y + rad - grid.y_min) / grid.cell_size)))
    if r1 < r0 or c1 < c0:
        return np.zeros(0, dtype=np.intp)
    rr, cc = np.meshgrid(
        np.arange(r0, r1 + 1, dtype=np.intp),
        np.arange(c0, c1 + 1, dtype=np.intp),
        indexing="ij",
    )
    cx = grid.x_min + (rr + 0.5) * grid.cell_size
    cy = grid.y_min + (cc + 0.5) * grid.cell_size
    co, si = math.cos(b.yaw), math.sin(b.yaw)
    dx, dy = cx - b.x, cy - b.y
    u = co * dx + si * dy
    v = -si * dx + co * dy
    inside = (np.abs(u) <= hl) & (np.abs(v) <= hw)
    return (rr[inside] * grid.w + cc[inside]).ravel()


def build_targets(gt_boxes: list, grid: GridSpec) -> DetectionTargets:
    """Center-cell assignment of ground truth boxes.

    When two boxes center in the same cell the one closer to the cell
    center wins; off-grid boxes are ignored.  Non-center cells inside a
    box footprint (plus half a cell of margin) are marked ignore: they
    carry real object content, so scoring them as background would teach
    the classifier to suppress exactly the content fusion recovers.
    """
    cls = np.zeros(grid.n_cells, dtype=np.float64)
    reg = np.zeros((grid.n_cells, REG_DIM), dtype=np.float64)
    ignore = np.zeros(grid.n_cells, dtype=np.float64)
    best = {}
    n_coll = 0
    for b in gt_boxes:
        ignore[_footprint_cells(b, grid, margin=0.5 * grid.cell_size)] = 1.0
        cell = grid.cell_of(b.x, b.y)
        if cell is None:
            continue
        r, c = cell
        k = r * grid.w + c
        cx, cy = grid.cell_center(r, c)
        d = math.hypot(b.x - cx, b.y - cy)
        if k in best:
            n_coll += 1
            if d >= best[k][0]:
                continue
        best[k] = (d, b)
    for k, (_, b) in best.items():
        r, c = divmod(k, grid.w)
        cx, cy = grid.cell_center(r, c)
        cls[k] = 1.0
        reg[k] = (
            (b.x - cx) / grid.cell_size,
            (b.y - cy) / grid.cell_size,
            math.sin(b.yaw),
        )
    pos = np.flatnonzero(cls > 0)
    ignore[pos] = 0.0
    return DetectionTargets(cls, reg, pos, n_coll, ignore)


def focal_loss(
    cls_logits: Tensor, targets: DetectionTargets, gamma: float = 2.0,
    alpha: float = 0.25
) -> Tensor:
    """Sum of focal terms over non-ignored cells, divided by max(1, n_pos)."""
    y = targets.cls
    p = ad.softmax(cls_logits, axis=-1)
    p_fg = ad.getitem(p, (slice(None), 1))
    # p of the true class per cell
    p_t = ad.add(
        ad.mul(p_fg, Tensor(y)), ad.mul(ad.sub(1.0, p_fg), Tensor(1.0 - y))
    )
    weight = np.where(y > 0, alpha, 1.0 - alpha) * (1.0 - targets.ignore)
    focus = ad.pow_const(ad.sub(1.0, p_t), gamma)
    ll = ad.log(ad.clamp_min(p_t, 1e-12))
    total = ad.neg(ad.tsum(ad.mul(ad.mul(Tensor(weight), focus), ll)))
    return ad.mul(total, 1.0 / max(1, targets.pos_cells.size))


def reg_loss(reg: Tensor, targets: DetectionTargets) -> Tensor:
    """Smooth-L1 over positive cells, summed then divided by max(1, n_pos)."""
    if targets.pos_cells.size == 0:
        return ad.mul(ad.tsum(reg), 0.0)
    picked = ad.gather_rows(reg, targets.pos_cells)
    err = ad.sub(picked, Tensor(targets.reg[targets.pos_cells]))
    return ad.mul(
        ad.tsum(ad.smooth_l1(err)), 1.0 / max(1, targets.pos_cells.size)
    )


def detection_loss(
    cls_logits: Tensor,
    reg: Tensor,
    targets: DetectionTargets,
    gamma: float = 2.0,
    alpha: float = 0.25,
    reg_weight: float = 1.0,
) -> Tensor:
    return ad.add(
        focal_loss(cls_logits, targets, gamma, alpha),
        ad.mul(reg_loss(reg, targets), reg_weight),
    )
