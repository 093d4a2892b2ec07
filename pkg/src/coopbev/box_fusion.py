"""Calibration of received late-stage boxes against the ego's fused map.

Received boxes arrive as ego-frame detections from other agents.  Each
box becomes a feature vector, samples the fused BEV map at a few learned
offsets around its center (deformable attention), passes through one
set-level transformer block, and emits a calibrated score plus bounded
position/heading corrections.  Under the structured reference
parameters the whole chain is an identity that assigns a fixed moderate
score, so an untrained model passes received boxes through unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import BBox7, wrap_angle
from .nn import MlpParams, mlp_apply
from .scene import GridSpec

REF_SCORE_BIAS = math.atanh(0.3)  # calibrated score 0.65 under reference init


@dataclass(frozen=True)
class BoxAttnConfig:
    n_heads: int = 2
    n_points: int = 4
    sample_reach: float = 3.0  # max sampling offset, in cells
    max_offset_xy: float = 2.0  # meters
    max_offset_yaw: float = 0.2  # radians
    offset_loss_scale: float = 0.5  # meters at which the offset loss turns linear
    score_floor: float = 0.5
    anchor: tuple = (4.5, 2.0, 1.6)

    def __post_init__(self):
        if self.n_heads < 1 or self.n_points < 1:
            raise ValueError("need at least one head and one point")
        if min(self.sample_reach, self.max_offset_xy, self.max_offset_yaw) <= 0:
            raise ValueError("reach and offset bounds must be positive")
        if not 0.0 <= self.score_floor <= 1.0:
            raise ValueError("score_floor must be within [0, 1]")


BOX_INPUT_DIM = 8  # x, y, sin, cos, dl, dw, dh, score


@dataclass
class BoxCalibParams:
    encoder: MlpParams  # BOX_INPUT_DIM -> d
    offset_mlp: MlpParams  # d -> heads*points*2
    weight_mlp: MlpParams  # d -> heads*points
    alpha: Tensor  # (heads*C, d) read-mixing projection
    attn_q: Tensor  # (d, d)
    attn_k: Tensor
    attn_v: Tensor
    ffn: MlpParams  # d -> d
    score_head: MlpParams  # d -> 1
    offset_head: MlpParams  # d -> 3

    def __post_init__(self):
        d = self.encoder.out_dim
        if self.encoder.in_dim != BOX_INPUT_DIM:
            raise ValueError("encoder must take the 8-value box vector")
        for name, m, out in (
            ("ffn", self.ffn, d),
            ("score_head", self.score_head, 1),
            ("offset_head", self.offset_head, 3),
        ):
            if m.in_dim != d or m.out_dim != out:
                raise ValueError(f"{name} has wrong dimensions")
        for name, t in (("attn_q", self.attn_q), ("attn_k", self.attn_k),
                        ("attn_v", self.attn_v)):
            if t.data.shape != (d, d):
                raise ValueError(f"{name} must be (d, d)")
        if self.alpha.data.shape[1] != d:
            raise ValueError("alpha must project the head reads to d")

    @property
    def d_model(self) -> int:
        return self.encoder.out_dim

    def tensors(self) -> list:
        out = []
        for m in (self.encoder, self.offset_mlp, self.weight_mlp, self.ffn,
                  self.score_head, self.offset_head):
            out.extend(m.tensors())
        out.extend([self.alpha, self.attn_q, self.attn_k, self.attn_v])
        return out

    @staticmethod
    def random(channels: int, d: int, cfg: BoxAttnConfig,
               rng: np.random.Generator) -> "BoxCalibParams":
        am = cfg.n_heads * cfg.n_points
        return BoxCalibParams(
            encoder=MlpParams.init([BOX_INPUT_DIM, d], ["linear"], rng),
            offset_mlp=MlpParams.init([d, am * 2], ["linear"], rng, scale=0.05),
            weight_mlp=MlpParams.init([d, am], ["linear"], rng, scale=0.05),
            alpha=Tensor(
                rng.normal(0.0, 0.02, size=(cfg.n_heads * channels, d)),
                requires_grad=True,
            ),
            attn_q=Tensor(rng.normal(0.0, 0.1, size=(d, d)), requires_grad=True),
            attn_k=Tensor(rng.normal(0.0, 0.1, size=(d, d)), requires_grad=True),
            attn_v=Tensor(rng.normal(0.0, 0.02, size=(d, d)), requires_grad=True),
            ffn=MlpParams.init([d, 2 * d, d], ["relu", "linear"], rng, scale=0.05),
            score_head=MlpParams.init([d, 1], ["linear"], rng, scale=0.05),
            offset_head=MlpParams.init([d, 3], ["linear"], rng, scale=0.05),
        )

    @staticmethod
    def reference(channels: int, cfg: BoxAttnConfig) -> "BoxCalibParams":
        """Identity calibration: no refinement, constant score 0.65.

        Sampling offsets form a fixed ring so the deformable reads probe
        the neighborhood, but the zero alpha keeps them out of the output
        until training moves it.
        """
        d = 16
        am = cfg.n_heads * cfg.n_points
        enc_w = np.zeros((BOX_INPUT_DIM, d))
        enc_w[:, :BOX_INPUT_DIM] = np.eye(BOX_INPUT_DIM)
        ring = np.zeros((am, 2))
        for idx in range(am):
            ang = 2.0 * math.pi * idx / am
            ring[idx] = (math.cos(ang), math.sin(ang))
        ring_bias = math.atanh(min(0.3 / cfg.sample_reach, 0.9)) * ring

        def zero_mlp(dims, bias_last=None):
            ws = [Tensor(np.zeros((dims[i], dims[i + 1])), requires_grad=True)
                  for i in range(len(dims) - 1)]
            bs = [Tensor(np.zeros(dims[i + 1]), requires_grad=True)
                  for i in range(len(dims) - 1)]
            if bias_last is not None:
                bs[-1] = Tensor(np.asarray(bias_last, dtype=np.float64).reshape(-1),
                                requires_grad=True)
            return MlpParams(ws, bs, ["linear"] * (len(dims) - 1))

        score = zero_mlp([d, 1], bias_last=[REF_SCORE_BIAS])
        return BoxCalibParams(
            encoder=MlpParams([Tensor(enc_w, requires_grad=True)],
                              [Tensor(np.zeros(d), requires_grad=True)],
                              ["linear"]),
            offset_mlp=zero_mlp([d, am * 2], bias_last=ring_bias.reshape(-1)),
            weight_mlp=zero_mlp([d, am]),
            alpha=Tensor(np.zeros((cfg.n_heads * channels, d)), requires_grad=True),
            attn_q=Tensor(np.zeros((d, d)), requires_grad=True),
            attn_k=Tensor(np.zeros((d, d)), requires_grad=True),
            attn_v=Tensor(np.zeros((d, d)), requires_grad=True),
            ffn=zero_mlp([d, 2 * d, d]),
            score_head=score,
            offset_head=zero_mlp([d, 3]),
        )


def box_input_vector(box: BBox7, grid: GridSpec, anchor: tuple) -> np.ndarray:
    hx = grid.h * grid.cell_size / 2.0
    hy = grid.w * grid.cell_size / 2.0
    return np.array(
        [
            box.x / hx,
            box.y / hy,
            math.sin(box.yaw),
            math.cos(box.yaw),
            (box.l - anchor[0]) / anchor[0],
            (box.w - anchor[1]) / anchor[1],
            (box.h - anchor[2]) / anchor[2],
            box.score,
        ]
    )


def _grid_point(box: BBox7, grid: GridSpec) -> tuple:
    """Continuous (row, col) with integer coordinates at cell centers."""
    r = (box.x - grid.x_min) / grid.cell_size - 0.5
    c = (box.y - grid.y_min) / grid.cell_size - 0.5
    return r, c


@dataclass
class CalibResult:
    """Refined boxes plus the Tensors training needs; empty when no input."""

    boxes: list
    kept: np.ndarray  # bool per input box; False = center off grid
    scores: Tensor = None
    deltas: Tensor = None  # (n, 3) applied dx, dy, dyaw
    recv_xy: np.ndarray = None
    recv_yaw: np.ndarray = None
    n_dropped: int = 0

    def passing(self, floor: float) -> list:
        return [b for b in self.boxes if b.score >= floor]


def calibrate_received_boxes(
    boxes: list,
    fmap: Tensor,
    grid: GridSpec,
    params: BoxCalibParams,
    cfg: BoxAttnConfig,
    gates=None,
) -> CalibResult:
    """Full late-stage chain for one receiver.

    `gates` optionally carries one scalar Tensor per box (the sender's
    straight-through stage gate) so training gradients reach the sender's
    box confidence head.
    """
    kept = np.array(
        [grid.cell_of(b.x, b.y) is not None for b in boxes], dtype=bool
    )
    n_dropped = int((~kept).sum())
    live = [b for b, k in zip(boxes, kept) if k]
    if not live:
        return CalibResult(boxes=[], kept=kept, n_dropped=n_dropped)
    n = len(live)
    d = params.d_model
    c_dim = fmap.data.shape[0]

    vecs = Tensor(np.stack([box_input_vector(b, grid, cfg.anchor) for b in live]))
    e = mlp_apply(params.encoder, vecs)  # (n, d)
    if gates is not None:
        lgates = [g for g, k in zip(gates, kept) if k]
        col = ad.reshape(ad.concat([ad.reshape(g, (1,)) for g in lgates]), (n, 1))
        e = ad.mul(e, col)

    # deformable reads around each box center
    am = cfg.n_heads * cfg.n_points
    base = np.array([_grid_point(b, grid) for b in live])  # (n, 2)
    raw_off = mlp_apply(params.offset_mlp, e)  # (n, am*2)
    offsets = ad.mul(ad.tanh(ad.reshape(raw_off, (n, am, 2))), cfg.sample_reach)
    pts = ad.add(Tensor(base.reshape(n, 1, 2)), offsets)
    reads = ad.bilinear_read(fmap, ad.reshape(pts, (n * am, 2)))  # (n*am, C)
    wlogits = ad.reshape(
        mlp_apply(params.weight_mlp, e), (n * cfg.n_heads, cfg.n_points)
    )
    attn = ad.softmax(wlogits, axis=-1)
    head_out = ad.tsum(
        ad.mul(
            ad.reshape(attn, (n * cfg.n_heads, cfg.n_points, 1)),
            ad.reshape(reads, (n * cfg.n_heads, cfg.n_points, c_dim)),
        ),
        axis=1,
    )  # (n*heads, C)
    mixed = ad.matmul(
        ad.reshape(head_out, (n, cfg.n_heads * c_dim)), params.alpha
    )
    e = ad.add(e, mixed)

    # one set-level transformer block: self-attention + FFN, both residual
    q = ad.matmul(e, params.attn_q)
    k = ad.matmul(e, params.attn_k)
    v = ad.matmul(e, params.attn_v)
    logits = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d))
    e = ad.add(e, ad.matmul(ad.softmax(logits, axis=-1), v))
    e = ad.add(e, mlp_apply(params.ffn, e))

    z = ad.reshape(mlp_apply(params.score_head, e), (n,))
    scores = ad.mul(ad.add(ad.tanh(z), 1.0), 0.5)
    raw = mlp_apply(params.offset_head, e)  # (n, 3)
    bounds = Tensor(
        np.array([cfg.max_offset_xy, cfg.max_offset_xy, cfg.max_offset_yaw])
    )
    deltas = ad.mul(ad.tanh(raw), bounds)

    refined = []
    for i, b in enumerate(live):
        refined.append(
            BBox7(
                b.x + float(deltas.data[i, 0]),
                b.y + float(deltas.data[i, 1]),
                b.z,
                b.l,
                b.w,
                b.h,
                wrap_angle(b.yaw + float(deltas.data[i, 2])),
                float(scores.data[i]),
            )
        )
    return CalibResult(
        boxes=refined,
        kept=kept,
        scores=scores,
        deltas=deltas,
        recv_xy=np.array([[b.x, b.y] for b in live]),
        recv_yaw=np.array([b.yaw for b in live]),
        n_dropped=n_dropped,
    )


def match_by_center(boxes: list, gt_boxes: list, radius: float) -> list:
    """Greedy nearest-center matching; returns gt index or -1 per box."""
    taken = set()
    out = []
    for b in boxes:
        best, best_d = -1, radius
        for j, g in enumerate(gt_boxes):
            if j in taken:
                continue
            dd = math.hypot(b.x - g.x, b.y - g.y)
            if dd <= best_d:
                best, best_d = j, dd
        if best >= 0:
            taken.add(best)
        out.append(best)
    return out


def calibration_losses(
    result: CalibResult, gt_boxes: list, cfg: BoxAttnConfig, match_radius: float = 2.5
):
    """Offset regression plus score BCE against center-matched truth.

    Matching runs on the received (pre-refinement) centers so the targets
    do not move as the heads train.  The score target is distance
    weighted, 1 - d / match_radius, not a flat 1.0 for every match: the
    merge ranks candidates from all sources by score, so a displaced
    received box must not learn to outrank a better-localized duplicate.
    Returns (loss, n_matched).
    """
    if not result.boxes:
        raise ValueError("no boxes to compute calibration losses for")
    recv = [
        BBox7(xy[0], xy[1], 1.0, 1.0, 1.0, 1.0, yaw)
        for xy, yaw in zip(result.recv_xy, result.recv_yaw)
    ]
    match = match_by_center(recv, gt_boxes, match_radius)
    matched = [i for i, m in enumerate(match) if m >= 0]
    y = np.zeros(len(match))
    for i, m in enumerate(match):
        if m >= 0:
            d = math.hypot(result.recv_xy[i, 0] - gt_boxes[m].x,
                           result.recv_xy[i, 1] - gt_boxes[m].y)
            y[i] = 1.0 - d / match_radius

    eps = 1e-7
    s = result.scores
    bce = ad.neg(
        ad.add(
            ad.mul(Tensor(y), ad.log(ad.clamp_min(s, eps))),
            ad.mul(Tensor(1.0 - y), ad.log(ad.clamp_min(ad.sub(1.0, s), eps))),
        )
    )
    loss = ad.tmean(bce)
    if matched:
        rows = np.array(matched, dtype=np.intp)
        gx = np.array([[gt_boxes[match[i]].x, gt_boxes[match[i]].y] for i in matched])
        gyaw = np.array([gt_boxes[match[i]].yaw for i in matched])
        dxy = ad.gather_rows(result.deltas, rows)
        tgt_xy = gx - result.recv_xy[rows]
        tgt_yaw = gyaw - result.recv_yaw[rows]
        err_xy = ad.sub(ad.getitem(dxy, (slice(None), slice(0, 2))), Tensor(tgt_xy))
        err_yaw = ad.sub(
            ad.getitem(dxy, (slice(None), 2)), Tensor(tgt_yaw)
        )
        l_off = ad.add(
            ad.tmean(ad.smooth_l1(ad.mul(err_xy, 1.0 / cfg.offset_loss_scale))),
            ad.tmean(ad.smooth_l1(ad.mul(err_yaw, 1.0 / cfg.max_offset_yaw))),
        )
        loss = ad.add(loss, l_off)
    return loss, len(matched)
