"""Confidence-driven routing: what each agent sends, and at which stage.

Every BEV cell gets two confidences, one for "send my intermediate
feature" and one for "send a late-stage box".  Smoothed confidences pick
the top slice of cells worth transmitting; a per-cell Gumbel draw over
the two stage confidences routes each selected cell to exactly one
stage.  In training mode the hard routing decisions carry straight-through
gradients so the confidence heads can learn from downstream loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class RoutingConfig:
    keep_percent: float = 70.0
    c_min: float = 0.1
    tau: float = 1.0
    smooth_size: int = 5
    smooth_sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.keep_percent <= 100.0:
            raise ValueError("keep_percent must be within [0, 100]")
        if not 0.0 <= self.c_min <= 1.0:
            raise ValueError("c_min must be within [0, 1]")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.smooth_size < 1 or self.smooth_size % 2 != 1:
            raise ValueError("smooth_size must be odd and positive")
        if self.smooth_sigma <= 0.0:
            raise ValueError("smooth_sigma must be positive")


def confidence_head(fmap: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-cell sigmoid(w . feature + b) over a (C, H, W) map -> (H, W)."""
    c, h, w = fmap.data.shape
    if weight.data.shape != (c,):
        raise ValueError("weight must have one entry per channel")
    flat = ad.reshape(fmap, (c, h * w))
    logits = ad.add(ad.matmul(ad.transpose(flat), weight), bias)
    return ad.reshape(ad.sigmoid(logits), (h, w))


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Odd-sized normalized 2-D Gaussian, sum exactly 1."""
    if size < 1 or size % 2 != 1:
        raise ValueError("size must be odd and positive")
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_smooth(conf: Tensor, size: int = 5, sigma: float = 1.0) -> Tensor:
    """Reflect-padded Gaussian blur of an (H, W) confidence map."""
    return ad.conv2d_reflect(conf, gaussian_kernel(size, sigma))


def topp_mask(conf: np.ndarray, keep_percent: float, eligible=None) -> np.ndarray:
    """Boolean mask of the ceil(p% of eligible) highest-confidence cells.

    Ties break toward the lower flat (row-major) index so the choice is
    deterministic.  With no eligibility mask every cell is a candidate.
    """
    if not 0.0 <= keep_percent <= 100.0:
        raise ValueError("keep_percent must be within [0, 100]")
    conf = np.asarray(conf, dtype=np.float64)
    flat = conf.reshape(-1)
    if eligible is None:
        elig = np.ones(flat.shape, dtype=bool)
    else:
        elig = np.asarray(eligible, dtype=bool).reshape(-1)
        if elig.shape != flat.shape:
            raise ValueError("eligibility mask shape must match the map")
    n_elig = int(elig.sum())
    k = math.ceil(keep_percent / 100.0 * n_elig)
    mask = np.zeros(flat.shape, dtype=bool)
    if k > 0:
        idx = np.flatnonzero(elig)
        order = np.lexsort((idx, -flat[idx]))
        mask[idx[order[:k]]] = True
    return mask.reshape(conf.shape)


@dataclass
class StageSelect:
    """Per-cell routing draw: soft stage weights plus the hard argmax."""

    soft_feat: Tensor  # (H, W), soft_feat + soft_box == 1
    soft_box: Tensor
    hard_feat: np.ndarray  # bool (H, W), exact complement of hard_box
    hard_box: np.ndarray
    gate_feat: Tensor  # forward == hard indicator, gradient == soft path
    gate_box: Tensor


def gumbel_stage_select(
    conf_feat: Tensor, conf_box: Tensor, tau: float, rng: np.random.Generator
) -> StageSelect:
    """Gumbel draw over the two stages from per-cell confidences.

    The hard argmax frequency follows conf_feat / (conf_feat + conf_box)
    regardless of tau; tau only sharpens the soft weights used for the
    straight-through gradient.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    h, w = conf_feat.data.shape
    if conf_box.data.shape != (h, w):
        raise ValueError("confidence maps must share a shape")
    log_f = ad.log(ad.clamp_min(conf_feat, 1e-6))
    log_b = ad.log(ad.clamp_min(conf_box, 1e-6))
    u = np.clip(rng.uniform(size=(2, h, w)), 1e-12, 1.0 - 1e-12)
    noise = -np.log(-np.log(u))
    pert_f = ad.mul(ad.add(log_f, Tensor(noise[0])), 1.0 / tau)
    pert_b = ad.mul(ad.add(log_b, Tensor(noise[1])), 1.0 / tau)
    stacked = ad.concat(
        [
            ad.reshape(pert_f, (h * w, 1)),
            ad.reshape(pert_b, (h * w, 1)),
        ],
        axis=1,
    )
    soft = ad.softmax(stacked, axis=-1)
    soft_f = ad.reshape(ad.getitem(soft, (slice(None), 0)), (h, w))
    soft_b = ad.reshape(ad.getitem(soft, (slice(None), 1)), (h, w))
    hard_f = soft_f.data >= soft_b.data  # tie -> feature stage
    hard_b = ~hard_f
    gate_f = ad.add(soft_f, Tensor(hard_f.astype(np.float64) - soft_f.data))
    gate_b = ad.add(soft_b, Tensor(hard_b.astype(np.float64) - soft_b.data))
    return StageSelect(soft_f, soft_b, hard_f, hard_b, gate_f, gate_b)


@dataclass
class StageFilter:
    """Final per-cell transmission decision for one sender.

    mask_feat and mask_box are disjoint; their union is the transmitted
    set, which holds exactly ceil(keep_percent% of eligible) cells.
    """

    mask_feat: np.ndarray  # bool (H, W)
    mask_box: np.ndarray  # bool (H, W)
    eligible: np.ndarray  # bool (H, W)
    select: StageSelect

    @property
    def n_sent(self) -> int:
        return int(self.mask_feat.sum() + self.mask_box.sum())


def generate_filters(
    conf_feat_smooth: Tensor,
    conf_box_smooth: Tensor,
    cfg: RoutingConfig,
    rng: np.random.Generator,
) -> StageFilter:
    """Pick the transmitted cells and route each to one stage.

    A cell is eligible when either smoothed confidence clears c_min; the
    top keep_percent of eligible cells (scored by the confidence of their
    drawn stage) are transmitted.
    """
    select = gumbel_stage_select(conf_feat_smooth, conf_box_smooth, cfg.tau, rng)
    cf = conf_feat_smooth.data
    cb = conf_box_smooth.data
    eligible = (cf >= cfg.c_min) | (cb >= cfg.c_min)
    routed_conf = np.where(select.hard_feat, cf, cb)
    chosen = topp_mask(routed_conf, cfg.keep_percent, eligible)
    return StageFilter(
        mask_feat=chosen & select.hard_feat,
        mask_box=chosen & select.hard_box,
        eligible=eligible,
        select=select,
    )


def apply_feature_filter(fmap: Tensor, filt: StageFilter, training: bool) -> Tensor:
    """Zero out non-transmitted cells of a (C, H, W) map.

    In training mode the kept cells are gated through the straight-through
    stage gate so confidence heads receive gradient from downstream use.
    """
    mask = Tensor(filt.mask_feat.astype(np.float64))
    if training:
        gate = ad.mul(filt.select.gate_feat, mask)
    else:
        gate = mask
    h, w = filt.mask_feat.shape
    return ad.mul(fmap, ad.reshape(gate, (1, h, w)))


def box_cell_gates(filt: StageFilter, cells) -> list:
    """Straight-through gate tensor per transmitted box cell (r, c) list."""
    gates = []
    for r, c in cells:
        if not filt.mask_box[r, c]:
            raise ValueError("cell was not routed to the box stage")
        gates.append(ad.getitem(filt.select.gate_box, (r, c)))
    return gates
