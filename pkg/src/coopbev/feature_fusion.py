"""Fusing received intermediate features into the ego BEV map.

Received cells arrive sparse, already projected into ego grid
coordinates.  At each pyramid scale every received cell attends over the
received features in its 3x3 neighborhood plus the ego's own feature at
the cell (ego feature as query), and the attended value replaces the ego
value at that cell; coarser-scale replacements are upsampled and mixed
back through a linear projection.  Cells that receive nothing are left
untouched, so an empty receive set is an exact no-op.

Keys carry one extra flag dimension marking the ego self key, and the
query has a matching extra channel: content similarity alone cannot
separate "the ego already sees this cell" from "a collaborator agrees",
so the flag lets a query channel keep the ego value exactly where the
ego has its own observation and defer to received content where it does
not.  Each key also gets a learned per-slot logit bias (9 window
positions plus the self slot) so attention can stay center-dominant
instead of blurring the whole window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MlpParams, mlp_apply

ATTN_WINDOW = 1  # Chebyshev radius of the key neighborhood
PAD_BIAS = -1e9
SELF_SLOT = 9  # pos_bias column for the ego self key; 0..8 are window slots
N_SLOTS = 10


@dataclass
class ReceivedFeatures:
    """One collaborator's transmitted feature cells in ego grid coords."""

    collab: int
    rows: np.ndarray
    cols: np.ndarray
    feats: Tensor  # (n, C)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.intp)
        self.cols = np.asarray(self.cols, dtype=np.intp)
        if self.rows.ndim != 1 or self.cols.shape != self.rows.shape:
            raise ValueError("rows and cols must be equal-length vectors")
        if self.feats.data.ndim != 2 or self.feats.data.shape[0] != self.rows.size:
            raise ValueError("feats must be (n_cells, C)")

    @property
    def n_cells(self) -> int:
        return int(self.rows.size)


@dataclass
class FusionParams:
    """Query MLP, per-slot logit bias, cross-scale mixing projection."""

    query_mlp: MlpParams  # C -> C + 1; last output channel gates the self key
    mix_weight: Tensor  # (n_scales * C, C)
    pos_bias: Tensor  # (n_scales, N_SLOTS)
    n_scales: int = 3

    def __post_init__(self):
        c = self.query_mlp.in_dim
        if self.query_mlp.out_dim != c + 1:
            raise ValueError("query MLP must map C -> C + 1")
        if self.n_scales < 1:
            raise ValueError("need at least one scale")
        if self.mix_weight.data.shape != (self.n_scales * c, c):
            raise ValueError("mix_weight must be (n_scales * C, C)")
        if self.pos_bias.data.shape != (self.n_scales, N_SLOTS):
            raise ValueError("pos_bias must be (n_scales, 10)")

    @property
    def channels(self) -> int:
        return self.query_mlp.in_dim

    def tensors(self) -> list:
        return self.query_mlp.tensors() + [self.mix_weight, self.pos_bias]

    @staticmethod
    def init(channels: int, n_scales: int, rng: np.random.Generator) -> "FusionParams":
        q = MlpParams.init([channels, channels + 1], ["linear"], rng)
        mix = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(n_scales * channels),
                       size=(n_scales * channels, channels)),
            requires_grad=True,
        )
        pb = Tensor(np.zeros((n_scales, N_SLOTS)), requires_grad=True)
        return FusionParams(q, mix, pb, n_scales)


def _group_received(received: list, h: int, w: int, scale: int):
    """Merge received cells ending up in the same cell at this scale.

    Returns (cells (g, 2) int array at scale resolution, feats (g, C)
    Tensor).  Grouping is per collaborator; two collaborators hitting the
    same cell stay distinct attention keys.  Group order is sorted by
    (collab index, flat cell), so it is deterministic.
    """
    step = 1 << scale
    hs = (h + step - 1) >> scale
    ws = (w + step - 1) >> scale
    rows = np.concatenate([r.rows for r in received])
    cols = np.concatenate([r.cols for r in received])
    if rows.size and (
        rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w
    ):
        raise ValueError("received cell outside the ego grid")
    src = np.concatenate(
        [np.full(r.n_cells, i, dtype=np.intp) for i, r in enumerate(received)]
    )
    flat = (rows >> scale) * ws + (cols >> scale)
    uid = src * (hs * ws) + flat
    uniq, inverse = np.unique(uid, return_inverse=True)
    feats_all = ad.concat([r.feats for r in received], axis=0)
    grouped = ad.segment_mean(feats_all, inverse, uniq.size)
    gflat = uniq % (hs * ws)
    cells = np.stack([gflat // ws, gflat % ws], axis=1)
    return cells, grouped


def _attend_scale(ego_s: Tensor, cells: np.ndarray, feats: Tensor,
                  query_mlp: MlpParams, bias_row: Tensor) -> Tensor:
    """Replacement deltas at one scale: (C, hs, ws) map, zero off-target.

    Targets are the received cells themselves; each target's keys are all
    received groups within the 3x3 window around it plus the ego's own
    feature at the target (flagged so the query can tell them apart).
    bias_row is the (N_SLOTS,) learned logit bias for this scale.
    """
    c_dim, hs, ws = ego_s.data.shape
    cell_groups: dict = {}
    for gi in range(cells.shape[0]):
        key = (int(cells[gi, 0]), int(cells[gi, 1]))
        cell_groups.setdefault(key, []).append(gi)
    targets = sorted(cell_groups)
    buckets = []
    slot_lists = []
    for tr, tc in targets:
        ks: list = []
        sl: list = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                nb = (tr + dr, tc + dc)
                if 0 <= nb[0] < hs and 0 <= nb[1] < ws:
                    hit = cell_groups.get(nb, ())
                    ks.extend(hit)
                    sl.extend([(dr + 1) * 3 + (dc + 1)] * len(hit))
        buckets.append(ks)
        slot_lists.append(sl)
    m = len(targets)
    kmax = max(len(b) for b in buckets) + 1  # +1 for the ego self key
    n_groups = feats.data.shape[0]
    # value rows: received groups, then the m ego rows, then one pad row
    idx = np.full((m, kmax), n_groups + m, dtype=np.intp)
    slot = np.full((m, kmax), SELF_SLOT, dtype=np.intp)
    bias = np.full((m, kmax), PAD_BIAS, dtype=np.float64)
    flag = np.zeros((m, kmax, 1), dtype=np.float64)
    for i, (ks, sl) in enumerate(zip(buckets, slot_lists)):
        idx[i, : len(ks)] = ks
        slot[i, : len(ks)] = sl
        bias[i, : len(ks)] = 0.0
        idx[i, len(ks)] = n_groups + i
        bias[i, len(ks)] = 0.0
        flag[i, len(ks), 0] = 1.0
    ego_flat = ad.transpose(ad.reshape(ego_s, (c_dim, hs * ws)))
    tflat = np.array([tr * ws + tc for tr, tc in targets], dtype=np.intp)
    ego_at = ad.gather_rows(ego_flat, tflat)  # (m, C)
    padded = ad.concat([feats, ego_at, Tensor(np.zeros((1, c_dim)))], axis=0)
    values = ad.gather_rows(padded, idx)  # (m, kmax, C)
    keys = ad.concat([values, Tensor(flag)], axis=2)  # (m, kmax, C + 1)
    q = mlp_apply(query_mlp, ego_at)  # (m, C + 1)
    logits = ad.tsum(ad.mul(keys, ad.reshape(q, (m, 1, c_dim + 1))), axis=2)
    logits = ad.mul(logits, 1.0 / math.sqrt(c_dim))
    logits = ad.add(ad.add(logits, ad.gather_rows(bias_row, slot)), Tensor(bias))
    attn = ad.softmax(logits, axis=-1)
    out = ad.tsum(ad.mul(ad.reshape(attn, (m, kmax, 1)), values), axis=1)
    delta = ad.sub(out, ego_at)
    dmap = ad.scatter_rows(hs * ws, tflat, delta)
    return ad.reshape(ad.transpose(dmap), (c_dim, hs, ws))


def fuse_features(ego_map: Tensor, received: list, params: FusionParams) -> Tensor:
    """Multi-scale attention fusion of received cells into the ego map.

    With nothing received this returns ego_map itself, and any cell whose
    pyramid footprint contains no received cell keeps its exact value.
    """
    c, h, w = ego_map.data.shape
    if c != params.channels:
        raise ValueError("ego map channels do not match params")
    received = [r for r in received if r.n_cells > 0]
    if not received:
        return ego_map
    deltas = []
    shapes = []
    ego_s = ego_map
    for s in range(params.n_scales):
        if s > 0:
            ego_s = ad.block_mean_pool2(ego_s)
        shapes.append(ego_s.data.shape)
        cells, feats = _group_received(received, h, w, s)
        bias_row = ad.reshape(
            ad.gather_rows(params.pos_bias, np.array([s], dtype=np.intp)),
            (N_SLOTS,),
        )
        deltas.append(_attend_scale(ego_s, cells, feats, params.query_mlp, bias_row))
    ups = [deltas[0]]
    for s in range(1, params.n_scales):
        d = deltas[s]
        for t in range(s, 0, -1):
            d = ad.nn_upsample2(d, shapes[t - 1][1], shapes[t - 1][2])
        ups.append(d)
    stack = ad.concat(ups, axis=0)  # (n_scales*C, h, w)
    flat = ad.transpose(ad.reshape(stack, (params.n_scales * c, h * w)))
    mixed = ad.matmul(flat, params.mix_weight)
    return ad.add(ego_map, ad.reshape(ad.transpose(mixed), (c, h, w)))


def naive_scatter(ego_map: Tensor, received: list) -> Tensor:
    """Ablation without neighborhood attention: overwrite cells directly.

    Each received cell's feature (averaged over collaborators hitting the
    same cell) replaces the ego cell value.
    """
    c, h, w = ego_map.data.shape
    received = [r for r in received if r.n_cells > 0]
    if not received:
        return ego_map
    rows = np.concatenate([r.rows for r in received])
    cols = np.concatenate([r.cols for r in received])
    if rows.size and (
        rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w
    ):
        raise ValueError("received cell outside the ego grid")
    feats_all = ad.concat([r.feats for r in received], axis=0)
    flat = rows * w + cols
    uniq, inverse = np.unique(flat, return_inverse=True)
    merged = ad.segment_mean(feats_all, inverse, uniq.size)
    ego_flat = ad.transpose(ad.reshape(ego_map, (c, h * w)))
    ego_at = ad.gather_rows(ego_flat, uniq)
    dmap = ad.scatter_rows(h * w, uniq, ad.sub(merged, ego_at))
    return ad.add(ego_map, ad.reshape(ad.transpose(dmap), (c, h, w)))
