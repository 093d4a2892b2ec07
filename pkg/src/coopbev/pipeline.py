"""One cooperative perception frame, end to end.

Senders observe (possibly in the past, per the configured delay), encode,
route each informative cell to either the feature stage or the box stage,
and broadcast.  The receiver re-projects everything through the pose the
message CLAIMS (so pose noise shows up as misalignment), fuses received
feature cells into its own map, decodes, calibrates received boxes
against the fused map, and merges all candidate sets under one NMS.

Four collaboration modes share this code path:

- nofusion:      ego only, nothing transmitted.
- late:          senders transmit decoded boxes; merged raw with ego's.
- intermediate:  senders transmit their full feature map.
- multistage:    confidence-routed mix of feature cells and boxes, with
                 attention fusion and box calibration on the receive side.

Training mode keeps the whole frame differentiable: the float32 wire is
bypassed, the channel is clean, and straight-through stage gates carry
gradient back to the sender confidence heads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .box_fusion import (
    BoxAttnConfig,
    calibrate_received_boxes,
    calibration_losses,
)
from .comms import ChannelConfig, CoopMessage, channel_apply, deserialize, payload_bytes, serialize
from .detection import (
    AnchorSpec,
    build_targets,
    decode_boxes,
    decode_heads,
    detection_loss,
)
from .feature_fusion import ReceivedFeatures, fuse_features, naive_scatter
from .geometry import (
    BBox7,
    IDENTITY_POSE,
    Pose2D,
    nms,
    perturb_pose,
    sample_pose_noise,
    transform_box,
)
from .params import ModelParams
from .routing import (
    RoutingConfig,
    apply_feature_filter,
    box_cell_gates,
    confidence_head,
    gaussian_smooth,
    generate_filters,
)
from .scene import GridSpec, Scenario, object_visible, proxy_encode, render_observation

_TAG_OBS = 1
_TAG_ROUTE = 2
_TAG_CHAN = 3


class FusionMode(str, enum.Enum):
    NO_FUSION = "nofusion"
    LATE_ONLY = "late"
    INTERMEDIATE_ONLY = "intermediate"
    MULTI_STAGE = "multistage"


@dataclass(frozen=True)
class PipelineConfig:
    mode: FusionMode = FusionMode.MULTI_STAGE
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    box_cfg: BoxAttnConfig = field(default_factory=BoxAttnConfig)
    score_floor: float = 0.5
    nms_iou: float = 0.15
    delay_steps: int = 1
    attention_fusion: bool = True  # False: plain overwrite of received cells
    box_calibration: bool = True  # False: received boxes merged raw

    def __post_init__(self):
        object.__setattr__(self, "mode", FusionMode(self.mode))
        if not 0.0 <= self.score_floor <= 1.0:
            raise ValueError("score_floor must lie in [0, 1]")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must lie in [0, 1]")
        if self.delay_steps < 0:
            raise ValueError("delay_steps must be non-negative")


@dataclass
class FrameResult:
    t: int
    detections: list  # final ego-frame boxes after NMS
    gt: list  # every true box at t, ego frame
    volumes: dict  # sender index -> log2(payload bytes)
    feat_cells_sent: dict
    boxes_sent: dict
    messages_dropped: int
    boxes_off_grid: int
    loss: Tensor = None  # set in training mode only
    loss_parts: dict = None

    @property
    def mean_volume(self) -> float:
        if not self.volumes:
            return 0.0
        return sum(self.volumes.values()) / len(self.volumes)


def _rng(seed: int, tag: int, t: int, agent: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, tag, t, agent)))


def _volume(n_cells: int, channels: int, n_boxes: int) -> float:
    nb = payload_bytes(n_cells, channels, n_boxes)
    return math.log2(nb) if nb else 0.0


@dataclass
class _SenderOut:
    pose: Pose2D  # true pose at send time
    rows: np.ndarray
    cols: np.ndarray
    feats: object  # (n, C) float64 array, Tensor in training, or None
    boxes: list
    gates: list  # one straight-through scalar per box, training only
    fmap: Tensor

    @property
    def n_cells(self) -> int:
        return int(self.rows.size)

    @property
    def n_boxes(self) -> int:
        return len(self.boxes)


def _sender_payload(
    scn: Scenario,
    idx: int,
    t_send: int,
    params: ModelParams,
    pcfg: PipelineConfig,
    seed: int,
    training: bool,
) -> _SenderOut:
    grid = scn.grid
    agent = scn.agents[idx]
    obs = render_observation(scn, agent, t_send, _rng(seed, _TAG_OBS, t_send, idx))
    fmap, _ = proxy_encode(obs, grid, params.encoder, agent.sensing_range)
    anchor = AnchorSpec(*pcfg.box_cfg.anchor)
    none_sent = np.zeros(0, dtype=np.intp)

    if pcfg.mode is FusionMode.LATE_ONLY:
        dets, _ = decode_boxes(fmap, params.detection, grid, pcfg.score_floor, anchor)
        return _SenderOut(obs.pose, none_sent, none_sent, None, dets, None, fmap)

    if pcfg.mode is FusionMode.INTERMEDIATE_ONLY:
        hw = grid.h * grid.w
        rr, cc = np.divmod(np.arange(hw, dtype=np.intp), grid.w)
        if training:
            feats = ad.transpose(ad.reshape(fmap, (grid.channels, hw)))
        else:
            feats = fmap.data.reshape(grid.channels, hw).T.copy()
        return _SenderOut(obs.pose, rr, cc, feats, [], None, fmap)

    # multistage: confidence-routed cells
    cf = gaussian_smooth(
        confidence_head(fmap, params.conf_feat_w, params.conf_feat_b),
        pcfg.routing.smooth_size,
        pcfg.routing.smooth_sigma,
    )
    cb = gaussian_smooth(
        confidence_head(fmap, params.conf_box_w, params.conf_box_b),
        pcfg.routing.smooth_size,
        pcfg.routing.smooth_sigma,
    )
    filt = generate_filters(cf, cb, pcfg.routing, _rng(seed, _TAG_ROUTE, t_send, idx))
    rows, cols = (a.astype(np.intp) for a in np.nonzero(filt.mask_feat))
    if training:
        gated = apply_feature_filter(fmap, filt, training=True)
        flat = ad.transpose(ad.reshape(gated, (grid.channels, grid.h * grid.w)))
        feats = ad.gather_rows(flat, rows * grid.w + cols)
    else:
        feats = fmap.data[:, rows, cols].T.copy()
    dets, cells = decode_boxes(fmap, params.detection, grid, pcfg.score_floor, anchor)
    keep = [i for i in range(len(dets)) if filt.mask_box[cells[i, 0], cells[i, 1]]]
    boxes = [dets[i] for i in keep]
    gates = None
    if training:
        gates = box_cell_gates(filt, [(int(cells[i, 0]), int(cells[i, 1])) for i in keep])
    return _SenderOut(obs.pose, rows, cols, feats, boxes, gates, fmap)


def _project_features(
    collab: int,
    rows: np.ndarray,
    cols: np.ndarray,
    vals,
    claimed: Pose2D,
    ego_pose: Pose2D,
    grid: GridSpec,
):
    """Re-index sender feature cells into the ego grid via the claimed pose.

    Cells landing off the ego grid and cells carrying an all-zero vector
    are discarded.  Returns None when nothing survives.
    """
    if rows.size == 0:
        return None
    data = vals.data if isinstance(vals, Tensor) else vals
    cs = grid.cell_size
    xs = grid.x_min + (rows + 0.5) * cs
    ys = grid.y_min + (cols + 0.5) * cs
    ch, sh = math.cos(claimed.heading), math.sin(claimed.heading)
    wx = claimed.x + ch * xs - sh * ys
    wy = claimed.y + sh * xs + ch * ys
    ce, se = math.cos(ego_pose.heading), math.sin(ego_pose.heading)
    dx, dy = wx - ego_pose.x, wy - ego_pose.y
    ex = ce * dx + se * dy
    ey = -se * dx + ce * dy
    er = np.floor((ex - grid.x_min) / cs).astype(np.intp)
    ec = np.floor((ey - grid.y_min) / cs).astype(np.intp)
    ok = (er >= 0) & (er < grid.h) & (ec >= 0) & (ec < grid.w)
    ok &= np.any(data != 0.0, axis=1)
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return None
    kept = ad.gather_rows(vals, idx) if isinstance(vals, Tensor) else Tensor(data[idx])
    return ReceivedFeatures(collab=collab, rows=er[idx], cols=ec[idx], feats=kept)


def _visible_gt(scn: Scenario, idx: int, t: int) -> list:
    """True boxes of objects the agent can see at t, in the agent's frame."""
    agent = scn.agents[idx]
    pose = agent.pose_at(t)
    boxes = scn.world_boxes(t)
    return [
        transform_box(boxes[i], IDENTITY_POSE, pose)
        for i in range(len(boxes))
        if object_visible(scn, agent, i, t)
    ]


def run_frame(
    scn: Scenario,
    t: int,
    params: ModelParams,
    pcfg: PipelineConfig,
    seed: int,
    training: bool = False,
) -> FrameResult:
    grid = scn.grid
    if grid.channels != params.cfg.channels:
        raise ValueError("scenario grid channels do not match the model")
    mode = pcfg.mode
    ego_pose = scn.ego.pose_at(t)
    obs_e = render_observation(scn, scn.ego, t, _rng(seed, _TAG_OBS, t, 0))
    fmap_e, _ = proxy_encode(obs_e, grid, params.encoder, scn.ego.sensing_range)
    anchor = AnchorSpec(*pcfg.box_cfg.anchor)

    volumes, feat_counts, box_counts = {}, {}, {}
    dropped = 0
    received_feats = []
    recv_boxes = []
    pool_gates = training and mode is FusionMode.MULTI_STAGE
    recv_gates = [] if pool_gates else None
    sender_views = []  # (idx, fmap, t_send) for the coarse losses

    if mode is not FusionMode.NO_FUSION:
        t_send = max(0, t - pcfg.delay_steps)
        for idx in range(1, len(scn.agents)):
            out = _sender_payload(scn, idx, t_send, params, pcfg, seed, training)
            sender_views.append((idx, out.fmap, t_send))
            volumes[idx] = _volume(out.n_cells, grid.channels, out.n_boxes)
            feat_counts[idx] = out.n_cells
            box_counts[idx] = out.n_boxes

            if training:
                # same channel model, but the float32 wire is bypassed so
                # the payload stays differentiable
                dist = math.hypot(out.pose.x - ego_pose.x, out.pose.y - ego_pose.y)
                if dist > pcfg.channel.range_limit:
                    dropped += 1
                    continue
                claimed = out.pose
                ch = pcfg.channel
                if ch.sigma_xy > 0.0 or ch.sigma_heading > 0.0:
                    noise = sample_pose_noise(
                        _rng(seed, _TAG_CHAN, t, idx), ch.sigma_xy, ch.sigma_heading
                    )
                    claimed = perturb_pose(claimed, noise)
                rows, cols, vals = out.rows, out.cols, out.feats
                boxes, gates = out.boxes, out.gates
            else:
                wire_boxes = np.array(
                    [
                        [b.x, b.y, b.z, b.l, b.w, b.h, b.yaw, b.score]
                        for b in out.boxes
                    ],
                    dtype=np.float32,
                ).reshape(-1, 8)
                feats32 = (
                    out.feats
                    if out.feats is not None
                    else np.zeros((0, grid.channels))
                )
                msg = CoopMessage(
                    sender=idx,
                    timestep=t_send,
                    pose=out.pose,
                    feat_rows=out.rows,
                    feat_cols=out.cols,
                    feats=feats32,
                    boxes=wire_boxes,
                )
                msg = deserialize(serialize(msg), grid.channels)
                msg = channel_apply(
                    msg, ego_pose, pcfg.channel, _rng(seed, _TAG_CHAN, t, idx)
                )
                if msg is None:
                    dropped += 1
                    continue
                claimed = msg.pose
                rows = msg.feat_rows.astype(np.intp)
                cols = msg.feat_cols.astype(np.intp)
                vals = msg.feats.astype(np.float64)
                boxes = [BBox7(*(float(v) for v in row)) for row in msg.boxes]
                gates = None

            rf = _project_features(idx, rows, cols, vals, claimed, ego_pose, grid)
            if rf is not None:
                received_feats.append(rf)
            for j, b in enumerate(boxes):
                recv_boxes.append(transform_box(b, claimed, ego_pose))
                if pool_gates and gates is not None:
                    recv_gates.append(gates[j])

    wants_features = mode in (FusionMode.INTERMEDIATE_ONLY, FusionMode.MULTI_STAGE)
    if wants_features and received_feats:
        if pcfg.attention_fusion:
            fused = fuse_features(fmap_e, received_feats, params.fusion)
        else:
            fused = naive_scatter(fmap_e, received_feats)
    else:
        fused = fmap_e

    fused_dets, _ = decode_boxes(fused, params.detection, grid, pcfg.score_floor, anchor)
    if fused is fmap_e:
        ego_dets = fused_dets
    else:
        ego_dets, _ = decode_boxes(fmap_e, params.detection, grid, pcfg.score_floor, anchor)

    calibrated = []
    off_grid = 0
    calib_result = None
    if mode is FusionMode.MULTI_STAGE and recv_boxes:
        if pcfg.box_calibration:
            calib_result = calibrate_received_boxes(
                recv_boxes, fused, grid, params.calib, pcfg.box_cfg,
                gates=recv_gates,
            )
            off_grid = calib_result.n_dropped
            calibrated = calib_result.passing(pcfg.score_floor)
        else:
            calibrated = list(recv_boxes)

    if mode is FusionMode.NO_FUSION or mode is FusionMode.INTERMEDIATE_ONLY:
        candidates = list(fused_dets)
    elif mode is FusionMode.LATE_ONLY:
        candidates = ego_dets + recv_boxes
    else:
        candidates = ego_dets + calibrated + fused_dets
    # rank at wire precision: near-duplicate candidates from different
    # sources then sort the same way whether or not their content crossed
    # the float32 wire, keeping training and eval detections aligned
    rank = np.array([b.score for b in candidates], dtype=np.float32)
    keep = nms(candidates, pcfg.nms_iou, scores=rank)
    detections = [candidates[i] for i in keep]

    gt = [transform_box(b, IDENTITY_POSE, ego_pose) for b in scn.world_boxes(t)]

    loss = parts = None
    if training:
        parts = {}
        cls_l, reg = decode_heads(fused, params.detection)
        parts["fused"] = detection_loss(cls_l, reg, build_targets(gt, grid))
        views = [(0, fmap_e, t)] + sender_views
        for idx, fm, tv in views:
            tgt = build_targets(_visible_gt(scn, idx, tv), grid)
            cl, rg = decode_heads(fm, params.detection)
            parts[f"coarse{idx}"] = detection_loss(cl, rg, tgt)
        if calib_result is not None and calib_result.boxes:
            parts["calib"], _ = calibration_losses(calib_result, gt, pcfg.box_cfg)
        loss = parts["fused"]
        for idx, _, _ in views:
            loss = ad.add(loss, parts[f"coarse{idx}"])
        if "calib" in parts:
            loss = ad.add(loss, parts["calib"])

    return FrameResult(
        t=t,
        detections=detections,
        gt=gt,
        volumes=volumes,
        feat_cells_sent=feat_counts,
        boxes_sent=box_counts,
        messages_dropped=dropped,
        boxes_off_grid=off_grid,
        loss=loss,
        loss_parts=parts,
    )


def run_scenario(
    scn: Scenario, params: ModelParams, pcfg: PipelineConfig, seed: int
) -> list:
    """Evaluate every frame of the scenario; returns a list of FrameResult."""
    return [run_frame(scn, t, params, pcfg, seed) for t in range(scn.duration)]
