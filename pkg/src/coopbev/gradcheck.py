"""Central-difference gradient checking for scalar loss functions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad


def grad_check(f, params, eps: float = 1e-3) -> float:
    """Compare analytic gradients of f() against central differences.

    `f` is a zero-argument callable returning a scalar Tensor built from
    the tensors in `params`; it must be twice differentiable at the
    current parameter values.  Returns the maximum over all parameter
    coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    for p in params:
        if not isinstance(p, Tensor) or not p.requires_grad:
            raise ValueError("params must be requires_grad tensors")
        p.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise ValueError("f must return a scalar")
    loss.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    def probe() -> float:
        with no_grad():
            v = f()
        return float(v.data.reshape(()))

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = probe()
            flat[i] = orig - eps
            lo = probe()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(1.0, abs(aflat[i]), abs(numeric))
            err = abs(aflat[i] - numeric) / denom
            if err > worst:
                worst = err
    return worst


@dataclass
class AuditRow:
    name: str
    cases: int
    max_err: float


def _rand_scalarizer(rng: np.random.Generator, shape) -> Tensor:
    # fixed random projection turns any output into a scalar loss
    return Tensor(rng.normal(size=shape))


def _case_window_fusion(rng: np.random.Generator):
    from . import autodiff as ad
    from .feature_fusion import FusionParams, ReceivedFeatures, fuse_features

    c, h, w = 3, 4, 4
    params = FusionParams.init(c, 2, rng)
    ego = Tensor(rng.normal(size=(c, h, w)), requires_grad=True)
    received = []
    for i in range(2):
        n = int(rng.integers(1, 4))
        received.append(ReceivedFeatures(
            collab=i,
            rows=rng.integers(0, h, size=n),
            cols=rng.integers(0, w, size=n),
            feats=Tensor(rng.normal(size=(n, c)), requires_grad=True),
        ))
    proj = _rand_scalarizer(rng, (c, h, w))
    tensors = params.tensors() + [ego] + [r.feats for r in received]

    def f():
        return ad.tsum(ad.mul(fuse_features(ego, received, params), proj))

    return f, tensors


def _audit_box_case(rng: np.random.Generator):
    """Draw a box-refinement case certifiably away from gradient kinks.

    Finite differences at eps 1e-3 are only valid where the op is locally
    smooth, so the draw keeps relu pre-activations pinned off zero (unit
    biases at +-0.5 against tiny weights), sampling points at least 0.12
    cells from bilinear boundaries, and smooth-L1 arguments away from the
    quadratic-to-linear switch.
    """
    from .box_fusion import (BOX_INPUT_DIM, BoxAttnConfig, BoxCalibParams,
                             _grid_point)
    from .geometry import BBox7
    from .nn import MlpParams
    from .scene import GridSpec

    cfg = BoxAttnConfig(n_heads=1, n_points=2, sample_reach=1.5)
    grid = GridSpec(6, 6, 1.0, 4)
    d = 3
    am = cfg.n_heads * cfg.n_points
    # tiny offset weights keep read points glued to the box centers
    params = BoxCalibParams(
        encoder=MlpParams.init([BOX_INPUT_DIM, d], ["linear"], rng),
        offset_mlp=MlpParams.init([d, am * 2], ["linear"], rng, scale=0.001),
        weight_mlp=MlpParams.init([d, am], ["linear"], rng, scale=0.05),
        alpha=Tensor(rng.normal(0.0, 0.02, size=(cfg.n_heads * 3, d)),
                     requires_grad=True),
        attn_q=Tensor(rng.normal(0.0, 0.1, size=(d, d)), requires_grad=True),
        attn_k=Tensor(rng.normal(0.0, 0.1, size=(d, d)), requires_grad=True),
        attn_v=Tensor(rng.normal(0.0, 0.02, size=(d, d)), requires_grad=True),
        ffn=MlpParams.init([d, 2 * d, d], ["relu", "linear"], rng, scale=0.01),
        score_head=MlpParams.init([d, 1], ["linear"], rng, scale=0.05),
        offset_head=MlpParams.init([d, 3], ["linear"], rng, scale=0.05),
    )
    params.ffn.biases[0].data[:] = rng.choice([-0.5, 0.5], size=2 * d)
    fmap = Tensor(rng.normal(size=(3, 6, 6)), requires_grad=True)
    boxes = []
    while len(boxes) < 2:
        b = BBox7(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), 0.8,
                  4.5, 2.0, 1.6, rng.uniform(-1.0, 1.0), rng.uniform(0.2, 0.9))
        g = np.asarray(_grid_point(b, grid))
        if np.abs(g - np.round(g)).min() >= 0.12:
            boxes.append(b)
    return cfg, grid, params, fmap, boxes


def _case_box_refinement(rng: np.random.Generator):
    from .box_fusion import calibrate_received_boxes, calibration_losses
    from .geometry import BBox7

    while True:
        cfg, grid, params, fmap, boxes = _audit_box_case(rng)
        # one gt near the first box, so matched and unmatched paths both run
        gt = [BBox7(boxes[0].x + 0.4, boxes[0].y - 0.2, 0.8,
                    4.5, 2.0, 1.6, 0.1)]
        with no_grad():
            res = calibrate_received_boxes(boxes, fmap, grid, params, cfg)
        err_xy = (res.deltas.data[0, :2]
                  - (np.array([gt[0].x, gt[0].y]) - res.recv_xy[0]))
        err_yaw = res.deltas.data[0, 2] - (gt[0].yaw - res.recv_yaw[0])
        args = np.concatenate([np.abs(err_xy) / cfg.offset_loss_scale,
                               [abs(err_yaw) / cfg.max_offset_yaw]])
        if np.abs(args - 1.0).min() >= 0.08:  # off the smooth-L1 switch
            break

    def f():
        res = calibrate_received_boxes(boxes, fmap, grid, params, cfg)
        loss, _ = calibration_losses(res, gt, cfg)
        return loss

    return f, params.tensors() + [fmap]


def _case_detection_heads(rng: np.random.Generator):
    from .detection import DetectionParams, build_targets, decode_heads, detection_loss
    from .geometry import BBox7
    from .scene import GridSpec

    c = 3
    grid = GridSpec(4, 4, 1.0, 4)
    params = DetectionParams(
        Tensor(rng.normal(size=(c, 2)), requires_grad=True),
        Tensor(rng.normal(size=(2,)), requires_grad=True),
        Tensor(rng.normal(size=(c, 3)), requires_grad=True),
        Tensor(rng.normal(size=(3,)), requires_grad=True),
    )
    fmap = Tensor(rng.normal(size=(c, 4, 4)), requires_grad=True)
    boxes = [
        BBox7(rng.uniform(-1.8, 1.8), rng.uniform(-1.8, 1.8), 0.8,
              2.0, 1.0, 1.6, rng.uniform(-1.0, 1.0))
        for _ in range(2)
    ]
    targets = build_targets(boxes, grid)

    def f():
        cls_logits, reg = decode_heads(fmap, params)
        return detection_loss(cls_logits, reg, targets)

    return f, [params.w_cls, params.b_cls, params.w_reg, params.b_reg, fmap]


def _targets_for_losses(rng: np.random.Generator, grid):
    from .detection import build_targets
    from .geometry import BBox7

    boxes = [
        BBox7(rng.uniform(-1.8, 1.8), rng.uniform(-1.8, 1.8), 0.8,
              2.0, 1.0, 1.6, rng.uniform(-1.0, 1.0))
        for _ in range(int(rng.integers(1, 4)))
    ]
    return build_targets(boxes, grid)


def _case_focal_loss(rng: np.random.Generator):
    from .detection import focal_loss
    from .scene import GridSpec

    grid = GridSpec(4, 4, 1.0, 4)
    targets = _targets_for_losses(rng, grid)
    logits = Tensor(rng.normal(size=(16, 2)) * 2.0, requires_grad=True)

    def f():
        return focal_loss(logits, targets)

    return f, [logits]


def _case_reg_loss(rng: np.random.Generator):
    from .detection import reg_loss
    from .scene import GridSpec

    grid = GridSpec(4, 4, 1.0, 4)
    targets = _targets_for_losses(rng, grid)
    reg = Tensor(rng.normal(size=(16, 3)), requires_grad=True)

    def f():
        return reg_loss(reg, targets)

    return f, [reg]


def _case_score_bce(rng: np.random.Generator):
    # unmatched-only calibration: exercises the score BCE term alone
    from .box_fusion import calibrate_received_boxes, calibration_losses

    cfg, grid, params, fmap, boxes = _audit_box_case(rng)

    def f():
        res = calibrate_received_boxes(boxes, fmap, grid, params, cfg)
        loss, _ = calibration_losses(res, [], cfg)
        return loss

    return f, params.tensors() + [fmap]


def _case_sampling_read(rng: np.random.Generator):
    from . import autodiff as ad

    fmap = Tensor(rng.normal(size=(3, 5, 5)), requires_grad=True)
    pts = Tensor(rng.uniform(0.6, 3.4, size=(4, 2)), requires_grad=True)
    proj = _rand_scalarizer(rng, (4, 3))

    def f():
        return ad.tsum(ad.mul(ad.bilinear_read(fmap, pts), proj))

    return f, [fmap, pts]


def _case_routing_soft(rng: np.random.Generator):
    from . import autodiff as ad
    from .routing import gumbel_stage_select

    cf = Tensor(rng.uniform(0.1, 0.9, size=(3, 3)), requires_grad=True)
    cb = Tensor(rng.uniform(0.1, 0.9, size=(3, 3)), requires_grad=True)
    proj = _rand_scalarizer(rng, (3, 3))
    noise_seed = int(rng.integers(1 << 30))

    def f():
        # fresh identically-seeded generator keeps the draw deterministic
        sel = gumbel_stage_select(cf, cb, 1.0, np.random.default_rng(noise_seed))
        return ad.tsum(ad.mul(sel.soft_feat, proj))

    return f, [cf, cb]


_AUDIT_FAMILIES = [
    ("window_fusion_attention", _case_window_fusion),
    ("box_refinement_attention", _case_box_refinement),
    ("detection_heads", _case_detection_heads),
    ("focal_loss", _case_focal_loss),
    ("reg_loss", _case_reg_loss),
    ("calibration_score_bce", _case_score_bce),
    ("bilinear_sampling", _case_sampling_read),
    ("routing_soft_weights", _case_routing_soft),
]


def run_audit(n_seeds: int = 100, eps: float = 1e-3) -> list:
    """Gradient audit over the differentiable building blocks.

    Cycles the op families round-robin for n_seeds randomized cases and
    returns one AuditRow per family with the worst relative error seen.
    The straight-through routing gate is excluded on purpose: its hard
    forward is piecewise constant, so finite differences cannot see the
    soft gradient it carries; the soft weights behind it are checked
    instead.
    """
    if n_seeds < len(_AUDIT_FAMILIES):
        raise ValueError("need at least one seed per audit family")
    rows = {name: AuditRow(name, 0, 0.0) for name, _ in _AUDIT_FAMILIES}
    for seed in range(n_seeds):
        name, builder = _AUDIT_FAMILIES[seed % len(_AUDIT_FAMILIES)]
        f, tensors = builder(np.random.default_rng(seed))
        err = grad_check(f, tensors, eps)
        row = rows[name]
        row.cases += 1
        row.max_err = max(row.max_err, err)
    return list(rows.values())
