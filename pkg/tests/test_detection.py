"""Anchor decode, target assignment, focal and regression losses."""

import math

import numpy as np
import pytest

from coopbev import autodiff as ad
from coopbev.autodiff import Tensor
from coopbev.detection import (
    MAX_CENTER_OFFSET,
    AnchorSpec,
    DetectionParams,
    DetectionTargets,
    build_targets,
    decode_boxes,
    decode_heads,
    detection_loss,
    focal_loss,
    reg_loss,
)
from coopbev.gradcheck import grad_check
from coopbev.geometry import BBox7
from coopbev.nn import MlpParams
from coopbev.scene import (
    DESC_DIM,
    DESC_OCC,
    DESC_OFF_X,
    DESC_OFF_Y,
    DESC_SIN,
    GridSpec,
    SceneConfig,
    generate_scenario,
    object_visible,
    proxy_encode,
    render_observation,
)


def _identity_encoder(channels):
    w = np.zeros((DESC_DIM, channels))
    w[:, :DESC_DIM] = np.eye(DESC_DIM)
    return MlpParams([Tensor(w)], [Tensor(np.zeros(channels))], ["linear"])


class TestAnchor:
    def test_defaults(self):
        a = AnchorSpec()
        assert (a.l, a.w, a.h) == (4.5, 2.0, 1.6)
        assert a.z == pytest.approx(0.8)

    def test_validation(self):
        with pytest.raises(ValueError):
            AnchorSpec(l=0.0)


class TestParams:
    def test_shape_validation(self):
        with pytest.raises(ValueError):
            DetectionParams(
                Tensor(np.zeros((4, 3))),
                Tensor(np.zeros(2)),
                Tensor(np.zeros((4, 3))),
                Tensor(np.zeros(3)),
            )

    def test_reference_needs_descriptor_channels(self):
        with pytest.raises(ValueError):
            DetectionParams.reference(4)

    def test_heads_shared_across_maps(self):
        params = DetectionParams.random(6, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        for shape in ((6, 8, 8), (6, 4, 4)):
            cls_logits, reg = decode_heads(Tensor(rng.normal(size=shape)), params)
            assert cls_logits.data.shape == (shape[1] * shape[2], 2)
            assert reg.data.shape == (shape[1] * shape[2], 3)


class TestReferenceDecode:
    def test_recovers_visible_objects_from_clean_scene(self):
        cfg = SceneConfig(obs_noise=0.0, obs_noise_yaw=0.0)
        scn = generate_scenario(cfg, 11)
        ego = scn.agents[0]
        obs = render_observation(scn, ego, 0, np.random.default_rng(0))
        fmap, _ = proxy_encode(
            obs, scn.grid, _identity_encoder(scn.grid.channels), ego.sensing_range
        )
        params = DetectionParams.reference(scn.grid.channels)
        boxes, cells = decode_boxes(fmap, params, scn.grid, 0.5)
        vis = [
            b
            for i, b in enumerate(scn.world_boxes(0))
            if object_visible(scn, ego, i, 0)
        ]
        assert len(boxes) == len(vis)
        for got in boxes:
            err = min(math.hypot(got.x - g.x, got.y - g.y) for g in vis)
            assert err < 1e-9
            nearest = min(vis, key=lambda g: math.hypot(got.x - g.x, got.y - g.y))
            assert got.yaw == pytest.approx(nearest.yaw, abs=1e-9)
            assert got.score == pytest.approx(1.0 / (1.0 + math.exp(-2.0)), abs=1e-12)

    def test_empty_map_yields_nothing(self):
        grid = GridSpec(16, 16, 1.0, 16)
        params = DetectionParams.reference(16)
        boxes, cells = decode_boxes(Tensor(np.zeros((16, 16, 16))), params, grid, 0.5)
        assert boxes == [] and cells.shape == (0, 2)


class TestDecode:
    def test_offsets_clipped(self):
        grid = GridSpec(8, 8, 2.0, DESC_DIM)
        fmap = np.zeros((DESC_DIM, 8, 8))
        fmap[DESC_OCC, 3, 3] = 1.0
        fmap[DESC_OFF_X, 3, 3] = 9.0  # way past the clip
        fmap[DESC_SIN, 3, 3] = 2.0  # outside [-1, 1]
        params = DetectionParams.reference(DESC_DIM)
        boxes, _ = decode_boxes(Tensor(fmap), params, grid, 0.5)
        assert len(boxes) == 1
        cx, cy = grid.cell_center(3, 3)
        assert boxes[0].x == pytest.approx(cx + MAX_CENTER_OFFSET * 2.0, abs=1e-12)
        assert boxes[0].yaw == pytest.approx(math.pi / 2, abs=1e-12)

    def test_floor_validation(self):
        grid = GridSpec(4, 4, 1.0, DESC_DIM)
        params = DetectionParams.reference(DESC_DIM)
        with pytest.raises(ValueError):
            decode_boxes(Tensor(np.zeros((DESC_DIM, 4, 4))), params, grid, 1.5)


class TestTargets:
    def test_assignment_and_values(self):
        grid = GridSpec(8, 8, 2.0, 4)
        b = BBox7(1.5, -0.5, 0.8, 4.5, 2.0, 1.6, 0.3)
        t = build_targets([b], grid)
        cell = grid.cell_of(1.5, -0.5)
        k = cell[0] * 8 + cell[1]
        assert t.pos_cells.tolist() == [k]
        assert t.cls[k] == 1.0 and t.cls.sum() == 1.0
        cx, cy = grid.cell_center(*cell)
        np.testing.assert_allclose(
            t.reg[k],
            [(1.5 - cx) / 2.0, (-0.5 - cy) / 2.0, math.sin(0.3)],
            atol=1e-15,
        )

    def test_collision_keeps_nearer(self):
        grid = GridSpec(4, 4, 4.0, 4)
        cx, cy = grid.cell_center(1, 1)
        near = BBox7(cx + 0.1, cy, 0.8, 4.5, 2.0, 1.6, 0.0)
        far = BBox7(cx + 1.5, cy + 1.0, 0.8, 4.5, 2.0, 1.6, 0.0)
        t = build_targets([far, near], grid)
        assert t.n_collisions == 1
        assert t.pos_cells.size == 1
        k = t.pos_cells[0]
        assert t.reg[k, 0] == pytest.approx(0.1 / 4.0, abs=1e-15)

    def test_off_grid_ignored(self):
        grid = GridSpec(4, 4, 1.0, 4)
        t = build_targets([BBox7(50.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0)], grid)
        assert t.pos_cells.size == 0 and t.cls.sum() == 0.0

    def test_footprint_marked_ignore_except_center(self):
        grid = GridSpec(8, 8, 1.0, 4)
        b = BBox7(0.3, -0.7, 0.8, 4.5, 2.0, 1.6, 0.5)
        t = build_targets([b], grid)
        # oracle: cell centers inside the yaw-rotated box inflated by half
        # a cell on each side
        hl, hw = b.l / 2.0 + 0.5, b.w / 2.0 + 0.5
        co, si = math.cos(b.yaw), math.sin(b.yaw)
        want = np.zeros(64)
        for r in range(8):
            for c in range(8):
                cx, cy = grid.cell_center(r, c)
                dx, dy = cx - b.x, cy - b.y
                u = co * dx + si * dy
                v = -si * dx + co * dy
                if abs(u) <= hl and abs(v) <= hw:
                    want[r * 8 + c] = 1.0
        want[t.pos_cells] = 0.0
        np.testing.assert_array_equal(t.ignore, want)
        assert t.ignore.sum() >= 5.0
        assert t.ignore[t.pos_cells].sum() == 0.0


class TestFocalLoss:
    def _oracle(self, logits, y, gamma, alpha, ignore=None):
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        p_t = np.where(y > 0, p[:, 1], p[:, 0])
        a_t = np.where(y > 0, alpha, 1.0 - alpha)
        fl = -a_t * (1.0 - p_t) ** gamma * np.log(p_t)
        if ignore is not None:
            fl = fl * (1.0 - ignore)
        return fl.sum() / max(1, int((y > 0).sum()))

    def test_matches_numpy_oracle(self):
        grid = GridSpec(4, 4, 1.0, 4)
        for seed in range(20):
            r = np.random.default_rng(seed)
            logits = r.normal(size=(16, 2)) * 3.0
            boxes = [
                BBox7(r.uniform(-1.9, 1.9), r.uniform(-1.9, 1.9), 0.8,
                      4.5, 2.0, 1.6, 0.0)
                for _ in range(3)
            ]
            t = build_targets(boxes, grid)
            got = focal_loss(Tensor(logits), t).item()
            want = self._oracle(logits, t.cls, 2.0, 0.25, t.ignore)
            assert got == pytest.approx(want, rel=1e-12)

    def test_confident_correct_is_cheap(self):
        grid = GridSpec(4, 4, 1.0, 4)
        t = build_targets([BBox7(-1.5, -1.5, 0.8, 1.0, 1.0, 1.6, 0.0)], grid)
        sharp = np.where(t.cls[:, None] > 0, [0.0, 12.0], [12.0, 0.0])
        blunt = np.zeros((16, 2))
        assert focal_loss(Tensor(sharp), t).item() < 1e-7
        assert focal_loss(Tensor(blunt), t).item() > 0.1

    def test_gamma_zero_is_weighted_ce(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(9, 2))
        grid = GridSpec(3, 3, 1.0, 4)
        t = build_targets([BBox7(0.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0)], grid)
        got = focal_loss(Tensor(logits), t, gamma=0.0, alpha=0.5).item()
        want = self._oracle(logits, t.cls, 0.0, 0.5, t.ignore)
        assert got == pytest.approx(want, rel=1e-12)

    def test_ignored_cells_do_not_contribute(self):
        # two target sets differing only in ignore: loss drops by exactly
        # the ignored cells' terms
        grid = GridSpec(4, 4, 1.0, 4)
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(16, 2))
        t = build_targets([BBox7(0.0, 0.0, 0.8, 3.0, 2.0, 1.6, 0.4)], grid)
        assert t.ignore.sum() > 0
        bare = DetectionTargets(t.cls, t.reg, t.pos_cells, t.n_collisions)
        with_ig = focal_loss(Tensor(logits), t).item()
        without = focal_loss(Tensor(logits), bare).item()
        want_drop = self._oracle(logits, t.cls, 2.0, 0.25) - self._oracle(
            logits, t.cls, 2.0, 0.25, t.ignore
        )
        assert without - with_ig == pytest.approx(want_drop, rel=1e-12)


class TestRegLoss:
    def test_zero_for_exact_prediction(self):
        grid = GridSpec(4, 4, 1.0, 4)
        t = build_targets([BBox7(0.2, 0.3, 0.8, 4.5, 2.0, 1.6, 0.2)], grid)
        reg = Tensor(t.reg.copy())
        assert reg_loss(reg, t).item() == 0.0

    def test_no_positives_gives_zero_with_graph(self):
        grid = GridSpec(4, 4, 1.0, 4)
        t = build_targets([], grid)
        reg = Tensor(np.ones((16, 3)), requires_grad=True)
        loss = reg_loss(reg, t)
        assert loss.item() == 0.0
        loss.backward()
        np.testing.assert_array_equal(reg.grad, 0.0)

    def test_only_positive_cells_contribute(self):
        grid = GridSpec(4, 4, 1.0, 4)
        t = build_targets([BBox7(0.5, 0.5, 0.8, 4.5, 2.0, 1.6, 0.0)], grid)
        reg = t.reg.copy()
        neg = np.flatnonzero(t.cls == 0)
        reg[neg] = 99.0  # garbage off-cell predictions are ignored
        assert reg_loss(Tensor(reg), t).item() == 0.0


class TestGradients:
    def test_detection_loss_gradcheck(self):
        rng = np.random.default_rng(4)
        grid = GridSpec(4, 4, 1.0, 6)
        fmap = Tensor(rng.normal(size=(6, 4, 4)), requires_grad=True)
        params = DetectionParams.random(6, rng)
        boxes = [
            BBox7(0.2, 0.3, 0.8, 4.5, 2.0, 1.6, 0.1),
            BBox7(-1.4, 1.2, 0.8, 4.5, 2.0, 1.6, -0.2),
        ]
        t = build_targets(boxes, grid)

        def f():
            cls_logits, reg = decode_heads(fmap, params)
            return detection_loss(cls_logits, reg, t)

        err = grad_check(f, [fmap] + params.tensors(), eps=1e-4)
        assert err < 1e-4
