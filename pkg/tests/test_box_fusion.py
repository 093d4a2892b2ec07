"""Late-stage box calibration: deformable reads, refinement, losses."""

import math

import numpy as np
import pytest

from coopbev import autodiff as ad
from coopbev.autodiff import Tensor
from coopbev.box_fusion import (
    BoxAttnConfig,
    BoxCalibParams,
    CalibResult,
    box_input_vector,
    calibrate_received_boxes,
    calibration_losses,
    match_by_center,
)
from coopbev.geometry import BBox7
from coopbev.scene import GridSpec

GRID = GridSpec(16, 16, 1.0, 6)
CFG = BoxAttnConfig()


def _boxes():
    return [
        BBox7(1.0, 2.0, 0.8, 4.5, 2.0, 1.6, 0.1, 0.9),
        BBox7(-3.0, 0.5, 0.8, 4.4, 1.9, 1.5, -0.2, 0.4),
        BBox7(5.0, -4.0, 0.8, 4.6, 2.1, 1.7, 0.3, 0.7),
    ]


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            BoxAttnConfig(n_heads=0)
        with pytest.raises(ValueError):
            BoxAttnConfig(max_offset_xy=0.0)
        with pytest.raises(ValueError):
            BoxAttnConfig(score_floor=1.5)

    def test_input_vector(self):
        v = box_input_vector(BBox7(8.0, -4.0, 0.8, 4.5, 2.0, 1.6, 0.5, 0.7), GRID,
                             CFG.anchor)
        np.testing.assert_allclose(
            v,
            [1.0, -0.5, math.sin(0.5), math.cos(0.5), 0.0, 0.0, 0.0, 0.7],
            atol=1e-15,
        )


class TestReferenceIdentity:
    def test_boxes_unchanged_with_fixed_score(self):
        params = BoxCalibParams.reference(6, CFG)
        fmap = Tensor(np.random.default_rng(0).normal(size=(6, 16, 16)))
        res = calibrate_received_boxes(_boxes(), fmap, GRID, params, CFG)
        assert len(res.boxes) == 3
        for b_in, b_out in zip(_boxes(), res.boxes):
            assert (b_out.x, b_out.y, b_out.yaw) == (b_in.x, b_in.y, b_in.yaw)
            assert b_out.score == pytest.approx(0.65, abs=1e-12)
        np.testing.assert_array_equal(res.deltas.data, 0.0)

    def test_reference_passes_score_floor(self):
        params = BoxCalibParams.reference(6, CFG)
        fmap = Tensor(np.zeros((6, 16, 16)))
        res = calibrate_received_boxes(_boxes(), fmap, GRID, params, CFG)
        assert len(res.passing(CFG.score_floor)) == 3
        assert len(res.passing(0.7)) == 0


class TestCalibrate:
    def test_off_grid_boxes_dropped(self):
        params = BoxCalibParams.reference(6, CFG)
        fmap = Tensor(np.zeros((6, 16, 16)))
        boxes = _boxes() + [BBox7(40.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0, 0.8)]
        res = calibrate_received_boxes(boxes, fmap, GRID, params, CFG)
        np.testing.assert_array_equal(res.kept, [True, True, True, False])
        assert res.n_dropped == 1
        assert len(res.boxes) == 3

    def test_empty_input(self):
        params = BoxCalibParams.reference(6, CFG)
        fmap = Tensor(np.zeros((6, 16, 16)))
        res = calibrate_received_boxes([], fmap, GRID, params, CFG)
        assert res.boxes == [] and res.n_dropped == 0 and res.scores is None

    def test_outputs_respect_bounds(self):
        rng = np.random.default_rng(1)
        params = BoxCalibParams.random(6, 16, CFG, rng)
        fmap = Tensor(rng.normal(size=(6, 16, 16)))
        res = calibrate_received_boxes(_boxes(), fmap, GRID, params, CFG)
        assert np.all((res.scores.data > 0.0) & (res.scores.data < 1.0))
        assert np.abs(res.deltas.data[:, :2]).max() < CFG.max_offset_xy
        assert np.abs(res.deltas.data[:, 2]).max() < CFG.max_offset_yaw
        for b_in, b_out in zip(_boxes(), res.boxes):
            assert abs(b_out.x - b_in.x) < CFG.max_offset_xy
            assert (b_out.l, b_out.w, b_out.h, b_out.z) == (
                b_in.l, b_in.w, b_in.h, b_in.z)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        params = BoxCalibParams.random(6, 16, CFG, rng)
        fmap = Tensor(rng.normal(size=(6, 16, 16)))
        r1 = calibrate_received_boxes(_boxes(), fmap, GRID, params, CFG)
        r2 = calibrate_received_boxes(_boxes(), fmap, GRID, params, CFG)
        np.testing.assert_array_equal(r1.scores.data, r2.scores.data)
        np.testing.assert_array_equal(r1.deltas.data, r2.deltas.data)

    def test_reads_are_sensitive_to_the_map(self):
        rng = np.random.default_rng(3)
        params = BoxCalibParams.random(6, 16, CFG, rng)
        f1 = Tensor(rng.normal(size=(6, 16, 16)))
        f2 = Tensor(rng.normal(size=(6, 16, 16)))
        s1 = calibrate_received_boxes(_boxes(), f1, GRID, params, CFG).scores.data
        s2 = calibrate_received_boxes(_boxes(), f2, GRID, params, CFG).scores.data
        assert np.abs(s1 - s2).max() > 0.0

    def test_gate_gradient_reaches_sender(self):
        params = BoxCalibParams.random(6, 16, CFG, np.random.default_rng(4))
        fmap = Tensor(np.random.default_rng(5).normal(size=(6, 16, 16)))
        gates = [Tensor(1.0, requires_grad=True) for _ in range(3)]
        res = calibrate_received_boxes(_boxes(), fmap, GRID, params, CFG,
                                       gates=gates)
        gt = [BBox7(1.2, 2.1, 0.8, 4.5, 2.0, 1.6, 0.1)]
        loss, _ = calibration_losses(res, gt, CFG)
        loss.backward()
        assert all(g.grad is not None for g in gates)
        assert any(abs(float(g.grad)) > 0 for g in gates)


class TestMatching:
    def test_greedy_nearest(self):
        boxes = [BBox7(0.0, 0.0, 1, 1, 1, 1, 0), BBox7(1.0, 0.0, 1, 1, 1, 1, 0)]
        gt = [BBox7(0.9, 0.0, 1, 1, 1, 1, 0), BBox7(5.0, 5.0, 1, 1, 1, 1, 0)]
        m = match_by_center(boxes, gt, radius=2.0)
        assert m == [0, -1]  # first box grabs the close gt, second finds none

    def test_radius_gate(self):
        boxes = [BBox7(0.0, 0.0, 1, 1, 1, 1, 0)]
        gt = [BBox7(3.0, 0.0, 1, 1, 1, 1, 0)]
        assert match_by_center(boxes, gt, radius=2.0) == [-1]
        assert match_by_center(boxes, gt, radius=3.0) == [0]

    def test_gt_used_once(self):
        boxes = [BBox7(0.0, 0.0, 1, 1, 1, 1, 0), BBox7(0.1, 0.0, 1, 1, 1, 1, 0)]
        gt = [BBox7(0.0, 0.1, 1, 1, 1, 1, 0)]
        m = match_by_center(boxes, gt, radius=1.0)
        assert m == [0, -1]


class TestLosses:
    def test_value_matches_numpy_oracle(self):
        rng = np.random.default_rng(6)
        params = BoxCalibParams.random(6, 16, CFG, rng)
        fmap = Tensor(rng.normal(size=(6, 16, 16)))
        res = calibrate_received_boxes(_boxes(), fmap, GRID, params, CFG)
        gt = [
            BBox7(1.3, 2.2, 0.8, 4.5, 2.0, 1.6, 0.15),
            BBox7(-2.6, 0.4, 0.8, 4.4, 1.9, 1.5, -0.1),
        ]
        loss, nm = calibration_losses(res, gt, CFG)
        assert nm == 2

        def sl1(x):
            x = np.abs(x)
            return np.where(x < 1.0, 0.5 * x * x, x - 0.5)

        s = res.scores.data
        # matched score targets fall off with center distance
        y = np.array([1.0 - math.hypot(0.3, 0.2) / 2.5,
                      1.0 - math.hypot(0.4, -0.1) / 2.5,
                      0.0])
        bce = -(y * np.log(s) + (1 - y) * np.log(1 - s))
        tgt = np.array([[0.3, 0.2], [0.4, -0.1]])
        tyaw = np.array([0.05, 0.1])
        err_xy = (res.deltas.data[:2, :2] - tgt) / CFG.offset_loss_scale
        err_yaw = (res.deltas.data[:2, 2] - tyaw) / CFG.max_offset_yaw
        want = bce.mean() + sl1(err_xy).mean() + sl1(err_yaw).mean()
        assert loss.item() == pytest.approx(want, rel=1e-9)

    def test_unmatched_only_uses_score_term(self):
        params = BoxCalibParams.reference(6, CFG)
        fmap = Tensor(np.zeros((6, 16, 16)))
        res = calibrate_received_boxes(_boxes(), fmap, GRID, params, CFG)
        loss, nm = calibration_losses(res, [], CFG)
        assert nm == 0
        assert loss.item() == pytest.approx(-math.log(1.0 - 0.65), rel=1e-9)

    def test_empty_result_rejected(self):
        res = CalibResult(boxes=[], kept=np.zeros(0, dtype=bool))
        with pytest.raises(ValueError):
            calibration_losses(res, [], CFG)


class TestTrainsToCorrectBias:
    def test_learns_systematic_offset(self):
        # Received boxes sit 0.4 m east of truth; a short training run on
        # the calibration loss should learn to pull them back.
        rng = np.random.default_rng(7)
        params = BoxCalibParams.reference(6, CFG)
        fmap = Tensor(rng.normal(size=(6, 16, 16)))
        gt = [
            BBox7(x, y, 0.8, 4.5, 2.0, 1.6, 0.0)
            for x, y in [(-5.0, -5.0), (-5.0, 5.0), (0.0, 0.0), (4.0, -3.0),
                         (5.0, 5.0), (-2.0, 3.0)]
        ]
        recv = [
            BBox7(g.x + 0.4, g.y, g.z, g.l, g.w, g.h, g.yaw, 0.6) for g in gt
        ]
        tensors = params.tensors()
        lr = 0.05
        for step in range(400):
            for t in tensors:
                t.zero_grad()
            res = calibrate_received_boxes(recv, fmap, GRID, params, CFG)
            loss, nm = calibration_losses(res, gt, CFG)
            assert nm == len(gt)
            loss.backward()
            with ad.no_grad():
                for t in tensors:
                    if t.grad is not None:
                        t.data -= lr * t.grad
        res = calibrate_received_boxes(recv, fmap, GRID, params, CFG)
        err_x = np.array([b.x for b in res.boxes]) - np.array([g.x for g in gt])
        assert np.abs(err_x).mean() < 0.1
        # score target for a 0.4 m displaced match is 1 - 0.4/2.5 = 0.84
        assert res.scores.data.min() > 0.75
        assert np.abs(res.scores.data - 0.84).max() < 0.08
