"""Scenario generation, visibility, observation rendering, persistence."""

import math

import numpy as np
import pytest

from coopbev.geometry import BBox7, Pose2D
from coopbev.nn import MlpParams
from coopbev.scene import (
    DESC_COS,
    DESC_COUNT,
    DESC_DIST,
    DESC_OCC,
    DESC_OFF_X,
    DESC_OFF_Y,
    DESC_SIN,
    DESC_VIS,
    AgentSpec,
    GridSpec,
    ObjectTrack,
    Observation,
    ObservedBox,
    SceneConfig,
    Scenario,
    descriptor_map,
    generate_scenario,
    load_scenario,
    object_visible,
    proxy_encode,
    render_observation,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
)


def _static_scene(objects, agents, grid=None, **kw):
    grid = grid or GridSpec()
    specs = [
        AgentSpec(i, kw.pop("sensing_range", 70.0), (pose,))
        for i, pose in enumerate(agents)
    ]
    return Scenario(
        grid=grid,
        duration=1,
        dt=0.1,
        objects=tuple(ObjectTrack(b) for b in objects),
        agents=tuple(specs),
        **kw,
    )


class TestGridSpec:
    def test_origin_is_grid_center(self):
        g = GridSpec(64, 64, 1.0, 16)
        assert g.cell_of(0.0, 0.0) == (32, 32)
        assert g.cell_center(32, 32) == (0.5, 0.5)

    def test_cell_round_trip(self):
        g = GridSpec(16, 24, 0.5, 4)
        rng = np.random.default_rng(11)
        for _ in range(200):
            r = rng.integers(0, g.h)
            c = rng.integers(0, g.w)
            x, y = g.cell_center(int(r), int(c))
            assert g.cell_of(x, y) == (r, c)

    def test_boundaries(self):
        g = GridSpec(4, 4, 1.0, 2)
        assert g.cell_of(-2.0, -2.0) == (0, 0)  # inclusive lower edge
        assert g.cell_of(2.0, 0.0) is None  # exclusive upper edge
        assert g.cell_of(0.0, 2.0) is None
        assert g.cell_of(50.0, 0.0) is None

    def test_validation(self):
        with pytest.raises(ValueError):
            GridSpec(0, 4, 1.0, 2)
        with pytest.raises(ValueError):
            GridSpec(4, 4, 0.0, 2)


class TestObjectTrack:
    def test_constant_velocity(self):
        tr = ObjectTrack(BBox7(1.0, 2.0, 0.8, 4.5, 2.0, 1.6, 0.1), vx=1.0, vy=-2.0)
        b = tr.box_at(5, 0.1)
        assert b.x == pytest.approx(1.5, abs=1e-15)
        assert b.y == pytest.approx(1.0, abs=1e-15)
        assert (b.yaw, b.l, b.w, b.h, b.z) == (0.1, 4.5, 2.0, 1.6, 0.8)

    def test_t_zero_identity(self):
        tr = ObjectTrack(BBox7(1.0, 2.0, 0.8, 4.5, 2.0, 1.6, 0.1), vx=3.0, vy=0.0)
        assert tr.box_at(0, 0.1) is tr.box


class TestVisibility:
    def test_blocker_hides_object_behind_it(self):
        blocker = BBox7(10.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0)
        hidden = BBox7(17.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0)
        scn = _static_scene([blocker, hidden], [Pose2D(0, 0, 0)])
        assert object_visible(scn, scn.agents[0], 0, 0)
        assert not object_visible(scn, scn.agents[0], 1, 0)

    def test_off_axis_object_stays_visible(self):
        blocker = BBox7(10.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0)
        side = BBox7(17.0, 8.0, 0.8, 4.5, 2.0, 1.6, 0.0)
        scn = _static_scene([blocker, side], [Pose2D(0, 0, 0)])
        assert object_visible(scn, scn.agents[0], 1, 0)

    def test_flanking_agent_sees_past_blocker(self):
        blocker = BBox7(10.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0)
        hidden = BBox7(17.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0)
        scn = _static_scene([blocker, hidden], [Pose2D(0, 0, 0), Pose2D(14.0, 15.0, -1.5)])
        assert not object_visible(scn, scn.agents[0], 1, 0)
        assert object_visible(scn, scn.agents[1], 1, 0)

    def test_range_gate(self):
        far = BBox7(71.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0)
        near = BBox7(69.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0)
        scn = _static_scene([far], [Pose2D(0, 0, 0)])
        assert not object_visible(scn, scn.agents[0], 0, 0)
        scn = _static_scene([near], [Pose2D(0, 0, 0)])
        assert object_visible(scn, scn.agents[0], 0, 0)

    def test_rotated_blocker_still_blocks(self):
        # A quarter-turned car is narrow along the ray but long across it.
        blocker = BBox7(10.0, 0.0, 0.8, 4.5, 2.0, 1.6, math.pi / 2 - 1e-9)
        hidden = BBox7(16.0, 0.5, 0.8, 4.5, 2.0, 1.6, 0.0)
        scn = _static_scene([blocker, hidden], [Pose2D(0, 0, 0)])
        assert not object_visible(scn, scn.agents[0], 1, 0)

    def test_grazing_segment_misses(self):
        blocker = BBox7(10.0, 3.0, 0.8, 4.0, 2.0, 1.6, 0.0)  # spans y in [2, 4]
        target = BBox7(20.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0)  # ray along y=0
        scn = _static_scene([blocker, target], [Pose2D(0, 0, 0)])
        assert object_visible(scn, scn.agents[0], 1, 0)


class TestGenerate:
    def test_deterministic_in_seed(self):
        cfg = SceneConfig()
        a = generate_scenario(cfg, 42)
        b = generate_scenario(cfg, 42)
        c = generate_scenario(cfg, 43)
        assert scenario_to_dict(a) == scenario_to_dict(b)
        assert scenario_to_dict(a) != scenario_to_dict(c)

    def test_counts_and_shapes(self):
        cfg = SceneConfig(n_objects=9, n_agents=4, duration=5)
        scn = generate_scenario(cfg, 0)
        assert len(scn.objects) == 9
        assert len(scn.agents) == 4
        assert all(len(a.trajectory) == 5 for a in scn.agents)
        assert scn.agents[0].trajectory[0] == Pose2D(0.0, 0.0, 0.0)

    def test_footprints_disjoint_at_start(self):
        from coopbev.geometry import iou_matrix

        for seed in range(20):
            scn = generate_scenario(SceneConfig(), seed)
            m = iou_matrix(scn.world_boxes(0), scn.world_boxes(0))
            off_diag = m - np.eye(len(scn.objects))
            assert off_diag.max() == 0.0

    def test_objects_stay_on_ego_grid(self):
        cfg = SceneConfig()
        half = cfg.grid.h * cfg.grid.cell_size / 2
        for seed in range(20):
            scn = generate_scenario(cfg, seed)
            for t in range(scn.duration):
                for b in scn.world_boxes(t):
                    assert max(abs(b.x), abs(b.y)) < half

    def test_occlusion_preset_produces_covered_blind_spots(self):
        # The point of the preset: most scenes contain an object the ego
        # cannot see but some collaborator can.
        cfg = SceneConfig()
        hits = 0
        for seed in range(100):
            scn = generate_scenario(cfg, seed)
            found = False
            for i in range(len(scn.objects)):
                if object_visible(scn, scn.agents[0], i, 0):
                    continue
                if any(
                    object_visible(scn, a, i, 0) for a in scn.agents[1:]
                ):
                    found = True
                    break
            hits += found
        assert hits >= 95

    def test_open_preset_has_no_planted_pairs(self):
        scn = generate_scenario(SceneConfig(preset="open", n_objects=6), 1)
        assert len(scn.objects) == 6

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            SceneConfig(preset="wild")
        with pytest.raises(ValueError):
            SceneConfig(n_objects=0)


class TestRenderObservation:
    def test_noiseless_matches_exact_transform(self):
        cfg = SceneConfig(obs_noise=0.0, obs_noise_yaw=0.0)
        scn = generate_scenario(cfg, 3)
        agent = scn.agents[1]
        obs = render_observation(scn, agent, 0, np.random.default_rng(0))
        pose = agent.pose_at(0)
        vis_world = [
            b
            for i, b in enumerate(scn.world_boxes(0))
            if object_visible(scn, agent, i, 0)
        ]
        assert len(obs.boxes) == len(vis_world)
        for ob, wb in zip(obs.boxes, vis_world):
            lx, ly = pose.from_world(wb.x, wb.y)
            assert ob.box.x == pytest.approx(lx, abs=1e-12)
            assert ob.box.y == pytest.approx(ly, abs=1e-12)
            gx, gy = pose.to_world(ob.box.x, ob.box.y)
            assert gx == pytest.approx(wb.x, abs=1e-9)
            assert gy == pytest.approx(wb.y, abs=1e-9)

    def test_visibility_fraction(self):
        b = BBox7(35.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0)
        scn = _static_scene([b], [Pose2D(0, 0, 0)], obs_noise=0.0)
        obs = render_observation(scn, scn.agents[0], 0, np.random.default_rng(0))
        assert obs.boxes[0].visibility == pytest.approx(0.5, abs=1e-12)

    def test_noise_scales_with_distance(self):
        near = BBox7(7.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0)
        far = BBox7(0.0, 56.0, 0.8, 4.5, 2.0, 1.6, 0.0)
        scn = _static_scene([near, far], [Pose2D(0, 0, 0)], obs_noise=0.2)
        errs_near, errs_far = [], []
        for k in range(3000):
            obs = render_observation(
                scn, scn.agents[0], 0, np.random.default_rng(k)
            )
            errs_near.append(obs.boxes[0].box.x - 7.0)
            errs_far.append(obs.boxes[1].box.y - 56.0)
        # sigma = 0.2 * d / 70: 0.02 near, 0.16 far
        assert np.std(errs_near) == pytest.approx(0.02, rel=0.1)
        assert np.std(errs_far) == pytest.approx(0.16, rel=0.1)

    def test_same_rng_seed_reproduces(self):
        scn = generate_scenario(SceneConfig(), 5)
        a = render_observation(scn, scn.agents[0], 0, np.random.default_rng(9))
        b = render_observation(scn, scn.agents[0], 0, np.random.default_rng(9))
        assert a == b


class TestDescriptor:
    def _obs(self, boxes_vis):
        return Observation(
            0,
            0,
            Pose2D(0, 0, 0),
            tuple(ObservedBox(b, v) for b, v in boxes_vis),
        )

    def test_two_boxes_one_cell_means(self):
        g = GridSpec(8, 8, 2.0, 4)
        # Cell (5, 4) spans x in [2, 4), y in [0, 2); center (3, 1).
        b1 = BBox7(3.5, 0.5, 0.8, 4.5, 2.0, 1.6, 0.2)
        b2 = BBox7(2.5, 1.5, 0.8, 4.5, 2.0, 1.6, -0.2)
        d = descriptor_map(self._obs([(b1, 0.8), (b2, 0.4)]), g, 70.0)
        k = 5 * 8 + 4
        assert d[k, DESC_OCC] == 1.0
        assert d[k, DESC_COUNT] == 2.0
        assert d[k, DESC_OFF_X] == pytest.approx(0.0, abs=1e-12)
        assert d[k, DESC_OFF_Y] == pytest.approx(0.0, abs=1e-12)
        assert d[k, DESC_SIN] == pytest.approx(0.0, abs=1e-12)
        assert d[k, DESC_COS] == pytest.approx(math.cos(0.2), abs=1e-12)
        assert d[k, DESC_VIS] == pytest.approx(0.6, abs=1e-12)
        exp_dist = (math.hypot(3.5, 0.5) + math.hypot(2.5, 1.5)) / 2 / 70.0
        assert d[k, DESC_DIST] == pytest.approx(exp_dist, abs=1e-12)
        mask = np.ones(64, dtype=bool)
        mask[k] = False
        assert np.all(d[mask] == 0.0)

    def test_offsets_bounded_by_half_cell(self):
        scn = generate_scenario(SceneConfig(), 8)
        obs = render_observation(scn, scn.agents[0], 0, np.random.default_rng(1))
        d = descriptor_map(obs, scn.grid, 70.0)
        assert np.abs(d[:, [DESC_OFF_X, DESC_OFF_Y]]).max() <= 0.5

    def test_out_of_grid_boxes_dropped(self):
        g = GridSpec(4, 4, 1.0, 2)
        far = BBox7(30.0, 0.0, 0.8, 4.5, 2.0, 1.6, 0.0)
        d = descriptor_map(self._obs([(far, 1.0)]), g, 70.0)
        assert np.all(d == 0.0)


class TestProxyEncode:
    def test_shapes_and_empty_cells(self):
        scn = generate_scenario(SceneConfig(), 2)
        rng = np.random.default_rng(0)
        enc = MlpParams.init([8, scn.grid.channels], ["linear"], rng)
        obs = render_observation(scn, scn.agents[0], 0, np.random.default_rng(4))
        fmap, occ = proxy_encode(obs, scn.grid, enc, 70.0)
        assert fmap.data.shape == (scn.grid.channels, scn.grid.h, scn.grid.w)
        assert occ.shape == (scn.grid.h, scn.grid.w)
        assert occ.sum() == len(
            {scn.grid.cell_of(b.box.x, b.box.y) for b in obs.boxes}
        )
        # Zero-bias linear encoder maps the zero descriptor to zero features.
        empty = occ == 0
        assert np.all(fmap.data[:, empty] == 0.0)

    def test_feature_value_matches_manual_mlp(self):
        from coopbev.autodiff import Tensor
        from coopbev.nn import mlp_apply

        scn = generate_scenario(SceneConfig(), 6)
        enc = MlpParams.init([8, 6, scn.grid.channels], ["tanh", "linear"],
                             np.random.default_rng(3))
        obs = render_observation(scn, scn.agents[0], 0, np.random.default_rng(5))
        fmap, occ = proxy_encode(obs, scn.grid, enc, 70.0)
        d = descriptor_map(obs, scn.grid, 70.0)
        r, c = np.argwhere(occ)[0]
        want = mlp_apply(enc, Tensor(d[r * scn.grid.w + c])).data
        # batched vs single-row matmul may differ in the last ulp
        np.testing.assert_allclose(fmap.data[:, r, c], want, rtol=1e-14, atol=1e-15)


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        scn = generate_scenario(SceneConfig(n_agents=4, duration=6), 21)
        p = str(tmp_path / "scene.json")
        save_scenario(scn, p)
        back = load_scenario(p)
        assert scenario_to_dict(back) == scenario_to_dict(scn)
        for o1, o2 in zip(scn.objects, back.objects):
            assert o1.box.as_array7().tobytes() == o2.box.as_array7().tobytes()
            assert (o1.vx, o1.vy) == (o2.vx, o2.vy)

    def test_version_checked(self):
        d = scenario_to_dict(generate_scenario(SceneConfig(), 0))
        d["version"] = 99
        with pytest.raises(ValueError, match="version"):
            scenario_from_dict(d)

    def test_trajectory_length_validated(self):
        with pytest.raises(ValueError, match="trajectory"):
            Scenario(
                grid=GridSpec(),
                duration=3,
                dt=0.1,
                objects=(),
                agents=(AgentSpec(0, 70.0, (Pose2D(0, 0, 0),)),),
            )
