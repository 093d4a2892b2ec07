"""Wire round trips, malformed-input errors, volume accounting, channel."""

import math
import struct

import numpy as np
import pytest

from coopbev.comms import (
    BadMagicError,
    ChannelConfig,
    CoopMessage,
    TruncatedError,
    VersionError,
    WireError,
    bandwidth_volume,
    channel_apply,
    deserialize,
    measured_volume,
    payload_bytes,
    serialize,
)
from coopbev.geometry import Pose2D

# log2 oracles computed independently with 50-digit arithmetic
LOG2_28 = 4.8073549220576041074
LOG2_84 = 6.3923174227787602889
LOG2_9011200 = 23.103287808412021952


def _msg(n_cells=3, channels=4, n_boxes=2, seed=0):
    rng = np.random.default_rng(seed)
    flat = rng.choice(64 * 64, size=n_cells, replace=False)
    boxes = np.zeros((n_boxes, 8), dtype=np.float32)
    if n_boxes:
        boxes[:, :7] = rng.normal(size=(n_boxes, 7)).astype(np.float32)
        boxes[:, 3:6] = np.abs(boxes[:, 3:6]) + 1.0
        boxes[:, 7] = rng.uniform(0, 1, size=n_boxes).astype(np.float32)
    return CoopMessage(
        sender=7,
        timestep=42,
        pose=Pose2D(1.25, -3.5, 0.125),
        feat_rows=(flat // 64).astype(np.uint16),
        feat_cols=(flat % 64).astype(np.uint16),
        feats=rng.normal(size=(n_cells, channels)).astype(np.float32),
        boxes=boxes,
    )


class TestRoundTrip:
    def test_bit_exact(self):
        for seed in range(10):
            msg = _msg(n_cells=5, channels=6, n_boxes=3, seed=seed)
            back = deserialize(serialize(msg), channels=6)
            assert back.sender == msg.sender
            assert back.timestep == msg.timestep
            assert back.pose == msg.pose  # f64 header survives exactly
            np.testing.assert_array_equal(back.feat_rows, msg.feat_rows)
            np.testing.assert_array_equal(back.feat_cols, msg.feat_cols)
            assert back.feats.tobytes() == msg.feats.tobytes()
            assert back.boxes.tobytes() == msg.boxes.tobytes()

    def test_empty_message(self):
        msg = CoopMessage(0, 0, Pose2D(0, 0, 0), feats=np.zeros((0, 4), np.float32))
        back = deserialize(serialize(msg), channels=4)
        assert back.n_cells == 0 and back.n_boxes == 0

    def test_reserialization_identical(self):
        msg = _msg(seed=3)
        wire = serialize(msg)
        assert serialize(deserialize(wire, channels=4)) == wire


class TestWireErrors:
    def test_bad_magic(self):
        wire = bytearray(serialize(_msg()))
        wire[:4] = b"NOPE"
        with pytest.raises(BadMagicError):
            deserialize(bytes(wire), channels=4)

    def test_bad_version(self):
        wire = bytearray(serialize(_msg()))
        wire[4] = 99
        with pytest.raises(VersionError):
            deserialize(bytes(wire), channels=4)

    def test_truncation_everywhere(self):
        wire = serialize(_msg())
        for cut in (3, 10, len(wire) // 2, len(wire) - 1):
            with pytest.raises(TruncatedError):
                deserialize(wire[:cut], channels=4)

    def test_trailing_bytes_rejected(self):
        wire = serialize(_msg())
        with pytest.raises(WireError, match="trailing"):
            deserialize(wire + b"\x00", channels=4)

    def test_wrong_channel_count_detected_via_layout(self):
        wire = serialize(_msg(n_cells=2, channels=4))
        with pytest.raises(WireError):
            deserialize(wire, channels=8)

    def test_duplicate_cells_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            CoopMessage(
                0, 0, Pose2D(0, 0, 0),
                feat_rows=[1, 1], feat_cols=[2, 2],
                feats=np.zeros((2, 4), np.float32),
            )

    def test_nonfinite_rejected(self):
        feats = np.zeros((1, 4), np.float32)
        feats[0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            CoopMessage(0, 0, Pose2D(0, 0, 0), [1], [2], feats)

    def test_id_ranges(self):
        with pytest.raises(ValueError):
            CoopMessage(70000, 0, Pose2D(0, 0, 0))
        with pytest.raises(ValueError):
            CoopMessage(0, -1, Pose2D(0, 0, 0))


class TestVolume:
    def test_full_map_is_18_bits_exactly(self):
        assert bandwidth_volume(1.0, 64, 64, 16, 0) == 18.0

    def test_empty_payload_scores_zero(self):
        assert bandwidth_volume(0.0, 64, 64, 16, 0) == 0.0

    def test_box_only_oracles(self):
        assert bandwidth_volume(0.0, 64, 64, 16, 1) == pytest.approx(
            LOG2_28, abs=1e-12
        )
        assert bandwidth_volume(0.0, 64, 64, 16, 3) == pytest.approx(
            LOG2_84, abs=1e-12
        )

    def test_large_map_oracle(self):
        assert bandwidth_volume(1.0, 100, 352, 64, 0) == pytest.approx(
            LOG2_9011200, abs=1e-12
        )

    def test_payload_bytes(self):
        assert payload_bytes(0, 16, 0) == 0
        assert payload_bytes(0, 16, 1) == 28
        assert payload_bytes(10, 16, 2) == 4 * (160 + 14)
        with pytest.raises(ValueError):
            payload_bytes(-1, 16, 0)

    def test_measured_matches_formula(self):
        for n_cells, n_boxes in ((0, 0), (5, 0), (0, 4), (12, 3)):
            msg = _msg(n_cells=n_cells, channels=16, n_boxes=n_boxes, seed=1)
            got = measured_volume(msg, 64, 64, 16)
            want = bandwidth_volume(n_cells / 4096, 64, 64, 16, n_boxes)
            assert got == want

    def test_partial_map_matches_hand_formula(self):
        msg = _msg(n_cells=100, channels=16, n_boxes=5, seed=2)
        want = math.log2(4 * (100 * 16 + 7 * 5))
        assert measured_volume(msg, 64, 64, 16) == pytest.approx(want, abs=1e-15)

    def test_channel_mismatch_rejected(self):
        msg = _msg(n_cells=2, channels=4)
        with pytest.raises(ValueError):
            measured_volume(msg, 64, 64, 16)

    def test_monotone_in_content(self):
        base = bandwidth_volume(0.3, 64, 64, 16, 2)
        assert bandwidth_volume(0.4, 64, 64, 16, 2) > base
        assert bandwidth_volume(0.3, 64, 64, 16, 3) > base


class TestChannel:
    def test_in_range_noiseless_passthrough(self):
        msg = _msg()
        out = channel_apply(
            msg, Pose2D(5.0, 0.0, 0.0), ChannelConfig(), np.random.default_rng(0)
        )
        assert out is msg

    def test_range_gate(self):
        msg = _msg()  # sender at (1.25, -3.5)
        cfg = ChannelConfig(range_limit=10.0)
        near = channel_apply(msg, Pose2D(8.0, -3.5, 0.0), cfg,
                             np.random.default_rng(0))
        far = channel_apply(msg, Pose2D(12.0, -3.5, 0.0), cfg,
                            np.random.default_rng(0))
        assert near is not None and far is None

    def test_pose_noise_statistics(self):
        msg = _msg(n_cells=0, n_boxes=0, channels=4)
        cfg = ChannelConfig(sigma_xy=0.2, sigma_heading=0.01)
        rng = np.random.default_rng(9)
        dx, dh = [], []
        for _ in range(4000):
            out = channel_apply(msg, Pose2D(0, 0, 0), cfg, rng)
            dx.append(out.pose.x - msg.pose.x)
            dh.append(out.pose.heading - msg.pose.heading)
        assert np.mean(dx) == pytest.approx(0.0, abs=0.02)
        assert np.std(dx) == pytest.approx(0.2, rel=0.08)
        assert np.std(dh) == pytest.approx(0.01, rel=0.08)

    def test_payload_untouched_by_noise(self):
        msg = _msg(n_cells=4, channels=4, n_boxes=2)
        cfg = ChannelConfig(sigma_xy=0.5)
        out = channel_apply(msg, Pose2D(0, 0, 0), cfg, np.random.default_rng(1))
        assert out.feats.tobytes() == msg.feats.tobytes()
        assert out.boxes.tobytes() == msg.boxes.tobytes()
        assert out.pose != msg.pose

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ChannelConfig(range_limit=0.0)
        with pytest.raises(ValueError):
            ChannelConfig(sigma_xy=-0.1)
