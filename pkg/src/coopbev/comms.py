"""Wire format, bandwidth accounting, and the lossy channel.

Messages carry selected feature cells and late-stage boxes as float32
with a small fixed header.  Transmission volume is scored on the payload
floats alone (feature values plus seven geometry values per box):
headers and the per-box score ride along as protocol overhead and are
excluded, so the reported volume is a property of what was selected,
not of framing.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2D, sample_pose_noise

MAGIC = b"MMCP"
WIRE_VERSION = 1
BOX_WIRE_VALUES = 8  # x, y, z, l, w, h, yaw, score
BOX_VOLUME_VALUES = 7  # score is overhead, not payload
_HEADER = struct.Struct("<4sBHIddd")
_CELL_HEAD = struct.Struct("<HH")


class WireError(ValueError):
    """Base for malformed-message errors."""


class BadMagicError(WireError):
    pass


class VersionError(WireError):
    pass


class TruncatedError(WireError):
    pass


@dataclass
class CoopMessage:
    """One agent-to-agent transmission for a single timestep.

    Feature cells are indexed in the sender's grid; the pose header lets
    the receiver re-project them.  Arrays are float32: what went on the
    wire is what you get back.
    """

    sender: int
    timestep: int
    pose: Pose2D
    feat_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    feat_cols: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    feats: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), np.float32))
    boxes: np.ndarray = field(
        default_factory=lambda: np.zeros((0, BOX_WIRE_VALUES), np.float32)
    )

    def __post_init__(self):
        if not 0 <= self.sender <= 0xFFFF:
            raise ValueError("sender must fit in u16")
        if not 0 <= self.timestep <= 0xFFFFFFFF:
            raise ValueError("timestep must fit in u32")
        self.feat_rows = np.asarray(self.feat_rows, dtype=np.uint16)
        self.feat_cols = np.asarray(self.feat_cols, dtype=np.uint16)
        self.feats = np.ascontiguousarray(self.feats, dtype=np.float32)
        self.boxes = np.ascontiguousarray(self.boxes, dtype=np.float32)
        n = self.feat_rows.size
        if self.feat_cols.size != n:
            raise ValueError("feature rows and cols must pair up")
        if self.feats.ndim != 2 or self.feats.shape[0] != n:
            raise ValueError("feats must be (n_cells, channels)")
        if self.boxes.ndim != 2 or (
            self.boxes.size and self.boxes.shape[1] != BOX_WIRE_VALUES
        ):
            raise ValueError(f"boxes must be (n, {BOX_WIRE_VALUES})")
        if n:
            flat = self.feat_rows.astype(np.int64) * 0x10000 + self.feat_cols
            if np.unique(flat).size != n:
                raise ValueError("duplicate feature cells in one message")
        if not np.isfinite(self.feats).all() or not np.isfinite(self.boxes).all():
            raise ValueError("non-finite payload values")

    @property
    def n_cells(self) -> int:
        return int(self.feat_rows.size)

    @property
    def n_boxes(self) -> int:
        return int(self.boxes.shape[0])

    @property
    def channels(self) -> int:
        return int(self.feats.shape[1])


def payload_bytes(n_cells: int, channels: int, n_boxes: int) -> int:
    """Float32 payload size the volume metric scores."""
    if min(n_cells, channels, n_boxes) < 0:
        raise ValueError("counts must be nonnegative")
    return 4 * (n_cells * channels + BOX_VOLUME_VALUES * n_boxes)


def bandwidth_volume(
    map_fraction: float, h: int, w: int, channels: int, n_boxes: int
) -> float:
    """log2 of payload bytes; an empty payload scores 0.

    `map_fraction` is the sent share of the h*w feature map, so a full
    intermediate-stage map is map_fraction=1.
    """
    if not 0.0 <= map_fraction <= 1.0:
        raise ValueError("map_fraction must be within [0, 1]")
    n_cells = round(map_fraction * h * w)
    nbytes = payload_bytes(n_cells, channels, n_boxes)
    return math.log2(nbytes) if nbytes else 0.0


def measured_volume(msg: CoopMessage, h: int, w: int, channels: int) -> float:
    """Volume of an actual message, via the same formula."""
    if msg.n_cells and msg.channels != channels:
        raise ValueError("message channel width does not match the grid")
    return bandwidth_volume(msg.n_cells / (h * w), h, w, channels, msg.n_boxes)


def serialize(msg: CoopMessage) -> bytes:
    parts = [
        _HEADER.pack(
            MAGIC,
            WIRE_VERSION,
            msg.sender,
            msg.timestep,
            msg.pose.x,
            msg.pose.y,
            msg.pose.heading,
        ),
        struct.pack("<I", msg.n_cells),
    ]
    for i in range(msg.n_cells):
        parts.append(_CELL_HEAD.pack(int(msg.feat_rows[i]), int(msg.feat_cols[i])))
        parts.append(msg.feats[i].astype("<f4", copy=False).tobytes())
    parts.append(struct.pack("<I", msg.n_boxes))
    parts.append(msg.boxes.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise TruncatedError(
                f"needed {n} bytes at offset {self.off}, have {len(self.data)}"
            )
        out = self.data[self.off : self.off + n]
        self.off += n
        return out


def deserialize(data: bytes, channels: int) -> CoopMessage:
    """Parse one message; `channels` is fixed by the deployment config.

    Raises BadMagicError / VersionError / TruncatedError, or WireError
    for content-level problems.
    """
    if channels < 1:
        raise ValueError("channels must be positive")
    rd = _Reader(data)
    magic, version, sender, timestep, px, py, ph = _HEADER.unpack(
        rd.take(_HEADER.size)
    )
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise VersionError(f"unsupported wire version {version}")
    (n_cells,) = struct.unpack("<I", rd.take(4))
    rows = np.zeros(n_cells, dtype=np.uint16)
    cols = np.zeros(n_cells, dtype=np.uint16)
    feats = np.zeros((n_cells, channels), dtype=np.float32)
    for i in range(n_cells):
        rows[i], cols[i] = _CELL_HEAD.unpack(rd.take(_CELL_HEAD.size))
        feats[i] = np.frombuffer(rd.take(4 * channels), dtype="<f4")
    (n_boxes,) = struct.unpack("<I", rd.take(4))
    boxes = (
        np.frombuffer(rd.take(4 * BOX_WIRE_VALUES * n_boxes), dtype="<f4")
        .reshape(n_boxes, BOX_WIRE_VALUES)
        .copy()
    )
    if rd.off != len(data):
        raise WireError(f"{len(data) - rd.off} trailing bytes")
    try:
        return CoopMessage(sender, timestep, Pose2D(px, py, ph), rows, cols,
                           feats, boxes)
    except ValueError as e:
        raise WireError(str(e)) from e


@dataclass(frozen=True)
class ChannelConfig:
    range_limit: float = 70.0
    sigma_xy: float = 0.0  # meters, header pose corruption
    sigma_heading: float = 0.0  # radians

    def __post_init__(self):
        if self.range_limit <= 0:
            raise ValueError("range_limit must be positive")
        if self.sigma_xy < 0 or self.sigma_heading < 0:
            raise ValueError("noise sigmas must be nonnegative")


def channel_apply(
    msg: CoopMessage,
    receiver_pose: Pose2D,
    cfg: ChannelConfig,
    rng: np.random.Generator,
):
    """Range gate plus header pose corruption.

    The drop decision uses the true sender pose (radio range is physical);
    the surviving message carries a noisy pose, which is what misaligns
    the receiver's re-projection.  Returns None when out of range.
    """
    dist = math.hypot(msg.pose.x - receiver_pose.x, msg.pose.y - receiver_pose.y)
    if dist > cfg.range_limit:
        return None
    if cfg.sigma_xy == 0.0 and cfg.sigma_heading == 0.0:
        return msg
    noisy = sample_pose_noise(rng, cfg.sigma_xy, cfg.sigma_heading)
    pose = Pose2D(
        msg.pose.x + noisy.x,
        msg.pose.y + noisy.y,
        msg.pose.heading + noisy.heading,
    )
    return CoopMessage(
        msg.sender, msg.timestep, pose, msg.feat_rows, msg.feat_cols,
        msg.feats, msg.boxes,
    )
