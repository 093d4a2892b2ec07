"""Synthetic planar scenes: moving oriented boxes observed by BEV agents.

A scenario is a deterministic function of its seed: objects move with
constant planar velocity, agents hold fixed poses, and an object is
visible to an agent iff it is within sensing range and the sight line to
its center crosses no other object's footprint.  Observations are the
only sensing the pipeline gets; the per-cell descriptor built from them
stands in for a learned point-cloud encoder.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from . import autodiff as ad
from .geometry import BBox7, Pose2D, wrap_angle
from .nn import MlpParams, mlp_apply

SCENARIO_SCHEMA_VERSION = 1

# Descriptor channel layout; empty cells hold the zero descriptor.
DESC_OCC = 0
DESC_COUNT = 1
DESC_OFF_X = 2
DESC_OFF_Y = 3
DESC_SIN = 4
DESC_COS = 5
DESC_VIS = 6
DESC_DIST = 7
DESC_DIM = 8


@dataclass(frozen=True)
class GridSpec:
    """Agent-centered BEV grid: h x w cells of cell_size meters, channels deep.

    Cell (r, c) covers x in [r*cs - H/2, (r+1)*cs - H/2) along the agent
    x axis, likewise for y; the agent sits at the grid center.
    """

    h: int = 64
    w: int = 64
    cell_size: float = 1.0
    channels: int = 16

    def __post_init__(self):
        if self.h < 1 or self.w < 1 or self.channels < 1:
            raise ValueError("grid dims must be positive")
        if self.cell_size <= 0.0:
            raise ValueError("cell_size must be positive")

    @property
    def n_cells(self) -> int:
        return self.h * self.w

    @property
    def x_min(self) -> float:
        return -0.5 * self.h * self.cell_size

    @property
    def y_min(self) -> float:
        return -0.5 * self.w * self.cell_size

    def cell_of(self, x: float, y: float):
        """Cell containing the point, or None when outside the grid."""
        r = math.floor((x - self.x_min) / self.cell_size)
        c = math.floor((y - self.y_min) / self.cell_size)
        if 0 <= r < self.h and 0 <= c < self.w:
            return (int(r), int(c))
        return None

    def cell_center(self, r: int, c: int) -> tuple:
        return (
            self.x_min + (r + 0.5) * self.cell_size,
            self.y_min + (c + 0.5) * self.cell_size,
        )


@dataclass(frozen=True)
class ObjectTrack:
    """A box at t=0 (world frame) moving with constant planar velocity."""

    box: BBox7
    vx: float = 0.0
    vy: float = 0.0

    def box_at(self, t: int, dt: float) -> BBox7:
        if t == 0:
            return self.box
        return BBox7(
            self.box.x + self.vx * t * dt,
            self.box.y + self.vy * t * dt,
            self.box.z,
            self.box.l,
            self.box.w,
            self.box.h,
            self.box.yaw,
            self.box.score,
        )


@dataclass(frozen=True)
class AgentSpec:
    agent_id: int
    sensing_range: float
    trajectory: tuple  # Pose2D per timestep

    def pose_at(self, t: int) -> Pose2D:
        return self.trajectory[t]


@dataclass(frozen=True)
class Scenario:
    grid: GridSpec
    duration: int
    dt: float
    objects: tuple
    agents: tuple
    obs_noise: float = 0.15
    obs_noise_yaw: float = 0.02

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError("duration must be at least one step")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if len(self.agents) < 1:
            raise ValueError("need at least one agent")
        for a in self.agents:
            if len(a.trajectory) != self.duration:
                raise ValueError("agent trajectory length must equal duration")

    @property
    def ego(self) -> AgentSpec:
        return self.agents[0]

    def world_boxes(self, t: int) -> list:
        return [o.box_at(t, self.dt) for o in self.objects]


@dataclass(frozen=True)
class ObservedBox:
    box: BBox7  # agent frame, noisy
    visibility: float


@dataclass(frozen=True)
class Observation:
    agent_id: int
    t: int
    pose: Pose2D  # true pose at t
    boxes: tuple


def _segment_hits_footprint(x0, y0, x1, y1, rect: BBox7) -> bool:
    """Liang-Barsky test of the segment against the rect's local AABB."""
    c, s = math.cos(rect.yaw), math.sin(rect.yaw)

    def local(px, py):
        dx, dy = px - rect.x, py - rect.y
        return (c * dx + s * dy, -s * dx + c * dy)

    ax, ay = local(x0, y0)
    bx, by = local(x1, y1)
    dx, dy = bx - ax, by - ay
    t0, t1 = 0.0, 1.0
    for p, q in (
        (-dx, ax + rect.l / 2),
        (dx, rect.l / 2 - ax),
        (-dy, ay + rect.w / 2),
        (dy, rect.w / 2 - ay),
    ):
        if p == 0.0:
            if q < 0.0:
                return False
            continue
        r = q / p
        if p < 0.0:
            if r > t1:
                return False
            if r > t0:
                t0 = r
        else:
            if r < t0:
                return False
            if r < t1:
                t1 = r
    return t0 <= t1


def object_visible(scn: Scenario, agent: AgentSpec, obj_idx: int, t: int) -> bool:
    """Range gate plus a center sight-line test against other footprints."""
    pose = agent.pose_at(t)
    boxes = scn.world_boxes(t)
    target = boxes[obj_idx]
    dist = math.hypot(target.x - pose.x, target.y - pose.y)
    if dist > agent.sensing_range:
        return False
    for j, other in enumerate(boxes):
        if j == obj_idx:
            continue
        if _segment_hits_footprint(pose.x, pose.y, target.x, target.y, other):
            return False
    return True


def render_observation(
    scn: Scenario, agent: AgentSpec, t: int, rng: np.random.Generator
) -> Observation:
    """Noisy agent-frame boxes for every object visible to the agent at t.

    Center noise grows linearly with distance: sigma = obs_noise * d / range.
    Each candidate object consumes a fixed number of draws whether or not
    it ends up visible, so the stream stays aligned across configurations.
    """
    pose = agent.pose_at(t)
    boxes = scn.world_boxes(t)
    observed = []
    for i, wb in enumerate(boxes):
        dist = math.hypot(wb.x - pose.x, wb.y - pose.y)
        sigma = scn.obs_noise * dist / agent.sensing_range
        dx = rng.normal(0.0, sigma)
        dy = rng.normal(0.0, sigma)
        dyaw = rng.normal(0.0, scn.obs_noise_yaw)
        if not object_visible(scn, agent, i, t):
            continue
        lx, ly = pose.from_world(wb.x, wb.y)
        observed.append(
            ObservedBox(
                box=BBox7(
                    lx + dx,
                    ly + dy,
                    wb.z,
                    wb.l,
                    wb.w,
                    wb.h,
                    wrap_angle(wb.yaw - pose.heading + dyaw),
                ),
                visibility=max(0.0, 1.0 - dist / agent.sensing_range),
            )
        )
    return Observation(agent.agent_id, t, pose, tuple(observed))


def descriptor_map(obs: Observation, grid: GridSpec, sensing_range: float) -> np.ndarray:
    """Per-cell mean descriptor of the observed boxes, shape (h*w, DESC_DIM)."""
    desc = np.zeros((grid.n_cells, DESC_DIM), dtype=np.float64)
    counts = np.zeros(grid.n_cells, dtype=np.float64)
    for ob in obs.boxes:
        cell = grid.cell_of(ob.box.x, ob.box.y)
        if cell is None:
            continue
        r, c = cell
        k = r * grid.w + c
        cx, cy = grid.cell_center(r, c)
        counts[k] += 1.0
        desc[k, DESC_COUNT] += 1.0
        desc[k, DESC_OFF_X] += (ob.box.x - cx) / grid.cell_size
        desc[k, DESC_OFF_Y] += (ob.box.y - cy) / grid.cell_size
        desc[k, DESC_SIN] += math.sin(ob.box.yaw)
        desc[k, DESC_COS] += math.cos(ob.box.yaw)
        desc[k, DESC_VIS] += ob.visibility
        desc[k, DESC_DIST] += (
            math.hypot(ob.box.x, ob.box.y) / sensing_range
        )
    occupied = counts > 0.0
    mean_cols = [DESC_OFF_X, DESC_OFF_Y, DESC_SIN, DESC_COS, DESC_VIS, DESC_DIST]
    for col in mean_cols:
        desc[occupied, col] /= counts[occupied]
    desc[occupied, DESC_OCC] = 1.0
    return desc


def proxy_encode(
    obs: Observation, grid: GridSpec, enc: MlpParams, sensing_range: float
):
    """Per-cell MLP over the descriptor: returns ((C, H, W) features, occupancy).

    Empty cells all map to enc(zero descriptor).
    """
    desc = descriptor_map(obs, grid, sensing_range)
    feats = mlp_apply(enc, Tensor(desc))  # (h*w, C)
    fmap = ad.reshape(
        ad.transpose(feats), (grid.channels, grid.h, grid.w)
    )
    occupancy = (desc[:, DESC_OCC] > 0.0).astype(np.uint8).reshape(grid.h, grid.w)
    return fmap, occupancy


# -- generation ----------------------------------------------------------------


@dataclass(frozen=True)
class SceneConfig:
    preset: str = "occlusion"  # "occlusion" or "open"
    n_objects: int = 12
    n_occluded_pairs: int = 3
    n_agents: int = 3
    area_half: float = 22.0
    speed_max: float = 2.5
    yaw_half_range: float = 0.5
    agent_radius: float = 16.0
    sensing_range: float = 70.0
    duration: int = 8
    dt: float = 0.1
    obs_noise: float = 0.15
    obs_noise_yaw: float = 0.02
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        if self.preset not in ("occlusion", "open"):
            raise ValueError("preset must be 'occlusion' or 'open'")
        if self.n_objects < 1 or self.n_agents < 1:
            raise ValueError("need at least one object and one agent")


def _draw_size(rng) -> tuple:
    l = rng.uniform(4.2, 4.8)
    w = rng.uniform(1.8, 2.1)
    h = rng.uniform(1.5, 1.8)
    return l, w, h


def _clear_of(x, y, placed, min_gap) -> bool:
    return all(math.hypot(x - px, y - py) >= min_gap for px, py in placed)


def generate_scenario(cfg: SceneConfig, seed: int) -> Scenario:
    """Build a scenario deterministically from (cfg, seed).

    The occlusion preset plants blocker/hidden object pairs on rays from
    the ego so that several objects start outside the ego's view; flanking
    agents are placed to see past the blockers.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 9001)))
    placed: list = []
    objects: list = []
    # Max footprint half-diagonal is hypot(4.8, 2.1)/2 ~ 2.62 m, so a 5.6 m
    # center gap keeps every pair of footprints disjoint.
    min_gap = 5.6

    def place_object(x, y, yaw, speed) -> None:
        l, w, h = _draw_size(rng)
        vx, vy = speed * math.cos(yaw), speed * math.sin(yaw)
        objects.append(
            ObjectTrack(BBox7(x, y, h / 2.0, l, w, h, yaw), vx, vy)
        )
        placed.append((x, y))

    n_pairs = min(cfg.n_occluded_pairs, cfg.n_objects // 2) if cfg.preset == "occlusion" else 0
    ray_angles = []
    for k in range(n_pairs):
        for _ in range(200):
            phi = rng.uniform(-math.pi, math.pi)
            d1 = rng.uniform(7.0, 11.0)
            d2 = d1 + rng.uniform(5.8, 9.0)
            bx, by = d1 * math.cos(phi), d1 * math.sin(phi)
            jitter = rng.uniform(-0.3, 0.3)
            hx = d2 * math.cos(phi) - jitter * math.sin(phi)
            hy = d2 * math.sin(phi) + jitter * math.cos(phi)
            if _clear_of(bx, by, placed, min_gap) and _clear_of(hx, hy, placed, min_gap):
                yaw_b = rng.uniform(-cfg.yaw_half_range, cfg.yaw_half_range)
                yaw_h = rng.uniform(-cfg.yaw_half_range, cfg.yaw_half_range)
                place_object(bx, by, yaw_b, 0.0)
                place_object(hx, hy, yaw_h, 0.0)
                ray_angles.append(phi)
                break
        else:
            raise RuntimeError("could not place an occlusion pair; relax the config")

    while len(objects) < cfg.n_objects:
        for _ in range(500):
            x = rng.uniform(-cfg.area_half, cfg.area_half)
            y = rng.uniform(-cfg.area_half, cfg.area_half)
            if math.hypot(x, y) < 6.0:
                continue
            if _clear_of(x, y, placed, min_gap):
                yaw = rng.uniform(-cfg.yaw_half_range, cfg.yaw_half_range)
                speed = 0.0 if rng.uniform() < 0.3 else rng.uniform(0.5, cfg.speed_max)
                place_object(x, y, yaw, speed)
                break
        else:
            raise RuntimeError("could not place a free object; relax the config")

    agents = [
        AgentSpec(
            0,
            cfg.sensing_range,
            tuple(Pose2D(0.0, 0.0, 0.0) for _ in range(cfg.duration)),
        )
    ]
    for a in range(1, cfg.n_agents):
        if ray_angles:
            phi = ray_angles[(a - 1) % len(ray_angles)]
            side = 1.0 if (a % 2 == 0) else -1.0
            ang = phi + side * rng.uniform(1.1, 1.6)
        else:
            ang = rng.uniform(-math.pi, math.pi)
        radius = cfg.agent_radius + rng.uniform(-2.0, 2.0)
        ax, ay = radius * math.cos(ang), radius * math.sin(ang)
        # Sensing grids are world-axis-aligned (translation-only frames),
        # the usual north-up convention: transmitted cell content then
        # stays frame-consistent across agents.  Heading misalignment is
        # still exercised through claimed-pose noise.
        agents.append(
            AgentSpec(
                a,
                cfg.sensing_range,
                tuple(Pose2D(ax, ay, 0.0) for _ in range(cfg.duration)),
            )
        )

    return Scenario(
        grid=cfg.grid,
        duration=cfg.duration,
        dt=cfg.dt,
        objects=tuple(objects),
        agents=tuple(agents),
        obs_noise=cfg.obs_noise,
        obs_noise_yaw=cfg.obs_noise_yaw,
    )


# -- persistence -----------------------------------------------------------------


def scenario_to_dict(scn: Scenario) -> dict:
    return {
        "version": SCENARIO_SCHEMA_VERSION,
        "grid": {
            "h": scn.grid.h,
            "w": scn.grid.w,
            "cell_size": scn.grid.cell_size,
            "channels": scn.grid.channels,
        },
        "duration": scn.duration,
        "dt": scn.dt,
        "obs_noise": scn.obs_noise,
        "obs_noise_yaw": scn.obs_noise_yaw,
        "objects": [
            {
                "box": [o.box.x, o.box.y, o.box.z, o.box.l, o.box.w, o.box.h, o.box.yaw],
                "vel": [o.vx, o.vy],
            }
            for o in scn.objects
        ],
        "agents": [
            {
                "id": a.agent_id,
                "sensing_range": a.sensing_range,
                "trajectory": [[p.x, p.y, p.heading] for p in a.trajectory],
            }
            for a in scn.agents
        ],
    }


def scenario_from_dict(d: dict) -> Scenario:
    if d.get("version") != SCENARIO_SCHEMA_VERSION:
        raise ValueError(f"unsupported scenario schema version: {d.get('version')!r}")
    g = d["grid"]
    return Scenario(
        grid=GridSpec(g["h"], g["w"], g["cell_size"], g["channels"]),
        duration=d["duration"],
        dt=d["dt"],
        objects=tuple(
            ObjectTrack(BBox7(*o["box"]), o["vel"][0], o["vel"][1])
            for o in d["objects"]
        ),
        agents=tuple(
            AgentSpec(
                a["id"],
                a["sensing_range"],
                tuple(Pose2D(*p) for p in a["trajectory"]),
            )
            for a in d["agents"]
        ),
        obs_noise=d["obs_noise"],
        obs_noise_yaw=d["obs_noise_yaw"],
    )


def save_scenario(scn: Scenario, path: str) -> None:
    """Atomic write; floats survive the JSON round trip bit-exactly."""
    payload = json.dumps(scenario_to_dict(scn), indent=1, sort_keys=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "w") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_scenario(path: str) -> Scenario:
    with open(path) as f:
        return scenario_from_dict(json.load(f))
