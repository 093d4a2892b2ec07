"""Small-scale end-to-end training: plain full-batch gradient descent.

The batch is a fixed set of (scene, frame) pairs; each step re-runs the
differentiable pipeline on all of them, averages the frame losses,
backpropagates, and takes one SGD step on every parameter tensor.
Per-step seeds re-draw the stage routing, observation noise, and channel
noise, so the optimizer sees the conditions evaluation will use.  The
whole run is deterministic: the loss curve reproduces bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .comms import ChannelConfig
from .params import ModelConfig, ModelParams
from .pipeline import PipelineConfig, run_frame
from .scene import SceneConfig, generate_scenario

_TAG_SCENE = 40
_TAG_STEP = 41


def _default_pipeline() -> PipelineConfig:
    return PipelineConfig(
        channel=ChannelConfig(sigma_xy=0.2, sigma_heading=0.2 * math.pi / 180.0)
    )


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    lr: float = 0.01
    seed: int = 0
    n_scenes: int = 2
    frames_per_scene: int = 2
    init: str = "reference"  # or "random"
    scene: SceneConfig = field(default_factory=SceneConfig)
    pipeline: PipelineConfig = field(default_factory=_default_pipeline)

    def __post_init__(self):
        if self.steps < 1 or self.n_scenes < 1 or self.frames_per_scene < 1:
            raise ValueError("steps, n_scenes, frames_per_scene must be positive")
        if self.lr < 0.0:
            raise ValueError("lr must be non-negative")
        if self.init not in ("reference", "random"):
            raise ValueError("init must be 'reference' or 'random'")
        if self.frames_per_scene > self.scene.duration:
            raise ValueError("frames_per_scene exceeds the scene duration")


@dataclass
class TrainResult:
    losses: list  # one float per step
    params: ModelParams

    @property
    def reduction(self) -> float:
        """Fractional drop from the first to the last recorded loss."""
        return 1.0 - self.losses[-1] / self.losses[0]


def train_toy(cfg: TrainConfig, params: ModelParams = None) -> TrainResult:
    if params is None:
        if cfg.init == "reference":
            params = ModelParams.reference(ModelConfig(channels=cfg.scene.grid.channels))
        else:
            params = ModelParams.random(
                ModelConfig(channels=cfg.scene.grid.channels),
                np.random.default_rng(np.random.SeedSequence((cfg.seed, 39))),
            )
    scene_seeds = np.random.SeedSequence((cfg.seed, _TAG_SCENE)).generate_state(
        cfg.n_scenes
    )
    scenes = [generate_scenario(cfg.scene, seed=int(s)) for s in scene_seeds]
    batch = [(scn, t) for scn in scenes for t in range(cfg.frames_per_scene)]
    tensors = params.tensors()

    losses = []
    for step in range(cfg.steps):
        step_seed = int(
            np.random.SeedSequence((cfg.seed, _TAG_STEP, step)).generate_state(1)[0]
        )
        for t in tensors:
            t.grad = None
        frame_losses = [
            run_frame(scn, t, params, cfg.pipeline, seed=step_seed, training=True).loss
            for scn, t in batch
        ]
        total = ad.mul(reduce(ad.add, frame_losses), 1.0 / len(frame_losses))
        if not np.isfinite(total.data):
            raise RuntimeError(f"non-finite loss at step {step}: {total.data!r}")
        total.backward()
        if cfg.lr > 0.0:
            with no_grad():
                for t in tensors:
                    if t.grad is not None:
                        t.data = t.data - cfg.lr * t.grad
        losses.append(float(total.data))
    return TrainResult(losses=losses, params=params)
