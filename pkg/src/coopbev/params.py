"""The full trainable parameter bundle, with save/load.

Two construction schemes exist: `random` for training from scratch, and
`reference`, a hand-wired structured setting in which the encoder is an
identity over the cell descriptor, the heads read known channels, and
every fusion block starts as a well-behaved default (pass received
features through, keep received boxes, moderate confidences).  The
reference scheme makes the whole pipeline functional without training,
and training refines it.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .box_fusion import BoxAttnConfig, BoxCalibParams
from .detection import DetectionParams
from . import feature_fusion as fusion_mod
from .feature_fusion import FusionParams
from .nn import MlpParams
from .scene import DESC_DIM, DESC_OCC, DESC_VIS

PARAMS_MAGIC = b"CBPM"
PARAMS_VERSION = 1

REF_CONF_BIAS = math.log(0.05 / 0.95)  # empty-cell confidence 0.05


def _linear_encoder(w: np.ndarray) -> MlpParams:
    """Linear cell encoder with the bias pinned at zero (not trainable).

    Sparse payloads represent absent cells as zeros, so an empty
    descriptor must encode to exactly zero; a trainable constant bias
    would silently break that wire convention.
    """
    return MlpParams(
        [Tensor(np.asarray(w, dtype=np.float64), requires_grad=True)],
        [Tensor(np.zeros(w.shape[1]))],
        ["linear"],
    )


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    n_scales: int = 3
    d_calib: int = 16
    n_heads: int = 2
    n_points: int = 4

    def __post_init__(self):
        if self.channels < DESC_DIM:
            raise ValueError(f"channels must be at least {DESC_DIM}")
        if min(self.n_scales, self.d_calib, self.n_heads, self.n_points) < 1:
            raise ValueError("all structural sizes must be positive")

    def box_attn(self, **overrides) -> BoxAttnConfig:
        return BoxAttnConfig(
            n_heads=self.n_heads, n_points=self.n_points, **overrides
        )


@dataclass
class ModelParams:
    cfg: ModelConfig
    encoder: MlpParams  # DESC_DIM -> channels
    conf_feat_w: Tensor
    conf_feat_b: Tensor
    conf_box_w: Tensor
    conf_box_b: Tensor
    fusion: FusionParams
    detection: DetectionParams
    calib: BoxCalibParams

    def __post_init__(self):
        c = self.cfg.channels
        if self.encoder.in_dim != DESC_DIM or self.encoder.out_dim != c:
            raise ValueError("encoder must map the descriptor to C channels")
        for name, t, shape in (
            ("conf_feat_w", self.conf_feat_w, (c,)),
            ("conf_feat_b", self.conf_feat_b, (1,)),
            ("conf_box_w", self.conf_box_w, (c,)),
            ("conf_box_b", self.conf_box_b, (1,)),
        ):
            if t.data.shape != shape:
                raise ValueError(f"{name} must have shape {shape}")
        if self.fusion.channels != c or self.detection.channels != c:
            raise ValueError("fusion/detection channel width mismatch")

    def named_tensors(self) -> list:
        out = []

        def mlp(prefix, m):
            for i, (w, b) in enumerate(zip(m.weights, m.biases)):
                out.append((f"{prefix}.w{i}", w))
                out.append((f"{prefix}.b{i}", b))

        mlp("encoder", self.encoder)
        out.append(("conf_feat.w", self.conf_feat_w))
        out.append(("conf_feat.b", self.conf_feat_b))
        out.append(("conf_box.w", self.conf_box_w))
        out.append(("conf_box.b", self.conf_box_b))
        mlp("fusion.query", self.fusion.query_mlp)
        out.append(("fusion.mix", self.fusion.mix_weight))
        out.append(("fusion.pos_bias", self.fusion.pos_bias))
        out.append(("det.w_cls", self.detection.w_cls))
        out.append(("det.b_cls", self.detection.b_cls))
        out.append(("det.w_reg", self.detection.w_reg))
        out.append(("det.b_reg", self.detection.b_reg))
        mlp("calib.encoder", self.calib.encoder)
        mlp("calib.offset_mlp", self.calib.offset_mlp)
        mlp("calib.weight_mlp", self.calib.weight_mlp)
        out.append(("calib.alpha", self.calib.alpha))
        out.append(("calib.attn_q", self.calib.attn_q))
        out.append(("calib.attn_k", self.calib.attn_k))
        out.append(("calib.attn_v", self.calib.attn_v))
        mlp("calib.ffn", self.calib.ffn)
        mlp("calib.score_head", self.calib.score_head)
        mlp("calib.offset_head", self.calib.offset_head)
        return out

    def tensors(self) -> list:
        return [t for _, t in self.named_tensors()]

    @staticmethod
    def random(cfg: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        c = cfg.channels
        return ModelParams(
            cfg=cfg,
            encoder=_linear_encoder(
                rng.normal(0.0, 1.0 / math.sqrt(DESC_DIM), size=(DESC_DIM, c))
            ),
            conf_feat_w=Tensor(rng.normal(0, 0.3, size=c), requires_grad=True),
            conf_feat_b=Tensor(np.array([REF_CONF_BIAS]), requires_grad=True),
            conf_box_w=Tensor(rng.normal(0, 0.3, size=c), requires_grad=True),
            conf_box_b=Tensor(np.array([REF_CONF_BIAS]), requires_grad=True),
            fusion=FusionParams.init(c, cfg.n_scales, rng),
            detection=DetectionParams.random(c, rng),
            calib=BoxCalibParams.random(c, cfg.d_calib, cfg.box_attn(), rng),
        )

    @staticmethod
    def reference(cfg: ModelConfig = ModelConfig()) -> "ModelParams":
        """Structured hand initialization; functional without training."""
        c = cfg.channels
        enc_w = np.zeros((DESC_DIM, c))
        enc_w[:, :DESC_DIM] = np.eye(DESC_DIM)
        encoder = _linear_encoder(enc_w)
        cf_w = np.zeros(c)
        cf_w[DESC_OCC] = 4.0
        cb_w = np.zeros(c)
        cb_w[DESC_OCC] = 2.0
        cb_w[DESC_VIS] = 2.5
        # Content-matching query on the first c channels; the extra query
        # channel reads the occupancy feature and drives the self-key flag,
        # so attention keeps the ego value wherever the ego itself observed
        # a box and defers to received content elsewhere.
        qw = np.zeros((c, c + 1))
        qw[:c, :c] = 8.0 * np.eye(c)
        qw[DESC_OCC, c] = 24.0
        query = MlpParams(
            [Tensor(qw, requires_grad=True)],
            [Tensor(np.zeros(c + 1), requires_grad=True)],
            ["linear"],
        )
        mix = np.zeros((cfg.n_scales * c, c))
        mix[:c] = np.eye(c)
        # center-dominant window bias: mostly overwrite, a little context
        pos_bias = np.zeros((cfg.n_scales, fusion_mod.N_SLOTS))
        pos_bias[:, 4] = 4.0
        return ModelParams(
            cfg=cfg,
            encoder=encoder,
            conf_feat_w=Tensor(cf_w, requires_grad=True),
            conf_feat_b=Tensor(np.array([REF_CONF_BIAS]), requires_grad=True),
            conf_box_w=Tensor(cb_w, requires_grad=True),
            conf_box_b=Tensor(np.array([REF_CONF_BIAS]), requires_grad=True),
            fusion=FusionParams(query, Tensor(mix, requires_grad=True),
                                Tensor(pos_bias, requires_grad=True),
                                cfg.n_scales),
            detection=DetectionParams.reference(c),
            calib=BoxCalibParams.reference(c, cfg.box_attn()),
        )


def save_params(params: ModelParams, path: str) -> None:
    """Versioned little-endian float64 dump; round-trips bit-exactly."""
    cfg_json = json.dumps(
        {
            "channels": params.cfg.channels,
            "n_scales": params.cfg.n_scales,
            "d_calib": params.cfg.d_calib,
            "n_heads": params.cfg.n_heads,
            "n_points": params.cfg.n_points,
        },
        sort_keys=True,
    ).encode()
    named = params.named_tensors()
    parts = [
        PARAMS_MAGIC,
        struct.pack("<B", PARAMS_VERSION),
        struct.pack("<I", len(cfg_json)),
        cfg_json,
        struct.pack("<I", len(named)),
    ]
    for name, t in named:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", t.data.ndim))
        for dim in t.data.shape:
            parts.append(struct.pack("<I", dim))
        parts.append(t.data.astype("<f8", copy=False).tobytes())
    blob = b"".join(parts)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_params(path: str) -> ModelParams:
    """Rebuild the bundle saved by save_params."""
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise ValueError("parameter file is truncated")
        out = data[off : off + n]
        off += n
        return out

    if take(4) != PARAMS_MAGIC:
        raise ValueError("not a parameter file")
    (version,) = struct.unpack("<B", take(1))
    if version != PARAMS_VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg = ModelConfig(**json.loads(take(cfg_len)))
    params = ModelParams.random(cfg, np.random.default_rng(0))
    want = dict(params.named_tensors())
    (count,) = struct.unpack("<I", take(4))
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(
            struct.unpack("<I", take(4))[0] for _ in range(ndim)
        )
        n_items = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * n_items), dtype="<f8").reshape(shape)
        if name not in want:
            raise ValueError(f"unknown tensor {name!r} in parameter file")
        if want[name].data.shape != shape:
            raise ValueError(f"shape mismatch for {name!r}")
        want[name].data = arr.astype(np.float64).copy()
        seen.add(name)
    if off != len(data):
        raise ValueError("trailing bytes in parameter file")
    missing = set(want) - seen
    if missing:
        raise ValueError(f"parameter file is missing {sorted(missing)}")
    return params
