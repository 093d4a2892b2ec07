"""Small neural building blocks: per-cell MLPs and scaled dot-product attention."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_ACTIVATIONS = {
    "linear": lambda x: x,
    "tanh": ad.tanh,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
}


@dataclass
class MlpParams:
    """Weights, biases and an activation tag for each layer.

    Layer i maps (..., d_i) -> (..., d_{i+1}) as act(x @ W_i + b_i).
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activations: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("layer lists must have equal length")
        prev = None
        for i, (w, b, a) in enumerate(
            zip(self.weights, self.biases, self.activations)
        ):
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
            if w.data.ndim != 2 or b.data.ndim != 1:
                raise ValueError("weights must be 2-D and biases 1-D")
            if w.data.shape[1] != b.data.shape[0]:
                raise ValueError(f"layer {i}: bias does not match weight columns")
            if prev is not None and w.data.shape[0] != prev:
                raise ValueError(f"layer {i}: input dim does not chain")
            prev = w.data.shape[1]

    @property
    def in_dim(self) -> int:
        return self.weights[0].data.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].data.shape[1]

    @classmethod
    def init(cls, dims, activations, rng: np.random.Generator, scale=None):
        """Xavier-scaled random init; `scale` overrides the per-layer factor."""
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            s = scale if scale is not None else math.sqrt(2.0 / (d_in + d_out))
            weights.append(Tensor(rng.normal(0.0, s, (d_in, d_out)), requires_grad=True))
            biases.append(Tensor(np.zeros(d_out), requires_grad=True))
        return cls(weights, biases, list(activations))

    def tensors(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def mlp_apply(params: MlpParams, x) -> Tensor:
    """Apply the MLP to a (d,) vector or an (N, d) batch of rows."""
    h = ad.as_tensor(x)
    if h.data.shape[-1] != params.in_dim:
        raise ValueError(
            f"input dim {h.data.shape[-1]} does not match MLP in_dim {params.in_dim}"
        )
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = _ACTIVATIONS[act](ad.matmul(h, w) + b)
    return h


def cross_attention(query, keys, values) -> Tensor:
    """Scaled dot-product attention of one (d_k,) query over n key/value rows.

    Returns softmax(keys @ query / sqrt(d_k)) @ values, shape (d_v,).
    """
    query, keys, values = map(ad.as_tensor, (query, keys, values))
    n, d_k = keys.data.shape
    if n == 0:
        raise ValueError("cross_attention requires at least one key")
    if values.data.shape[0] != n:
        raise ValueError("keys and values must have equal row counts")
    if query.data.shape != (d_k,):
        raise ValueError("query must be a (d_k,) vector")
    scores = ad.matmul(keys, query) * (1.0 / math.sqrt(d_k))
    w = ad.softmax(scores, axis=-1)
    return ad.matmul(w, values)
