"""Per-point network layers: 1x1 linear maps, layer norm, activations.

Every layer here acts on each point row independently, so permuting the
point axis commutes with the layer (exact equivariance). Layer norm
normalizes across channels within a point, never across points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

LAYER_NORM_EPS = 1e-5

relu = T.relu
softmax_rows = T.softmax_rows


@dataclass
class PointwiseLinearParams:
    weight: Tensor  # (c_in, c_out)
    bias: Tensor  # (c_out,)


@dataclass
class LayerNormParams:
    gamma: Tensor  # (c,)
    beta: Tensor  # (c,)
    epsilon: float = LAYER_NORM_EPS


def pointwise_linear(x: Tensor, p: PointwiseLinearParams) -> Tensor:
    """Affine map applied to every point row: x @ W + b."""
    c_in = p.weight.shape[0]
    if x.shape[-1] != c_in:
        raise ShapeError(f"pointwise_linear expects {c_in} channels, got {x.shape}")
    return T.matmul(x, p.weight) + p.bias


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    """Normalize each point row to zero mean / unit variance, then scale and shift."""
    if x.shape[-1] != p.gamma.shape[0]:
        raise ShapeError(f"layer_norm expects {p.gamma.shape[0]} channels, got {x.shape}")
    mu = T.mean_last(x)
    centered = x - mu
    var = T.mean_last(centered * centered)
    inv_std = T.power(var + p.epsilon, -0.5)
    return centered * inv_std * p.gamma + p.beta


def uniform_fan_in(rng: np.random.Generator, c_in: int, c_out: int) -> Tensor:
    """Weight matrix drawn uniformly from [-sqrt(1/c_in), sqrt(1/c_in)]."""
    bound = float(np.sqrt(1.0 / c_in))
    w = rng.uniform(-bound, bound, size=(c_in, c_out))
    return Tensor(w, requires_grad=True)


def init_pointwise(rng: np.random.Generator, c_in: int, c_out: int) -> PointwiseLinearParams:
    return PointwiseLinearParams(
        weight=uniform_fan_in(rng, c_in, c_out),
        bias=Tensor(np.zeros(c_out), requires_grad=True),
    )


def init_layer_norm(c: int, epsilon: float = LAYER_NORM_EPS) -> LayerNormParams:
    return LayerNormParams(
        gamma=Tensor(np.ones(c), requires_grad=True),
        beta=Tensor(np.zeros(c), requires_grad=True),
        epsilon=epsilon,
    )
