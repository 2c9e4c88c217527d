"""The point-cloud policy network.

Pipeline: a skip-connected per-point encoder builds feature levels of
widths 64/128/512 from the 6-channel input cloud, the levels are
concatenated into a condensed feature, a single guided attention pass
mixes information across points (queries and values from the condensed
feature, keys from the deepest level, plus a learned distance-bucket
bias), and a max-pool over points followed by a small perceptron maps
the pooled feature and the robot state to an action.

All point-wise stages are permutation equivariant, the distance bias
depends only on pairwise geometry, and max-pool is symmetric, so the
action is invariant to point order. To make that invariance hold
bit-exactly in floating point, `forward` canonicalizes the cloud by a
lexicographic row sort before any arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import (
    LayerNormParams,
    PointwiseLinearParams,
    init_layer_norm,
    init_pointwise,
    layer_norm,
    pointwise_linear,
    relu,
    softmax_rows,
    uniform_fan_in,
)
from .tensor import Tensor

IN_CHANNELS = 6  # xyz + 3 label channels

CONDENSED_DEEP = "deep"  # concat of the three conv outputs (704 at default widths)
CONDENSED_SHALLOW = "shallow"  # raw input + first two conv outputs (198 at default widths)


@dataclass(frozen=True)
class PolicyConfig:
    n_points: int = 1200
    channels: tuple[int, int, int] = (64, 128, 512)
    condensed_mode: str = CONDENSED_DEEP
    d_k: int = 512
    bias_buckets: int = 16
    bias_max_dist: float = 2.0
    robot_state_dim: int = 7
    action_dim: int = 4
    head_hidden: int = 256
    use_attention: bool = True

    def __post_init__(self):
        if self.condensed_mode not in (CONDENSED_DEEP, CONDENSED_SHALLOW):
            raise ValueError(f"unknown condensed_mode {self.condensed_mode!r}")
        for name in ("n_points", "d_k", "bias_buckets", "robot_state_dim", "action_dim", "head_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(c <= 0 for c in self.channels):
            raise ValueError("channel widths must be positive")
        if self.bias_max_dist <= 0:
            raise ValueError("bias_max_dist must be positive")

    @property
    def condensed_channels(self) -> int:
        c1, c2, c3 = self.channels
        if self.condensed_mode == CONDENSED_DEEP:
            return c1 + c2 + c3
        return IN_CHANNELS + c1 + c2

    @property
    def key_channels(self) -> int:
        return self.channels[2]

    @property
    def pooled_channels(self) -> int:
        return self.condensed_channels + self.key_channels


@dataclass
class EncoderOutputs:
    points: Tensor  # (..., N, 6) raw input
    level1: Tensor  # (..., N, c1)
    level2: Tensor  # (..., N, c2)
    level3: Tensor  # (..., N, c3) deepest level
    condensed: Tensor  # (..., N, condensed_channels)


@dataclass
class AttentionArtifacts:
    query: Tensor  # (..., N, d_k)
    key: Tensor  # (..., N, d_k)
    value: Tensor  # (..., N, c_condensed)
    bias: Tensor  # (..., N, N)
    weights: Tensor  # (..., N, N), rows sum to 1
    attended: Tensor  # (..., N, c_condensed)


def param_shapes(cfg: PolicyConfig) -> dict[str, tuple[int, ...]]:
    """Expected shape of every named parameter for this config."""
    c1, c2, c3 = cfg.channels
    shapes: dict[str, tuple[int, ...]] = {
        "enc1.weight": (IN_CHANNELS, c1),
        "enc1.bias": (c1,),
        "ln1.gamma": (c1,),
        "ln1.beta": (c1,),
        "enc2.weight": (c1, c2),
        "enc2.bias": (c2,),
        "ln2.gamma": (c2,),
        "ln2.beta": (c2,),
        "enc3.weight": (c2, c3),
        "enc3.bias": (c3,),
        "ln3.gamma": (c3,),
        "ln3.beta": (c3,),
    }
    if cfg.use_attention:
        shapes["attn_query.weight"] = (cfg.condensed_channels, cfg.d_k)
        if cfg.key_channels != cfg.d_k:
            shapes["attn_key.weight"] = (cfg.key_channels, cfg.d_k)
        shapes["dist_bias.table"] = (cfg.bias_buckets,)
    else:
        shapes["deep_proj.weight"] = (cfg.key_channels, cfg.condensed_channels)
        shapes["deep_proj.bias"] = (cfg.condensed_channels,)
    head_in = cfg.pooled_channels + cfg.robot_state_dim
    shapes["head1.weight"] = (head_in, cfg.head_hidden)
    shapes["head1.bias"] = (cfg.head_hidden,)
    shapes["head2.weight"] = (cfg.head_hidden, cfg.action_dim)
    shapes["head2.bias"] = (cfg.action_dim,)
    return shapes


def init_params(seed: int, cfg: PolicyConfig) -> dict[str, Tensor]:
    """Deterministic parameter store: fan-in uniform weights, zero biases,
    unit layer-norm gains, zero distance-bias table."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def put_linear(prefix: str, c_in: int, c_out: int) -> None:
        p = init_pointwise(rng, c_in, c_out)
        params[f"{prefix}.weight"] = p.weight
        params[f"{prefix}.bias"] = p.bias

    def put_norm(prefix: str, c: int) -> None:
        p = init_layer_norm(c)
        params[f"{prefix}.gamma"] = p.gamma
        params[f"{prefix}.beta"] = p.beta

    c1, c2, c3 = cfg.channels
    put_linear("enc1", IN_CHANNELS, c1)
    put_norm("ln1", c1)
    put_linear("enc2", c1, c2)
    put_norm("ln2", c2)
    put_linear("enc3", c2, c3)
    put_norm("ln3", c3)
    if cfg.use_attention:
        params["attn_query.weight"] = uniform_fan_in(rng, cfg.condensed_channels, cfg.d_k)
        if cfg.key_channels != cfg.d_k:
            params["attn_key.weight"] = uniform_fan_in(rng, cfg.key_channels, cfg.d_k)
        params["dist_bias.table"] = Tensor(np.zeros(cfg.bias_buckets), requires_grad=True)
    else:
        put_linear("deep_proj", cfg.key_channels, cfg.condensed_channels)
    head_in = cfg.pooled_channels + cfg.robot_state_dim
    put_linear("head1", head_in, cfg.head_hidden)
    put_linear("head2", cfg.head_hidden, cfg.action_dim)
    for name, t in params.items():
        t.name = name
    return params


def _linear(params: dict[str, Tensor], prefix: str) -> PointwiseLinearParams:
    return PointwiseLinearParams(params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def _norm(params: dict[str, Tensor], prefix: str) -> LayerNormParams:
    return LayerNormParams(params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def encode(cloud: Tensor, params: dict[str, Tensor], cfg: PolicyConfig) -> EncoderOutputs:
    """Run the three conv/norm/relu stages and assemble the condensed feature."""
    if cloud.shape[-1] != IN_CHANNELS:
        raise ShapeError(f"encoder expects {IN_CHANNELS} channels, got {cloud.shape}")
    if cloud.shape[-2] != cfg.n_points:
        raise ShapeError(f"encoder expects {cfg.n_points} points, got {cloud.shape}")
    level1 = relu(layer_norm(pointwise_linear(cloud, _linear(params, "enc1")), _norm(params, "ln1")))
    level2 = relu(layer_norm(pointwise_linear(level1, _linear(params, "enc2")), _norm(params, "ln2")))
    level3 = relu(layer_norm(pointwise_linear(level2, _linear(params, "enc3")), _norm(params, "ln3")))
    if cfg.condensed_mode == CONDENSED_DEEP:
        condensed = T.concat_channels([level1, level2, level3])
    else:
        condensed = T.concat_channels([cloud, level1, level2])
    return EncoderOutputs(cloud, level1, level2, level3, condensed)


def distance_buckets(xyz: np.ndarray, cfg: PolicyConfig) -> np.ndarray:
    """Integer bucket index of every pairwise distance, clamped to the last bucket."""
    sq = (xyz**2).sum(axis=-1)
    d2 = sq[..., :, None] + sq[..., None, :] - 2.0 * (xyz @ np.swapaxes(xyz, -1, -2))
    np.clip(d2, 0.0, None, out=d2)
    n = xyz.shape[-2]
    ii = np.arange(n)
    d2[..., ii, ii] = 0.0
    dist = np.sqrt(d2)
    idx = np.floor(dist / cfg.bias_max_dist * cfg.bias_buckets).astype(np.int64)
    return np.minimum(idx, cfg.bias_buckets - 1)


def pairwise_bias(xyz: np.ndarray, bias_table: Tensor, cfg: PolicyConfig) -> Tensor:
    """Learned additive attention bias looked up by pairwise distance bucket."""
    return T.take(bias_table, distance_buckets(xyz, cfg))


def guided_attention(
    enc: EncoderOutputs,
    xyz: np.ndarray,
    params: dict[str, Tensor],
    cfg: PolicyConfig,
) -> AttentionArtifacts:
    """One scaled-dot-product pass: queries/values from the condensed
    feature, keys from the deepest level, plus the distance bias."""
    query = T.matmul(enc.condensed, params["attn_query.weight"])
    if cfg.key_channels != cfg.d_k:
        key = T.matmul(enc.level3, params["attn_key.weight"])
    else:
        key = enc.level3
    value = enc.condensed
    scale = 1.0 / float(np.sqrt(cfg.d_k))
    sim = T.matmul(query, T.transpose_last(key)) * scale
    bias = pairwise_bias(xyz, params["dist_bias.table"], cfg)
    weights = softmax_rows(sim + bias)
    attended = T.matmul(weights, value)
    return AttentionArtifacts(query, key, value, bias, weights, attended)


def pool_and_act(
    attended: Tensor,
    level3: Tensor,
    robot_state: Tensor,
    params: dict[str, Tensor],
    cfg: PolicyConfig,
) -> Tensor:
    """Max-pool the per-point features and map (pooled, robot state) to an action."""
    if attended.shape[-2] != level3.shape[-2]:
        raise ShapeError(
            f"attended and deepest features disagree on point count: "
            f"{attended.shape} vs {level3.shape}"
        )
    pooled = T.reduce_max_points(T.concat_channels([attended, level3]))
    h = T.concat_channels([pooled, robot_state])
    squeeze = h.ndim == 1
    if squeeze:
        h = T.reshape(h, (1, h.shape[0]))
    hidden = relu(pointwise_linear(h, _linear(params, "head1")))
    out = pointwise_linear(hidden, _linear(params, "head2"))
    if squeeze:
        out = T.reshape(out, (out.shape[-1],))
    return out


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Lexicographic row order over all channels, first channel primary."""
    return np.lexsort(points.T[::-1])


def apply_policy(
    points: Tensor,
    robot_state: Tensor,
    params: dict[str, Tensor],
    cfg: PolicyConfig,
) -> Tensor:
    """Network body shared by single-observation and batched forward passes.

    `points` is (N, 6) or (B, N, 6); rows must already be in canonical order.
    """
    enc = encode(points, params, cfg)
    if cfg.use_attention:
        xyz = points.data[..., :3]
        mixed = guided_attention(enc, xyz, params, cfg).attended
    else:
        mixed = pointwise_linear(enc.level3, _linear(params, "deep_proj"))
    return pool_and_act(mixed, enc.level3, robot_state, params, cfg)


def forward(obs, params: dict[str, Tensor], cfg: PolicyConfig) -> Tensor:
    """Action for one observation (an object with `.points` and `.robot_state`)."""
    pts = np.asarray(obs.points, dtype=np.float64)
    pts = pts[canonical_order(pts)]
    rs = np.asarray(obs.robot_state, dtype=np.float64)
    return apply_policy(Tensor(pts), Tensor(rs), params, cfg)


def forward_batch(
    points: np.ndarray,
    robot_state: np.ndarray,
    params: dict[str, Tensor],
    cfg: PolicyConfig,
) -> Tensor:
    """Actions for a batch: points (B, N, 6), robot_state (B, robot_state_dim)."""
    pts = np.asarray(points, dtype=np.float64)
    sorted_pts = np.empty_like(pts)
    for b in range(pts.shape[0]):
        sorted_pts[b] = pts[b][canonical_order(pts[b])]
    rs = np.asarray(robot_state, dtype=np.float64)
    return apply_policy(Tensor(sorted_pts), Tensor(rs), params, cfg)


def similarity_products_per_forward(obs, params: dict[str, Tensor], cfg: PolicyConfig) -> int:
    """Count n_points-square matmul outputs in one forward pass."""
    n = cfg.n_points
    with T.log_matmul_shapes() as shapes:
        forward(obs, params, cfg)
    return sum(1 for s in shapes if s[-2:] == (n, n))
