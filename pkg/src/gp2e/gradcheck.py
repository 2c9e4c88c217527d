"""Finite-difference verification of every backward rule.

Each op is probed on many small random instances: a random linear
functional of the op output serves as the scalar loss, its analytic
gradient comes from the tape, and central differences (h = 1e-5) give
the reference. The full network is checked end to end on a tiny
configuration, every parameter probed. The relative-error metric is
|analytic - fd| / max(|analytic|, |fd|, 1e-12), with elements where both
magnitudes are below 1e-10 exempt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import policy as P
from . import tensor as T
from .env import PointCloudObservation
from .tensor import Tensor, finite_diff_grad, record

OP_TOL = 1e-4  # many-instance invariant; unlucky tiny-gradient elements add FD noise
SINGLE_TOL = 1e-6  # well-conditioned dedicated instances
NET_TOL = 1e-4
FD_STEP = 1e-5
TINY_MAG = 1e-10


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tolerance


def rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-12)
    err = np.abs(analytic - fd) / denom
    exempt = (np.abs(analytic) < TINY_MAG) & (np.abs(fd) < TINY_MAG)
    err[exempt] = 0.0
    return float(err.max()) if err.size else 0.0


def check_grad(fn, inputs: list[Tensor], rng: np.random.Generator,
               h: float = FD_STEP, indices=None) -> float:
    """Compare tape gradients of sum(fn(inputs) * R) against central
    differences for every (or the sampled) input element."""
    probe = None

    def loss_of(_=None):
        nonlocal probe
        out = fn(*inputs)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return T.sum_all(out * Tensor(probe))

    for t in inputs:
        t.requires_grad = True
    with record() as tape:
        loss = loss_of()
    grads = tape.backward(loss, params=inputs)
    worst = 0.0
    for t in inputs:
        fd = finite_diff_grad(loss_of, t, h=h, indices=indices)
        analytic = grads[id(t)].data
        if indices is not None:
            mask = np.zeros(t.size, dtype=bool)
            mask[list(indices)] = True
            analytic = np.where(mask.reshape(t.shape), analytic, 0.0)
        worst = max(worst, rel_err(analytic, fd))
    return worst


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _spread(rng, *shape):
    # values with comfortable pairwise gaps so max/relu kinks stay away from h
    vals = rng.standard_normal(shape) * 2.0
    vals += 0.01 * np.sign(vals)
    return Tensor(vals)


def run_op_checks(instances: int = 24, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def sizes():
        return int(rng.integers(1, 7)), int(rng.integers(1, 7)), int(rng.integers(1, 7))

    def run(name, tol, make):
        worst = 0.0
        for _ in range(instances):
            fn, inputs = make()
            worst = max(worst, check_grad(fn, inputs, rng))
        results.append(CheckResult(name, worst, tol))

    def make_add():
        m, n, _ = sizes()
        return T.add, [_rand(rng, m, n), _rand(rng, n)]

    run("add", OP_TOL, make_add)
    run("sub", OP_TOL, lambda: (T.sub, [_rand(rng, 4, 5), _rand(rng, 4, 5)]))
    run("mul", OP_TOL, lambda: (T.mul, [_rand(rng, 3, 4), _rand(rng, 4)]))
    def make_matmul():
        m, k, n = sizes()
        return T.matmul, [_rand(rng, m, k), _rand(rng, k, n)]

    run("matmul", OP_TOL, make_matmul)
    run("matmul_batched", OP_TOL, lambda: (T.matmul, [_rand(rng, 2, 3, 4), _rand(rng, 4, 5)]))
    run(
        "concat_channels", OP_TOL,
        lambda: (lambda a, b, c: T.concat_channels([a, b, c]),
                 [_rand(rng, 4, 2), _rand(rng, 4, 3), _rand(rng, 4, 1)]),
    )
    run("reduce_max_points", OP_TOL, lambda: (T.reduce_max_points, [_spread(rng, 5, 4)]))
    run("relu", OP_TOL, lambda: (T.relu, [_spread(rng, 4, 4)]))
    run("softmax_rows", OP_TOL, lambda: (T.softmax_rows, [_rand(rng, 4, 6)]))
    run("transpose_last", OP_TOL, lambda: (T.transpose_last, [_rand(rng, 3, 5)]))
    run("reshape", OP_TOL, lambda: (lambda x: T.reshape(x, (6, 2)), [_rand(rng, 3, 4)]))
    run("mean_last", OP_TOL, lambda: (T.mean_last, [_rand(rng, 4, 5)]))
    run("mean_all", OP_TOL, lambda: (T.mean_all, [_rand(rng, 4, 5)]))
    run("sum_all", OP_TOL, lambda: (T.sum_all, [_rand(rng, 4, 5)]))
    run(
        "power", OP_TOL,
        lambda: (lambda x: T.power(x + 3.0, -0.5), [Tensor(np.abs(rng.standard_normal((4, 4))))]),
    )
    def make_take():
        idx = rng.integers(0, 8, size=(5, 5))
        return (lambda t: T.take(t, idx)), [_rand(rng, 8)]

    run("take", OP_TOL, make_take)
    run(
        "pointwise_linear", OP_TOL,
        lambda: (
            lambda x, w, b: L.pointwise_linear(x, L.PointwiseLinearParams(w, b)),
            [_rand(rng, 5, 3), _rand(rng, 3, 4), _rand(rng, 4)],
        ),
    )
    run(
        "layer_norm", OP_TOL,
        lambda: (
            lambda x, g, b: L.layer_norm(x, L.LayerNormParams(g, b)),
            [_rand(rng, 8, 16), _rand(rng, 16), _rand(rng, 16)],
        ),
    )
    return results


def layer_norm_check(seed: int = 3) -> CheckResult:
    """Dedicated well-conditioned layer-norm instance on an 8x16 input."""
    rng = np.random.default_rng(seed)
    inputs = [_rand(rng, 8, 16), _rand(rng, 16), _rand(rng, 16)]
    err = check_grad(
        lambda x, g, b: L.layer_norm(x, L.LayerNormParams(g, b)), inputs, rng
    )
    return CheckResult("layer_norm_8x16", err, SINGLE_TOL)


def pointwise_net_check(seed: int = 5) -> CheckResult:
    """Three stacked per-point stages, gradients cross-checked end to end."""
    rng = np.random.default_rng(seed)
    widths = [4, 6, 5, 3]
    tensors = [_rand(rng, 7, widths[0])]
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        tensors.append(_rand(rng, c_in, c_out))
        tensors.append(_rand(rng, c_out))

    def net(x, w1, b1, w2, b2, w3, b3):
        h = T.relu(L.pointwise_linear(x, L.PointwiseLinearParams(w1, b1)) * 1.0 + 0.3)
        h = T.relu(L.pointwise_linear(h, L.PointwiseLinearParams(w2, b2)) + 0.3)
        return L.pointwise_linear(h, L.PointwiseLinearParams(w3, b3))

    err = check_grad(net, tensors, rng)
    return CheckResult("pointwise_net_3layer", err, SINGLE_TOL)


def big_matmul_check(seed: int = 0, samples_per_input: int = 48) -> CheckResult:
    """Production-sized matmul probed on a random subset of elements."""
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((8, 704)) * 0.1)
    b = Tensor(rng.standard_normal((704, 512)) * 0.1)
    worst = 0.0
    for t in (a, b):
        idx = rng.choice(t.size, size=samples_per_input, replace=False)
        a.requires_grad = b.requires_grad = True
        probe = rng.standard_normal((8, 512))

        def loss_of(_=None):
            return T.sum_all(T.matmul(a, b) * Tensor(probe))

        with record() as tape:
            loss = loss_of()
        grads = tape.backward(loss, params=[t])
        fd = finite_diff_grad(loss_of, t, h=FD_STEP, indices=idx)
        mask = np.zeros(t.size, dtype=bool)
        mask[idx] = True
        analytic = np.where(mask.reshape(t.shape), grads[id(t)].data, 0.0)
        worst = max(worst, rel_err(analytic, fd))
    return CheckResult("matmul_8x704_704x512", worst, 1e-6)


def tiny_policy_config(n_points: int = 8, **kw) -> P.PolicyConfig:
    # channel widths chosen distinct from n_points so a point-square
    # matmul output can only be the similarity matrix
    base = dict(
        n_points=n_points,
        channels=(5, 6, 7),
        d_k=7,
        bias_buckets=4,
        bias_max_dist=0.5,
        head_hidden=9,
        action_dim=4,
    )
    base.update(kw)
    return P.PolicyConfig(**base)


def random_observation(rng: np.random.Generator, n_points: int) -> PointCloudObservation:
    pts = np.empty((n_points, 6), dtype=np.float32)
    pts[:, :3] = rng.uniform(-0.3, 0.3, size=(n_points, 3))
    pts[:, 3:] = rng.uniform(0.0, 1.0, size=(n_points, 3))
    robot = rng.uniform(-0.3, 0.3, size=7).astype(np.float32)
    return PointCloudObservation(points=pts, robot_state=robot)


KINK_MARGIN = 1e-3


def _kink_margin(obs, params, cfg) -> float:
    """Distance of the forward pass from its nearest non-smooth point:
    the smallest |relu pre-activation| and pooled top-2 gap. Probing
    gradients right at a relu zero or a max-pool tie is meaningless, so
    instances are redrawn until this margin is comfortable."""
    pts = np.asarray(obs.points, dtype=np.float64)
    pts = pts[P.canonical_order(pts)]
    x = Tensor(pts)
    enc = P.encode(x, params, cfg)
    margins = []
    prev = x
    for k, level in enumerate((enc.level1, enc.level2, enc.level3), start=1):
        pre = L.layer_norm(
            L.pointwise_linear(prev, P._linear(params, f"enc{k}")), P._norm(params, f"ln{k}")
        )
        margins.append(np.abs(pre.data).min())
        prev = level
    if cfg.use_attention:
        art = P.guided_attention(enc, pts[:, :3], params, cfg)
        mixed = art.attended
    else:
        mixed = L.pointwise_linear(enc.level3, P._linear(params, "deep_proj"))
    pooled_in = np.concatenate([mixed.data, enc.level3.data], axis=-1)
    top2 = np.sort(pooled_in, axis=0)[-2:]
    # argmax-flip hazard exists only in channels that are alive; an
    # all-zero (relu-dead) channel is flat, guarded by the relu margins
    alive = top2[1] > 0.0
    if alive.any():
        margins.append((top2[1] - top2[0])[alive].min())
    pooled = pooled_in.max(axis=0)
    h = np.concatenate([pooled, np.asarray(obs.robot_state, dtype=np.float64)])
    hidden_pre = h @ params["head1.weight"].data + params["head1.bias"].data
    margins.append(np.abs(hidden_pre).min())
    return float(min(margins))


def full_network_check(instances: int = 4, seed: int = 0) -> tuple[list[CheckResult], int]:
    """Probe every parameter of the tiny network against central
    differences through forward + mean-squared loss. Instances rotate
    through the structural variants (key projection, shallow condensed
    feature, attention off) so every parameter path is covered. Also
    reports the number of point-square similarity products per forward."""
    variants = [
        tiny_policy_config(),  # keys used unprojected (width == d_k)
        tiny_policy_config(d_k=4),  # separate key projection
        tiny_policy_config(condensed_mode=P.CONDENSED_SHALLOW),
        tiny_policy_config(use_attention=False),
    ]
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []
    sim_count = -1
    for inst in range(instances):
        cfg = variants[inst % len(variants)]
        for _attempt in range(64):
            params = P.init_params(int(rng.integers(1 << 30)), cfg)
            for name, p in params.items():
                # nudge every parameter off its symmetric init so zero
                # biases / the zero bias table do not pin special points
                p.data += rng.standard_normal(p.shape) * 0.05
            obs = random_observation(rng, cfg.n_points)
            if _kink_margin(obs, params, cfg) > KINK_MARGIN:
                break
        else:
            raise RuntimeError("could not draw a kink-free gradcheck instance")
        target = Tensor(rng.standard_normal(cfg.action_dim))

        def loss_of(_=None):
            diff = P.forward(obs, params, cfg) - target
            return T.mean_all(diff * diff)

        with record() as tape:
            loss = loss_of()
        grads = tape.backward(loss, params=params.values())
        if inst == 0:
            sim_count = P.similarity_products_per_forward(obs, params, cfg)
        for name, p in params.items():
            fd = finite_diff_grad(loss_of, p, h=FD_STEP)
            err = rel_err(grads[id(p)].data, fd)
            label = f"net[{inst}].{name}"
            results.append(CheckResult(label, err, NET_TOL))
    return results, sim_count


def run_full_suite(seed: int = 0) -> tuple[list[CheckResult], int]:
    results = run_op_checks(seed=seed)
    results.append(big_matmul_check(seed=seed))
    results.append(layer_norm_check())
    results.append(pointwise_net_check())
    net_results, sim_count = full_network_check(seed=seed)
    results.extend(net_results)
    return results, sim_count
