"""Behavior-cloning trainer: mean-squared action regression with Adam,
periodic closed-loop evaluation, best-checkpoint tracking, and the
two-stage fine-tuning schedule (reload the best stage-1 model, scale
batch size by 0.8 and physics substeps by 0.9, train again).

Metrics rows are appended to a CSV after every evaluation. Rows contain
only run-deterministic fields so two identical runs produce identical
files; wall-clock timings are reported on the console instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import policy as P
from .checkpoint import AdamSnapshot, Checkpoint
from .demos import DemoDataset
from .env import TaskSpec, run_episode
from .errors import ContractError, NumericError, ShapeError
from .policy import PolicyConfig
from .tensor import Tensor, mean_all, record

METRICS_HEADER = "stage,step,loss,success_rate,batch_size,sim_steps"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0003
    batch_size: int = 256
    sim_steps_per_env_step: int = 500
    max_train_steps: int = 2000
    eval_interval: int = 500
    eval_episodes: int = 100
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        for name in (
            "learning_rate",
            "batch_size",
            "sim_steps_per_env_step",
            "max_train_steps",
            "eval_interval",
            "eval_episodes",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class StageSchedule:
    batch_scale: float = 0.8
    sim_scale: float = 0.9

    def __post_init__(self):
        if not (0.0 < self.batch_scale <= 1.0 and 0.0 < self.sim_scale <= 1.0):
            raise ValueError("schedule scales must be in (0, 1]")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            t=0,
        )

    def snapshot(self) -> AdamSnapshot:
        return AdamSnapshot(
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
            t=self.t,
        )


@dataclass
class MetricsRow:
    stage: int
    step: int
    loss: float
    success_rate: float
    wall_seconds: float  # console-reported; excluded from the CSV for determinism
    batch_size: int
    sim_steps: int

    def csv_line(self) -> str:
        return (
            f"{self.stage},{self.step},{self.loss!r},{self.success_rate!r},"
            f"{self.batch_size},{self.sim_steps}"
        )


def bc_loss(predicted: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every batch element and action component."""
    if predicted.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {predicted.shape} vs {target.shape}")
    diff = predicted - target
    return mean_all(diff * diff)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[int, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on the parameter store."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g_t = grads.get(id(p))
        if g_t is None:
            raise ContractError(f"gradient map has no entry for parameter {name!r}")
        g = g_t.data
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + epsilon)


def sample_batch(
    dataset: DemoDataset, batch_size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniform with-replacement draw over the flat step index."""
    if len(dataset) == 0:
        raise ContractError("cannot sample from an empty dataset")
    picks = rng.integers(0, len(dataset), size=batch_size)
    pairs = [dataset.flat_index[i] for i in picks]
    return dataset.step_arrays(pairs)


def evaluate(
    params: dict[str, Tensor],
    cfg: PolicyConfig,
    task: TaskSpec,
    episodes: int,
    seed_base: int,
    sim_substeps: int,
) -> float:
    """Closed-loop success rate over `episodes` consecutively seeded rollouts."""

    def policy(obs, state):
        return P.forward(obs, params, cfg).data

    successes = 0
    for i in range(episodes):
        try:
            result, _ = run_episode(
                task, seed_base + i, policy, sim_substeps, cfg.n_points
            )
        except Exception as exc:
            raise RuntimeError(f"evaluation episode seed {seed_base + i} failed") from exc
        successes += int(result.success)
    return successes / episodes


def finetune_schedule(cfg: TrainConfig, sched: StageSchedule) -> TrainConfig:
    """Stage-2 config: scaled batch size and substeps, rounded to the
    nearest integer (half away from zero) and clamped to at least 1."""

    def scaled(value: int, scale: float) -> int:
        out = int(np.floor(value * scale + 0.5))
        return max(out, 1)

    return replace(
        cfg,
        batch_size=scaled(cfg.batch_size, sched.batch_scale),
        sim_steps_per_env_step=scaled(cfg.sim_steps_per_env_step, sched.sim_scale),
    )


class MetricsWriter:
    """Append-only CSV, header first, flushed after every row."""

    def __init__(self, path: str | None):
        self.path = path
        self._fh = None
        if path is not None:
            self._fh = open(path, "w")
            self._fh.write(METRICS_HEADER + "\n")
            self._fh.flush()

    def append(self, row: MetricsRow) -> None:
        if self._fh is not None:
            self._fh.write(row.csv_line() + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def train_stage(
    cfg: TrainConfig,
    dataset: DemoDataset,
    task: TaskSpec,
    policy_cfg: PolicyConfig,
    init_params: dict[str, Tensor],
    stage: int = 1,
    eval_seed_base: int = 10_000,
    writer: MetricsWriter | None = None,
    log=print,
) -> tuple[Checkpoint, list[MetricsRow]]:
    """One stage of behavior cloning.

    Loops sample -> forward -> loss -> backward -> Adam; every
    eval_interval steps (and at the final step) runs a closed-loop
    evaluation and keeps the checkpoint with the highest success rate,
    ties broken toward the earlier step.
    """
    if len(dataset) == 0:
        raise ContractError("training needs a nonempty dataset")
    params = {k: p.copy() for k, p in init_params.items()}
    adam = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    metrics: list[MetricsRow] = []
    best: Checkpoint | None = None
    t0 = time.perf_counter()
    recent_losses: list[float] = []

    eval_points = set(range(cfg.eval_interval, cfg.max_train_steps + 1, cfg.eval_interval))
    eval_points.add(cfg.max_train_steps)

    for step in range(1, cfg.max_train_steps + 1):
        pts, rs, act = sample_batch(dataset, cfg.batch_size, rng)
        with record() as tape:
            pred = P.forward_batch(pts, rs, params, policy_cfg)
            loss = bc_loss(pred, Tensor(np.asarray(act, dtype=np.float64)))
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NumericError(f"non-finite training loss at step {step}")
        grads = tape.backward(loss, params=params.values())
        adam_step(
            params, grads, adam, cfg.learning_rate,
            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon,
        )
        recent_losses.append(loss_val)

        if step in eval_points:
            success = evaluate(
                params, policy_cfg, task, cfg.eval_episodes,
                eval_seed_base, cfg.sim_steps_per_env_step,
            )
            row = MetricsRow(
                stage=stage,
                step=step,
                loss=float(np.mean(recent_losses)),
                success_rate=success,
                wall_seconds=time.perf_counter() - t0,
                batch_size=cfg.batch_size,
                sim_steps=cfg.sim_steps_per_env_step,
            )
            metrics.append(row)
            if writer is not None:
                writer.append(row)
            log(
                f"stage {stage} step {step}: loss {row.loss:.6f} "
                f"success {success:.3f} ({row.wall_seconds:.1f}s)"
            )
            recent_losses.clear()
            if best is None or success > best.best_score:
                best = Checkpoint(
                    config=policy_cfg,
                    params={k: p.copy() for k, p in params.items()},
                    step=step,
                    best_score=success,
                    adam=adam.snapshot(),
                )
    assert best is not None
    return best, metrics


def run_two_stage(
    stage1_cfg: TrainConfig,
    sched: StageSchedule,
    dataset: DemoDataset,
    task: TaskSpec,
    policy_cfg: PolicyConfig,
    init_params: dict[str, Tensor],
    eval_seed_base: int = 10_000,
    writer: MetricsWriter | None = None,
    log=print,
) -> tuple[Checkpoint, list[MetricsRow]]:
    """Stage 1, then fine-tune from its best checkpoint with the scaled
    config. Returns the higher-scoring checkpoint of the two stages."""
    best1, metrics1 = train_stage(
        stage1_cfg, dataset, task, policy_cfg, init_params,
        stage=1, eval_seed_base=eval_seed_base, writer=writer, log=log,
    )
    stage2_cfg = finetune_schedule(stage1_cfg, sched)
    best2, metrics2 = train_stage(
        stage2_cfg, dataset, task, policy_cfg, best1.params,
        stage=2, eval_seed_base=eval_seed_base, writer=writer, log=log,
    )
    winner = best1 if best1.best_score >= best2.best_score else best2
    return winner, metrics1 + metrics2
