"""Point-cloud behavior cloning with guided self-attention, a two-stage
fine-tuning trainer, and a deterministic toy manipulation environment."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .demos import DemoDataset, Demonstration, generate_demos, load_demos
from .env import (
    EnvState,
    EpisodeResult,
    PointCloudObservation,
    TaskSpec,
    check_success,
    env_step,
    fill_task,
    observe,
    pour_task,
    reset,
    run_episode,
    scripted_expert,
)
from .policy import PolicyConfig, forward, forward_batch, init_params
from .tensor import Tensor, backward, finite_diff_grad, record
from .training import (
    AdamState,
    MetricsRow,
    StageSchedule,
    TrainConfig,
    adam_step,
    bc_loss,
    evaluate,
    finetune_schedule,
    run_two_stage,
    sample_batch,
    train_stage,
)

__all__ = [name for name in dir() if not name.startswith("_")]
