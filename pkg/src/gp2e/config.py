"""Run configuration: a line-oriented `key = value` file with [section]
headers. Unknown keys, duplicate keys, type errors, and out-of-range
values are all hard errors that name the offending key and line. Every
key is optional; omitted keys fall back to the library defaults
(learning rate 0.0003, batch 256, 500 substeps, 1200 points, stage
scales 0.8/0.9, 200 demos, 100 evaluation episodes).

Sections and keys:

  [run]      task = toy_fill | toy_pour ; mode = two_stage | single_stage
             attention = on | off ; condensed_mode = deep | shallow ; seed
  [policy]   n_points, channels (comma list of 3), d_k, bias_buckets,
             bias_max_dist, head_hidden
  [train]    learning_rate, batch_size, sim_steps_per_env_step,
             max_train_steps, eval_interval, eval_episodes
  [schedule] batch_scale, sim_scale
  [env]      particles, max_episode_steps, demo_count
  [paths]    demos, checkpoint, metrics, plot
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .env import TASK_FILL, TASK_POUR
from .errors import ConfigError
from .policy import CONDENSED_DEEP, CONDENSED_SHALLOW, PolicyConfig
from .training import StageSchedule, TrainConfig


@dataclass
class RunConfig:
    task: str = TASK_FILL
    mode: str = "two_stage"  # or "single_stage"
    seed: int = 0
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: StageSchedule = field(default_factory=StageSchedule)
    particles: int = 256
    max_episode_steps: int = 200
    demo_count: int = 200
    demos_path: str = "demos.gp2d"
    checkpoint_path: str = "policy.gp2e"
    metrics_path: str = "metrics.csv"
    plot_path: str = "curve.svg"


def _parse_scalar(kind: str, raw: str, key: str, line_no: int):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind == "channels":
            parts = tuple(int(p.strip()) for p in raw.split(","))
            if len(parts) != 3:
                raise ValueError("need exactly 3 widths")
            return parts
        if kind == "on_off":
            if raw not in ("on", "off"):
                raise ValueError("expected on or off")
            return raw == "on"
    except ValueError as exc:
        raise ConfigError(f"line {line_no}: key {key!r}: {exc}") from exc
    raise AssertionError(kind)


# (section, key) -> (type, validator description, validator)
_POSITIVE = ("a positive value", lambda v: (isinstance(v, tuple) and all(x > 0 for x in v)) or (not isinstance(v, tuple) and v > 0))
_ANY = ("any value", lambda v: True)
_UNIT = ("a value in (0, 1]", lambda v: 0 < v <= 1)

_SCHEMA: dict[tuple[str, str], tuple[str, tuple]] = {
    ("run", "task"): ("str", ("toy_fill or toy_pour", lambda v: v in (TASK_FILL, TASK_POUR))),
    ("run", "mode"): ("str", ("two_stage or single_stage", lambda v: v in ("two_stage", "single_stage"))),
    ("run", "attention"): ("on_off", _ANY),
    ("run", "condensed_mode"): ("str", ("deep or shallow", lambda v: v in (CONDENSED_DEEP, CONDENSED_SHALLOW))),
    ("run", "seed"): ("int", ("a nonnegative value", lambda v: v >= 0)),
    ("policy", "n_points"): ("int", _POSITIVE),
    ("policy", "channels"): ("channels", _POSITIVE),
    ("policy", "d_k"): ("int", _POSITIVE),
    ("policy", "bias_buckets"): ("int", _POSITIVE),
    ("policy", "bias_max_dist"): ("float", _POSITIVE),
    ("policy", "head_hidden"): ("int", _POSITIVE),
    ("train", "learning_rate"): ("float", _POSITIVE),
    ("train", "batch_size"): ("int", _POSITIVE),
    ("train", "sim_steps_per_env_step"): ("int", _POSITIVE),
    ("train", "max_train_steps"): ("int", _POSITIVE),
    ("train", "eval_interval"): ("int", _POSITIVE),
    ("train", "eval_episodes"): ("int", _POSITIVE),
    ("schedule", "batch_scale"): ("float", _UNIT),
    ("schedule", "sim_scale"): ("float", _UNIT),
    ("env", "particles"): ("int", _POSITIVE),
    ("env", "max_episode_steps"): ("int", _POSITIVE),
    ("env", "demo_count"): ("int", ("a nonnegative value", lambda v: v >= 0)),
    ("paths", "demos"): ("str", _ANY),
    ("paths", "checkpoint"): ("str", _ANY),
    ("paths", "metrics"): ("str", _ANY),
    ("paths", "plot"): ("str", _ANY),
}


def parse_config_text(text: str) -> RunConfig:
    section = None
    values: dict[tuple[str, str], object] = {}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not any(s == section for s, _ in _SCHEMA):
                raise ConfigError(f"line {line_no}: unknown section {section!r}")
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key = value, got {line!r}")
        if section is None:
            raise ConfigError(f"line {line_no}: key outside any [section]")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if (section, key) not in _SCHEMA:
            raise ConfigError(f"line {line_no}: unknown key {key!r} in section [{section}]")
        if (section, key) in values:
            raise ConfigError(f"line {line_no}: duplicate key {key!r} in section [{section}]")
        kind, (desc, check) = _SCHEMA[(section, key)]
        value = _parse_scalar(kind, raw, key, line_no)
        if not check(value):
            raise ConfigError(f"line {line_no}: key {key!r} must be {desc}, got {raw!r}")
        values[(section, key)] = value

    def get(section: str, key: str, default):
        return values.get((section, key), default)

    policy = PolicyConfig(
        n_points=get("policy", "n_points", 1200),
        channels=get("policy", "channels", (64, 128, 512)),
        condensed_mode=get("run", "condensed_mode", CONDENSED_DEEP),
        d_k=get("policy", "d_k", 512),
        bias_buckets=get("policy", "bias_buckets", 16),
        bias_max_dist=get("policy", "bias_max_dist", 2.0),
        head_hidden=get("policy", "head_hidden", 256),
        use_attention=get("run", "attention", True),
    )
    train = TrainConfig(
        learning_rate=get("train", "learning_rate", 0.0003),
        batch_size=get("train", "batch_size", 256),
        sim_steps_per_env_step=get("train", "sim_steps_per_env_step", 500),
        max_train_steps=get("train", "max_train_steps", 2000),
        eval_interval=get("train", "eval_interval", 500),
        eval_episodes=get("train", "eval_episodes", 100),
        seed=get("run", "seed", 0),
    )
    schedule = StageSchedule(
        batch_scale=get("schedule", "batch_scale", 0.8),
        sim_scale=get("schedule", "sim_scale", 0.9),
    )
    return RunConfig(
        task=get("run", "task", TASK_FILL),
        mode=get("run", "mode", "two_stage"),
        seed=get("run", "seed", 0),
        policy=policy,
        train=train,
        schedule=schedule,
        particles=get("env", "particles", 256),
        max_episode_steps=get("env", "max_episode_steps", 200),
        demo_count=get("env", "demo_count", 200),
        demos_path=get("paths", "demos", "demos.gp2d"),
        checkpoint_path=get("paths", "checkpoint", "policy.gp2e"),
        metrics_path=get("paths", "metrics", "metrics.csv"),
        plot_path=get("paths", "plot", "curve.svg"),
    )


def parse_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return parse_config_text(text)
