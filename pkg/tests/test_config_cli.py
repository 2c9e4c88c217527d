import os
import subprocess
import sys

import numpy as np
import pytest

from gp2e.config import parse_config, parse_config_text
from gp2e.errors import ConfigError


def test_empty_config_gives_library_defaults():
    cfg = parse_config_text("")
    assert cfg.train.learning_rate == 0.0003
    assert cfg.train.batch_size == 256
    assert cfg.train.sim_steps_per_env_step == 500
    assert cfg.train.eval_episodes == 100
    assert cfg.policy.n_points == 1200
    assert cfg.policy.channels == (64, 128, 512)
    assert cfg.policy.condensed_channels == 704
    assert cfg.schedule.batch_scale == 0.8
    assert cfg.schedule.sim_scale == 0.9
    assert cfg.demo_count == 200


def test_config_sections_parse():
    text = """
[run]
task = toy_pour
mode = single_stage
seed = 9
attention = off
condensed_mode = shallow

[policy]
n_points = 96
channels = 16, 24, 32
d_k = 32

[train]
batch_size = 10
learning_rate = 0.001

[paths]
demos = /tmp/x.gp2d
"""
    cfg = parse_config_text(text)
    assert cfg.task == "toy_pour"
    assert cfg.mode == "single_stage"
    assert cfg.seed == 9 and cfg.train.seed == 9
    assert cfg.policy.use_attention is False
    assert cfg.policy.condensed_mode == "shallow"
    assert cfg.policy.n_points == 96
    assert cfg.policy.channels == (16, 24, 32)
    assert cfg.train.batch_size == 10
    assert cfg.demos_path == "/tmp/x.gp2d"


def test_config_unknown_key_names_key_and_line():
    with pytest.raises(ConfigError) as e:
        parse_config_text("[train]\nbatch_sizes = 4\n")
    msg = str(e.value)
    assert "batch_sizes" in msg and "line 2" in msg


def test_config_duplicate_key_rejected():
    with pytest.raises(ConfigError) as e:
        parse_config_text("[train]\nbatch_size = 4\nbatch_size = 8\n")
    assert "duplicate" in str(e.value) and "line 3" in str(e.value)


def test_config_range_error_names_line():
    with pytest.raises(ConfigError) as e:
        parse_config_text("[train]\nbatch_size = -1\n")
    assert "line 2" in str(e.value)


def test_config_type_error_names_line():
    with pytest.raises(ConfigError) as e:
        parse_config_text("[train]\nbatch_size = many\n")
    assert "line 2" in str(e.value)


def test_config_key_outside_section():
    with pytest.raises(ConfigError):
        parse_config_text("batch_size = 4\n")


def test_config_unknown_section():
    with pytest.raises(ConfigError):
        parse_config_text("[nonsense]\nx = 1\n")


def test_config_comments_and_blanks_ignored():
    cfg = parse_config_text("# comment\n\n[train]\nbatch_size = 7  # inline\n")
    assert cfg.train.batch_size == 7


# -- CLI end to end ------------------------------------------------------------

TINY_CONFIG = """
[run]
task = toy_fill
seed = 1

[policy]
n_points = 48
channels = 5, 6, 7
d_k = 7
bias_buckets = 6
bias_max_dist = 0.8
head_hidden = 9

[train]
batch_size = 4
sim_steps_per_env_step = 200
max_train_steps = 4
eval_interval = 2
eval_episodes = 2

[env]
particles = 32
max_episode_steps = 45
demo_count = 2

[paths]
demos = {d}/demos.gp2d
checkpoint = {d}/policy.gp2e
metrics = {d}/metrics.csv
plot = {d}/curve.svg
"""


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "gp2e.cli", *args], capture_output=True, text=True
    )


@pytest.fixture(scope="module")
def cli_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg_path = d / "run.cfg"
    cfg_path.write_text(TINY_CONFIG.format(d=d))
    r = run_cli("gen-demos", "--config", str(cfg_path))
    assert r.returncode == 0, r.stderr
    r = run_cli("train", "--config", str(cfg_path))
    assert r.returncode == 0, r.stderr
    return d, str(cfg_path)


def test_cli_gen_demos_repeat_identical(cli_dir):
    d, cfg = cli_dir
    first = (d / "demos.gp2d").read_bytes()
    r = run_cli("gen-demos", "--config", cfg)
    assert r.returncode == 0, r.stderr
    assert "2 episodes" in r.stdout
    assert (d / "demos.gp2d").read_bytes() == first


def test_cli_train_two_stage_metrics(cli_dir):
    d, cfg = cli_dir
    lines = (d / "metrics.csv").read_text().splitlines()
    assert lines[0] == "stage,step,loss,success_rate,batch_size,sim_steps"
    stages = [int(l.split(",")[0]) for l in lines[1:]]
    assert set(stages) == {1, 2}
    stage2 = [l for l in lines[1:] if l.startswith("2,")]
    assert all(l.split(",")[4] == "3" and l.split(",")[5] == "180" for l in stage2)


def test_cli_train_deterministic_metrics(cli_dir):
    d, cfg = cli_dir
    first = (d / "metrics.csv").read_bytes()
    r = run_cli("train", "--config", cfg)
    assert r.returncode == 0, r.stderr
    assert (d / "metrics.csv").read_bytes() == first


def test_cli_eval_checkpoint_and_expert(cli_dir):
    d, cfg = cli_dir
    r = run_cli("eval", "--config", cfg, "--checkpoint", str(d / "policy.gp2e"))
    assert r.returncode == 0, r.stderr
    assert r.stdout.startswith("success_rate ")
    r2 = run_cli("eval", "--config", cfg, "--checkpoint", str(d / "policy.gp2e"))
    assert r2.stdout == r.stdout
    r3 = run_cli("eval", "--config", cfg, "--expert")
    assert r3.returncode == 0
    assert r3.stdout.startswith("success_rate ")


def test_cli_eval_missing_checkpoint_fails(cli_dir, tmp_path):
    _, cfg = cli_dir
    r = run_cli("eval", "--config", cfg, "--checkpoint", str(tmp_path / "nope.gp2e"))
    assert r.returncode != 0
    assert "error:" in r.stderr


def test_cli_plot_and_determinism(cli_dir):
    d, cfg = cli_dir
    r = run_cli("plot", "--config", cfg)
    assert r.returncode == 0, r.stderr
    assert "best success" in r.stdout
    svg1 = (d / "curve.svg").read_bytes()
    assert svg1.startswith(b"<?xml")
    r = run_cli("plot", "--config", cfg)
    assert (d / "curve.svg").read_bytes() == svg1


def test_cli_plot_single_row(tmp_path):
    m = tmp_path / "m.csv"
    m.write_text("stage,step,loss,success_rate,batch_size,sim_steps\n1,5,0.1,0.5,4,50\n")
    out = tmp_path / "p.svg"
    r = run_cli("plot", "--metrics", str(m), "--out", str(out))
    assert r.returncode == 0, r.stderr
    assert out.exists()


def test_cli_plot_malformed_row_names_line(tmp_path):
    m = tmp_path / "m.csv"
    m.write_text("stage,step,loss,success_rate,batch_size,sim_steps\n1,5,oops,0.5,4,50\n")
    r = run_cli("plot", "--metrics", str(m), "--out", str(tmp_path / "p.svg"))
    assert r.returncode != 0
    assert "line 2" in r.stderr


def test_cli_gen_demos_unwritable_path_no_partial_file(tmp_path):
    cfg_path = tmp_path / "bad.cfg"
    cfg_path.write_text(
        TINY_CONFIG.format(d="/nonexistent-dir/deep")
    )
    r = run_cli("gen-demos", "--config", cfg_path.as_posix())
    assert r.returncode != 0
    assert "error:" in r.stderr


def test_cli_gradcheck_negative_control():
    # corrupting a backward rule must fail the suite and name the op
    code = (
        "import numpy as np, gp2e.tensor as T\n"
        "orig = T.relu\n"
        "def bad_relu(x):\n"
        "    out = np.maximum(x.data, 0.0)\n"
        "    return T._emit('relu', out, (x,), lambda g: (g * 0.5,))\n"
        "T.relu = bad_relu\n"
        "import gp2e.layers, gp2e.gradcheck as gc\n"
        "gp2e.layers.relu = bad_relu\n"
        "rs = gc.run_op_checks(instances=3)\n"
        "bad = [r.name for r in rs if not r.ok]\n"
        "print('BAD:', bad)\n"
        "assert 'relu' in bad\n"
    )
    r = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert "relu" in r.stdout
