import numpy as np
import pytest

from gp2e.checkpoint import (
    AdamSnapshot,
    Checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from gp2e.env import PointCloudObservation
from gp2e.errors import (
    CheckpointManifestError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from gp2e.policy import PolicyConfig, forward, init_params


def small_cfg():
    return PolicyConfig(
        n_points=10, channels=(5, 6, 7), d_k=7, bias_buckets=6,
        bias_max_dist=0.8, head_hidden=9,
    )


def make_checkpoint(seed=0):
    cfg = small_cfg()
    params = init_params(seed, cfg)
    for p in params.values():
        p.data += np.random.default_rng(seed + 1).standard_normal(p.shape) * 0.01
    return Checkpoint(config=cfg, params=params, step=42, best_score=0.625)


def test_round_trip_bit_identical(tmp_path):
    ckpt = make_checkpoint()
    path = str(tmp_path / "c.gp2e")
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    assert loaded.config == ckpt.config
    assert loaded.step == 42 and loaded.best_score == 0.625
    assert loaded.params.keys() == ckpt.params.keys()
    for k in ckpt.params:
        assert np.array_equal(loaded.params[k].data, ckpt.params[k].data), k


def test_round_trip_preserves_forward_outputs(tmp_path):
    ckpt = make_checkpoint(3)
    rng = np.random.default_rng(5)
    obs = PointCloudObservation(
        points=rng.uniform(-0.3, 0.3, size=(10, 6)).astype(np.float32),
        robot_state=rng.uniform(-0.3, 0.3, size=7).astype(np.float32),
    )
    before = forward(obs, ckpt.params, ckpt.config).data
    path = str(tmp_path / "c.gp2e")
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    after = forward(obs, loaded.params, loaded.config).data
    assert np.array_equal(before, after)


def test_round_trip_adam_state(tmp_path):
    ckpt = make_checkpoint()
    ckpt.adam = AdamSnapshot(
        m={k: np.full(p.shape, 0.5) for k, p in ckpt.params.items()},
        v={k: np.full(p.shape, 0.25) for k, p in ckpt.params.items()},
        t=17,
    )
    path = str(tmp_path / "c.gp2e")
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    assert loaded.adam is not None and loaded.adam.t == 17
    for k in ckpt.params:
        assert np.array_equal(loaded.adam.m[k], ckpt.adam.m[k])
        assert np.array_equal(loaded.adam.v[k], ckpt.adam.v[k])


def test_wrong_magic_is_version_error(tmp_path):
    path = str(tmp_path / "c.gp2e")
    save_checkpoint(path, make_checkpoint())
    raw = bytearray(open(path, "rb").read())
    raw[:4] = b"NOPE"
    open(path, "wb").write(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_wrong_version_is_version_error(tmp_path):
    path = str(tmp_path / "c.gp2e")
    save_checkpoint(path, make_checkpoint())
    raw = bytearray(open(path, "rb").read())
    raw[4] = 99
    open(path, "wb").write(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_truncated_file_is_truncation_error(tmp_path):
    path = str(tmp_path / "c.gp2e")
    save_checkpoint(path, make_checkpoint())
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[: len(raw) - 100])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_manifest_shape_mismatch_is_manifest_error(tmp_path):
    ckpt = make_checkpoint()
    # shapes inconsistent with what the stored config implies
    ckpt.params["head2.bias"].data = np.zeros(11)
    path = str(tmp_path / "c.gp2e")
    save_checkpoint(path, ckpt)
    with pytest.raises(CheckpointManifestError):
        load_checkpoint(path)


def test_no_partial_file_on_failed_load(tmp_path):
    # loading never mutates the file; a bad write leaves no file at all
    path = tmp_path / "c.gp2e"
    save_checkpoint(str(path), make_checkpoint())
    before = open(path, "rb").read()
    raw = bytearray(before)
    raw[4] = 99
    open(path, "wb").write(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(str(path))
    assert open(path, "rb").read() == bytes(raw)
    assert not (tmp_path / "c.gp2e.tmp").exists()


def test_float32_mode_shrinks_file(tmp_path):
    ckpt = make_checkpoint()
    p64 = str(tmp_path / "c64.gp2e")
    p32 = str(tmp_path / "c32.gp2e")
    save_checkpoint(p64, ckpt)
    save_checkpoint(p32, ckpt, dtype="<f4")
    import os

    assert os.path.getsize(p32) < 0.6 * os.path.getsize(p64)
    loaded = load_checkpoint(p32)
    for k in ckpt.params:
        assert np.allclose(loaded.params[k].data, ckpt.params[k].data, atol=1e-6)
