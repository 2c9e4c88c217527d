"""Binary checkpoint format.

Layout: magic "GP2E", little-endian u32 format version, a textual
key=value config block, a manifest of (name, dtype, shape) entries, then
the raw little-endian tensor payloads in manifest order. Saving is
temp-file-then-rename so a crashed writer never leaves a partial file.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheckpointManifestError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .policy import PolicyConfig, param_shapes
from .tensor import Tensor

MAGIC = b"GP2E"
FORMAT_VERSION = 1

_DTYPES = {0: "<f8", 1: "<f4"}
_DTYPE_CODES = {"<f8": 0, "<f4": 1}


@dataclass
class AdamSnapshot:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int


@dataclass
class Checkpoint:
    config: PolicyConfig
    params: dict[str, Tensor]
    step: int = 0
    best_score: float = 0.0
    adam: AdamSnapshot | None = None


def _config_block(ckpt: Checkpoint) -> str:
    cfg = ckpt.config
    lines = [
        f"n_points={cfg.n_points}",
        f"channels={','.join(str(c) for c in cfg.channels)}",
        f"condensed_mode={cfg.condensed_mode}",
        f"d_k={cfg.d_k}",
        f"bias_buckets={cfg.bias_buckets}",
        f"bias_max_dist={cfg.bias_max_dist!r}",
        f"robot_state_dim={cfg.robot_state_dim}",
        f"action_dim={cfg.action_dim}",
        f"head_hidden={cfg.head_hidden}",
        f"use_attention={int(cfg.use_attention)}",
        f"step={ckpt.step}",
        f"best_score={ckpt.best_score!r}",
    ]
    if ckpt.adam is not None:
        lines.append(f"adam_t={ckpt.adam.t}")
    return "\n".join(lines) + "\n"


def _parse_config_block(text: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    return fields


def save_checkpoint(path: str, ckpt: Checkpoint, dtype: str = "<f8") -> None:
    """Write the checkpoint atomically. dtype "<f4" halves the file at the
    cost of the bit-exact round trip; the default keeps full precision."""
    if dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported checkpoint dtype {dtype!r}")
    entries: list[tuple[str, np.ndarray]] = [(k, ckpt.params[k].data) for k in sorted(ckpt.params)]
    if ckpt.adam is not None:
        for k in sorted(ckpt.adam.m):
            entries.append((f"adam.m.{k}", ckpt.adam.m[k]))
        for k in sorted(ckpt.adam.v):
            entries.append((f"adam.v.{k}", ckpt.adam.v[k]))
    cfg_bytes = _config_block(ckpt).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<I", len(entries))
    code = _DTYPE_CODES[dtype]
    for name, arr in entries:
        name_b = name.encode("utf-8")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<BB", code, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
    for _, arr in entries:
        blob += np.ascontiguousarray(arr, dtype=dtype).tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.read(4)
    if magic != MAGIC:
        raise CheckpointVersionError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version}, expected {FORMAT_VERSION}")
    (cfg_len,) = r.unpack("<I")
    fields = _parse_config_block(r.read(cfg_len).decode("utf-8"))
    try:
        cfg = PolicyConfig(
            n_points=int(fields["n_points"]),
            channels=tuple(int(c) for c in fields["channels"].split(",")),
            condensed_mode=fields["condensed_mode"],
            d_k=int(fields["d_k"]),
            bias_buckets=int(fields["bias_buckets"]),
            bias_max_dist=float(fields["bias_max_dist"]),
            robot_state_dim=int(fields["robot_state_dim"]),
            action_dim=int(fields["action_dim"]),
            head_hidden=int(fields["head_hidden"]),
            use_attention=bool(int(fields["use_attention"])),
        )
        step = int(fields["step"])
        best_score = float(fields["best_score"])
    except (KeyError, ValueError) as exc:
        raise CheckpointManifestError(f"malformed config block: {exc}") from exc
    (n_entries,) = r.unpack("<I")
    manifest: list[tuple[str, str, tuple[int, ...]]] = []
    for _ in range(n_entries):
        (name_len,) = r.unpack("<H")
        name = r.read(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointManifestError(f"unknown dtype code {code} for {name!r}")
        shape = tuple(r.unpack(f"<{ndim}I")) if ndim else ()
        manifest.append((name, _DTYPES[code], shape))
    arrays: dict[str, np.ndarray] = {}
    for name, dt, shape in manifest:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.read(count * np.dtype(dt).itemsize)
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointManifestError(f"{len(r.buf) - r.pos} trailing bytes after payload")

    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items() if not k.startswith("adam.")}
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointManifestError(f"parameter set mismatch: missing={missing} extra={extra}")
    for name, t in params.items():
        if t.shape != expected[name]:
            raise CheckpointManifestError(
                f"{name!r} has shape {t.shape}, config implies {expected[name]}"
            )
    adam = None
    if "adam_t" in fields:
        m = {k[len("adam.m.") :]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        v_ = {k[len("adam.v.") :]: v for k, v in arrays.items() if k.startswith("adam.v.")}
        adam = AdamSnapshot(m=m, v=v_, t=int(fields["adam_t"]))
    return Checkpoint(config=cfg, params=params, step=step, best_score=best_score, adam=adam)
