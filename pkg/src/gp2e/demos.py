"""Expert demonstration collection, the on-disk format, and the dataset.

File layout: magic "GP2D", little-endian u32 format version, task id,
episode count, and the array extents (points per cloud, point channels,
robot-state dim, action dim) up front so a reader can validate sizes
before touching the payload. Then, per episode: u64 seed, u32 step
count, and per step the little-endian float32 arrays (points, robot
state, action). Files are written temp-then-rename.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .env import TASK_FILL, TASK_POUR, TaskSpec, expert_policy, run_episode
from .errors import ContractError, DemoFileError

MAGIC = b"GP2D"
FORMAT_VERSION = 1
_TASK_IDS = {TASK_FILL: 0, TASK_POUR: 1}
_TASK_NAMES = {v: k for k, v in _TASK_IDS.items()}

POINT_CHANNELS = 6
ROBOT_DIM = 7
ACTION_DIM = 4


@dataclass
class Demonstration:
    task: str
    seed: int
    points: np.ndarray  # (steps, n_points, 6) float32
    robot_states: np.ndarray  # (steps, 7) float32
    actions: np.ndarray  # (steps, 4) float32
    success: bool = True

    @property
    def steps(self) -> int:
        return len(self.actions)


class DemoDataset:
    """Successful demonstrations with a flat (episode, step) index."""

    def __init__(self, demos: list[Demonstration]):
        for d in demos:
            if not d.success:
                raise ContractError("only successful demonstrations may enter the dataset")
            if d.steps < 1:
                raise ContractError("demonstrations must have at least one step")
        self.demos = demos
        self.flat_index = [(e, s) for e, d in enumerate(demos) for s in range(d.steps)]

    def __len__(self) -> int:
        return len(self.flat_index)

    @property
    def n_points(self) -> int:
        return self.demos[0].points.shape[1] if self.demos else 0

    def step_arrays(self, pairs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gather (points, robot_states, actions) for (episode, step) pairs."""
        pts = np.stack([self.demos[e].points[s] for e, s in pairs])
        rs = np.stack([self.demos[e].robot_states[s] for e, s in pairs])
        act = np.stack([self.demos[e].actions[s] for e, s in pairs])
        return pts, rs, act


def collect_demo(
    task: TaskSpec, seed: int, sim_substeps: int, n_points: int
) -> tuple[Demonstration, bool]:
    """Roll the scripted expert once; the demo is valid only on success."""
    result, steps = run_episode(
        task, seed, expert_policy(task), sim_substeps, n_points, record_steps=True
    )
    if not steps:
        return Demonstration(task.task, seed, np.empty((0, n_points, 6), np.float32),
                             np.empty((0, 7), np.float32), np.empty((0, 4), np.float32),
                             success=False), False
    demo = Demonstration(
        task=task.task,
        seed=seed,
        points=np.stack([o.points for o, _ in steps]),
        robot_states=np.stack([o.robot_state for o, _ in steps]),
        actions=np.stack([a for _, a in steps]),
        success=result.success,
    )
    return demo, result.success


def generate_demos(
    task: TaskSpec,
    count: int,
    seed_base: int,
    out_path: str,
    sim_substeps: int = 500,
    n_points: int = 1200,
) -> list[Demonstration]:
    """Collect `count` successful expert episodes and write them to disk.

    Seeds run upward from seed_base; failures are skipped. Raises if
    5 * count seeds cannot produce enough successes.
    """
    demos: list[Demonstration] = []
    tried = 0
    seed = seed_base
    budget = max(5 * count, 1)
    while len(demos) < count:
        if tried >= budget:
            raise ContractError(
                f"expert reached only {len(demos)}/{count} successes in {tried} seeds"
            )
        demo, ok = collect_demo(task, seed, sim_substeps, n_points)
        if ok:
            demos.append(demo)
        seed += 1
        tried += 1
    save_demos(out_path, task.task, demos, n_points)
    return demos


def save_demos(path: str, task: str, demos: list[Demonstration], n_points: int) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<B", _TASK_IDS[task])
    blob += struct.pack("<I", len(demos))
    blob += struct.pack("<IIII", n_points, POINT_CHANNELS, ROBOT_DIM, ACTION_DIM)
    for d in demos:
        blob += struct.pack("<QI", d.seed, d.steps)
        blob += np.ascontiguousarray(d.points, dtype="<f4").tobytes()
        blob += np.ascontiguousarray(d.robot_states, dtype="<f4").tobytes()
        blob += np.ascontiguousarray(d.actions, dtype="<f4").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_demos(path: str) -> tuple[str, list[Demonstration]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def read(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise DemoFileError(f"demo file ends at byte {len(buf)}, needed {pos + n}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if read(4) != MAGIC:
        raise DemoFileError("bad demo-file magic")
    (version,) = struct.unpack("<I", read(4))
    if version != FORMAT_VERSION:
        raise DemoFileError(f"demo format version {version}, expected {FORMAT_VERSION}")
    (task_id,) = struct.unpack("<B", read(1))
    if task_id not in _TASK_NAMES:
        raise DemoFileError(f"unknown task id {task_id}")
    (n_episodes,) = struct.unpack("<I", read(4))
    n_points, pc, rd, ad = struct.unpack("<IIII", read(16))
    if (pc, rd, ad) != (POINT_CHANNELS, ROBOT_DIM, ACTION_DIM):
        raise DemoFileError(f"unexpected extents {(pc, rd, ad)}")
    task = _TASK_NAMES[task_id]
    demos = []
    for _ in range(n_episodes):
        seed, steps = struct.unpack("<QI", read(12))
        pts = np.frombuffer(read(steps * n_points * pc * 4), dtype="<f4").reshape(
            steps, n_points, pc
        )
        rs = np.frombuffer(read(steps * rd * 4), dtype="<f4").reshape(steps, rd)
        act = np.frombuffer(read(steps * ad * 4), dtype="<f4").reshape(steps, ad)
        demos.append(Demonstration(task, int(seed), pts.copy(), rs.copy(), act.copy()))
    if pos != len(buf):
        raise DemoFileError(f"{len(buf) - pos} trailing bytes in demo file")
    return task, demos
