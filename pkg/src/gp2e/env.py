"""Deterministic desk-scale particle environment with two tasks.

A gripper point moves by clamped position deltas and can rigidly grab
every particle within a fixed radius while its grip is closed. Free
particles integrate damped gravity in fixed substeps; container walls
are impenetrable axis-aligned boxes; particles that reach a container
floor or the top of the pile inside it settle into stacked height slots
(there is no pairwise particle collision, the slot stack is what gives a
fill level its height). Everything is a pure function of (task, seed,
action sequence), bit-reproducible across runs.

Tasks: "toy_fill" moves essentially all particles from the source box
into the beaker; "toy_pour" must land the beaker's fill level on a
per-episode target line, which requires scooping a calibrated amount.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EnvError

TASK_FILL = "toy_fill"
TASK_POUR = "toy_pour"

GRAVITY = 9.8  # m/s^2, acts on -z
DT = 1e-3  # seconds per physics substep
DAMPING = 0.98  # velocity retention per substep
GRASP_RADIUS = 0.06  # m
ACTION_CLAMP = 0.05  # m per env step and axis
HEIGHT_CLIP = 0.002  # m, ground-artifact removal threshold
GROUND_Z = 0.0
WORKSPACE = 1.0  # workspace is [-1, 1]^3

GRIPPER_MARKER_RADIUS = 0.015
VIEW_KEEP_PROB = 0.75
VIEW_NOISE_STD = 0.001

LABEL_GRIPPER = (1.0, 0.0, 0.0)
LABEL_PARTICLE = (0.0, 1.0, 0.0)
LABEL_CONTAINER = (0.0, 0.0, 1.0)
LABEL_TARGET_LINE = (0.0, 0.0, 0.5)


@dataclass(frozen=True)
class Container:
    """Open-top box: interior cavity plus walls and a floor slab."""

    center: tuple[float, float]  # xy of the cavity center
    base_z: float  # z where the outer box rests
    half_x: float  # interior half extent
    half_y: float
    depth: float  # interior depth (floor to rim)
    wall: float  # wall thickness
    floor: float  # floor slab thickness
    per_layer: int  # settled particles per stacked layer
    layer_dz: float  # height of one stacked layer

    @property
    def floor_z(self) -> float:
        return self.base_z + self.floor

    @property
    def rim_z(self) -> float:
        return self.floor_z + self.depth

    def rest_z(self, slot: int) -> float:
        return self.floor_z + (slot // self.per_layer + 0.5) * self.layer_dz

    def level_of_count(self, count: int) -> float:
        """Fill-surface height metric if `count` particles stack bottom-up:
        mean rest height of the top tenth (at least one)."""
        if count <= 0:
            return self.floor_z
        top = max(1, int(np.ceil(0.1 * count)))
        slots = np.arange(count - top, count)
        return float(np.mean([self.rest_z(int(s)) for s in slots]))

    def inside_column(self, pos: np.ndarray) -> np.ndarray:
        """Mask of positions inside the interior cavity (below the rim)."""
        cx, cy = self.center
        return (
            (np.abs(pos[:, 0] - cx) < self.half_x)
            & (np.abs(pos[:, 1] - cy) < self.half_y)
            & (pos[:, 2] < self.rim_z)
            & (pos[:, 2] >= self.base_z)
        )

    def inside_outer(self, pos: np.ndarray) -> np.ndarray:
        cx, cy = self.center
        ox = self.half_x + self.wall
        oy = self.half_y + self.wall
        return (
            (np.abs(pos[:, 0] - cx) < ox)
            & (np.abs(pos[:, 1] - cy) < oy)
            & (pos[:, 2] < self.rim_z)
            & (pos[:, 2] >= self.base_z)
        )


# geometry shared by every episode; centers are drawn per episode
SOURCE_GEOM = dict(half_x=0.03, half_y=0.03, depth=0.08, wall=0.01, floor=0.01,
                   per_layer=36, layer_dz=0.008)
BEAKER_GEOM = dict(half_x=0.04, half_y=0.04, depth=0.14, wall=0.01, floor=0.01,
                   per_layer=25, layer_dz=0.012)

POUR_COUNT_RANGE = (50, 175)  # scoopable target amounts for toy_pour


@dataclass(frozen=True)
class TaskSpec:
    task: str
    particles: int = 256
    fill_threshold: float = 0.90
    velocity_threshold: float = 0.05  # m/s
    pour_tolerance: float = 0.004  # m
    spill_limit: int = 100
    max_episode_steps: int = 200

    def __post_init__(self):
        if self.task not in (TASK_FILL, TASK_POUR):
            raise ValueError(f"unknown task {self.task!r}")
        for name in ("fill_threshold", "velocity_threshold", "pour_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.particles <= 0 or self.spill_limit <= 0 or self.max_episode_steps <= 0:
            raise ValueError("counts must be positive")


def fill_task(**kw) -> TaskSpec:
    return TaskSpec(task=TASK_FILL, **kw)


def pour_task(**kw) -> TaskSpec:
    return TaskSpec(task=TASK_POUR, **kw)


@dataclass
class EnvState:
    positions: np.ndarray  # (M, 3)
    velocities: np.ndarray  # (M, 3)
    settled: np.ndarray  # (M,) bool: at rest in a container stack
    gripper: np.ndarray  # (3,)
    gripper_vel: np.ndarray  # (3,)
    grip_closed: bool
    source: Container
    beaker: Container
    target_line_z: float | None  # toy_pour only
    target_count: int | None  # toy_pour only
    step_count: int
    seed: int

    def carried_mask(self) -> np.ndarray:
        if not self.grip_closed:
            return np.zeros(len(self.positions), dtype=bool)
        d2 = ((self.positions - self.gripper) ** 2).sum(axis=1)
        return d2 <= GRASP_RADIUS**2

    def copy(self) -> "EnvState":
        return replace(
            self,
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            settled=self.settled.copy(),
            gripper=self.gripper.copy(),
            gripper_vel=self.gripper_vel.copy(),
        )


@dataclass
class PointCloudObservation:
    points: np.ndarray  # (n_points, 6) float32: xyz + label color
    robot_state: np.ndarray  # (7,) float32: gripper xyz, gripper vel xyz, grip flag


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    metrics: dict[str, float]


def reset(task: TaskSpec, seed: int) -> EnvState:
    """Deterministic initial state: particles stacked in the source box,
    container positions and (for toy_pour) the target line drawn from the
    seeded generator."""
    rng = np.random.default_rng(seed)
    src_center = (float(rng.uniform(-0.26, -0.12)), float(rng.uniform(-0.08, 0.08)))
    bkr_center = (float(rng.uniform(0.12, 0.26)), float(rng.uniform(-0.08, 0.08)))
    source = Container(center=src_center, base_z=0.0, **SOURCE_GEOM)
    beaker = Container(center=bkr_center, base_z=0.0, **BEAKER_GEOM)

    m = task.particles
    slots = np.arange(m)
    layer = slots // source.per_layer
    cell = slots % source.per_layer
    nx = int(round(np.sqrt(source.per_layer)))
    gx = (cell % nx - (nx - 1) / 2.0) * (2 * source.half_x / nx)
    gy = (cell // nx - (nx - 1) / 2.0) * (2 * source.half_y / nx)
    jitter = rng.uniform(-0.002, 0.002, size=(m, 2))
    positions = np.empty((m, 3))
    positions[:, 0] = source.center[0] + gx + jitter[:, 0]
    positions[:, 1] = source.center[1] + gy + jitter[:, 1]
    positions[:, 2] = source.floor_z + (layer + 0.5) * source.layer_dz

    target_count = None
    target_line_z = None
    if task.task == TASK_POUR:
        target_count = int(rng.integers(POUR_COUNT_RANGE[0], POUR_COUNT_RANGE[1] + 1))
        target_line_z = beaker.level_of_count(target_count)

    gripper = np.array(
        [rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(0.22, 0.26)]
    )
    return EnvState(
        positions=positions,
        velocities=np.zeros((m, 3)),
        settled=np.ones(m, dtype=bool),
        gripper=gripper,
        gripper_vel=np.zeros(3),
        grip_closed=False,
        source=source,
        beaker=beaker,
        target_line_z=target_line_z,
        target_count=target_count,
        step_count=0,
        seed=seed,
    )


def _settle_landings(state: EnvState, free: np.ndarray, cont: Container) -> None:
    """Snap free particles that fell onto this container's stack."""
    inside = cont.inside_column(state.positions) & free
    if not inside.any():
        return
    count = int((cont.inside_column(state.positions) & state.settled).sum())
    landing = inside & (state.positions[:, 2] <= cont.rest_z(count))
    if not landing.any():
        return
    idx = np.flatnonzero(landing)
    idx = idx[np.argsort(state.positions[idx, 2], kind="stable")]
    for j, i in enumerate(idx):
        state.positions[i, 2] = cont.rest_z(count + j)
    state.velocities[idx] = 0.0
    state.settled[idx] = True
    free[idx] = False


def _resolve_walls(state: EnvState, free: np.ndarray, prev_pos: np.ndarray, cont: Container) -> None:
    """Keep free particles out of the wall slabs, inelastically."""
    pos, vel = state.positions, state.velocities
    in_outer = cont.inside_outer(pos)
    in_col = cont.inside_column(pos)
    in_wall = in_outer & ~in_col & free
    if not in_wall.any():
        return
    was_above = prev_pos[:, 2] >= cont.rim_z
    # fell onto the rim from above: rest on top of the wall
    on_rim = in_wall & was_above
    pos[on_rim, 2] = cont.rim_z
    vel[on_rim, 2] = 0.0
    # pushed sideways into a wall: restore xy, kill horizontal motion;
    # particles that were inside stay inside, outsiders stay out
    side = in_wall & ~was_above
    pos[side, 0] = prev_pos[side, 0]
    pos[side, 1] = prev_pos[side, 1]
    vel[side, 0] = 0.0
    vel[side, 1] = 0.0


def env_step(
    state: EnvState,
    action: np.ndarray,
    sim_substeps: int,
    n_points: int = 1200,
) -> tuple[EnvState, PointCloudObservation]:
    """Advance one environment step: the gripper translates by the clamped
    action delta spread evenly over `sim_substeps` physics substeps."""
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape != (4,):
        raise EnvError(f"action must have 4 components, got shape {action.shape}")
    if not np.isfinite(action).all():
        raise EnvError(f"non-finite action {action}")
    if sim_substeps < 1:
        raise EnvError("sim_substeps must be >= 1")

    st = state.copy()
    delta = np.clip(action[:3], -ACTION_CLAMP, ACTION_CLAMP)
    st.grip_closed = bool(action[3] > 0.0)
    g0 = st.gripper.copy()
    duration = sim_substeps * DT

    any_free = bool((~st.settled).any())
    if not st.grip_closed and not any_free:
        # nothing can move but the gripper; identical to the substep loop
        st.gripper = g0 + delta * (sim_substeps / sim_substeps)
    else:
        pos, vel = st.positions, st.velocities
        grav = np.array([0.0, 0.0, -GRAVITY * DT])
        for s in range(1, sim_substeps + 1):
            g_prev = g0 + delta * ((s - 1) / sim_substeps)
            g_new = g0 + delta * (s / sim_substeps)
            if st.grip_closed:
                d2 = ((pos - g_prev) ** 2).sum(axis=1)
                carried = d2 <= GRASP_RADIUS**2
            else:
                carried = np.zeros(len(pos), dtype=bool)
            if carried.any():
                pos[carried] += g_new - g_prev
                vel[carried] = (g_new - g_prev) / DT
                st.settled[carried] = False
            free = ~carried & ~st.settled
            if free.any():
                prev_pos = pos.copy()
                vel[free] = (vel[free] + grav) * DAMPING
                pos[free] += vel[free] * DT
                # ground plane
                below = free & (pos[:, 2] < GROUND_Z)
                pos[below, 2] = GROUND_Z
                vel[below, 2] = 0.0
                for cont in (st.source, st.beaker):
                    _resolve_walls(st, free, prev_pos, cont)
                    _settle_landings(st, free, cont)
                # supported particles whose residual speed is far below any
                # task threshold count as at rest and leave the integrator
                rest = (
                    free
                    & ((vel**2).sum(axis=1) < 1e-14)
                    & (((pos - prev_pos) ** 2).sum(axis=1) < 1e-20)
                )
                if rest.any():
                    vel[rest] = 0.0
                    st.settled[rest] = True
        st.gripper = g0 + delta * (sim_substeps / sim_substeps)

    st.gripper_vel = delta / duration
    st.step_count += 1
    obs = observe(st, n_points)
    return st, obs


def _container_surface(cont: Container) -> np.ndarray:
    """Fixed grid of sample points on the walls and rim of a container."""
    cx, cy = cont.center
    ox, oy = cont.half_x + cont.wall, cont.half_y + cont.wall
    pts = []
    zs = np.linspace(cont.base_z + 0.01, cont.rim_z, 5)
    ts = np.linspace(-1.0, 1.0, 7)
    for z in zs:
        for t in ts:
            pts.append((cx + t * ox, cy - oy, z))
            pts.append((cx + t * ox, cy + oy, z))
            pts.append((cx - ox, cy + t * oy, z))
            pts.append((cx + ox, cy + t * oy, z))
    for t in ts:  # rim edge
        pts.append((cx + t * ox, cy - oy, cont.rim_z))
        pts.append((cx + t * ox, cy + oy, cont.rim_z))
        pts.append((cx - ox, cy + t * oy, cont.rim_z))
        pts.append((cx + ox, cy + t * oy, cont.rim_z))
    return np.asarray(pts)


_SPHERE_DIRS: np.ndarray | None = None


def _gripper_marker(gripper: np.ndarray) -> np.ndarray:
    global _SPHERE_DIRS
    if _SPHERE_DIRS is None:
        # fixed golden-spiral directions, same for every episode
        k = np.arange(24)
        phi = np.arccos(1 - 2 * (k + 0.5) / 24)
        theta = np.pi * (1 + 5**0.5) * k
        _SPHERE_DIRS = np.stack(
            [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=1
        )
    return gripper + GRIPPER_MARKER_RADIUS * _SPHERE_DIRS


def _labeled(xyz: np.ndarray, label: tuple[float, float, float]) -> np.ndarray:
    out = np.empty((len(xyz), 6))
    out[:, :3] = xyz
    out[:, 3:] = label
    return out


def scene_points(state: EnvState) -> np.ndarray:
    """The full labeled scene surface before any camera subsampling."""
    parts = [
        _labeled(_gripper_marker(state.gripper), LABEL_GRIPPER),
        _labeled(state.positions, LABEL_PARTICLE),
        _labeled(_container_surface(state.source), LABEL_CONTAINER),
        _labeled(_container_surface(state.beaker), LABEL_CONTAINER),
    ]
    if state.target_line_z is not None:
        b = state.beaker
        t = np.linspace(-1.0, 1.0, 9)
        ring = []
        for u in t:
            ring.append((b.center[0] + u * b.half_x, b.center[1] - b.half_y, state.target_line_z))
            ring.append((b.center[0] + u * b.half_x, b.center[1] + b.half_y, state.target_line_z))
            ring.append((b.center[0] - b.half_x, b.center[1] + u * b.half_y, state.target_line_z))
            ring.append((b.center[0] + b.half_x, b.center[1] + u * b.half_y, state.target_line_z))
        parts.append(_labeled(np.asarray(ring), LABEL_TARGET_LINE))
    return np.concatenate(parts, axis=0)


def camera_views(state: EnvState) -> tuple[np.ndarray, np.ndarray]:
    """Two noisy subsamples of the scene, standing in for two cameras."""
    scene = scene_points(state)
    views = []
    for view_idx in (0, 1):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(state.seed, state.step_count, view_idx))
        )
        keep = rng.uniform(size=len(scene)) < VIEW_KEEP_PROB
        v = scene[keep].copy()
        v[:, :3] += rng.normal(0.0, VIEW_NOISE_STD, size=(len(v), 3))
        views.append(v)
    return views[0], views[1]


def fuse_and_clip(view_a: np.ndarray, view_b: np.ndarray) -> np.ndarray:
    """Concatenate two views and drop near-ground points."""
    fused = np.concatenate([view_a, view_b], axis=0)
    fused = fused[fused[:, 2] >= HEIGHT_CLIP]
    if len(fused) == 0:
        raise EnvError("scene degenerate: no points above the height clip")
    return fused


def downsample(points: np.ndarray, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform choice of n_points rows, without replacement when possible."""
    if len(points) == 0:
        raise EnvError("cannot downsample an empty point set")
    replace_ = len(points) < n_points
    idx = rng.choice(len(points), size=n_points, replace=replace_)
    return points[idx]


def observe(state: EnvState, n_points: int) -> PointCloudObservation:
    view_a, view_b = camera_views(state)
    fused = fuse_and_clip(view_a, view_b)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=(state.seed, state.step_count, 2))
    )
    pts = downsample(fused, n_points, rng).astype(np.float32)
    robot = np.concatenate(
        [state.gripper, state.gripper_vel, [1.0 if state.grip_closed else -1.0]]
    ).astype(np.float32)
    return PointCloudObservation(points=pts, robot_state=robot)


def check_success(state: EnvState, task: TaskSpec) -> EpisodeResult:
    speeds = np.linalg.norm(state.velocities, axis=1)
    max_speed = float(speeds.max()) if len(speeds) else 0.0
    in_beaker = state.beaker.inside_column(state.positions)
    in_source = state.source.inside_column(state.positions)
    if task.task == TASK_FILL:
        frac = float(in_beaker.sum()) / task.particles
        ok = frac > task.fill_threshold and max_speed < task.velocity_threshold
        return EpisodeResult(ok, state.step_count, {"fill_fraction": frac, "max_speed": max_speed})
    n_in = int(in_beaker.sum())
    spill = int((~in_beaker & ~in_source).sum())
    if n_in == 0:
        level_err = float("inf")
    else:
        zs = np.sort(state.positions[in_beaker, 2])
        top = max(1, int(np.ceil(0.1 * n_in)))
        level = float(zs[-top:].mean())
        level_err = abs(level - state.target_line_z)
    ok = (
        level_err <= task.pour_tolerance
        and spill < task.spill_limit
        and max_speed < task.velocity_threshold
    )
    return EpisodeResult(
        ok, state.step_count, {"level_error": level_err, "spill": float(spill), "max_speed": max_speed}
    )


# -- scripted expert ---------------------------------------------------------

XY_TOL = 0.003
Z_TRAVEL = 0.24
COARSE_STEP = 0.035
FINE_ZONE = 0.015
FINE_STEP_POUR = 0.0012
FINE_STEP_FILL = 0.010
# grip command magnitude: only the sign matters to the environment, but
# keeping it at the motion-delta scale conditions the action regression
GRIP_CLOSE = ACTION_CLAMP
GRIP_OPEN = -ACTION_CLAMP


def _grab_depth(state: EnvState, task: TaskSpec) -> float:
    """Gripper height at which closing the grip captures the right amount."""
    avail = state.settled & state.source.inside_column(state.positions)
    pts = state.positions[avail]
    if len(pts) == 0:
        return Z_TRAVEL
    if task.task == TASK_FILL:
        return float((pts[:, 2].min() + pts[:, 2].max()) / 2.0)
    # toy_pour: highest gripper z whose grasp ball holds >= target_count particles
    k = min(state.target_count, len(pts))
    rho2 = (pts[:, 0] - state.gripper[0]) ** 2 + (pts[:, 1] - state.gripper[1]) ** 2
    reachable = rho2 <= GRASP_RADIUS**2
    pz = pts[reachable, 2]
    r2 = rho2[reachable]
    if len(pz) == 0:
        return Z_TRAVEL
    span = np.sqrt(GRASP_RADIUS**2 - r2)
    candidates = np.sort(pz + span)[::-1] - 1e-5
    counts = (
        ((candidates[:, None] - pz[None, :]) ** 2 + r2[None, :]) <= GRASP_RADIUS**2
    ).sum(axis=1)
    good = np.flatnonzero(counts >= k)
    if len(good) == 0:
        return float(candidates[np.argmax(counts)])
    return float(candidates[good[0]])


def _move_xy(state: EnvState, target_xy: tuple[float, float], grip: float) -> np.ndarray:
    dx = np.clip(target_xy[0] - state.gripper[0], -ACTION_CLAMP, ACTION_CLAMP)
    dy = np.clip(target_xy[1] - state.gripper[1], -ACTION_CLAMP, ACTION_CLAMP)
    return np.array([dx, dy, 0.0, grip])


def _move_z(state: EnvState, dz: float, grip: float) -> np.ndarray:
    return np.array([0.0, 0.0, np.clip(dz, -ACTION_CLAMP, ACTION_CLAMP), grip])


def scripted_expert(state: EnvState, task: TaskSpec) -> np.ndarray:
    """Deterministic waypoint controller, a pure function of the state."""
    carried = int(state.carried_mask().sum())
    g = state.gripper
    bx, by = state.beaker.center
    sx, sy = state.source.center
    in_bkr_col = (
        (np.abs(state.positions[:, 0] - bx) < state.beaker.half_x)
        & (np.abs(state.positions[:, 1] - by) < state.beaker.half_y)
    ).sum()
    goal_amount = state.target_count if task.task == TASK_POUR else task.particles

    if state.grip_closed and carried > 0:
        if abs(g[0] - bx) > XY_TOL or abs(g[1] - by) > XY_TOL:
            if g[2] < Z_TRAVEL - 1e-9:
                return _move_z(state, min(ACTION_CLAMP, Z_TRAVEL - g[2]), GRIP_CLOSE)
            return _move_xy(state, (bx, by), GRIP_CLOSE)
        return np.array([0.0, 0.0, 0.0, GRIP_OPEN])  # release over the beaker

    if in_bkr_col >= 0.5 * goal_amount:
        # delivered; retreat upward and settle
        if g[2] < Z_TRAVEL - 1e-9:
            return _move_z(state, min(ACTION_CLAMP, Z_TRAVEL - g[2]), GRIP_OPEN)
        return np.array([0.0, 0.0, 0.0, GRIP_OPEN])

    # approach and scoop from the source
    if abs(g[0] - sx) > XY_TOL or abs(g[1] - sy) > XY_TOL:
        if g[2] < Z_TRAVEL - 1e-9:
            return _move_z(state, min(ACTION_CLAMP, Z_TRAVEL - g[2]), GRIP_OPEN)
        return _move_xy(state, (sx, sy), GRIP_OPEN)
    z_grab = _grab_depth(state, task)
    fine = FINE_STEP_POUR if task.task == TASK_POUR else FINE_STEP_FILL
    if g[2] > z_grab + FINE_ZONE:
        return _move_z(state, -min(COARSE_STEP, g[2] - z_grab), GRIP_OPEN)
    if g[2] > z_grab + 1e-9:
        return _move_z(state, -min(fine, g[2] - z_grab), GRIP_OPEN)
    return np.array([0.0, 0.0, 0.0, GRIP_CLOSE])  # close the grip


def run_episode(
    task: TaskSpec,
    seed: int,
    policy,
    sim_substeps: int,
    n_points: int,
    max_steps: int | None = None,
    record_steps: bool = False,
):
    """Closed-loop rollout. `policy` maps (obs, state) to a 4-vector action.

    Returns (EpisodeResult, steps) where steps is a list of
    (observation, action) pairs when record_steps is set, else None.
    """
    limit = task.max_episode_steps if max_steps is None else max_steps
    state = reset(task, seed)
    obs = observe(state, n_points)
    steps = [] if record_steps else None
    result = check_success(state, task)
    for _ in range(limit):
        action = np.asarray(policy(obs, state), dtype=np.float64)
        if record_steps:
            steps.append((obs, action.astype(np.float32)))
        state, obs = env_step(state, action, sim_substeps, n_points)
        result = check_success(state, task)
        if result.success:
            break
    return result, steps


def expert_policy(task: TaskSpec):
    """Adapter so the scripted expert fits the run_episode policy signature."""

    def policy(obs, state):
        return scripted_expert(state, task)

    return policy
