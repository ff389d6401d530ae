"""Kinematic reach and push environments over arbitrary morphologies.

Lanes of one morphology are stepped together as arrays (``MorphologyLanes``);
``VecEnv`` stacks groups of lanes for several morphologies and
``ManipulationEnv`` is the single-episode view of one lane. Every lane owns its
own RNG stream, so a lane produces the same trajectory whether it is stepped
alone or inside a batch.
"""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .collision import Obstacle, Scene, collide, environment_hits, horizontal_box_mtv, sample_reach_goals
from .geometry import matrix_to_quat, quat_from_axis_angle
from .kinematics import KinematicChain, Pose
from .morphology import (
    GEOM_KINDS,
    IDENTITY_QUAT,
    MAX_LINKS,
    SLOTS,
    TOKEN_DIM,
    GeometryPrimitive,
    Morphology,
    joint_tilde,
    morphology_seed,
    sinusoidal,
    static_token_table,
)

MAX_TOKENS = 20
TASKS = ("reach", "push")
REACH_TERMS = ("joint_limits", "joint_acc", "ee_goal", "vicinity")
PUSH_TERMS = ("joint_limits", "obj_dist", "termination")
BLOCK_HALF = 0.025
DEFAULT_MOUNT_YAW = -math.pi / 2


@dataclass(frozen=True)
class EnvConfig:
    task: str = "reach"
    obstacles: bool = False
    n_obstacles: int = 2
    horizon: int | None = None          # None -> 100 (reach) / 200 (push)
    dt: float = 0.1
    dq_max_revolute: float = 0.05
    dq_max_prismatic: float = 0.02
    reach_weights: tuple[float, float, float, float] = (1.0, 5e-4, 1.0, 2.0)
    push_weights: tuple[float, float, float] = (1.0, 1.0, 10.0)
    vicinity: float = 0.05
    soft_limit_frac: float = 0.95
    obs_kind: str = "state"
    pointcloud_n: int = 64
    curriculum: bool = True
    final_threshold: float = 0.20
    curriculum_end: float = 0.5
    n_goals: int = 100
    goal_seed: int = 0
    mount_pos: tuple[float, float, float] = (-0.35, 0.0, 0.0)
    mount_yaw: float = DEFAULT_MOUNT_YAW

    def __post_init__(self):
        problems = []
        if self.task not in TASKS:
            problems.append(f"task must be one of {TASKS}")
        if self.horizon is not None and self.horizon < 1:
            problems.append("horizon must be >= 1")
        if not self.dt > 0:
            problems.append("dt must be > 0")
        if not (self.vicinity > 0 and self.final_threshold > 0):
            problems.append("thresholds must be > 0")
        if not (self.dq_max_revolute > 0 and self.dq_max_prismatic > 0):
            problems.append("dq_max must be > 0")
        if not np.all(np.isfinite(self.reach_weights + self.push_weights)):
            problems.append("weights must be finite")
        if len(self.reach_weights) != 4 or len(self.push_weights) != 3:
            problems.append("reach needs 4 weights, push needs 3")
        if self.obs_kind not in ("state", "pointcloud"):
            problems.append("obs_kind must be 'state' or 'pointcloud'")
        if self.pointcloud_n < 1 or self.n_goals < 1 or self.n_obstacles < 0:
            problems.append("counts must be positive")
        if not 0 < self.soft_limit_frac <= 1:
            problems.append("soft_limit_frac must be in (0, 1]")
        if not 0 < self.curriculum_end <= 1:
            problems.append("curriculum_end must be in (0, 1]")
        if problems:
            raise ValueError("invalid EnvConfig: " + "; ".join(problems))

    @property
    def H(self) -> int:
        if self.horizon is not None:
            return self.horizon
        return 100 if self.task == "reach" else 200

    @property
    def mount(self) -> Pose:
        q = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), self.mount_yaw)
        return Pose(tuple(float(x) for x in self.mount_pos), tuple(float(x) for x in q))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        for k in ("reach_weights", "push_weights", "mount_pos"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def curriculum_threshold(progress: float, cfg: EnvConfig) -> float:
    """Push goal line: grows linearly to the final value at ``curriculum_end``."""
    if not cfg.curriculum:
        return cfg.final_threshold
    p = min(max(float(progress), 0.0), 1.0)
    return cfg.final_threshold * min(p / cfg.curriculum_end, 1.0)


def joint_step_bounds(m: Morphology, cfg: EnvConfig) -> np.ndarray:
    return np.array([cfg.dq_max_prismatic if j.kind == "prismatic" else
                     cfg.dq_max_revolute if j.kind == "revolute" else 0.0 for j in m.joints])


def soft_limits(lo, hi, frac):
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    return mid - frac * half, mid + frac * half


# ---------------------------------------------------------------- step pieces

def apply_action(chain: KinematicChain, scene: Scene, q, action, movable, dq_max):
    """Masked, clipped joint update with blocking on table/obstacle contact.

    Returns (q_next, dq_commanded, blocked, geometry positions, geometry rotations).
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    action = np.atleast_2d(np.asarray(action, dtype=float))
    if action.shape != q.shape:
        raise ValueError(f"action shape {action.shape} does not match joint vector {q.shape}")
    dq = np.where(movable, np.clip(action, -dq_max, dq_max), 0.0)
    q_try = np.clip(q + dq, chain.lower, chain.upper)
    _, _, gp, gR = chain.forward(q_try, scene.mount.pos, scene.mount.rotation)
    blocked = environment_hits(chain, gp, gR, scene)
    if blocked.any():
        q_try[blocked] = q[blocked]
        _, _, gp_b, gR_b = chain.forward(q[blocked], scene.mount.pos, scene.mount.rotation)
        gp[blocked], gR[blocked] = gp_b, gR_b
    return q_try, dq, blocked, gp, gR


def joint_limit_term(q, soft_lo, soft_hi):
    return -np.maximum(0.0, np.maximum(q - soft_hi, soft_lo - q)).sum(-1)


def reach_terms(q, dq, dq_prev, ee, goal, soft_lo, soft_hi, cfg: EnvConfig) -> dict[str, np.ndarray]:
    d = ee - goal
    dist = np.sqrt((d * d).sum(-1))
    return {
        "joint_limits": joint_limit_term(q, soft_lo, soft_hi),
        "joint_acc": -np.abs((dq - dq_prev) / cfg.dt ** 2).sum(-1),
        "ee_goal": -dist,
        "vicinity": (dist < cfg.vicinity).astype(float),
    }


def push_terms(q, block_y, threshold, soft_lo, soft_hi) -> dict[str, np.ndarray]:
    return {
        "joint_limits": joint_limit_term(q, soft_lo, soft_hi),
        "obj_dist": -np.maximum(0.0, threshold - block_y),
        "termination": (block_y >= threshold).astype(float),
    }


def weighted_sum(terms: dict[str, np.ndarray], names, weights) -> np.ndarray:
    total = np.zeros_like(terms[names[0]])
    for n, w in zip(names, weights):
        total = total + w * terms[n]
    return total


BLOCK_GEOM = GeometryPrimitive.box(BLOCK_HALF, BLOCK_HALF, BLOCK_HALF)


def push_block(chain: KinematicChain, gp, gR, block, obstacles: Sequence[Obstacle], passes: int = 2):
    """Quasi-static block response: horizontal mtv from each link, then obstacle clamp."""
    block = block.copy()
    eye = np.eye(3)[None]
    for _ in range(passes):
        for i, g in enumerate(chain.geoms):
            depth, mtv = collide(g, gp[:, i], gR[:, i], BLOCK_GEOM, block, eye)
            block[:, :2] += mtv[:, :2]
    bh = np.array(BLOCK_GEOM.params)
    for _ in range(passes):
        for ob in obstacles:
            c = np.asarray(ob.pose.pos, dtype=float)
            yaw = _yaw(ob.pose.quat)
            _, mtv = horizontal_box_mtv(c, np.asarray(ob.geometry.params), yaw, block, bh, 0.0)
            block += mtv
    return block


def _yaw(quat) -> float:
    w, x, y, z = quat
    return math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))


# ---------------------------------------------------------------- observations

@dataclass
class Observation:
    tokens: np.ndarray        # (..., MAX_TOKENS, 48)
    mask: np.ndarray          # (..., MAX_TOKENS) occupied slots
    action_mask: np.ndarray   # (..., MAX_TOKENS) slots whose token is a movable joint's link
    points: np.ndarray | None = None  # (..., n_objects, pointcloud_n, 3) in pointcloud mode

    @property
    def n_tokens(self):
        return self.mask.sum(-1)

    def select(self, idx) -> "Observation":
        return Observation(self.tokens[idx], self.mask[idx], self.action_mask[idx],
                           None if self.points is None else self.points[idx])

    @staticmethod
    def concat(obs: Sequence["Observation"]) -> "Observation":
        pts = None
        if obs[0].points is not None:
            k = max(o.points.shape[-3] for o in obs)
            pad = [np.concatenate([o.points, np.zeros(o.points.shape[:-3] + (k - o.points.shape[-3],)
                                                      + o.points.shape[-2:])], axis=-3) for o in obs]
            pts = np.concatenate(pad)
        return Observation(np.concatenate([o.tokens for o in obs]), np.concatenate([o.mask for o in obs]),
                           np.concatenate([o.action_mask for o in obs]), pts)


def object_token(geom: GeometryPrimitive, pos, quat) -> np.ndarray:
    t = np.zeros(np.shape(pos)[:-1] + (TOKEN_DIM,))
    t[..., SLOTS["link_index"]] = 1.0
    t[..., SLOTS["parent_index"]] = 1.0
    t[..., 6 + GEOM_KINDS.index(geom.kind)] = 1.0
    t[..., SLOTS["geom_params"]] = geom.params
    t[..., SLOTS["link_pos"]] = pos
    t[..., SLOTS["link_quat"]] = quat
    return t


def goal_token(goal) -> np.ndarray:
    goal = np.asarray(goal, dtype=float)
    t = np.zeros(goal.shape[:-1] + (TOKEN_DIM,))
    t[..., SLOTS["ee_flag"]] = 1.0
    t[..., SLOTS["link_pos"]] = goal
    return t


def sample_surface(geom: GeometryPrimitive, pos, rot, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform surface samples of one primitive in the world frame, shape (n, 3)."""
    if geom.kind == "sphere":
        v = rng.standard_normal((n, 3))
        local = geom.params[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
    elif geom.kind == "box":
        h = np.asarray(geom.params, dtype=float)
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        local = rng.uniform(-h, h, size=(n, 3))
        side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        local[np.arange(n), axis] = side * h[axis]
    else:
        r, hh = geom.params[0], geom.params[2]
        a_side, a_cap = 2 * math.pi * r * 2 * hh, math.pi * r * r
        on_side = rng.random(n) < a_side / (a_side + 2 * a_cap)
        ang = rng.uniform(0, 2 * math.pi, n)
        rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
        z = np.where(on_side, rng.uniform(-hh, hh, n), np.where(rng.random(n) < 0.5, -hh, hh))
        local = np.stack([rad * np.cos(ang), rad * np.sin(ang), z], axis=1)
    return np.asarray(pos, dtype=float) + local @ np.asarray(rot, dtype=float).T


def cloud_token(points: np.ndarray) -> np.ndarray:
    """Object token from a point cloud: box at the centroid with the cloud's half extents."""
    lo, hi = points.min(axis=-2), points.max(axis=-2)
    half = np.maximum((hi - lo) / 2, 1e-6)
    t = np.zeros(points.shape[:-2] + (TOKEN_DIM,))
    t[..., SLOTS["link_index"]] = 1.0
    t[..., SLOTS["parent_index"]] = 1.0
    t[..., 6] = 1.0
    t[..., SLOTS["geom_params"]] = half
    t[..., SLOTS["link_pos"]] = points.mean(axis=-2)
    t[..., SLOTS["link_quat"]] = IDENTITY_QUAT
    return t


# ---------------------------------------------------------------- scenes

@functools.lru_cache(maxsize=256)
def make_obstacles(m: Morphology, cfg: EnvConfig, seed: int) -> tuple[Obstacle, ...]:
    """Static boxes on the table, clear of the robot's home pose and the block spawn area."""
    if not cfg.obstacles or cfg.n_obstacles == 0:
        return ()
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, morphology_seed(m), 0x0B57]))
    chain = KinematicChain(m)
    mount = cfg.mount
    _, _, gp, gR = chain.forward(m.home_q()[None], mount.pos, mount.rotation)
    spawn = (np.array([0.0, -0.2, BLOCK_HALF]), np.array([0.05 + BLOCK_HALF + 0.04, 0.05 + BLOCK_HALF + 0.04,
                                                           BLOCK_HALF]))
    out: list[Obstacle] = []
    for _ in range(1000):
        if len(out) == cfg.n_obstacles:
            break
        half = np.round(np.concatenate([rng.uniform(0.02, 0.04, 2), rng.uniform(0.03, 0.08, 1)]), 6)
        c = np.round(np.array([rng.uniform(-0.6, 0.4), rng.uniform(-0.6, 0.6), half[2]]), 6)
        yaw = rng.uniform(0, math.pi)
        pose = Pose(tuple(c.tolist()), tuple(quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw).tolist()))
        ob = Obstacle(GeometryPrimitive.box(*half.tolist()), pose)
        if np.linalg.norm(c[:2] - np.asarray(mount.pos[:2])) < 0.15:
            continue
        d, _ = horizontal_box_mtv(spawn[0], spawn[1], 0.0, c, half, yaw)
        if cfg.task == "push" and d > 0:
            continue
        if any(horizontal_box_mtv(np.asarray(o.pose.pos), np.asarray(o.geometry.params) + 0.03,
                                  _yaw(o.pose.quat), c, half, yaw)[0] > 0 for o in out):
            continue
        if _touches_robot(chain, gp, gR, ob):
            continue
        out.append(ob)
    return tuple(out)


def _touches_robot(chain: KinematicChain, gp, gR, ob: Obstacle) -> bool:
    bp, bR = np.asarray(ob.pose.pos, dtype=float)[None], ob.pose.rotation[None]
    return any(collide(g, gp[:, i], gR[:, i], ob.geometry, bp, bR)[0][0] > 0 for i, g in enumerate(chain.geoms))


def make_scene(m: Morphology, cfg: EnvConfig, seed: int) -> Scene:
    return Scene(obstacles=make_obstacles(m, cfg, seed), mount=cfg.mount)


@functools.lru_cache(maxsize=256)
def goal_set(m: Morphology, scene: Scene, n: int, seed: int) -> np.ndarray:
    goals = sample_reach_goals(m, scene, n, seed)
    goals.setflags(write=False)
    return goals


# ---------------------------------------------------------------- lanes

@dataclass
class EnvState:
    """Snapshot of one lane."""

    q: np.ndarray
    q_prev: np.ndarray
    dq_prev: np.ndarray
    block: np.ndarray | None
    goal: np.ndarray | None
    obstacles: tuple[Obstacle, ...]
    step: int
    episode_return: float
    success: bool


@dataclass
class BatchStep:
    obs: Observation
    reward: np.ndarray
    terms: dict[str, np.ndarray]
    terminated: np.ndarray
    truncated: np.ndarray
    success: np.ndarray
    ee_goal_dist: np.ndarray
    block_y: np.ndarray
    blocked: np.ndarray
    final_obs: Observation
    episode_return: np.ndarray = field(default=None)   # valid where done
    episode_task_reward: np.ndarray = field(default=None)
    episode_length: np.ndarray = field(default=None)
    final_q: np.ndarray = field(default=None)
    final_q_prev: np.ndarray = field(default=None)
    final_dq: np.ndarray = field(default=None)
    final_block: np.ndarray = field(default=None)
    final_goal: np.ndarray = field(default=None)

    @property
    def done(self) -> np.ndarray:
        return self.terminated | self.truncated

    @property
    def task_reward(self) -> np.ndarray:
        """Per-step score reward: EE-goal penalty plus vicinity (reach), termination (push)."""
        zero = np.zeros_like(self.reward)
        get = lambda k: self.terms.get(k, zero)
        return get("ee_goal") + get("vicinity") + get("termination")


class MorphologyLanes:
    """``n`` independent episodes of one morphology stepped as arrays."""

    def __init__(self, cfg: EnvConfig, m: Morphology, n: int, seed: int, group: int = 0,
                 lane_offset: int = 0, scene_seed: int | None = None):
        if n < 1:
            raise ValueError("need at least one lane")
        self.cfg, self.m, self.n = cfg, m, n
        self.seed, self.group = int(seed), int(group)
        self.chain = KinematicChain(m)
        self.scene = make_scene(m, cfg, self.seed if scene_seed is None else scene_seed)
        self.nl, self.nj = m.n_links, m.n_joints
        n_objects = (1 if cfg.task == "push" else 0) + len(self.scene.obstacles)
        self.n_tokens = self.nl + n_objects + (1 if cfg.task == "reach" else 0)
        if self.n_tokens > MAX_TOKENS:
            raise ValueError(f"{m.name}: {self.n_tokens} tokens exceed MAX_TOKENS = {MAX_TOKENS}")
        self.static = static_token_table(m)
        self.movable = m.movable_mask
        self.dq_max = joint_step_bounds(m, cfg)
        self.soft_lo, self.soft_hi = soft_limits(self.chain.lower, self.chain.upper, cfg.soft_limit_frac)
        self.goals = goal_set(m, self.scene, cfg.n_goals, cfg.goal_seed) if cfg.task == "reach" else None
        self.obstacle_tokens = np.stack([object_token(o.geometry, np.asarray(o.pose.pos), np.asarray(o.pose.quat))
                                         for o in self.scene.obstacles]) if self.scene.obstacles else None
        self.action_mask_row = np.zeros(MAX_TOKENS, dtype=bool)
        self.action_mask_row[1:self.nl] = self.movable
        self.mask_row = np.zeros(MAX_TOKENS, dtype=bool)
        self.mask_row[:self.n_tokens] = True
        self.lane_ids = [lane_offset + k for k in range(n)]
        self.rngs = [np.random.Generator(np.random.PCG64(np.random.SeedSequence(
            [self.seed & 0xFFFFFFFF, self.group, lane]))) for lane in self.lane_ids]
        self.threshold = curriculum_threshold(0.0, cfg)
        self.q = np.zeros((n, self.nj))
        self.q_prev = np.zeros((n, self.nj))
        self.dq_prev = np.zeros((n, self.nj))
        self.t = np.zeros(n, dtype=np.int64)
        self.episodes = np.zeros(n, dtype=np.int64)
        self.block = np.zeros((n, 3))
        self.goal = np.zeros((n, 3))
        self.ep_return = np.zeros(n)
        self.ep_task = np.zeros(n)
        self.reset_lanes(np.arange(n))

    # -- episode control
    def set_progress(self, progress: float) -> None:
        self.threshold = curriculum_threshold(progress, self.cfg)

    def reset_lanes(self, idx) -> None:
        home = self.m.home_q()
        for k in np.atleast_1d(idx):
            rng = self.rngs[k]
            self.q[k] = home
            self.q_prev[k] = home
            self.dq_prev[k] = 0.0
            self.t[k] = 0
            self.ep_return[k] = 0.0
            self.ep_task[k] = 0.0
            if self.cfg.task == "reach":
                if len(self.goals) == 0:
                    raise RuntimeError(f"{self.m.name}: empty goal set")
                self.goal[k] = self.goals[rng.integers(len(self.goals))]
            else:
                self.block[k] = (rng.uniform(-0.05, 0.05), rng.uniform(-0.25, -0.15), BLOCK_HALF)

    # -- observations
    def _cloud_rng(self, k: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(
            [self.seed & 0xFFFFFFFF, self.group, self.lane_ids[k], int(self.episodes[k]), int(self.t[k])])))

    def object_bodies(self, k: int) -> list[tuple[GeometryPrimitive, np.ndarray, np.ndarray]]:
        bodies = []
        if self.cfg.task == "push":
            bodies.append((BLOCK_GEOM, self.block[k], np.eye(3)))
        for o in self.scene.obstacles:
            bodies.append((o.geometry, np.asarray(o.pose.pos), o.pose.rotation))
        return bodies

    def point_clouds(self, idx=None) -> np.ndarray:
        idx = np.arange(self.n) if idx is None else np.atleast_1d(idx)
        n_obj = self.n_tokens - self.nl - (1 if self.cfg.task == "reach" else 0)
        out = np.zeros((len(idx), n_obj, self.cfg.pointcloud_n, 3))
        for r, k in enumerate(idx):
            rng = self._cloud_rng(k)
            for j, (g, p, R) in enumerate(self.object_bodies(k)):
                out[r, j] = sample_surface(g, p, R, self.cfg.pointcloud_n, rng)
        return out

    def observe(self, idx=None) -> Observation:
        idx = np.arange(self.n) if idx is None else np.atleast_1d(idx)
        B = len(idx)
        tokens = np.zeros((B, MAX_TOKENS, TOKEN_DIM))
        tokens[:, :self.nl] = self.static
        tokens[:, :self.nl, SLOTS["q_sin"]] = sinusoidal(joint_tilde(self.m, self.q[idx]))
        s = self.nl
        points = None
        if self.cfg.obs_kind == "pointcloud":
            points = self.point_clouds(idx)
            k = points.shape[1]
            if k:
                tokens[:, s:s + k] = cloud_token(points)
            s += k
        else:
            if self.cfg.task == "push":
                tokens[:, s] = object_token(BLOCK_GEOM, self.block[idx], np.array([1.0, 0.0, 0.0, 0.0]))
                s += 1
            if self.obstacle_tokens is not None:
                k = len(self.obstacle_tokens)
                tokens[:, s:s + k] = self.obstacle_tokens
                s += k
        if self.cfg.task == "reach":
            tokens[:, s] = goal_token(self.goal[idx])
        return Observation(tokens, np.broadcast_to(self.mask_row, (B, MAX_TOKENS)).copy(),
                           np.broadcast_to(self.action_mask_row, (B, MAX_TOKENS)).copy(), points)

    # -- stepping
    def step(self, actions) -> BatchStep:
        """``actions`` is (n, MAX_TOKENS) slot-aligned or (n, n_joints)."""
        actions = np.asarray(actions, dtype=float)
        if actions.ndim != 2 or actions.shape[0] != self.n:
            raise ValueError(f"expected {self.n} action rows, got shape {actions.shape}")
        if actions.shape[1] == MAX_TOKENS:
            actions = actions[:, 1:self.nl]
        elif actions.shape[1] != self.nj:
            raise ValueError(f"action width {actions.shape[1]} is neither {MAX_TOKENS} nor {self.nj}")
        cfg = self.cfg
        q_new, dq, blocked, gp, gR = apply_action(self.chain, self.scene, self.q, actions, self.movable, self.dq_max)
        ee = gp[:, self.chain.ee_index]
        nan = np.full(self.n, np.nan)
        if cfg.task == "reach":
            terms = reach_terms(q_new, dq, self.dq_prev, ee, self.goal, self.soft_lo, self.soft_hi, cfg)
            reward = weighted_sum(terms, REACH_TERMS, cfg.reach_weights)
            success = terms["vicinity"] > 0
            terminated = np.zeros(self.n, dtype=bool)
            ee_goal_dist, block_y = -terms["ee_goal"], nan
            task_r = terms["ee_goal"] + terms["vicinity"]
        else:
            self.block = push_block(self.chain, gp, gR, self.block, self.scene.obstacles)
            block_y = self.block[:, 1].copy()
            terms = push_terms(q_new, block_y, self.threshold, self.soft_lo, self.soft_hi)
            reward = weighted_sum(terms, PUSH_TERMS, cfg.push_weights)
            success = terms["termination"] > 0
            terminated = success.copy()
            d = ee - self.block
            ee_goal_dist = np.sqrt((d * d).sum(-1))
            task_r = terms["termination"]
        self.q_prev = self.q
        self.q = q_new
        self.dq_prev = dq
        self.t += 1
        self.ep_return += reward
        self.ep_task += task_r
        truncated = (self.t >= cfg.H) & ~terminated
        done = terminated | truncated
        final_obs = self.observe()
        ep_ret, ep_task, ep_len = self.ep_return.copy(), self.ep_task.copy(), self.t.copy()
        finals = (self.q.copy(), self.q_prev.copy(), dq.copy(), self.block.copy(), self.goal.copy())
        obs = final_obs
        if done.any():
            idx = np.flatnonzero(done)
            self.episodes[idx] += 1
            self.reset_lanes(idx)
            obs = Observation(final_obs.tokens.copy(), final_obs.mask, final_obs.action_mask,
                              None if final_obs.points is None else final_obs.points.copy())
            fresh = self.observe(idx)
            obs.tokens[idx] = fresh.tokens
            if obs.points is not None:
                obs.points[idx] = fresh.points
        return BatchStep(obs, reward, terms, terminated, truncated, success, ee_goal_dist, block_y, blocked,
                         final_obs, ep_ret, ep_task, ep_len, *finals)

    # -- persistence
    def state_dict(self) -> dict:
        return {
            "q": self.q.tolist(), "q_prev": self.q_prev.tolist(), "dq_prev": self.dq_prev.tolist(),
            "t": self.t.tolist(), "episodes": self.episodes.tolist(), "block": self.block.tolist(),
            "goal": self.goal.tolist(), "ep_return": self.ep_return.tolist(), "ep_task": self.ep_task.tolist(),
            "threshold": self.threshold, "rngs": [r.bit_generator.state for r in self.rngs],
        }

    def load_state_dict(self, s: dict) -> None:
        for k in ("q", "q_prev", "dq_prev", "block", "goal", "ep_return", "ep_task"):
            setattr(self, k, np.array(s[k], dtype=float).reshape(getattr(self, k).shape))
        self.t = np.array(s["t"], dtype=np.int64)
        self.episodes = np.array(s["episodes"], dtype=np.int64)
        self.threshold = float(s["threshold"])
        for r, st in zip(self.rngs, s["rngs"]):
            r.bit_generator.state = st

    def lane_state(self, k: int) -> EnvState:
        return EnvState(self.q[k].copy(), self.q_prev[k].copy(), self.dq_prev[k].copy(),
                        self.block[k].copy() if self.cfg.task == "push" else None,
                        self.goal[k].copy() if self.cfg.task == "reach" else None,
                        self.scene.obstacles, int(self.t[k]), float(self.ep_return[k]),
                        False)


class VecEnv:
    """Lanes for several morphologies, equally divided, in morphology-major order."""

    def __init__(self, cfg: EnvConfig, entries: Sequence[tuple[Morphology, str]], n_envs: int, seed: int):
        if not entries:
            raise ValueError("no morphologies")
        if n_envs % len(entries):
            raise ValueError(f"n_envs = {n_envs} is not divisible by {len(entries)} morphologies")
        self.cfg = cfg
        self.entries = list(entries)
        self.per = n_envs // len(entries)
        self.n_envs = n_envs
        self.groups = [MorphologyLanes(replace(cfg, task=task), m, self.per, seed, group=k)
                       for k, (m, task) in enumerate(self.entries)]
        self.morph_ids = np.repeat(np.arange(len(entries)), self.per)
        self.names = [m.name for m, _ in self.entries]

    def __len__(self):
        return self.n_envs

    def set_progress(self, progress: float) -> None:
        for g in self.groups:
            g.set_progress(progress)

    def observe(self) -> Observation:
        return Observation.concat([g.observe() for g in self.groups])

    def step(self, actions) -> BatchStep:
        actions = np.asarray(actions, dtype=float)
        if actions.shape[0] != self.n_envs:
            raise ValueError(f"expected {self.n_envs} actions, got {actions.shape[0]}")
        parts = []
        for k, g in enumerate(self.groups):
            try:
                parts.append(g.step(actions[k * self.per:(k + 1) * self.per]))
            except Exception as exc:
                raise RuntimeError(f"env lanes {k * self.per}..{(k + 1) * self.per - 1} "
                                   f"({self.names[k]}) failed: {exc}") from exc
        return _concat_steps(parts)

    def state_dict(self) -> dict:
        return {"groups": [g.state_dict() for g in self.groups]}

    def load_state_dict(self, s: dict) -> None:
        for g, gs in zip(self.groups, s["groups"]):
            g.load_state_dict(gs)


def _concat_steps(parts: list[BatchStep]) -> BatchStep:
    if len(parts) == 1:
        return parts[0]
    keys = sorted(set().union(*(p.terms for p in parts)))
    n = [len(p.reward) for p in parts]
    terms = {k: np.concatenate([p.terms.get(k, np.zeros(m)) for p, m in zip(parts, n)]) for k in keys}
    cat = lambda a: np.concatenate([getattr(p, a) for p in parts])

    def cat_joints(a):
        # joint vectors of different morphologies are NaN-padded to the widest one
        width = max(getattr(p, a).shape[1] for p in parts)
        return np.concatenate([np.pad(getattr(p, a), ((0, 0), (0, width - getattr(p, a).shape[1])),
                                      constant_values=np.nan) for p in parts])

    return BatchStep(Observation.concat([p.obs for p in parts]), cat("reward"), terms, cat("terminated"),
                     cat("truncated"), cat("success"), cat("ee_goal_dist"), cat("block_y"), cat("blocked"),
                     Observation.concat([p.final_obs for p in parts]), cat("episode_return"),
                     cat("episode_task_reward"), cat("episode_length"), cat_joints("final_q"),
                     cat_joints("final_q_prev"), cat_joints("final_dq"), cat("final_block"), cat("final_goal"))


@dataclass
class StepResult:
    observation: Observation
    reward: float
    reward_terms: dict[str, float]
    terminated: bool
    truncated: bool
    info: dict


class ManipulationEnv:
    """One episode at a time; ``lane`` and ``group`` select the RNG stream of a batch lane."""

    def __init__(self, cfg: EnvConfig, m: Morphology, seed: int = 0, group: int = 0, lane: int = 0):
        self.lanes = MorphologyLanes(cfg, m, 1, seed, group=group, lane_offset=lane)
        self.cfg = cfg
        self._fresh = True       # lane holds an unstarted episode
        self._final: EnvState | None = None

    @property
    def state(self) -> EnvState:
        return self._final if self._final is not None else self.lanes.lane_state(0)

    def set_progress(self, progress: float) -> None:
        self.lanes.set_progress(progress)

    def reset(self) -> tuple[EnvState, Observation]:
        if not self._fresh:
            self.lanes.episodes[0] += 1
            self.lanes.reset_lanes([0])
        self._fresh, self._final = False, None
        return self.state, self.lanes.observe().select(0)

    def observe(self) -> Observation:
        return self.lanes.observe().select(0)

    def step(self, action) -> StepResult:
        if self._final is not None:
            raise RuntimeError("episode finished; call reset()")
        action = np.asarray(action, dtype=float)
        if action.shape not in ((self.lanes.nj,), (MAX_TOKENS,)):
            raise ValueError(f"expected {self.lanes.nj} joint actions, got shape {action.shape}")
        self._fresh = False
        r = self.lanes.step(action[None])
        if r.terminated[0] or r.truncated[0]:
            # the lane has already auto-reset; keep the finished episode visible until reset()
            self._final = EnvState(r.final_q[0], r.final_q_prev[0], r.final_dq[0],
                                   r.final_block[0] if self.cfg.task == "push" else None,
                                   r.final_goal[0] if self.cfg.task == "reach" else None,
                                   self.lanes.scene.obstacles, int(r.episode_length[0]),
                                   float(r.episode_return[0]), bool(r.success[0]))
            self._fresh = True
        info = {"success": bool(r.success[0]), "ee_goal_dist": float(r.ee_goal_dist[0]),
                "block_y": float(r.block_y[0]), "blocked": bool(r.blocked[0])}
        return StepResult(r.final_obs.select(0), float(r.reward[0]), {k: float(v[0]) for k, v in r.terms.items()},
                          bool(r.terminated[0]), bool(r.truncated[0]), info)
