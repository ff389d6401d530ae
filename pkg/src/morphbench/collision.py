"""Primitive collision queries, scenes, and collision-free goal sampling.

All pair routines are batched over a leading axis. A returned ``mtv`` is the
translation that moves shape B out of shape A; zero depth means no contact.
Cylinders are treated as their tight oriented bounding boxes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import cross3, dot3, matvec3
from .kinematics import KinematicChain, Pose
from .morphology import GeometryPrimitive, Morphology, morphology_seed

CONTACT_EPS = 1e-9
TABLE_HALF = (2.0, 2.0, 0.05)
GOAL_BUDGET_PER_GOAL = 10_000


class GoalSamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Contact:
    a_id: str
    b_id: str
    mtv: tuple[float, float, float]
    depth: float


def _is_sphere(g: GeometryPrimitive) -> bool:
    return g.kind == "sphere"


def _half_extents(g: GeometryPrimitive) -> np.ndarray:
    return np.asarray(g.params, dtype=float)


# ---------------------------------------------------------------- pair kernels

def sphere_sphere(cA, rA, cB, rB):
    d = cB - cA
    dist = np.sqrt(dot3(d, d))
    depth = rA + rB - dist
    safe = np.where(dist > 0, dist, 1.0)
    n = np.where((dist > 0)[..., None], d / safe[..., None], np.array([0.0, 0.0, 1.0]))
    hit = depth > CONTACT_EPS
    depth = np.where(hit, depth, 0.0)
    return depth, n * depth[..., None]


def box_sphere(cA, RA, hA, cB, rB):
    """Box A against sphere B; mtv pushes the sphere out of the box."""
    rel = cB - cA
    # p_local = RA^T rel
    p = np.stack([RA[..., 0, k] * rel[..., 0] + RA[..., 1, k] * rel[..., 1] + RA[..., 2, k] * rel[..., 2]
                  for k in range(3)], axis=-1)
    clamped = np.clip(p, -hA, hA)
    diff = p - clamped
    dist = np.sqrt(dot3(diff, diff))
    outside = dist > 0
    safe = np.where(outside, dist, 1.0)
    n_out = diff / safe[..., None]
    depth_out = rB - dist

    face_gap = hA - np.abs(p)
    k = np.argmin(face_gap, axis=-1)
    gap = np.take_along_axis(face_gap, k[..., None], axis=-1)[..., 0]
    pk = np.take_along_axis(p, k[..., None], axis=-1)[..., 0]
    n_in = np.zeros(p.shape)
    np.put_along_axis(n_in, k[..., None], np.where(pk < 0, -1.0, 1.0)[..., None], axis=-1)
    depth_in = gap + rB

    n_local = np.where(outside[..., None], n_out, n_in)
    depth = np.where(outside, depth_out, depth_in)
    hit = depth > CONTACT_EPS
    depth = np.where(hit, depth, 0.0)
    n = matvec3(RA, n_local)
    return depth, n * depth[..., None]


def box_box(cA, RA, hA, cB, RB, hB):
    """Separating-axis test on oriented boxes (15 candidate axes)."""
    batch = np.broadcast_shapes(cA.shape[:-1], cB.shape[:-1], RA.shape[:-2], RB.shape[:-2])
    A = np.swapaxes(np.broadcast_to(RA, batch + (3, 3)), -1, -2)   # rows are box axes
    Bx = np.swapaxes(np.broadcast_to(RB, batch + (3, 3)), -1, -2)
    d = np.broadcast_to(cB - cA, batch + (3,))
    a, b = A[..., :, None, :], Bx[..., None, :, :]
    cross = np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                      a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                      a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1).reshape(batch + (9, 3))
    L = np.concatenate([A, Bx, cross], axis=-2)                       # (..., 15, 3)
    norm = np.sqrt((L * L).sum(-1))
    valid = np.concatenate([np.ones(batch + (6,), dtype=bool), norm[..., 6:] > 1e-6], axis=-1)
    u = L / np.where(valid, norm, 1.0)[..., None]
    projA = np.abs((u[..., :, None, :] * A[..., None, :, :]).sum(-1))  # (..., 15, 3)
    projB = np.abs((u[..., :, None, :] * Bx[..., None, :, :]).sum(-1))
    hA = np.broadcast_to(hA, batch + (3,))[..., None, :]
    hB = np.broadcast_to(hB, batch + (3,))[..., None, :]
    dist = (u * d[..., None, :]).sum(-1)
    ov = (hA * projA).sum(-1) + (hB * projB).sum(-1) - np.abs(dist)
    ov = np.where(valid, ov, np.inf)
    best = np.argmin(ov, axis=-1)
    depth = np.take_along_axis(ov, best[..., None], axis=-1)[..., 0]
    ub = np.take_along_axis(u, best[..., None, None], axis=-2)[..., 0, :]
    sign = np.where(np.take_along_axis(dist, best[..., None], axis=-1)[..., 0] < 0, -1.0, 1.0)
    hit = depth > CONTACT_EPS
    depth = np.where(hit, depth, 0.0)
    return depth, ub * (sign * depth)[..., None]


def collide(gA: GeometryPrimitive, cA, RA, gB: GeometryPrimitive, cB, RB):
    """Batched dispatch on primitive kinds; returns (depth, mtv)."""
    cA, cB = np.asarray(cA, dtype=float), np.asarray(cB, dtype=float)
    RA, RB = np.asarray(RA, dtype=float), np.asarray(RB, dtype=float)
    if _is_sphere(gA) and _is_sphere(gB):
        return sphere_sphere(cA, gA.params[0], cB, gB.params[0])
    if _is_sphere(gB):
        return box_sphere(cA, RA, _half_extents(gA), cB, gB.params[0])
    if _is_sphere(gA):
        depth, mtv = box_sphere(cB, RB, _half_extents(gB), cA, gA.params[0])
        return depth, -mtv
    return box_box(cA, RA, _half_extents(gA), cB, RB, _half_extents(gB))


def pair_collision(shapeA: GeometryPrimitive, poseA: Pose, shapeB: GeometryPrimitive, poseB: Pose,
                   a_id: str = "A", b_id: str = "B") -> Contact | None:
    depth, mtv = collide(shapeA, np.asarray(poseA.pos)[None], poseA.rotation[None],
                         shapeB, np.asarray(poseB.pos)[None], poseB.rotation[None])
    if depth[0] <= 0:
        return None
    return Contact(a_id, b_id, tuple(float(x) for x in mtv[0]), float(depth[0]))


def horizontal_box_mtv(cA, hA, yawA, cB, hB, yawB):
    """Planar SAT for two z-aligned boxes; mtv moves B in the xy-plane only."""
    d = (cB - cA)[..., :2]
    axes = []
    for yaw in (yawA, yawB):
        c, s = np.cos(yaw), np.sin(yaw)
        axes.append(np.stack([c, s], -1))
        axes.append(np.stack([-s, c], -1))
    def radius(h, yaw, u):
        c, s = np.cos(yaw), np.sin(yaw)
        ex, ey = np.stack([c, s], -1), np.stack([-s, c], -1)
        return h[..., 0] * np.abs((ex * u).sum(-1)) + h[..., 1] * np.abs((ey * u).sum(-1))
    ovs = []
    for u in axes:
        ovs.append(radius(hA, yawA, u) + radius(hB, yawB, u) - np.abs((d * u).sum(-1)))
    ov = np.stack(ovs, -1)
    z_overlap = hA[..., 2] + hB[..., 2] - np.abs(cB[..., 2] - cA[..., 2])
    best = np.argmin(ov, -1)
    depth = np.take_along_axis(ov, best[..., None], -1)[..., 0]
    U = np.stack(np.broadcast_arrays(*axes), -2)
    U = np.broadcast_to(U, ov.shape + (2,))
    u = np.take_along_axis(U, best[..., None, None], -2)[..., 0, :]
    sign = np.where((d * u).sum(-1) < 0, -1.0, 1.0)
    hit = (depth > CONTACT_EPS) & (z_overlap > CONTACT_EPS)
    depth = np.where(hit, depth, 0.0)
    mtv = np.zeros(np.broadcast_shapes(cA.shape, cB.shape))
    mtv[..., :2] = u * (sign * depth)[..., None]
    return depth, mtv


# ---------------------------------------------------------------- scenes

@dataclass(frozen=True)
class Obstacle:
    geometry: GeometryPrimitive
    pose: Pose


@dataclass(frozen=True)
class Scene:
    """Table top at z = 0, optional static obstacles and an optional block."""

    obstacles: tuple[Obstacle, ...] = ()
    block: Obstacle | None = None
    table_half: tuple[float, float, float] = TABLE_HALF
    mount: Pose = field(default_factory=Pose)

    @property
    def table(self) -> Obstacle:
        hx, hy, hz = self.table_half
        return Obstacle(GeometryPrimitive.box(hx, hy, hz), Pose((0.0, 0.0, -hz)))


def _static_bodies(scene: Scene, include_block: bool):
    bodies = [("table", scene.table)]
    bodies += [(f"obstacle:{k}", ob) for k, ob in enumerate(scene.obstacles)]
    if include_block and scene.block is not None:
        bodies.append(("block", scene.block))
    return bodies


def adjacent_pairs(m: Morphology) -> set[tuple[int, int]]:
    return {(l.parent, l.index) for l in m.links if l.parent >= 0}


def scene_collisions(m: Morphology, q, scene: Scene, chain: KinematicChain | None = None) -> list[Contact]:
    """All robot-vs-scene contacts plus non-adjacent self contacts at configuration q."""
    chain = chain or KinematicChain(m)
    _, _, gp, gR = chain.forward(np.asarray(q, dtype=float)[None], scene.mount.pos, scene.mount.rotation)
    out: list[Contact] = []
    for i, g in enumerate(chain.geoms):
        for name, body in _static_bodies(scene, include_block=True):
            if i == 0 and name == "table":
                continue  # the base is mounted on the table
            depth, mtv = collide(g, gp[:, i], gR[:, i], body.geometry,
                                 np.asarray(body.pose.pos)[None], body.pose.rotation[None])
            if depth[0] > 0:
                out.append(Contact(f"link:{i}", name, tuple(mtv[0].tolist()), float(depth[0])))
    adj = adjacent_pairs(m)
    for i in range(chain.n_links):
        for j in range(i + 1, chain.n_links):
            if (i, j) in adj:
                continue
            depth, mtv = collide(chain.geoms[i], gp[:, i], gR[:, i], chain.geoms[j], gp[:, j], gR[:, j])
            if depth[0] > 0:
                out.append(Contact(f"link:{i}", f"link:{j}", tuple(mtv[0].tolist()), float(depth[0])))
    return out


def environment_hits(chain: KinematicChain, gp, gR, scene: Scene) -> np.ndarray:
    """Per-batch flag: any non-base link overlaps the table or an obstacle."""
    B = gp.shape[0]
    hit = np.zeros(B, dtype=bool)
    for name, body in _static_bodies(scene, include_block=False):
        bp = np.asarray(body.pose.pos, dtype=float)[None]
        bR = body.pose.rotation[None]
        for i in range(1, chain.n_links):
            depth, _ = collide(chain.geoms[i], gp[:, i], gR[:, i], body.geometry, bp, bR)
            hit |= depth > 0
    return hit


def self_hits(chain: KinematicChain, gp, gR) -> np.ndarray:
    adj = adjacent_pairs(chain.morphology)
    hit = np.zeros(gp.shape[0], dtype=bool)
    for i in range(chain.n_links):
        for j in range(i + 1, chain.n_links):
            if (i, j) in adj:
                continue
            depth, _ = collide(chain.geoms[i], gp[:, i], gR[:, i], chain.geoms[j], gp[:, j], gR[:, j])
            hit |= depth > 0
    return hit


def collides_batch(chain: KinematicChain, Q, scene: Scene, self_collision: bool = True) -> np.ndarray:
    _, _, gp, gR = chain.forward(Q, scene.mount.pos, scene.mount.rotation)
    hit = environment_hits(chain, gp, gR, scene)
    if self_collision:
        hit |= self_hits(chain, gp, gR)
    return hit


def goal_rng(m: Morphology, seed: int) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by (seed, morphology)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF,
                                                                        morphology_seed(m)])))


def sample_reach_configs(m: Morphology, scene: Scene, n: int, seed: int,
                         chunk: int = 256) -> np.ndarray:
    """First ``n`` collision-free uniform configurations from the keyed stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    chain = KinematicChain(m)
    rng = goal_rng(m, seed)
    lo, hi = chain.lower, chain.upper
    budget = GOAL_BUDGET_PER_GOAL * n
    kept: list[np.ndarray] = []
    drawn = 0
    while drawn < budget and sum(len(k) for k in kept) < n:
        k = min(chunk, budget - drawn)
        Q = lo + (hi - lo) * rng.random((k, chain.n_joints))
        drawn += k
        ok = ~collides_batch(chain, Q, scene, self_collision=True)
        kept.append(Q[ok])
    Q = np.concatenate(kept) if kept else np.zeros((0, chain.n_joints))
    if len(Q) < n:
        raise GoalSamplingError(f"{m.name}: only {len(Q)} of {n} collision-free configurations "
                                f"after {drawn} draws")
    return Q[:n]


def sample_reach_goals(m: Morphology, scene: Scene, n: int, seed: int) -> np.ndarray:
    Q = sample_reach_configs(m, scene, n, seed)
    chain = KinematicChain(m)
    return chain.forward(Q, scene.mount.pos, scene.mount.rotation)[2][:, chain.ee_index]
