"""Procedural robot generators and morphology transforms.

Conventions shared by every generator: the base is a box resting on the table
with its frame at the mount point (z = 0); planar robots run at z = 0.03 so
their links sweep through a resting 5 cm block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import canonical_quat, quat_to_matrix
from .morphology import (
    MAX_LINKS,
    GeometryPrimitive,
    JointSpec,
    Link,
    Morphology,
    ensure_valid,
)

PI = math.pi
BASE_HALF = (0.06, 0.06, 0.03)
PLANAR_Z = 0.03
Z_TO_X = tuple(canonical_quat([math.cos(PI / 4), 0.0, math.sin(PI / 4), 0.0]).tolist())
PRIM_KINDS = ("stick", "nlink", "prims", "chain")
EE_KINDS = ("stick", "plane", "cylinder", "gripper")


@dataclass(frozen=True)
class GenParams:
    seed: int
    link_length_range: tuple[float, float] = (0.15, 0.35)
    link_width_range: tuple[float, float] = (0.03, 0.07)
    dof: int = 3
    sphere_radius: float = 0.04

    def __post_init__(self):
        for lo, hi in (self.link_length_range, self.link_width_range):
            if not 0 < lo <= hi:
                raise ValueError(f"invalid range ({lo}, {hi})")
        if self.dof < 1:
            raise ValueError("dof must be >= 1")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF))


def _r(x) -> float:
    # Generated values are rounded to 1e-6 m so description files stay readable.
    return round(float(x), 6)


def _v(*xs) -> tuple[float, ...]:
    return tuple(_r(x) for x in xs)


class ChainBuilder:
    """Accumulates links and joints in topological order."""

    def __init__(self, name: str, category: str, base: GeometryPrimitive | None = None,
                 base_pos=(0.0, 0.0, BASE_HALF[2])):
        base = base or GeometryPrimitive.box(*BASE_HALF)
        self.name, self.category = name, category
        self.links = [Link(0, -1, base, _v(*base_pos))]
        self.joints: list[JointSpec] = []

    def add(self, parent: int, kind: str, geometry: GeometryPrimitive, *, joint_pos=(0, 0, 0),
            axis=(0, 0, 1), lower=0.0, upper=0.0, link_pos=(0, 0, 0), link_quat=(1.0, 0.0, 0.0, 0.0),
            joint_quat=(1.0, 0.0, 0.0, 0.0), is_ee=False) -> int:
        idx = len(self.links)
        if kind == "fixed":
            lower = upper = 0.0
        self.links.append(Link(idx, parent, geometry, _v(*link_pos), tuple(link_quat), is_ee))
        self.joints.append(JointSpec(idx, kind, tuple(float(a) for a in axis), _v(*joint_pos),
                                     tuple(joint_quat), _r(lower), _r(upper)))
        return idx

    def build(self) -> Morphology:
        return ensure_valid(Morphology(self.name, self.category, tuple(self.links), tuple(self.joints)))


def _box_along_x(length, width, height=None):
    height = width if height is None else height
    return GeometryPrimitive.box(_r(length / 2), _r(width / 2), _r(height / 2))


def gen_arm3(p: GenParams, name: str | None = None) -> Morphology:
    """Yaw column plus two pitch links, with a small box end-effector."""
    if p.dof != 3:
        raise ValueError("arm3 requires dof = 3")
    rng = p.rng()
    L = rng.uniform(*p.link_length_range, size=3)
    W = rng.uniform(*p.link_width_range, size=3)
    b = ChainBuilder(name or f"arm3-{p.seed}", "arm3")
    col = b.add(0, "revolute", GeometryPrimitive.box(_r(W[0] / 2), _r(W[0] / 2), _r(L[0] / 2)),
                joint_pos=(0, 0, 2 * BASE_HALF[2]), axis=(0, 0, 1), lower=-PI, upper=PI,
                link_pos=(0, 0, L[0] / 2))
    up = b.add(col, "revolute", _box_along_x(L[1], W[1]), joint_pos=(0, 0, L[0]), axis=(0, 1, 0),
               lower=-1.6, upper=1.6, link_pos=(L[1] / 2, 0, 0))
    fore = b.add(up, "revolute", _box_along_x(L[2], W[2]), joint_pos=(L[1], 0, 0), axis=(0, 1, 0),
                 lower=-2.6, upper=2.6, link_pos=(L[2] / 2, 0, 0))
    b.add(fore, "fixed", GeometryPrimitive.box(0.02, 0.02, 0.02), joint_pos=(L[2], 0, 0), is_ee=True)
    return b.build()


def arm3_link_lengths(m: Morphology) -> np.ndarray:
    """The three sampled link lengths of an arm3 morphology."""
    g = [l.geometry.params for l in m.links[1:4]]
    return np.array([2 * g[0][2], 2 * g[1][0], 2 * g[2][0]])


def _gen_stick(p: GenParams, rng, name):
    length = rng.uniform(*p.link_length_range) + 0.15
    b = ChainBuilder(name, "stick")
    turret = b.add(0, "revolute", GeometryPrimitive.cylinder(0.03, 0.02),
                   joint_pos=(0, 0, 2 * BASE_HALF[2]), axis=(0, 0, 1), lower=-PI, upper=PI,
                   link_pos=(0, 0, 0.02))
    b.add(turret, "prismatic", GeometryPrimitive.box(_r(length / 2), 0.015, 0.02),
          joint_pos=(0.10, 0, PLANAR_Z - 2 * BASE_HALF[2]), axis=(1, 0, 0), lower=0.0, upper=0.3,
          link_pos=(length / 2, 0, 0), is_ee=True)
    return b.build()


def _gen_nlink(p: GenParams, rng, name):
    L = rng.uniform(*p.link_length_range, size=p.dof)
    W = rng.uniform(*p.link_width_range, size=p.dof)
    b = ChainBuilder(name, "nlink")
    parent, offset = 0, (0.09, 0.0, PLANAR_Z)
    for i in range(p.dof):
        parent = b.add(parent, "revolute", _box_along_x(L[i], W[i], 0.04), joint_pos=offset,
                       axis=(0, 0, 1), lower=-PI if i == 0 else -2.6, upper=PI if i == 0 else 2.6,
                       link_pos=(L[i] / 2, 0, 0))
        offset = (L[i], 0.0, 0.0)
    b.add(parent, "fixed", GeometryPrimitive.box(0.02, 0.02, 0.02), joint_pos=offset, is_ee=True)
    return b.build()


def _gen_prims(p: GenParams, rng, name):
    n = int(rng.integers(2, 4))
    kinds = [("box", "sphere", "cylinder")[k] for k in rng.permutation(3)[:n]]
    b = ChainBuilder(name, "prims")
    parent, offset = 0, (0.09, 0.0, PLANAR_Z)
    for i, kind in enumerate(kinds):
        if kind == "box":
            length = rng.uniform(*p.link_length_range)
            geom, quat = _box_along_x(length, rng.uniform(*p.link_width_range), 0.04), (1.0, 0.0, 0.0, 0.0)
        elif kind == "sphere":
            r = rng.uniform(0.022, 0.028)
            length, geom, quat = 2 * r, GeometryPrimitive.sphere(_r(r)), (1.0, 0.0, 0.0, 0.0)
        else:
            length = rng.uniform(*p.link_length_range)
            geom = GeometryPrimitive.cylinder(_r(rng.uniform(0.015, 0.025)), _r(length / 2))
            quat = Z_TO_X
        parent = b.add(parent, "revolute", geom, joint_pos=offset, axis=(0, 0, 1),
                       lower=-PI if i == 0 else -2.6, upper=PI if i == 0 else 2.6,
                       link_pos=(length / 2, 0, 0), link_quat=quat, is_ee=i == n - 1)
        offset = (length, 0.0, 0.0)
    return b.build()


def _gen_chain(p: GenParams, rng, name):
    r = p.sphere_radius
    b = ChainBuilder(name, "chain")
    parent, offset = 0, (0.09, 0.0, 2 * BASE_HALF[2])
    for i in range(p.dof):
        axis = (0, 0, 1) if i % 2 == 0 else (0, 1, 0)
        lim = PI if i == 0 else 2.0
        parent = b.add(parent, "revolute", GeometryPrimitive.sphere(r), joint_pos=offset, axis=axis,
                       lower=-lim, upper=lim, link_pos=(r, 0, 0), is_ee=i == p.dof - 1)
        offset = (2 * r, 0.0, 0.0)
    return b.build()


def gen_primitive_category(kind: str, p: GenParams, name: str | None = None) -> Morphology:
    builders = {"stick": _gen_stick, "nlink": _gen_nlink, "prims": _gen_prims, "chain": _gen_chain}
    if kind not in builders:
        raise ValueError(f"unknown primitive category {kind!r}; expected one of {PRIM_KINDS}")
    return builders[kind](p, p.rng(), name or f"{kind}-{p.seed}")


# ---------------------------------------------------------------- transforms

def _scale_geometry(g: GeometryPrimitive, f_geom: np.ndarray) -> GeometryPrimitive:
    if g.kind == "sphere":
        return GeometryPrimitive.sphere(_r(g.params[0] * float(np.cbrt(np.prod(f_geom)))))
    if g.kind == "cylinder":
        fr = math.sqrt(f_geom[0] * f_geom[1])
        return GeometryPrimitive.cylinder(_r(g.params[0] * fr), _r(g.params[2] * f_geom[2]))
    return GeometryPrimitive("box", _v(*(np.asarray(g.params) * f_geom)))


def scale_arm(m: Morphology, factors) -> Morphology:
    """Scale each link's geometry and origins by a per-link 3-vector.

    Joint origins live in the parent frame and take the parent's factor;
    sphere and cylinder radii use the geometric mean of the relevant axes.
    """
    f = np.asarray(factors, dtype=float)
    if f.shape != (m.n_links, 3):
        raise ValueError(f"factors must have shape ({m.n_links}, 3), got {f.shape}")
    if np.any(f <= 0) or not np.all(np.isfinite(f)):
        raise ValueError("scale factors must be positive")
    links = []
    for l in m.links:
        R = quat_to_matrix(np.asarray(l.origin_quat))
        f_geom = np.abs(R.T) @ f[l.index]
        links.append(replace(l, geometry=_scale_geometry(l.geometry, f_geom),
                             origin_pos=_v(*(np.asarray(l.origin_pos) * f[l.index]))))
    joints = [replace(j, origin_pos=_v(*(np.asarray(j.origin_pos) * f[m.links[j.child].parent])))
              for j in m.joints]
    return ensure_valid(replace(m, links=tuple(links), joints=tuple(joints)))


def _quat_x_to(u) -> tuple[float, ...]:
    u = np.asarray(u, dtype=float)
    u = u / np.linalg.norm(u)
    x = np.array([1.0, 0.0, 0.0])
    c = float(np.dot(x, u))
    if c > 1 - 1e-12:
        return (1.0, 0.0, 0.0, 0.0)
    if c < -1 + 1e-12:
        return (0.0, 0.0, 0.0, 1.0)
    axis = np.cross(x, u)
    axis /= np.linalg.norm(axis)
    half = math.acos(c) / 2
    return tuple(float(v) for v in canonical_quat(np.concatenate([[math.cos(half)], math.sin(half) * axis])))


def _ee_attach_frame(m: Morphology, idx: int):
    """Point on the outer face of the EE geometry and the outward direction.

    Outward is the link-origin offset, else the joint offset seen from the
    link frame, else the link's +z.
    """
    link = m.links[idx]
    pos = np.asarray(link.origin_pos, dtype=float)
    u = None
    if np.linalg.norm(pos) > 1e-9:
        u = pos / np.linalg.norm(pos)
    elif idx > 0:
        j = m.joint_of(idx)
        jp = quat_to_matrix(np.asarray(j.origin_quat)).T @ np.asarray(j.origin_pos, dtype=float)
        if np.linalg.norm(jp) > 1e-9:
            u = jp / np.linalg.norm(jp)
    if u is None:
        u = np.array([0.0, 0.0, 1.0])
    R = quat_to_matrix(np.asarray(link.origin_quat))
    u_geom = R.T @ u
    h = np.asarray(link.geometry.params)
    extent = float(np.abs(u_geom) @ h) if link.geometry.kind != "sphere" else h[0]
    return pos + u * extent, u


def _ee_parts(kind: str):
    """Built-in end-effectors in an x-outward frame: (parent offset, geometry, link pos, link quat, joint pos)."""
    if kind == "stick":
        return [(-1, GeometryPrimitive.box(0.1, 0.01, 0.01), (0.1, 0, 0), (1.0, 0, 0, 0), (0, 0, 0))]
    if kind == "plane":
        return [(-1, GeometryPrimitive.box(0.005, 0.08, 0.025), (0.005, 0, 0), (1.0, 0, 0, 0), (0, 0, 0))]
    if kind == "cylinder":
        return [(-1, GeometryPrimitive.cylinder(0.03, 0.04), (0.04, 0, 0), Z_TO_X, (0, 0, 0))]
    if kind == "gripper":
        palm = (-1, GeometryPrimitive.box(0.015, 0.05, 0.02), (0.015, 0, 0), (1.0, 0, 0, 0), (0, 0, 0))
        left = (0, GeometryPrimitive.box(0.03, 0.008, 0.015), (0.03, 0, 0), (1.0, 0, 0, 0), (0.03, 0.035, 0))
        right = (0, GeometryPrimitive.box(0.03, 0.008, 0.015), (0.03, 0, 0), (1.0, 0, 0, 0), (0.03, -0.035, 0))
        return [palm, left, right]
    raise ValueError(f"unknown end-effector {kind!r}; expected one of {EE_KINDS}")


def attach_end_effector(arm: Morphology, ee: str | Morphology) -> Morphology:
    """Append an end-effector on a fixed joint at the tip of the arm's EE link.

    ``ee`` is a built-in kind or an authored end-effector morphology whose
    base link is welded to the tip; EE flags of an authored assembly are kept.
    """
    ee_idx = arm.ee_index
    tip, u = _ee_attach_frame(arm, ee_idx)
    joint_quat = _quat_x_to(u)
    n0 = arm.n_links
    links = [replace(l, is_ee=False) for l in arm.links]
    joints = list(arm.joints)

    if isinstance(ee, Morphology):
        tag = ee.category
        for l in ee.links:
            idx = n0 + l.index
            parent = ee_idx if l.parent == -1 else n0 + l.parent
            links.append(replace(l, index=idx, parent=parent))
            if l.parent == -1:
                joints.append(JointSpec(idx, "fixed", (0.0, 0.0, 1.0), _v(*tip), joint_quat))
            else:
                j = ee.joints[l.index - 1]
                joints.append(replace(j, child=idx))
    else:
        tag = ee
        parts = _ee_parts(ee)
        for k, (par, geom, lpos, lquat, jpos) in enumerate(parts):
            idx = n0 + k
            if par == -1:
                links.append(Link(idx, ee_idx, geom, _v(*lpos), tuple(lquat), is_ee=k == 0))
                joints.append(JointSpec(idx, "fixed", (0.0, 0.0, 1.0), _v(*tip), joint_quat))
            else:
                links.append(Link(idx, n0 + par, geom, _v(*lpos), tuple(lquat)))
                joints.append(JointSpec(idx, "fixed", (0.0, 0.0, 1.0), _v(*jpos)))
    if len(links) > MAX_LINKS:
        raise ValueError(f"attaching {tag!r} gives {len(links)} links > {MAX_LINKS}")
    return ensure_valid(Morphology(f"{arm.name}-{tag}", f"{arm.category}-{tag}", tuple(links), tuple(joints)))
