"""Forward kinematics over link trees.

Frames follow the URDF convention: a link's frame is its parent's frame
composed with the joint origin and the joint motion; the link's geometry sits
at ``link.origin`` inside that frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import axis_angle_matrix, matmul3, matrix_to_quat, matvec3, quat_to_matrix
from .morphology import Morphology


@dataclass(frozen=True)
class Pose:
    pos: tuple[float, float, float] = (0.0, 0.0, 0.0)
    quat: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(np.asarray(self.quat, dtype=float))


@dataclass
class FKResult:
    """World poses for every link of one configuration."""

    frame_pos: np.ndarray   # (n, 3) joint/link frames
    frame_rot: np.ndarray   # (n, 3, 3)
    geom_pos: np.ndarray    # (n, 3) geometry centres
    geom_rot: np.ndarray    # (n, 3, 3)
    ee_index: int

    @property
    def geom_quat(self) -> np.ndarray:
        return matrix_to_quat(self.geom_rot)

    @property
    def ee_pos(self) -> np.ndarray:
        return self.geom_pos[self.ee_index]

    def link_pose(self, i: int) -> Pose:
        return Pose(tuple(self.geom_pos[i]), tuple(self.geom_quat[i]))


class KinematicChain:
    """Array form of a morphology, reused across many FK evaluations."""

    def __init__(self, m: Morphology):
        self.morphology = m
        self.n_links = m.n_links
        self.n_joints = m.n_joints
        self.parents = np.array([l.parent for l in m.links])
        self.link_R = quat_to_matrix(np.array([l.origin_quat for l in m.links], dtype=float))
        self.link_p = np.array([l.origin_pos for l in m.links], dtype=float)
        if m.joints:
            self.joint_R = quat_to_matrix(np.array([j.origin_quat for j in m.joints], dtype=float))
            self.joint_p = np.array([j.origin_pos for j in m.joints], dtype=float)
            self.axes = np.array([j.axis for j in m.joints], dtype=float)
        else:
            self.joint_R = np.zeros((0, 3, 3))
            self.joint_p = np.zeros((0, 3))
            self.axes = np.zeros((0, 3))
        self.kinds = [j.kind for j in m.joints]
        self.lower, self.upper = m.limits()
        self.ee_index = m.ee_index
        self.geoms = [l.geometry for l in m.links]

    def clamp(self, q) -> np.ndarray:
        return np.clip(np.asarray(q, dtype=float), self.lower, self.upper)

    def forward(self, Q, mount_pos=(0.0, 0.0, 0.0), mount_rot=None):
        """Batched FK. ``Q`` is (B, n_joints). Returns frame and geometry poses.

        Output arrays are (B, n_links, 3) positions and (B, n_links, 3, 3) rotations.
        """
        Q = self.clamp(np.atleast_2d(Q))
        if Q.shape[-1] != self.n_joints:
            raise ValueError(f"expected {self.n_joints} joint values, got {Q.shape[-1]}")
        B = Q.shape[0]
        mount_rot = np.eye(3) if mount_rot is None else np.asarray(mount_rot, dtype=float)
        fp = np.empty((B, self.n_links, 3))
        fR = np.empty((B, self.n_links, 3, 3))
        fp[:, 0] = np.asarray(mount_pos, dtype=float)
        fR[:, 0] = mount_rot
        for i in range(1, self.n_links):
            j = i - 1
            par = self.parents[i]
            PR, Pp = fR[:, par], fp[:, par]
            Rj = matmul3(PR, self.joint_R[j])
            pj = Pp + matvec3(PR, self.joint_p[j])
            kind = self.kinds[j]
            if kind == "revolute":
                Rj = matmul3(Rj, axis_angle_matrix(self.axes[j], Q[:, j]))
            elif kind == "prismatic":
                pj = pj + matvec3(Rj, self.axes[j] * Q[:, j, None])
            fR[:, i] = Rj
            fp[:, i] = pj
        gR = matmul3(fR, self.link_R)
        gp = fp + matvec3(fR, self.link_p)
        return fp, fR, gp, gR

    def ee_positions(self, Q, mount_pos=(0.0, 0.0, 0.0)) -> np.ndarray:
        return self.forward(Q, mount_pos)[2][:, self.ee_index]


def forward_kinematics(m: Morphology, q, mount: Pose | None = None) -> FKResult:
    chain = KinematicChain(m)
    q = np.asarray(q, dtype=float)
    if q.shape != (m.n_joints,):
        raise ValueError(f"expected {m.n_joints} joint values, got shape {q.shape}")
    mount = mount or Pose()
    fp, fR, gp, gR = chain.forward(q[None], mount.pos, mount.rotation)
    return FKResult(fp[0], fR[0], gp[0], gR[0], chain.ee_index)
