import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_morphology, random_q, seeds
from oracles import homogeneous, oracle_fk, quat_matrix
from morphbench.kinematics import KinematicChain, Pose, forward_kinematics
from morphbench.morphology import GeometryPrimitive, JointSpec, Link, Morphology
from morphbench.procgen import GenParams, gen_primitive_category


def single_link(L=0.4):
    links = (Link(0, -1, GeometryPrimitive.sphere(0.01)),
             Link(1, 0, GeometryPrimitive.box(0.01, 0.01, 0.01), (L, 0, 0), is_ee=True))
    return Morphology("one", "t", links, (JointSpec(1, "revolute", (0, 0, 1), lower=-math.pi, upper=math.pi),))


def test_straight_link():
    fk = forward_kinematics(single_link(0.4), [0.0])
    assert np.allclose(fk.ee_pos, (0.4, 0, 0), atol=1e-12)


def test_quarter_turn():
    fk = forward_kinematics(single_link(0.4), [math.pi / 2])
    assert np.allclose(fk.ee_pos, (0, 0.4, 0), atol=1e-12)


def test_size_mismatch():
    with pytest.raises(ValueError):
        forward_kinematics(single_link(), [0.0, 1.0])
    with pytest.raises(ValueError):
        KinematicChain(single_link()).forward(np.zeros((3, 2)))


@given(seeds)
def test_fk_matches_matrix_oracle(seed):
    rng = np.random.default_rng(seed)
    m = random_morphology(rng, n_links=int(rng.integers(2, 9)), tree=bool(rng.integers(2)))
    mount_R = quat_matrix(rng.normal(size=4))
    mount_p = rng.uniform(-1, 1, 3)
    chain = KinematicChain(m)
    Q = np.stack([random_q(rng, m) for _ in range(5)])
    _, _, gp, gR = chain.forward(Q, mount_p, mount_R)
    for b in range(len(Q)):
        expect = oracle_fk(m, Q[b], homogeneous(mount_R, mount_p))
        for i, T in enumerate(expect):
            assert np.max(np.abs(gp[b, i] - T[:3, 3])) < 1e-9
            assert np.max(np.abs(gR[b, i] - T[:3, :3])) < 1e-9


@given(seeds)
def test_quaternion_output_agrees_with_oracle(seed):
    rng = np.random.default_rng(seed)
    m = random_morphology(rng, n_links=4)
    q = random_q(rng, m)
    fk = forward_kinematics(m, q, Pose((0.1, 0.2, 0.3), (0.0, 0.0, 0.0, 1.0)))
    expect = oracle_fk(m, q, homogeneous(quat_matrix((0, 0, 0, 1)), (0.1, 0.2, 0.3)))
    for i, T in enumerate(expect):
        # |<q_fk, q_oracle>| = 1 means the same rotation
        assert np.allclose(quat_matrix(fk.geom_quat[i]), T[:3, :3], atol=1e-9)
        assert fk.geom_quat[i][0] >= 0


def test_nlink_straight_reach():
    m = gen_primitive_category("nlink", GenParams(4, dof=2))
    # joint offsets along x carry the link lengths; the fixed EE joint sits at the far end
    lengths = [j.origin_pos[0] for j in m.joints[1:3]]
    fk = forward_kinematics(m, np.zeros(m.n_joints))
    assert np.linalg.norm(fk.frame_pos[3] - fk.frame_pos[1]) == pytest.approx(sum(lengths), abs=1e-9)
    bent = forward_kinematics(m, np.array([0.0, math.pi / 2, 0.0]))
    # a right angle at the elbow gives the hypotenuse
    assert np.linalg.norm(bent.frame_pos[3] - bent.frame_pos[1]) == pytest.approx(math.hypot(*lengths), abs=1e-9)


@given(seeds, st.floats(-0.05, 0.05))
def test_single_joint_lipschitz(seed, dq):
    rng = np.random.default_rng(seed)
    m = random_morphology(rng, n_links=5, kinds=("revolute",))
    chain = KinematicChain(m)
    q = random_q(rng, m) * 0.5
    j = int(rng.integers(m.n_joints))
    q2 = q.copy()
    q2[j] += dq
    _, _, gp, _ = chain.forward(np.stack([q, q2]))
    fp = chain.forward(q[None])[0][0]
    # lever arm: distance from the rotating joint to the EE geometry centre
    lever = np.linalg.norm(gp[0, chain.ee_index] - fp[j + 1])
    moved = np.linalg.norm(gp[1, chain.ee_index] - gp[0, chain.ee_index])
    assert moved <= lever * abs(dq) + 1e-12
