import math
import sys

import numpy as np
import pytest
from hypothesis import settings, strategies as st

from morphbench.geometry import canonical_quat
from morphbench.morphology import GeometryPrimitive, JointSpec, Link, Morphology

settings.register_profile("ci", deadline=None, max_examples=40)
settings.load_profile("ci")


def random_unit(rng, n=3):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def random_geometry(rng, kind=None):
    kind = kind or rng.choice(["box", "sphere", "cylinder"])
    if kind == "box":
        return GeometryPrimitive.box(*rng.uniform(0.01, 0.1, 3))
    if kind == "sphere":
        return GeometryPrimitive.sphere(rng.uniform(0.01, 0.1))
    return GeometryPrimitive.cylinder(rng.uniform(0.01, 0.05), rng.uniform(0.02, 0.15))


def random_morphology(rng, n_links=None, name="rand", kinds=("prismatic", "revolute", "fixed"), tree=False):
    """Valid random chain (or tree) with arbitrary origins, axes and limits."""
    n = int(n_links if n_links is not None else rng.integers(1, 9))
    links = [Link(0, -1, random_geometry(rng), tuple(rng.uniform(-0.05, 0.05, 3)),
                  tuple(canonical_quat(random_unit(rng, 4)).tolist()), is_ee=(n == 1))]
    joints = []
    for i in range(1, n):
        parent = int(rng.integers(0, i)) if tree else i - 1
        links.append(Link(i, parent, random_geometry(rng), tuple(rng.uniform(-0.1, 0.1, 3)),
                          tuple(canonical_quat(random_unit(rng, 4)).tolist()), is_ee=(i == n - 1)))
        kind = str(rng.choice(kinds))
        if kind == "fixed":
            lo = hi = 0.0
        elif kind == "revolute":
            lo, hi = -rng.uniform(0.5, math.pi), rng.uniform(0.5, math.pi)
        else:
            lo, hi = -rng.uniform(0.0, 0.2), rng.uniform(0.05, 0.3)
        joints.append(JointSpec(i, kind, tuple(random_unit(rng)), tuple(rng.uniform(-0.2, 0.2, 3)),
                                tuple(canonical_quat(random_unit(rng, 4)).tolist()), float(lo), float(hi)))
    return Morphology(name, "random", tuple(links), tuple(joints))


def random_q(rng, m):
    lo, hi = m.limits()
    return lo + (hi - lo) * rng.random(m.n_joints)


seeds = st.integers(min_value=0, max_value=2**32 - 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[n])
