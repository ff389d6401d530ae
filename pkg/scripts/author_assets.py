"""Write the hand-authored arm and end-effector descriptors into the asset tree.

The arms are primitive-link approximations of commercial manipulators: DOF
counts and joint-axis patterns follow the public specs, link dimensions are
rounded approximations. Re-running this script must reproduce the shipped
files byte for byte (checked by the test suite).

    python scripts/author_assets.py [--check]
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from morphbench.morphology import GeometryPrimitive, JointSpec, Link, Morphology, ensure_valid, save_morphology
from morphbench.procgen import ChainBuilder
from morphbench.registry import ASSET_VERSION, default_assets_root

Z, Y, X = (0, 0, 1), (0, 1, 0), (1, 0, 0)
PI = math.pi


def cyl(r, length):
    return GeometryPrimitive.cylinder(r, round(length / 2, 6))


def box(wx, wy, length):
    return GeometryPrimitive.box(wx / 2, wy / 2, round(length / 2, 6))


def upright(name, base, rows, *, base_height):
    """Serial arm pointing straight up at q = 0.

    Each row is (axis, limits, lateral offset of the joint, geometry, length);
    the joint sits at the top of the previous link.
    """
    b = ChainBuilder(name, name, base=base, base_pos=(0, 0, base_height / 2))
    parent, top = 0, base_height
    for k, (axis, (lo, hi), lateral, geom, length) in enumerate(rows):
        parent = b.add(parent, "revolute", geom, joint_pos=(lateral[0], lateral[1], top), axis=axis,
                       lower=lo, upper=hi, link_pos=(0, 0, length / 2))
        top = length
    return b, parent, top


def finish_with_tip(b, parent, top, geom=None):
    b.add(parent, "fixed", geom or GeometryPrimitive.box(0.02, 0.02, 0.02), joint_pos=(0, 0, top + 0.02),
          is_ee=True)
    return b.build()


def parallel_hand(b, parent, top, *, palm, finger, stroke, spread=0.012):
    """Palm on a fixed joint plus two prismatic fingers opening along y."""
    hand = b.add(parent, "fixed", palm, joint_pos=(0, 0, top), link_pos=(0, 0, palm.params[2]), is_ee=True)
    reach = 2 * palm.params[2]
    for side in (1, -1):
        b.add(hand, "prismatic", finger, joint_pos=(0, side * spread, reach), axis=(0, side, 0),
              lower=0.0, upper=stroke, link_pos=(0, 0, finger.params[2]))
    return b.build()


def ur5():
    b, parent, top = upright("ur5", cyl(0.075, 0.089), [
        (Z, (-PI, PI), (0, 0), cyl(0.06, 0.12), 0.12),
        (Y, (-PI, PI), (0, 0), cyl(0.054, 0.425), 0.425),
        (Y, (-PI, PI), (0, 0), cyl(0.045, 0.392), 0.392),
        (Y, (-PI, PI), (0, 0), cyl(0.04, 0.095), 0.095),
        (Z, (-PI, PI), (0, 0), cyl(0.04, 0.095), 0.095),
        (Y, (-PI, PI), (0, 0), cyl(0.035, 0.082), 0.082),
    ], base_height=0.089)
    b.links[-1] = Link(b.links[-1].index, b.links[-1].parent, b.links[-1].geometry,
                       b.links[-1].origin_pos, b.links[-1].origin_quat, is_ee=True)
    return b.build()


def panda():
    b, parent, top = upright("panda", cyl(0.07, 0.1), [
        (Z, (-2.8973, 2.8973), (0, 0), cyl(0.06, 0.233), 0.233),
        (Y, (-1.7628, 1.7628), (0, 0), cyl(0.06, 0.16), 0.16),
        (Z, (-2.8973, 2.8973), (0, 0), cyl(0.055, 0.156), 0.156),
        (Y, (-3.0718, -0.0698), (0.0825, 0), cyl(0.055, 0.19), 0.19),
        (Z, (-2.8973, 2.8973), (-0.0825, 0), cyl(0.05, 0.194), 0.194),
        (Y, (-0.0175, 3.7525), (0, 0), cyl(0.045, 0.088), 0.088),
        (Z, (-2.8973, 2.8973), (0.088, 0), cyl(0.04, 0.107), 0.107),
    ], base_height=0.1)
    return parallel_hand(b, parent, top, palm=GeometryPrimitive.box(0.03, 0.1, 0.029),
                         finger=GeometryPrimitive.box(0.01, 0.008, 0.027), stroke=0.04)


def kinova():
    b, parent, top = upright("kinova", cyl(0.06, 0.156), [
        (Z, (-PI, PI), (0, 0), cyl(0.05, 0.128), 0.128),
        (Y, (-2.24, 2.24), (0, 0.005), cyl(0.05, 0.21), 0.21),
        (Z, (-PI, PI), (0, 0), cyl(0.05, 0.21), 0.21),
        (Y, (-2.57, 2.57), (0, 0.006), cyl(0.045, 0.2), 0.2),
        (Z, (-PI, PI), (0, 0), cyl(0.04, 0.1), 0.1),
        (Y, (-2.09, 2.09), (0, 0), cyl(0.04, 0.1), 0.1),
        (Z, (-PI, PI), (0, 0), cyl(0.04, 0.06), 0.06),
    ], base_height=0.156)
    return finish_with_tip(b, parent, top, GeometryPrimitive.cylinder(0.035, 0.02))


def jaco():
    b, parent, top = upright("jaco", cyl(0.05, 0.1), [
        (Z, (-PI, PI), (0, 0), cyl(0.045, 0.1755), 0.1755),
        (Y, (-2.27, 2.27), (0, 0), box(0.08, 0.08, 0.41), 0.41),
        (Y, (-2.57, 2.57), (0, -0.0098), cyl(0.04, 0.2073), 0.2073),
        (Z, (-PI, PI), (0, 0), cyl(0.035, 0.0741), 0.0741),
        (Y, (-2.0, 2.0), (0, 0), cyl(0.035, 0.0741), 0.0741),
        (Z, (-PI, PI), (0, 0), cyl(0.035, 0.06), 0.06),
    ], base_height=0.1)
    hand = b.add(len(b.links) - 1, "fixed", GeometryPrimitive.cylinder(0.04, 0.025), joint_pos=(0, 0, top),
                 link_pos=(0, 0, 0.025), is_ee=True)
    for k in range(3):
        ang = 2 * PI * k / 3
        b.add(hand, "revolute", GeometryPrimitive.box(0.008, 0.008, 0.025),
              joint_pos=(0.028 * math.cos(ang), 0.028 * math.sin(ang), 0.05),
              axis=(-math.sin(ang), math.cos(ang), 0), lower=0.0, upper=1.2, link_pos=(0, 0, 0.025))
    return b.build()


def xarm():
    b, parent, top = upright("xarm", cyl(0.06, 0.1), [
        (Z, (-PI, PI), (0, 0), cyl(0.05, 0.167), 0.167),
        (Y, (-2.06, 2.09), (0.053, 0), box(0.09, 0.09, 0.284), 0.284),
        (Y, (-3.92, 0.19), (0.0775, 0), cyl(0.045, 0.343), 0.343),
        (Z, (-PI, PI), (0, 0), cyl(0.04, 0.0775), 0.0775),
        (Y, (-1.69, PI), (0, 0), cyl(0.04, 0.097), 0.097),
        (Z, (-PI, PI), (0, 0), cyl(0.035, 0.05), 0.05),
    ], base_height=0.1)
    return finish_with_tip(b, parent, top)


def lwr():
    b, parent, top = upright("lwr", cyl(0.07, 0.11), [
        (Z, (-2.96, 2.96), (0, 0), cyl(0.06, 0.2), 0.2),
        (Y, (-2.09, 2.09), (0, 0), cyl(0.06, 0.2), 0.2),
        (Z, (-2.96, 2.96), (0, 0), cyl(0.06, 0.2), 0.2),
        (Y, (-2.09, 2.09), (0, 0), cyl(0.06, 0.2), 0.2),
        (Z, (-2.96, 2.96), (0, 0), cyl(0.055, 0.19), 0.19),
        (Y, (-2.09, 2.09), (0, 0), cyl(0.05, 0.078), 0.078),
        (Z, (-2.96, 2.96), (0, 0), cyl(0.04, 0.05), 0.05),
    ], base_height=0.11)
    return finish_with_tip(b, parent, top, GeometryPrimitive.cylinder(0.04, 0.015))


def yumi():
    b, parent, top = upright("yumi", box(0.12, 0.12, 0.1), [
        (Z, (-2.94, 2.94), (0, 0), cyl(0.04, 0.1), 0.1),
        (Y, (-2.5, 0.76), (0.03, 0), box(0.07, 0.07, 0.12), 0.12),
        (Z, (-2.94, 2.94), (-0.03, 0), cyl(0.035, 0.13), 0.13),
        (Y, (-2.16, 1.4), (0.04, 0), box(0.06, 0.06, 0.1), 0.1),
        (Z, (-5.06, 5.06), (-0.04, 0), cyl(0.03, 0.12), 0.12),
        (Y, (-1.53, 2.41), (0, 0), box(0.05, 0.05, 0.06), 0.06),
        (Z, (-3.99, 3.99), (0, 0), cyl(0.025, 0.03), 0.03),
    ], base_height=0.1)
    return parallel_hand(b, parent, top, palm=GeometryPrimitive.box(0.025, 0.04, 0.03),
                         finger=GeometryPrimitive.box(0.008, 0.006, 0.02), stroke=0.025, spread=0.01)


def arm5():
    b, parent, top = upright("arm5", box(0.1, 0.1, 0.06), [
        (Z, (-PI, PI), (0, 0), box(0.06, 0.06, 0.1), 0.1),
        (Y, (-2.0, 2.0), (0, 0), box(0.05, 0.05, 0.2), 0.2),
        (Y, (-2.4, 2.4), (0, 0), box(0.045, 0.045, 0.2), 0.2),
        (Y, (-2.0, 2.0), (0, 0), box(0.04, 0.04, 0.1), 0.1),
        (Z, (-PI, PI), (0, 0), box(0.035, 0.035, 0.05), 0.05),
    ], base_height=0.06)
    return finish_with_tip(b, parent, top)


def widowx():
    """Box-built 5-DOF arm with an offset shoulder, a roll wrist and a parallel hand."""
    b = ChainBuilder("widowx", "widowx", base=GeometryPrimitive.box(0.07, 0.07, 0.036), base_pos=(0, 0, 0.036))
    waist = b.add(0, "revolute", GeometryPrimitive.box(0.04, 0.04, 0.02), joint_pos=(0, 0, 0.072),
                  lower=-PI, upper=PI, link_pos=(0, 0, 0.02))
    shoulder = b.add(waist, "revolute", GeometryPrimitive.box(0.02, 0.025, 0.125), joint_pos=(0, 0, 0.039),
                     axis=Y, lower=-1.88, upper=1.99, link_pos=(0.025, 0, 0.125))
    elbow = b.add(shoulder, "revolute", GeometryPrimitive.box(0.125, 0.02, 0.02), joint_pos=(0.05, 0, 0.25),
                  axis=Y, lower=-2.15, upper=1.6, link_pos=(0.125, 0, 0))
    wrist = b.add(elbow, "revolute", GeometryPrimitive.box(0.0325, 0.02, 0.018), joint_pos=(0.25, 0, 0),
                  axis=Y, lower=-1.75, upper=2.15, link_pos=(0.0325, 0, 0))
    roll = b.add(wrist, "revolute", GeometryPrimitive.box(0.03, 0.025, 0.02), joint_pos=(0.065, 0, 0),
                 axis=X, lower=-PI, upper=PI, link_pos=(0.03, 0, 0))
    hand = b.add(roll, "fixed", GeometryPrimitive.box(0.02, 0.04, 0.015), joint_pos=(0.06, 0, 0),
                 link_pos=(0.02, 0, 0), is_ee=True)
    for side in (1, -1):
        b.add(hand, "prismatic", GeometryPrimitive.box(0.025, 0.006, 0.01), joint_pos=(0.04, side * 0.012, 0),
              axis=(0, side, 0), lower=0.0, upper=0.03, link_pos=(0.025, 0, 0))
    return b.build()


def ez_gripper():
    """Two revolute fingers on a palm, x-outward (welded by attach_end_effector)."""
    palm = GeometryPrimitive.box(0.02, 0.04, 0.02)
    links = [Link(0, -1, palm, (0.02, 0.0, 0.0), is_ee=True)]
    joints = []
    for k, side in enumerate((1, -1)):
        links.append(Link(k + 1, 0, GeometryPrimitive.box(0.03, 0.006, 0.012), (0.03, 0.0, 0.0)))
        joints.append(JointSpec(k + 1, "revolute", (0.0, 0.0, float(side)), (0.04, side * 0.025, 0.0),
                                lower=-0.2, upper=1.0))
    return ensure_valid(Morphology("ez", "ez", tuple(links), tuple(joints)))


def sawyer_gripper():
    """Electric parallel gripper: palm plus two prismatic fingers along y."""
    palm = GeometryPrimitive.box(0.025, 0.045, 0.02)
    links = [Link(0, -1, palm, (0.025, 0.0, 0.0), is_ee=True)]
    joints = []
    for k, side in enumerate((1, -1)):
        links.append(Link(k + 1, 0, GeometryPrimitive.box(0.035, 0.007, 0.012), (0.035, 0.0, 0.0)))
        joints.append(JointSpec(k + 1, "prismatic", (0.0, float(-side), 0.0), (0.05, side * 0.02, 0.0),
                                lower=0.0, upper=0.012))
    return ensure_valid(Morphology("sawyer", "sawyer", tuple(links), tuple(joints)))


def _c(arm, ee=None, task="reach"):
    d = {"arm": arm, "task": task}
    if ee:
        d["ee"] = ee
    return d


# Split layout for the tasks built from authored parts; "prims" is the procedural prims robot.
SPLITS = {
    "ee_arm": {
        "train": [_c("prims", "plane"), _c("prims", "cylinder"), _c("ur5", "plane"), _c("ur5", "ez"),
                  _c("ur5", "sawyer")],
        "test": [_c("ur5", "stick")],
    },
    "ee_task": {
        "train": [_c("prims", "plane", "push"), _c("ur5", "stick", "reach")],
        "test": [_c("ur5", "plane", "push")],
    },
    "arms": {
        "train": [_c("ur5", "stick"), _c("ur5", "ez")]
                 + [_c(a) for a in ("panda", "kinova", "jaco", "xarm", "lwr", "yumi", "arm5")],
        "test": [_c("widowx")],
    },
}

ARMS = {"ur5": ur5, "panda": panda, "kinova": kinova, "jaco": jaco, "xarm": xarm, "lwr": lwr,
        "yumi": yumi, "arm5": arm5, "widowx": widowx}
END_EFFECTORS = {"ez": ez_gripper, "sawyer": sawyer_gripper}


def render() -> dict[str, str]:
    files = {}
    for name, fn in ARMS.items():
        files[f"arms/{name}.json"] = save_morphology(fn())
    for name, fn in END_EFFECTORS.items():
        files[f"ee/{name}.json"] = save_morphology(fn())
    manifest = {
        "version": ASSET_VERSION,
        "assets": {Path(p).stem: p for p in sorted(files)},
        "tasks": SPLITS,
    }
    files["manifest.json"] = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    return files


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--check", action="store_true", help="verify shipped files instead of writing")
    ap.add_argument("--root", type=Path, default=None)
    args = ap.parse_args(argv)
    root = (args.root or default_assets_root()) / f"v{ASSET_VERSION}"
    stale = []
    for rel, text in render().items():
        path = root / rel
        if args.check:
            if not path.exists() or path.read_text() != text:
                stale.append(rel)
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
    if stale:
        print("stale assets: " + ", ".join(stale), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
