"""Morphology data model, 48-slot link tokens and the JSON description format."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

MAX_LINKS = 16
TOKEN_DIM = 48
N_FREQS = 8

GEOM_KINDS = ("box", "sphere", "cylinder")
JOINT_KINDS = ("prismatic", "revolute", "fixed")

# Slot layout of a link token, in the order of the link-feature table.
SLOTS = {
    "link_index": slice(0, 1),
    "parent_index": slice(1, 2),
    "ee_flag": slice(2, 6),
    "geom_onehot": slice(6, 9),
    "geom_params": slice(9, 12),
    "link_pos": slice(12, 15),
    "link_quat": slice(15, 19),
    "joint_axis": slice(19, 22),
    "joint_pos": slice(22, 25),
    "joint_quat": slice(25, 29),
    "joint_onehot": slice(29, 32),
    "q_sin": slice(32, 48),
}
JOINT_SLOTS = ("joint_axis", "joint_pos", "joint_quat", "joint_onehot")

IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


class MorphologyParseError(ValueError):
    """Malformed description text; ``location`` names the offending field."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


class MorphologyValidationError(ValueError):
    def __init__(self, violations: Sequence[str]):
        super().__init__("invalid morphology: " + "; ".join(violations))
        self.violations = list(violations)


@dataclass(frozen=True)
class GeometryPrimitive:
    kind: str
    params: tuple[float, float, float]

    @staticmethod
    def box(hx, hy, hz):
        return GeometryPrimitive("box", (float(hx), float(hy), float(hz)))

    @staticmethod
    def sphere(r):
        return GeometryPrimitive("sphere", (float(r),) * 3)

    @staticmethod
    def cylinder(r, half_height):
        return GeometryPrimitive("cylinder", (float(r), float(r), float(half_height)))


@dataclass(frozen=True)
class JointSpec:
    child: int
    kind: str
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    origin_pos: tuple[float, float, float] = (0.0, 0.0, 0.0)
    origin_quat: tuple[float, float, float, float] = IDENTITY_QUAT
    lower: float = 0.0
    upper: float = 0.0

    @property
    def movable(self) -> bool:
        return self.kind != "fixed"


@dataclass(frozen=True)
class Link:
    index: int
    parent: int
    geometry: GeometryPrimitive
    origin_pos: tuple[float, float, float] = (0.0, 0.0, 0.0)
    origin_quat: tuple[float, float, float, float] = IDENTITY_QUAT
    is_ee: bool = False


@dataclass(frozen=True)
class Morphology:
    name: str
    category: str
    links: tuple[Link, ...]
    joints: tuple[JointSpec, ...] = field(default=())

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def joint_of(self, link_idx: int) -> JointSpec | None:
        return None if link_idx == 0 else self.joints[link_idx - 1]

    @property
    def movable_mask(self) -> np.ndarray:
        return np.array([j.movable for j in self.joints], dtype=bool)

    @property
    def ee_index(self) -> int:
        return next(l.index for l in self.links if l.is_ee)

    def limits(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([j.lower for j in self.joints], dtype=float)
        hi = np.array([j.upper for j in self.joints], dtype=float)
        return lo, hi

    def home_q(self) -> np.ndarray:
        lo, hi = self.limits()
        return np.clip(np.zeros(self.n_joints), lo, hi)

    def renamed(self, name: str, category: str | None = None) -> "Morphology":
        return replace(self, name=name, category=self.category if category is None else category)


@dataclass
class ValidationReport:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _unit(v, tol=1e-9) -> bool:
    return abs(math.sqrt(sum(x * x for x in v)) - 1.0) <= tol


def _finite(*vals) -> bool:
    return all(math.isfinite(x) for v in vals for x in (v if isinstance(v, (tuple, list)) else (v,)))


def validate_morphology(m: Morphology) -> ValidationReport:
    bad: list[str] = []
    if not m.links:
        return ValidationReport(["no links"])
    if len(m.links) > MAX_LINKS:
        bad.append(f"too many links ({len(m.links)} > {MAX_LINKS})")
    bases = [l.index for l in m.links if l.parent == -1]
    if len(bases) > 1:
        bad.append(f"multiple base links {bases}")
    elif not bases:
        bad.append("no base link")
    if not any(l.is_ee for l in m.links):
        bad.append("no end-effector link")

    for pos, link in enumerate(m.links):
        where = f"link {pos}"
        if link.index != pos:
            bad.append(f"{where}: index {link.index} out of order")
        if link.parent != -1 and not (0 <= link.parent < link.index):
            bad.append(f"{where}: parent {link.parent} not before index")
        if pos == 0 and link.parent != -1:
            bad.append(f"{where}: first link must be the base")
        g = link.geometry
        if g.kind not in GEOM_KINDS:
            bad.append(f"{where}: unknown geometry kind {g.kind!r}")
        if len(g.params) != 3 or not _finite(g.params) or min(g.params) <= 0:
            bad.append(f"{where}: geometry params must be 3 positive numbers")
        elif g.kind == "sphere" and not (g.params[0] == g.params[1] == g.params[2]):
            bad.append(f"{where}: sphere params unequal")
        elif g.kind == "cylinder" and g.params[0] != g.params[1]:
            bad.append(f"{where}: cylinder radii unequal")
        if not _finite(link.origin_pos, link.origin_quat) or not _unit(link.origin_quat):
            bad.append(f"{where}: origin quaternion not unit")
        elif link.origin_quat[0] < 0:
            bad.append(f"{where}: origin quaternion not canonical (w < 0)")

    if len(m.joints) != len(m.links) - 1:
        bad.append(f"joint count {len(m.joints)} != links - 1 ({len(m.links) - 1})")
    for pos, j in enumerate(m.joints):
        where = f"link {pos + 1} joint"
        if j.child != pos + 1:
            bad.append(f"{where}: child {j.child} does not match link {pos + 1}")
        if j.kind not in JOINT_KINDS:
            bad.append(f"{where}: unknown joint kind {j.kind!r}")
        if not _finite(j.axis, j.origin_pos, j.origin_quat, j.lower, j.upper):
            bad.append(f"{where}: non-finite values")
            continue
        if not _unit(j.axis):
            bad.append(f"{where}: axis not unit")
        if not _unit(j.origin_quat):
            bad.append(f"{where}: origin quaternion not unit")
        elif j.origin_quat[0] < 0:
            bad.append(f"{where}: origin quaternion not canonical (w < 0)")
        if j.lower > j.upper:
            bad.append(f"{where}: limits inverted ({j.lower} > {j.upper})")
        if j.kind == "fixed" and (j.lower != 0 or j.upper != 0):
            bad.append(f"{where}: fixed joint limits must be 0")
    return ValidationReport(bad)


def ensure_valid(m: Morphology) -> Morphology:
    report = validate_morphology(m)
    if not report.ok:
        raise MorphologyValidationError(report.violations)
    return m


# ---------------------------------------------------------------- tokens

def normalized_joint_value(q, lower, upper, kind):
    """Map q from [lower, upper] onto [-pi, pi]; fixed or zero-width joints map to 0."""
    q = np.asarray(q, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    width = upper - lower
    live = (np.asarray(kind) != "fixed") & (width > 0)
    safe = np.where(live, width, 1.0)
    qc = np.clip(q, lower, upper)
    return np.where(live, (qc - lower) / safe * (2 * math.pi) - math.pi, 0.0)


def sinusoidal(q_tilde) -> np.ndarray:
    """Interleaved [sin(2^k q), cos(2^k q)] for k = 0..7; output (..., 16)."""
    q_tilde = np.asarray(q_tilde, dtype=float)
    omega = 2.0 ** np.arange(N_FREQS)
    ang = q_tilde[..., None] * omega
    out = np.empty(q_tilde.shape + (2 * N_FREQS,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def static_token(m: Morphology, link_idx: int) -> np.ndarray:
    """Token without the joint-value slots (those left at zero)."""
    if not 0 <= link_idx < m.n_links:
        raise IndexError(f"link index {link_idx} out of range for {m.n_links} links")
    link = m.links[link_idx]
    t = np.zeros(TOKEN_DIM)
    t[SLOTS["link_index"]] = link.index / MAX_LINKS
    t[SLOTS["parent_index"]] = link.parent / MAX_LINKS
    t[SLOTS["ee_flag"]] = 1.0 if link.is_ee else 0.0
    t[6 + GEOM_KINDS.index(link.geometry.kind)] = 1.0
    t[SLOTS["geom_params"]] = link.geometry.params
    t[SLOTS["link_pos"]] = link.origin_pos
    t[SLOTS["link_quat"]] = link.origin_quat
    j = m.joint_of(link_idx)
    if j is not None:
        t[SLOTS["joint_axis"]] = j.axis
        t[SLOTS["joint_pos"]] = j.origin_pos
        t[SLOTS["joint_quat"]] = j.origin_quat
        t[29 + JOINT_KINDS.index(j.kind)] = 1.0
    return t


def static_token_table(m: Morphology) -> np.ndarray:
    return np.stack([static_token(m, i) for i in range(m.n_links)])


def joint_tilde(m: Morphology, q) -> np.ndarray:
    """Per-link normalized joint values (..., n_links); the base link gets 0."""
    q = np.asarray(q, dtype=float)
    lo, hi = m.limits()
    kinds = np.array([j.kind for j in m.joints])
    qt = normalized_joint_value(q, lo, hi, kinds)
    return np.concatenate([np.zeros(q.shape[:-1] + (1,)), qt], axis=-1)


def encode_link_token(m: Morphology, link_idx: int, q: float = 0.0) -> np.ndarray:
    """48-dim token of one link at joint value ``q`` (clamped into limits)."""
    t = static_token(m, link_idx)
    j = m.joint_of(link_idx)
    qt = 0.0 if j is None else float(normalized_joint_value(q, j.lower, j.upper, j.kind))
    t[SLOTS["q_sin"]] = sinusoidal(qt)
    return t


def encode_robot_tokens(m: Morphology, q) -> np.ndarray:
    """All link tokens at configuration q; supports leading batch dims of q."""
    q = np.asarray(q, dtype=float)
    table = static_token_table(m)
    out = np.broadcast_to(table, q.shape[:-1] + table.shape).copy()
    out[..., SLOTS["q_sin"]] = sinusoidal(joint_tilde(m, q))
    return out


def morphology_vector(m: Morphology) -> np.ndarray:
    ensure_valid(m)
    v = np.zeros(MAX_LINKS * TOKEN_DIM)
    tokens = encode_robot_tokens(m, m.home_q())
    v[: tokens.size] = tokens.ravel()
    return v


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------- file format

FORMAT_VERSION = 1


def morphology_to_dict(m: Morphology) -> dict:
    return {
        "format": FORMAT_VERSION,
        "name": m.name,
        "category": m.category,
        "links": [
            {
                "index": l.index,
                "parent": l.parent,
                "is_ee": l.is_ee,
                "geometry": {"kind": l.geometry.kind, "params": list(l.geometry.params)},
                "origin": {"pos": list(l.origin_pos), "quat": list(l.origin_quat)},
            }
            for l in m.links
        ],
        "joints": [
            {
                "child": j.child,
                "kind": j.kind,
                "axis": list(j.axis),
                "origin": {"pos": list(j.origin_pos), "quat": list(j.origin_quat)},
                "lower": j.lower,
                "upper": j.upper,
            }
            for j in m.joints
        ],
    }


def save_morphology(m: Morphology) -> str:
    # json emits shortest round-trip reprs for floats, so no precision is lost.
    return json.dumps(morphology_to_dict(m), indent=2) + "\n"


def _get(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise MorphologyParseError(where, f"missing field {key!r}")
    return d[key]


def _vec(d, key, n, where):
    v = _get(d, key, where)
    loc = f"{where}.{key}"
    if not isinstance(v, list) or len(v) != n:
        raise MorphologyParseError(loc, f"expected a list of {n} numbers")
    try:
        return tuple(float(x) for x in v)
    except (TypeError, ValueError):
        raise MorphologyParseError(loc, "non-numeric entry") from None


def _num(d, key, where, kind=float):
    v = _get(d, key, where)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise MorphologyParseError(f"{where}.{key}", "expected a number")
    return kind(v)


def morphology_from_dict(doc: dict) -> Morphology:
    if not isinstance(doc, dict):
        raise MorphologyParseError("<root>", "expected an object")
    for section in ("name", "category", "links", "joints"):
        if section not in doc:
            raise MorphologyParseError(section, f"missing section {section!r}")
    links = []
    for i, ld in enumerate(doc["links"]):
        w = f"links[{i}]"
        geom = _get(ld, "geometry", w)
        kind = _get(geom, "kind", f"{w}.geometry")
        origin = _get(ld, "origin", w)
        is_ee = _get(ld, "is_ee", w)
        if not isinstance(is_ee, bool):
            raise MorphologyParseError(f"{w}.is_ee", "expected a boolean")
        links.append(Link(
            index=_num(ld, "index", w, int),
            parent=_num(ld, "parent", w, int),
            geometry=GeometryPrimitive(str(kind), _vec(geom, "params", 3, f"{w}.geometry")),
            origin_pos=_vec(origin, "pos", 3, f"{w}.origin"),
            origin_quat=_vec(origin, "quat", 4, f"{w}.origin"),
            is_ee=is_ee,
        ))
    joints = []
    for i, jd in enumerate(doc["joints"]):
        w = f"joints[{i}]"
        origin = _get(jd, "origin", w)
        joints.append(JointSpec(
            child=_num(jd, "child", w, int),
            kind=str(_get(jd, "kind", w)),
            axis=_vec(jd, "axis", 3, w),
            origin_pos=_vec(origin, "pos", 3, f"{w}.origin"),
            origin_quat=_vec(origin, "quat", 4, f"{w}.origin"),
            lower=_num(jd, "lower", w),
            upper=_num(jd, "upper", w),
        ))
    joints.sort(key=lambda j: j.child)
    return Morphology(name=str(doc["name"]), category=str(doc["category"]),
                      links=tuple(links), joints=tuple(joints))


def load_morphology(text: str) -> Morphology:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MorphologyParseError(f"line {exc.lineno} col {exc.colno}", exc.msg) from None
    return ensure_valid(morphology_from_dict(doc))


def morphology_digest(m: Morphology) -> str:
    return hashlib.sha256(save_morphology(m).encode()).hexdigest()


def morphology_seed(m: Morphology) -> int:
    """32-bit integer derived from the serialized morphology."""
    return int(morphology_digest(m)[:8], 16)
