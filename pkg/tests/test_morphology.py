import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_morphology, random_q, seeds
from morphbench.morphology import (
    MAX_LINKS,
    SLOTS,
    TOKEN_DIM,
    GeometryPrimitive,
    JointSpec,
    Link,
    Morphology,
    MorphologyParseError,
    MorphologyValidationError,
    cosine_similarity,
    encode_link_token,
    encode_robot_tokens,
    load_morphology,
    morphology_to_dict,
    morphology_vector,
    save_morphology,
    validate_morphology,
)
from morphbench.procgen import GenParams, gen_arm3


def two_link(length=0.2, kind="revolute", lower=-1.0, upper=1.0):
    links = (Link(0, -1, GeometryPrimitive.box(0.05, 0.05, 0.02)),
             Link(1, 0, GeometryPrimitive.box(length / 2, 0.02, 0.02), (length / 2, 0, 0), is_ee=True))
    joints = (JointSpec(1, kind, (0, 0, 1), (0, 0, 0.02), lower=lower, upper=upper),)
    return Morphology("two", "test", links, joints)


# ---------------------------------------------------------------- validation

def test_single_base_link_with_ee_is_valid():
    m = Morphology("one", "test", (Link(0, -1, GeometryPrimitive.sphere(0.1), is_ee=True),))
    assert validate_morphology(m).ok


def test_multiple_base_links_reported():
    links = (Link(0, -1, GeometryPrimitive.sphere(0.1)), Link(1, -1, GeometryPrimitive.sphere(0.1), is_ee=True))
    m = Morphology("two-bases", "test", links, (JointSpec(1, "fixed"),))
    report = validate_morphology(m)
    assert not report.ok
    assert any("multiple base links" in v for v in report.violations)


def test_inverted_limits_reported():
    report = validate_morphology(two_link(lower=1.0, upper=0.0))
    assert any("limits inverted" in v for v in report.violations)


def test_violations_name_the_link():
    m = two_link()
    bad = replace(m, links=(m.links[0], replace(m.links[1], geometry=GeometryPrimitive("sphere", (0.1, 0.2, 0.1)))))
    report = validate_morphology(bad)
    assert report.violations == ["link 1: sphere params unequal"]


def test_missing_ee_and_too_many_links():
    links = tuple(Link(i, i - 1, GeometryPrimitive.sphere(0.01)) for i in range(MAX_LINKS + 1))
    joints = tuple(JointSpec(i, "fixed") for i in range(1, MAX_LINKS + 1))
    v = validate_morphology(Morphology("long", "test", links, joints)).violations
    assert any("too many links" in s for s in v)
    assert any("no end-effector" in s for s in v)


def test_non_unit_axis_and_quaternion():
    m = two_link()
    j = replace(m.joints[0], axis=(0, 0, 2.0), origin_quat=(0.9, 0, 0, 0))
    v = validate_morphology(replace(m, joints=(j,))).violations
    assert any("axis not unit" in s for s in v)
    assert any("quaternion not unit" in s for s in v)


# ---------------------------------------------------------------- tokens

def test_base_link_token():
    t = encode_link_token(two_link(), 0)
    assert t.shape == (TOKEN_DIM,)
    assert t[SLOTS["parent_index"]][0] == -1 / MAX_LINKS
    assert np.all(t[SLOTS["joint_onehot"]] == 0)
    assert np.array_equal(t[SLOTS["q_sin"]], np.tile([0.0, 1.0], 8))


def test_revolute_midpoint_maps_to_zero_phase():
    m = two_link(lower=-0.4, upper=1.2)
    t = encode_link_token(m, 1, q=0.4)
    assert np.allclose(t[SLOTS["q_sin"]], np.tile([0.0, 1.0], 8), atol=1e-12)
    assert list(t[SLOTS["joint_onehot"]]) == [0, 1, 0]


def test_fixed_joint_token():
    m = two_link(kind="fixed", lower=0.0, upper=0.0)
    t = encode_link_token(m, 1, q=0.3)
    assert list(t[SLOTS["joint_onehot"]]) == [0, 0, 1]
    assert np.array_equal(t[SLOTS["q_sin"]], np.tile([0.0, 1.0], 8))


def test_token_slots_by_hand():
    m = two_link(length=0.3, lower=-math.pi, upper=math.pi)
    q = 0.7
    t = encode_link_token(m, 1, q)
    expected = np.zeros(48)
    expected[0], expected[1] = 1 / 16, 0 / 16
    expected[2:6] = 1.0
    expected[6:9] = (1, 0, 0)
    expected[9:12] = (0.15, 0.02, 0.02)
    expected[12:15] = (0.15, 0, 0)
    expected[15:19] = (1, 0, 0, 0)
    expected[19:22] = (0, 0, 1)
    expected[22:25] = (0, 0, 0.02)
    expected[25:29] = (1, 0, 0, 0)
    expected[29:32] = (0, 1, 0)
    # limits are [-pi, pi], so the normalized value equals q itself
    for k in range(8):
        expected[32 + 2 * k] = math.sin(2 ** k * q)
        expected[33 + 2 * k] = math.cos(2 ** k * q)
    assert np.allclose(t, expected, atol=1e-12)


def test_out_of_range_q_is_clamped():
    m = two_link(lower=-1.0, upper=1.0)
    assert np.array_equal(encode_link_token(m, 1, 5.0), encode_link_token(m, 1, 1.0))


def test_link_index_out_of_range():
    with pytest.raises(IndexError):
        encode_link_token(two_link(), 2)


@given(seeds)
def test_token_invariants(seed):
    rng = np.random.default_rng(seed)
    m = random_morphology(rng)
    tokens = encode_robot_tokens(m, random_q(rng, m))
    assert tokens.shape == (m.n_links, TOKEN_DIM)
    assert np.all(tokens[:, SLOTS["geom_onehot"]].sum(-1) == 1)
    assert tokens[0, SLOTS["joint_onehot"]].sum() == 0
    assert np.all(tokens[1:, SLOTS["joint_onehot"]].sum(-1) == 1)
    ee = tokens[:, SLOTS["ee_flag"]]
    assert np.all(ee == ee[:, :1])
    qs = tokens[:, SLOTS["q_sin"]]
    assert np.allclose(qs[:, 0::2] ** 2 + qs[:, 1::2] ** 2, 1.0, atol=1e-9)


@given(seeds)
def test_batched_tokens_match_per_link_encoding(seed):
    rng = np.random.default_rng(seed)
    m = random_morphology(rng)
    q = random_q(rng, m)
    batched = encode_robot_tokens(m, q)
    for i in range(m.n_links):
        qi = 0.0 if i == 0 else q[i - 1]
        assert np.allclose(batched[i], encode_link_token(m, i, qi), atol=1e-12)


# ---------------------------------------------------------------- vectors

def test_vector_padding_and_home_tokens():
    m = gen_arm3(GenParams(3))
    v = morphology_vector(m)
    n = m.n_links * TOKEN_DIM
    assert v.shape == (MAX_LINKS * TOKEN_DIM,)
    assert np.all(v[n:] == 0)
    assert np.array_equal(v[:n], encode_robot_tokens(m, m.home_q()).ravel())
    assert np.array_equal(v, morphology_vector(m))


def test_vectors_differ_only_in_changed_geometry():
    a = two_link(length=0.2)
    b = replace(a, links=(a.links[0], replace(a.links[1], geometry=GeometryPrimitive.box(0.15, 0.02, 0.02))))
    diff = np.flatnonzero(morphology_vector(a) != morphology_vector(b))
    assert list(diff) == [TOKEN_DIM + 9]


def test_vector_of_invalid_morphology_raises():
    with pytest.raises(MorphologyValidationError):
        morphology_vector(two_link(lower=1.0, upper=-1.0))


def test_cosine_trivial_values():
    v = morphology_vector(gen_arm3(GenParams(0)))
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity(v, -v) == pytest.approx(-1.0, abs=1e-12)
    assert cosine_similarity([1, 0, 0], [0, 1, 0]) == 0.0
    with pytest.raises(ValueError):
        cosine_similarity(np.zeros(3), v[:3])


@given(seeds, st.floats(0.01, 100.0))
def test_cosine_properties(seed, scale):
    rng = np.random.default_rng(seed)
    a = morphology_vector(random_morphology(rng))
    b = morphology_vector(random_morphology(rng))
    assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a), abs=1e-12)
    assert cosine_similarity(a * scale, b) == pytest.approx(cosine_similarity(a, b), abs=1e-12)
    assert -1.0 <= cosine_similarity(a, b) <= 1.0


# ---------------------------------------------------------------- text format

@given(seeds)
def test_save_load_round_trip(seed):
    m = random_morphology(np.random.default_rng(seed))
    text = save_morphology(m)
    back = load_morphology(text)
    assert back == m
    assert save_morphology(back) == text


def test_missing_links_section_names_it():
    doc = morphology_to_dict(two_link())
    del doc["links"]
    with pytest.raises(MorphologyParseError) as exc:
        load_morphology(json.dumps(doc))
    assert exc.value.location == "links"
    assert "links" in str(exc.value)


def test_bad_field_location_reported():
    doc = morphology_to_dict(two_link())
    doc["joints"][0]["axis"] = [0, 1]
    with pytest.raises(MorphologyParseError) as exc:
        load_morphology(json.dumps(doc))
    assert exc.value.location == "joints[0].axis"


def test_syntax_error_reports_line():
    with pytest.raises(MorphologyParseError) as exc:
        load_morphology('{\n  "name": "x",\n  oops\n}')
    assert exc.value.location.startswith("line 3")


def test_unequal_sphere_fails_validation_on_load():
    doc = morphology_to_dict(two_link())
    doc["links"][1]["geometry"] = {"kind": "sphere", "params": [0.1, 0.2, 0.1]}
    with pytest.raises(MorphologyValidationError):
        load_morphology(json.dumps(doc))
