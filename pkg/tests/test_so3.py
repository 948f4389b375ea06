import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posefield.errors import DegenerateQuaternion, DimensionMismatch
from posefield.skeleton import Skeleton, binary_tree
from posefield.so3 import (
    canonicalize,
    joint_geodesic,
    normalize,
    perturb_pose,
    pose_distance,
    quat_mul,
    random_pose,
)

Z90 = np.array([math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)])
IDENT = np.array([1.0, 0.0, 0.0, 0.0])


def single_joint():
    return Skeleton([None], [[0.0, 0.0, 0.0]], [1.0])


@pytest.mark.parametrize(
    "q, expected",
    [((2, 0, 0, 0), (1, 0, 0, 0)), ((1, 0, 0, 0), (1, 0, 0, 0)), ((1, 1, 1, 1), (0.5, 0.5, 0.5, 0.5))],
)
def test_normalize_examples(q, expected):
    np.testing.assert_allclose(normalize(q), expected, atol=1e-15)


def test_normalize_rejects_zero():
    with pytest.raises(DegenerateQuaternion):
        normalize([1e-13, 0, 0, 0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-6))
def test_normalize_unit_and_direction(v):
    q = normalize(v)
    assert abs(np.linalg.norm(q) - 1) <= 1e-9
    assert np.dot(q, v) > 0


def test_joint_geodesic_examples():
    q = normalize([0.3, -0.2, 0.9, 0.1])
    assert joint_geodesic(q, q) == 0
    assert joint_geodesic(q, -q) == 0
    assert joint_geodesic(IDENT, Z90) == pytest.approx(math.pi / 4, abs=1e-12)


def test_pose_distance_single_joint_quarter_turn():
    d = pose_distance(IDENT[None], Z90[None], single_joint())
    assert d == pytest.approx(math.pi / (4 * math.sqrt(2)), abs=1e-12)
    assert d == pytest.approx(0.55536, abs=1e-5)


def test_pose_distance_identity_and_sign_flip():
    skel = binary_tree(8)
    a = random_pose(8, 3)
    assert pose_distance(a, a, skel) == 0
    assert pose_distance(a, -a, skel) == 0


def test_pose_distance_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        pose_distance(random_pose(7, 0), random_pose(7, 1), binary_tree(8))


def test_bi_invariance():
    rng = np.random.default_rng(5)
    for _ in range(200):
        q, r, g = random_pose(3, rng)
        lhs = joint_geodesic(quat_mul(g, q), quat_mul(g, r))
        assert lhs == pytest.approx(joint_geodesic(q, r), abs=1e-9)


def test_random_pose_deterministic_and_unit():
    a = random_pose(21, 42)
    assert np.array_equal(a, random_pose(21, 42))
    assert np.all(np.abs(np.linalg.norm(a, axis=-1) - 1) <= 1e-9)


def test_random_pose_component_means():
    x = random_pose(1, 0, size=10_000)[:, 0]
    assert np.all(np.abs(x.mean(axis=0)) <= 0.05)


def test_perturb_identity_cases():
    p = random_pose(8, 1)
    assert np.array_equal(perturb_pose(p, 0.0, 1.0, 2), p)
    assert np.array_equal(perturb_pose(p, 0.5, 0.0, 2), p)


def test_perturb_half_normal_mean():
    rng = np.random.default_rng(11)
    p = random_pose(1, rng, size=1000)
    out = perturb_pose(p, 0.5, 1.0, rng)
    mean = joint_geodesic(p, out).mean()
    assert mean == pytest.approx(0.5 * math.sqrt(2 / math.pi), abs=0.02)
    assert np.all(np.abs(np.linalg.norm(out, axis=-1) - 1) <= 1e-9)


def test_perturb_scales_linearly_for_small_sigma():
    skel = binary_tree(8)
    p = random_pose(8, 0, size=2000)
    d1 = pose_distance(p, perturb_pose(p, 1e-3, 1.0, 9), skel).mean()
    d2 = pose_distance(p, perturb_pose(p, 2e-3, 1.0, 9), skel).mean()
    assert d2 / d1 == pytest.approx(2.0, rel=1e-3)


def test_joint_geodesic_matches_arccos_form():
    q, r = random_pose(2, 8, size=500).transpose(1, 0, 2)
    ref = np.arccos(np.clip(np.abs(np.sum(q * r, axis=-1)), 0, 1))
    np.testing.assert_allclose(joint_geodesic(q, r), ref, atol=1e-12)


def test_canonicalize_first_nonzero_positive():
    q = np.array([[0.0, -0.6, 0.8, 0.0], [-1.0, 0.0, 0.0, 0.0], [0.5, -0.5, 0.5, 0.5]])
    c = canonicalize(q)
    np.testing.assert_array_equal(c, [[0.0, 0.6, -0.8, 0.0], [1.0, 0.0, 0.0, 0.0], q[2]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_axioms_random_triples(seed):
    skel = binary_tree(5)
    a, b, c = random_pose(5, seed, size=3)
    assert pose_distance(a, b, skel) == pose_distance(b, a, skel)
    assert pose_distance(a, c, skel) <= pose_distance(a, b, skel) + pose_distance(b, c, skel) + 1e-9
