import numpy as np
import pytest

from posefield.errors import ConfigError, DimensionMismatch, SamplingError
from posefield.project import ProjectionConfig, TargetDistanceField
from posefield.skeleton import binary_tree, forward_kinematics, mean_joint_distance
from posefield.so3 import is_unit, joint_geodesic, perturb_pose, pose_distance, random_pose
from posefield.tasks import (
    DenoiseConfig,
    apd,
    denoise,
    denoise_batch,
    fit_partial,
    interpolate,
    partial_init,
    sample_poses,
    smoothness,
)

SKEL = binary_tree(8)


class ZeroField:
    """f = 0 everywhere: projection is the identity."""

    skeleton = SKEL

    def value_and_grad(self, poses):
        poses = np.asarray(poses)
        return np.zeros(len(poses)), np.zeros_like(poses)


class ConstantField(ZeroField):
    def value_and_grad(self, poses):
        poses = np.asarray(poses)
        return np.ones(len(poses)), np.zeros_like(poses)


def test_denoise_is_identity_at_data_optimum():
    seq = random_pose(8, 0, size=5)
    cfg = DenoiseConfig(w_prior=0, lambda_t=0, steps=20)
    out = denoise(seq, forward_kinematics(seq, SKEL), None, SKEL, cfg)
    assert np.array_equal(out, seq)


def test_denoise_constant_clean_sequence_stays_put():
    seq = np.repeat(random_pose(8, 1)[None], 4, axis=0)
    cfg = DenoiseConfig(w_prior=0, lambda_t=0.5, steps=20)
    out = denoise(seq, forward_kinematics(seq, SKEL), None, SKEL, cfg)
    assert np.array_equal(out, seq)


def test_denoise_data_term_recovers_clean_pose():
    clean = random_pose(8, 2, size=3)
    noisy = perturb_pose(clean, 0.1, 1.0, 3)
    cfg = DenoiseConfig(w_prior=0, lambda_t=0, steps=400)
    out = denoise(noisy, forward_kinematics(clean, SKEL), None, SKEL, cfg)
    before = mean_joint_distance(forward_kinematics(noisy, SKEL), forward_kinematics(clean, SKEL))
    after = mean_joint_distance(forward_kinematics(out, SKEL), forward_kinematics(clean, SKEL))
    assert np.all(after < 0.1 * before)
    assert is_unit(out)


def test_denoise_prior_pulls_towards_target():
    target = random_pose(8, 4)
    field = TargetDistanceField(target, SKEL)
    seq = perturb_pose(np.repeat(target[None], 3, axis=0), 0.3, 1.0, 5)
    obs = forward_kinematics(seq, SKEL)
    cfg = DenoiseConfig(w_prior=10, lambda_t=0, lambda_v=0, steps=300)
    out = denoise(seq, obs, field, SKEL, cfg)
    assert np.all(pose_distance(out, target, SKEL) < 0.2 * pose_distance(seq, target, SKEL))


def test_denoise_batch_matches_single():
    seqs = random_pose(8, 6, size=6).reshape(2, 3, 8, 4)
    obs = forward_kinematics(perturb_pose(seqs, 0.2, 1.0, 7), SKEL)
    cfg = DenoiseConfig(w_prior=0, steps=30)
    both = denoise_batch(seqs, obs, None, SKEL, cfg)
    np.testing.assert_allclose(both[1], denoise(seqs[1], obs[1], None, SKEL, cfg), atol=1e-12)


def test_denoise_shape_errors():
    seq = random_pose(8, 0, size=3)
    with pytest.raises(DimensionMismatch):
        denoise(seq, np.zeros((2, 8, 3)), None, SKEL)
    with pytest.raises(ConfigError):
        DenoiseConfig(lambda_v=-1)


def test_fit_partial_all_observed_returns_init():
    init = random_pose(8, 0)
    out = fit_partial(forward_kinematics(init, SKEL), np.ones(8, bool), init, None, SKEL)
    assert np.array_equal(out, init)
    assert out is not init


def test_fit_partial_all_occluded_rejected():
    init = random_pose(8, 0)
    with pytest.raises(ConfigError):
        fit_partial(forward_kinematics(init, SKEL), np.zeros(8, bool), init, None, SKEL)


@pytest.mark.parametrize("seed", range(5))
def test_fit_partial_recovers_joint_seen_through_children(seed):
    # joint 1 has children 3 and 4 with non-parallel offsets, so their
    # positions pin down its rotation completely
    truth = random_pose(8, seed)
    mask = np.ones(8, bool)
    mask[1] = False
    init = partial_init(truth, mask, seed=seed)
    cfg = DenoiseConfig(w_prior=0, steps=600)
    out = fit_partial(forward_kinematics(truth, SKEL), mask, init, None, SKEL, cfg)
    assert 2 * joint_geodesic(out[1], truth[1]) < 0.1
    assert np.array_equal(out[mask], truth[mask])


def test_partial_init_keeps_observed():
    truth = random_pose(8, 3)
    mask = np.arange(8) % 2 == 0
    init = partial_init(truth, mask, sigma=0.05, seed=1)
    assert np.array_equal(init[mask], truth[mask])
    assert np.all(joint_geodesic(init[~mask], [1.0, 0, 0, 0]) < 0.3)


def test_interpolate_identity_projection_full_step():
    a, b = random_pose(8, 0), random_pose(8, 1)
    out = interpolate(a, b, ZeroField(), tau=1.0)
    assert out.converged
    assert len(out.frames) == 2
    assert np.array_equal(out.frames[0], a)
    assert np.array_equal(out.frames[1], b)


def test_interpolate_same_endpoints():
    a = random_pose(8, 0)
    out = interpolate(a, a, ZeroField())
    assert len(out.frames) <= 2
    assert all(pose_distance(f, a, SKEL) == 0 for f in out.frames)


def test_interpolate_steps_shrink_towards_end():
    a, b = random_pose(8, 2), random_pose(8, 3)
    out = interpolate(a, b, ZeroField(), tau=0.2, tol=1e-2)
    d = [pose_distance(f, out.frames[-1], SKEL) for f in out.frames]
    assert all(x > y for x, y in zip(d, d[1:]))
    assert is_unit(out.frames)


def test_interpolate_gives_up_after_max_frames():
    a, b = random_pose(8, 2), random_pose(8, 3)
    out = interpolate(a, b, ZeroField(), tau=0.05, tol=1e-6, max_frames=10)
    assert not out.converged
    assert len(out.frames) == 9


def test_interpolate_bad_tau():
    with pytest.raises(ConfigError):
        interpolate(random_pose(8, 0), random_pose(8, 1), ZeroField(), tau=0)


def test_sample_poses_deterministic_and_within_tol():
    field = TargetDistanceField(random_pose(8, 0), SKEL)
    cfg = ProjectionConfig(max_iters=200, tol=1e-3)
    a = sample_poses(field, 6, cfg, seed=3, k=8)
    assert np.array_equal(a, sample_poses(field, 6, cfg, seed=3, k=8))
    f, _ = field.value_and_grad(a)
    assert np.all(f < cfg.tol)
    assert is_unit(a)


def test_sample_poses_budget_exhausted():
    with pytest.raises(SamplingError) as info:
        sample_poses(ConstantField(), 3, ProjectionConfig(max_iters=2), seed=0, max_attempts=2)
    assert len(info.value.partial) == 0


def test_apd_examples():
    p = random_pose(8, 0)
    assert apd(np.stack([p, p, p]), SKEL) == 0
    a, b, c = random_pose(8, 1, size=3)
    fk = forward_kinematics(np.stack([a, b, c]), SKEL)
    pairs = [mean_joint_distance(fk[i], fk[j]) for i, j in [(0, 1), (0, 2), (1, 2)]]
    assert apd(np.stack([a, b]), SKEL) == pytest.approx(pairs[0], rel=1e-14)
    assert apd(np.stack([a, b, c]), SKEL) == pytest.approx(np.mean(pairs), rel=1e-14)
    with pytest.raises(ConfigError):
        apd(a[None], SKEL)


def test_smoothness_examples():
    p = random_pose(8, 0)
    assert smoothness(np.stack([p] * 4), SKEL) == (0.0, 0.0)
    a, b, c = random_pose(8, 1, size=3)
    fk = forward_kinematics(np.stack([a, b, c]), SKEL)
    d01, d12 = mean_joint_distance(fk[0], fk[1]), mean_joint_distance(fk[1], fk[2])
    mean, std = smoothness(np.stack([a, b]), SKEL)
    assert mean == pytest.approx(d01, rel=1e-14) and std == 0
    mean, std = smoothness(np.stack([a, b, c]), SKEL)
    assert mean == pytest.approx((d01 + d12) / 2, rel=1e-14)
    assert std == pytest.approx(abs(d01 - d12) / 2, rel=1e-12)
    with pytest.raises(ConfigError):
        smoothness(a[None], SKEL)
