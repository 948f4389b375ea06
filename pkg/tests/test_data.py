import struct

import numpy as np
import pytest

from posefield.data import (
    ManifoldOracle,
    PoseDataset,
    Tier,
    build_negatives,
    exact_label,
    generate_dataset,
    knn_label,
    latent_grid,
    load_dataset,
    load_manifold_spec,
    random_manifold_spec,
    sample_manifold,
    save_dataset,
    save_manifold_spec,
)
from posefield.errors import (
    ChecksumMismatch,
    DimensionMismatch,
    FormatError,
    InsufficientData,
    TruncatedFile,
    VersionMismatch,
)
from posefield.skeleton import binary_tree
from posefield.so3 import is_unit, perturb_pose, pose_distance, random_pose

SKEL = binary_tree(8)
SPEC = random_manifold_spec(8, 2, seed=0)


def grid_bound(spec, skel, grid):
    # per-joint half-angle change is at most |da|/2 over half a grid cell
    lip = np.sum(np.abs(spec.amp * spec.freq), axis=1)
    phi = lip * (0.5 / (grid - 1)) / 2
    return float(np.sqrt(np.sum(0.5 * skel.weights * phi ** 2)))


def test_sample_manifold_deterministic_and_unit():
    a = sample_manifold(SPEC, 50, seed=3)
    assert np.array_equal(a, sample_manifold(SPEC, 50, seed=3))
    assert is_unit(a)


def test_samples_lie_within_grid_resolution_of_oracle():
    grid = 60
    oracle = ManifoldOracle(SPEC, SKEL, grid)
    d = oracle(sample_manifold(SPEC, 30, seed=4))
    assert np.all(d < grid_bound(SPEC, SKEL, grid))


def test_oracle_zero_on_grid_latents():
    oracle = ManifoldOracle(SPEC, SKEL, 50)
    u = latent_grid(2, 50)[[0, 7, 1234, 2499]]
    assert np.all(oracle(SPEC.poses(u)) <= 1e-12)


def test_oracle_nested_grids_do_not_increase():
    q = perturb_pose(sample_manifold(SPEC, 20, seed=1), 0.3, 1.0, 2)
    coarse = ManifoldOracle(SPEC, SKEL, 51)(q)
    fine = ManifoldOracle(SPEC, SKEL, 101)(q)
    assert np.all(fine <= coarse)


def test_oracle_bounded_by_injected_perturbation():
    base = sample_manifold(SPEC, 20, seed=5)
    q = perturb_pose(base, 0.2, 0.5, 6)
    injected = pose_distance(base, q, SKEL)
    oracle = ManifoldOracle(SPEC, SKEL, 100)(q)
    assert np.all(oracle <= injected + grid_bound(SPEC, SKEL, 100))


def test_spec_json_round_trip(tmp_path):
    save_manifold_spec(SPEC, tmp_path / "m.json")
    back = load_manifold_spec(tmp_path / "m.json")
    assert back.digest() == SPEC.digest()
    u = np.random.default_rng(0).random((5, 2))
    np.testing.assert_array_equal(back.poses(u), SPEC.poses(u))


def test_negatives_zero_sigma_and_counts():
    m = sample_manifold(SPEC, 40, seed=0)
    neg, which = build_negatives(m, [0.0, 0.0], 15, seed=1)
    assert neg.shape == (30, 8, 4)
    assert which.tolist() == [0] * 15 + [1] * 15
    hits = [np.any(np.all(m == p, axis=(1, 2))) for p in neg]
    assert all(hits)


def test_negative_labels_grow_with_sigma():
    m = sample_manifold(SPEC, 2000, seed=0)
    neg, which = build_negatives(m, [0.1, 0.5], 200, seed=1)
    lab = knn_label(neg, m, 200, 5, SKEL)
    assert np.median(lab[which == 1]) > np.median(lab[which == 0])


def test_knn_query_in_manifold_is_zero():
    m = random_pose(8, 0, size=30)
    assert knn_label(m[4], m, 10, 1, SKEL) == 0.0
    assert exact_label(m[4], m, 1, SKEL) == 0.0


def test_knn_three_pose_hand_check():
    m = random_pose(8, 1, size=3)
    q = random_pose(8, 2)
    expect = sum(pose_distance(q, m[i], SKEL) for i in range(3)) / 3
    assert knn_label(q, m, 3, 3, SKEL) == pytest.approx(expect, abs=1e-14)


def test_exact_label_singleton_and_sorted_scan():
    m = random_pose(8, 3, size=100)
    q = random_pose(8, 4)
    assert exact_label(q, m[:1], 1, SKEL) == pose_distance(q, m[0], SKEL)
    scan = sorted(pose_distance(q, p, SKEL) for p in m)
    assert exact_label(q, m, 5, SKEL) == pytest.approx(np.mean(scan[:5]), abs=1e-14)


def test_knn_equals_exact_when_prefilter_keeps_everything():
    m = sample_manifold(SPEC, 300, seed=7)
    q, _ = build_negatives(m, [0.15, 0.8], 20, seed=8)
    assert np.array_equal(knn_label(q, m, 300, 5, SKEL), exact_label(q, m, 5, SKEL))


def test_knn_agrees_with_exact_for_near_queries():
    m = sample_manifold(SPEC, 2000, seed=7)
    q, _ = build_negatives(m, [0.15], 200, seed=8)
    fast = knn_label(q, m, 100, 5, SKEL)
    slow = exact_label(q, m, 5, SKEL)
    assert np.mean(np.abs(fast - slow) <= 1e-9) >= 0.99


def test_knn_errors():
    m = random_pose(8, 0, size=10)
    with pytest.raises(InsufficientData):
        knn_label(random_pose(8, 1), m, 20, 5, SKEL)
    with pytest.raises(DimensionMismatch):
        knn_label(random_pose(7, 1), m, 5, 5, SKEL)


def small_dataset(seed=0):
    return generate_dataset(SPEC, SKEL, 300, 20, kprime=100, seed=seed)


def test_generate_dataset_layout_and_determinism():
    ds = small_dataset()
    assert ds.counts() == {"manifold": 300, "far": 20, "mid": 20, "near": 20}
    assert np.all(ds.distances[ds.tiers == Tier.MANIFOLD] == 0)
    assert np.all(ds.distances[ds.tiers != Tier.MANIFOLD] > 0)
    assert ds.equals(small_dataset())


def test_dataset_round_trip(tmp_path):
    ds = small_dataset()
    save_dataset(ds, tmp_path / "d.pndf")
    back = load_dataset(tmp_path / "d.pndf")
    assert back.equals(ds)
    assert back.skeleton.same_as(SKEL)
    assert back.meta["spec_hash"] == SPEC.digest()


def test_same_seed_gives_byte_identical_file(tmp_path):
    save_dataset(small_dataset(), tmp_path / "a.pndf")
    save_dataset(small_dataset(), tmp_path / "b.pndf")
    assert (tmp_path / "a.pndf").read_bytes() == (tmp_path / "b.pndf").read_bytes()


def test_empty_dataset_round_trip(tmp_path):
    ds = PoseDataset(SKEL, np.empty((0, 8, 4)), np.empty(0), np.empty(0))
    save_dataset(ds, tmp_path / "e.pndf")
    back = load_dataset(tmp_path / "e.pndf")
    assert len(back) == 0 and back.equals(ds)


@pytest.fixture
def saved(tmp_path):
    path = tmp_path / "d.pndf"
    save_dataset(small_dataset(), path)
    return path


def test_corrupted_magic(saved):
    raw = bytearray(saved.read_bytes())
    raw[:4] = b"XXXX"
    saved.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_dataset(saved)


def test_truncated_file(saved):
    saved.write_bytes(saved.read_bytes()[:-100])
    with pytest.raises(TruncatedFile):
        load_dataset(saved)


def test_flipped_payload_byte(saved):
    raw = bytearray(saved.read_bytes())
    raw[200] ^= 0x01
    saved.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatch):
        load_dataset(saved)


def test_unknown_version(saved):
    raw = bytearray(saved.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    saved.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch):
        load_dataset(saved)


def test_wrong_skeleton_on_load(saved):
    with pytest.raises(DimensionMismatch):
        load_dataset(saved, binary_tree(5))
