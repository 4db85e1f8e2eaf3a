from __future__ import annotations

import json

import numpy as np
import pytest
from scipy.stats import chisquare

from metamachine.morphology import ConfigTree, sample_tree
from metamachine.poseopt import (
    PoseWeights,
    ProbeConfig,
    leg_pairs,
    octant_counts,
    optimize_pose,
    pose_score,
    sample_poses,
    score_poses,
    select_best,
    symmetric_repose,
    symmetry_clauses,
    tree_allows_symmetry,
)

# four legs hung tip-first from the four sphere docks of the root
QUADRUPED = ConfigTree.from_tuples([(0, 0, 10, 0), (0, 1, 10, 0), (0, 2, 10, 0), (0, 3, 10, 0)])
SHORT = ProbeConfig(steps=50)


def test_sample_count_and_ranges():
    quat, q = sample_poses(0, 4096, 3)
    assert quat.shape == (4096, 4) and q.shape == (4096, 3)
    np.testing.assert_allclose(np.linalg.norm(quat, axis=1), 1.0, atol=1e-12)
    assert np.all(np.abs(q) <= np.pi)


def test_sample_deterministic():
    a = sample_poses(12, 50, 2)
    b = sample_poses(12, 50, 2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_orientation_octants_uniform():
    quat, _ = sample_poses(3, 100_000, 1)
    counts = octant_counts(quat)
    assert counts.sum() == 100_000
    assert chisquare(counts).pvalue > 0.01


def test_penalty_dominates():
    w = PoseWeights()
    # largest realistic reward terms: area below 1 m^2, displacement below 5 m
    assert w.area * 1.0 + w.displacement * 5.0 < w.fall_penalty
    fallen = pose_score(0.99, 4.99, True, w)
    upright = pose_score(0.0, 0.0, False, w)
    assert fallen < upright
    assert pose_score(0.2, 0.5, True) == pytest.approx(10 * 0.2 + 0.5 - 100)


def test_select_best_first_index_wins():
    assert select_best(np.array([1.0, 3.0, 3.0, np.nan])) == 1
    assert select_best(np.array([np.nan, np.nan])) is None
    assert select_best(np.array([-100.5, -99.0])) == 1


def test_fallen_poses_carry_penalty():
    r = optimize_pose(ConfigTree(), seed=0, count=16, probe=SHORT)
    s = r.scores
    assert s.fell.any() and (~s.fell).any()
    expected = 10 * s.area + s.displacement - 100 * s.fell
    np.testing.assert_allclose(s.total, expected, atol=1e-12)
    assert np.all(s.total[s.fell] <= -100 + 10 * s.area[s.fell] + s.displacement[s.fell] + 1e-12)
    assert r.best_total >= np.nanmedian(s.total)


def test_zero_amplitude_scores_area_only():
    quat, q = sample_poses(4, 8, 1)
    s = score_poses(ConfigTree(), quat, q, probe=ProbeConfig(amplitude=0.0, steps=50))
    # poses still rocking at the settle cap keep drifting, so only settled ones count
    ok = ~s.fell & s.settled
    assert ok.any()
    assert np.all(s.displacement[ok] < 2e-3)
    np.testing.assert_allclose(s.total[ok], 10 * s.area[ok], atol=2e-3)


def test_scores_translation_invariant():
    tree = sample_tree(5, 3)
    quat, q = sample_poses(1, 8, 3)
    a = score_poses(tree, quat, q, probe=SHORT)
    b = score_poses(tree, quat, q, probe=SHORT, xy=np.array([1.5, -2.25]))
    np.testing.assert_allclose(a.total, b.total, atol=1e-9)
    np.testing.assert_array_equal(a.fell, b.fell)


def test_seeded_run_reproducible():
    tree = sample_tree(2, 3)
    a = optimize_pose(tree, seed=7, count=12, probe=SHORT, chunk=4)
    b = optimize_pose(tree, seed=7, count=12, probe=SHORT, chunk=4)
    assert a.best_index == b.best_index
    np.testing.assert_array_equal(a.best.joint_angles, b.best.joint_angles)
    np.testing.assert_array_equal(a.scores.total, b.scores.total)
    best = a.best
    assert np.linalg.norm(best.z_hat) == pytest.approx(1.0)
    assert np.linalg.norm(best.x_hat) == pytest.approx(1.0)


def test_result_file_contents():
    r = optimize_pose(ConfigTree(), seed=1, count=4, probe=SHORT)
    rec = json.loads(r.to_json())
    assert len(rec["scores"]) == 4
    assert rec["seed"] == 1
    assert rec["weights"] == {"area": 10.0, "displacement": 1.0, "fall_penalty": 100.0}
    assert set(rec["best"]) == {"quat", "joint_angles", "x_hat", "z_hat"}


def test_leg_pairs():
    pairs, unpaired = leg_pairs(QUADRUPED)
    assert pairs == [(1, 2), (3, 4)] and unpaired == []
    three = ConfigTree.from_tuples([(0, 10, 10, 0), (1, 4, 10, 0), (2, 5, 10, 0)])
    assert len(leg_pairs(three)[1]) == 3
    assert not tree_allows_symmetry(three)


def test_repose_pins_root_and_mirrors_pairs():
    q = np.array([0.3, 0.8, -0.2, -1.1, 0.4])
    r = symmetric_repose(QUADRUPED, q)
    assert r[0] == 0.0
    assert r[1] == 0.8 and r[2] == -0.8
    assert r[3] == -1.1 and r[4] == 1.1


def test_quadruped_clauses_accept():
    q = symmetric_repose(QUADRUPED, np.array([0.0, 0.5, -0.5, 1.0, 1.0]))
    assert all(symmetry_clauses(QUADRUPED, q, spheres_touching=0).values())
    assert not symmetry_clauses(QUADRUPED, q, spheres_touching=1)["spheres_clear"]


def test_three_unpaired_rejected():
    three = ConfigTree.from_tuples([(0, 10, 10, 0), (1, 4, 10, 0), (2, 5, 10, 0)])
    quat, q = sample_poses(0, 3, 4)
    s = score_poses(three, quat, q, use_symmetry=True)
    assert not s.accepted.any() and np.isnan(s.total).all()


def test_symmetric_evaluations_satisfy_clauses():
    r = optimize_pose(QUADRUPED, seed=0, count=16, use_symmetry=True, probe=SHORT)
    s = r.scores
    assert s.accepted.any()
    for i in np.nonzero(s.accepted)[0]:
        assert all(symmetry_clauses(QUADRUPED, r.q[i], s.spheres_touching[i]).values())
    assert np.isnan(s.total[~s.accepted]).all()
    assert r.best_index is not None and s.accepted[r.best_index]
