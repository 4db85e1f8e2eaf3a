from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from metamachine import amputation as amp
from metamachine.morphology import StructuralError, decode_seq, encode_tree
from metamachine.simcore import SimState, Simulator


@pytest.fixture(scope="module")
def matrix():
    return amp.test_matrix()


def drop_state(n_modules, q0, height=0.25):
    st = SimState.rest(1, n_modules)
    st.pos[:, 2] = height
    st.q[:] = q0
    return st


def random_traj(rng, n, T, source=""):
    q = rng.uniform(-np.pi, np.pi, (T, n))
    states = rng.standard_normal((T, n, amp.STATE_DIM))
    states[..., 6] = np.cos(q)
    return amp.Trajectory(states, rng.uniform(-1, 1, (T, n)), q, source=source)


# -- cut points and tree reduction ----------------------------------------


def test_intact_has_no_cuts_and_one_limb_has_one():
    rng = np.random.default_rng(0)
    assert amp.sample_cut_sets(rng, "intact") == [[[]]]
    for topo_sets in amp.sample_cut_sets(rng, "one-limb"):
        assert len(topo_sets) == amp.CUT_SETS
        assert all(len(cuts) == 1 for cuts in topo_sets)


def test_cut_fractions_uniform():
    rng = np.random.default_rng(1)
    fr = [amp.sample_cutpoints(rng, ["front-left"])[0].fraction for _ in range(10_000)]
    assert stats.kstest(fr, "uniform").pvalue > 0.01


def test_cut_fraction_range_checked():
    with pytest.raises(ValueError):
        amp.CutPoint(1, 1.5)


def test_full_removal_of_all_limbs_leaves_bare_torso():
    rem = amp.apply_amputation(amp.QUADRUPED, [amp.CutPoint(m, 0.0) for m in range(1, 5)])
    assert rem.tree.n_modules == 1 and rem.stubs == [] and rem.kept == (0,)


def test_removing_one_limb_keeps_four_modules_and_a_stub():
    rem = amp.apply_amputation(amp.QUADRUPED, [amp.CutPoint(3, 0.5)])
    assert rem.tree.n_modules == 4
    assert rem.kept == (0, 1, 2, 4)
    assert len(rem.stubs) == 1 and rem.stubs[0].module == 0
    full = amp.apply_amputation(amp.QUADRUPED, [amp.CutPoint(3, 1.0)]).stub_lengths()[0]
    assert rem.stub_lengths()[0] == pytest.approx(0.5 * full)


def test_remnant_reencodes_to_valid_sequence():
    rem = amp.apply_amputation(amp.QUADRUPED, [amp.CutPoint(1, 0.3), amp.CutPoint(4, 0.8)])
    assert decode_seq(encode_tree(rem.tree)) == rem.tree


def test_non_leaf_removal_rejected():
    with pytest.raises(StructuralError):
        amp.remove_modules(amp.QUADRUPED, [0])
    chain = decode_seq((0, 10, 10, 0, 1, 17, 10, 0) + (5, 18, 18, 3) * 2)
    with pytest.raises(StructuralError):
        amp.remove_modules(chain, [1])


def test_no_remnant_self_collides(matrix):
    assert not any(amp.remnant_collides(t.remnant()) for t in matrix)


# -- test matrix ------------------------------------------------------------


def test_trial_arithmetic(matrix):
    counts = amp.trial_counts(matrix)
    assert counts["one-limb"] == 4 * 10 * 5 == 200
    assert counts["intact"] == 5
    assert counts["two-hindlimbs"] == 50 and counts["single-module"] == 50
    assert counts["diagonal-two"] == 100 and counts["three-limbs"] == 200
    assert counts["dead-modules"] == 7 * 5
    assert len(matrix) == sum(counts.values())


def test_test_conditions_on_every_trial(matrix):
    for t in matrix:
        assert (t.friction, t.duration) == (0.8, 5.0)
        assert (t.initial_torso_joint, t.initial_limb_joint) == (0.0, 1.5)


def test_one_limb_torso_joints(matrix):
    expect = {"front-right": 0.6, "front-left": -0.6, "back-right": 1.0, "back-left": -1.0}
    for t in matrix:
        if t.scenario == "one-limb":
            assert t.training_torso_joint == expect[t.topology[0]]
        else:
            assert t.training_torso_joint is None


def test_distribution_flags(matrix):
    ind = {t.scenario for t in matrix if t.in_distribution}
    assert ind == {"intact", "one-limb", "two-hindlimbs", "single-module"}


def test_matrix_seeded_and_manifest_roundtrip(matrix):
    assert amp.test_matrix() == matrix
    assert amp.test_matrix(amp.MatrixConfig(seed=1)) != matrix
    assert amp.loads_manifest(amp.dumps_manifest(matrix)) == matrix


def test_trial_simulator_uses_test_friction(matrix):
    sim = amp.trial_simulator(next(t for t in matrix if t.scenario == "one-limb"))
    assert sim.config.friction_coeff == 0.8
    assert sim.system.n_dof == 6 + 4


# -- dead modules -------------------------------------------------------------


def test_dead_module_empty_set_identical():
    sim = amp.Remnant(amp.QUADRUPED, [], tuple(range(5))).system()
    a, b = Simulator(sim), amp.dead_module(Simulator(sim), [])
    q0 = amp.initial_joint_angles(amp.Remnant(amp.QUADRUPED, [], tuple(range(5))))
    sa = sb = drop_state(5, q0)
    for _ in range(10):
        sa, sb = a.step(sa, q0), b.step(sb, q0)
    np.testing.assert_array_equal(sa.pos, sb.pos)
    np.testing.assert_array_equal(sa.q, sb.q)


def test_dead_module_zero_torque_but_passive_motion():
    base = Simulator(amp.Remnant(amp.QUADRUPED, [], tuple(range(5))).system())
    sim = amp.dead_module(base, [1])
    q0 = np.array([0.0, 1.5, 1.5, 1.5, 1.5])
    st = drop_state(5, q0)
    log, qd = [], []
    for _ in range(50):
        st = sim.step(st, q0, torque_log=log)
        qd.append(st.qd[0, 1])
    tau = np.array([t for t, _ in log])[:, 0, :]
    assert np.all(tau[:, 1] == 0.0)
    assert np.abs(tau[:, 2:]).max() > 0
    assert np.abs(qd).max() > 1e-3


# -- trajectories ----------------------------------------------------------


def test_zero_normalization():
    rng = np.random.default_rng(2)
    tr = random_traj(rng, 2, 20)
    same = amp.normalize_zero_positions([tr])[0]
    np.testing.assert_array_equal(same.states, tr.states)
    shifted = amp.normalize_zero_positions([tr], [[np.pi, 0.0]])[0]
    np.testing.assert_allclose(shifted.states[..., 0, 6], -tr.states[..., 0, 6], atol=1e-12)
    np.testing.assert_array_equal(shifted.states[..., 1, :], tr.states[..., 1, :])
    tr.zero_offsets = np.array([0.4, -0.2])
    once = amp.normalize_zero_positions([tr])[0]
    twice = amp.normalize_zero_positions([once])[0]
    np.testing.assert_array_equal(once.states, twice.states)
    np.testing.assert_array_equal(once.actions, twice.actions)


def test_merge_one_plus_four():
    rng = np.random.default_rng(3)
    a, b = random_traj(rng, 1, 30, "single"), random_traj(rng, 4, 25, "quad")
    m = amp.merge_trajectories([a, b])
    assert m.n_modules == 5 and m.steps == 25
    assert len(m.tokens_at(0)) == 6
    np.testing.assert_array_equal(m.states[:, 0], a.states[:25, 0])
    np.testing.assert_array_equal(m.states[:, 1:], b.states)
    np.testing.assert_array_equal(m.actions[:, 1:], b.actions)


def test_merge_arity_checked():
    rng = np.random.default_rng(4)
    with pytest.raises(amp.ArityError):
        amp.merge_trajectories([random_traj(rng, 2, 5), random_traj(rng, 2, 5)])
    for recipe in amp.MERGE_RECIPES:
        assert amp.merge_trajectories([random_traj(rng, n, 5) for n in recipe]).n_modules == 5


def test_context_window():
    rng = np.random.default_rng(5)
    m = amp.merge_trajectories([random_traj(rng, 1, 100), random_traj(rng, 4, 100)])
    ctx = amp.build_context(m, 80)
    assert ctx.n_tokens == 360 and len(ctx.tokens()) == 360 and not ctx.short
    np.testing.assert_array_equal(ctx.tokens()[-1], m.actions[80])
    first = amp.build_context(m, 0)
    assert first.n_tokens == 6 and first.short
    with pytest.raises(IndexError):
        amp.build_context(m, 100)


def test_trajectory_file_roundtrip(tmp_path):
    tr = random_traj(np.random.default_rng(6), 5, 12, "merged")
    tr.zero_offsets = np.arange(5) * 0.1
    path = tmp_path / "t.traj"
    tr.save(path)
    back = amp.Trajectory.load(path)
    np.testing.assert_array_equal(back.states, tr.states)
    np.testing.assert_array_equal(back.actions, tr.actions)
    np.testing.assert_array_equal(back.joint_angles, tr.joint_angles)
    np.testing.assert_array_equal(back.zero_offsets, tr.zero_offsets)
    assert back.source == "merged"
    with pytest.raises(ValueError):
        amp.Trajectory.from_bytes(path.read_bytes()[:-8])


def test_recorded_trajectory_shapes():
    sim = Simulator(amp.Remnant(amp.QUADRUPED, [], tuple(range(5))).system())
    q0 = np.full(5, 1.5)
    tr = amp.record_trajectory(sim, drop_state(5, q0), lambda tok, k: q0, 5, source="hold")
    assert tr.states.shape == (5, 5, 8) and tr.actions.shape == (5, 5)
    np.testing.assert_allclose(tr.states[0, :, 6], np.cos(q0))
