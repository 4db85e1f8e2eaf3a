"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the summary lines
are also repeated at the end of the pytest report.
"""

from __future__ import annotations

import itertools
import math
import time
from contextlib import contextmanager
from fractions import Fraction

import numpy as np
import pytest

from metamachine import amputation as amp
from metamachine.bayesopt import (
    BOConfig,
    NegSquaredNorm,
    bo_run,
    bo_run_sync,
    mean_pending_distance,
    random_search,
)
from metamachine.genome import (
    VAE,
    AutoencoderSpec,
    onehot_batch,
    slot_accuracy,
    two_module_space,
    unhot_batch,
    vae_train,
)
from metamachine.geometry import count_forbidden_pairs, interference_rule, self_collides
from metamachine.morphology import (
    ConfigTree,
    DockCategory,
    count_two_module,
    decode_seq,
    dock_category,
    encode_tree,
    enumerate_two_module,
    estimate_recurrence,
    estimate_unique,
    sample_tree,
    sample_trees,
)
from metamachine.poseopt import optimize_pose, score_poses, symmetry_clauses
from metamachine.rewards import (
    RewardBundle,
    WalkInputs,
    jumpturn_reward,
    r_action,
    r_roll,
    r_turn,
    rolling_frame,
    selfright_reward,
    single_module_reward,
    walking_reward,
    walking_terminated,
)
from metamachine.simcore import (
    ArticulatedSystem,
    SimConfig,
    SimState,
    Simulator,
    is_fallen,
    random_poses,
    settle,
)

pytestmark = pytest.mark.slow

TWO_LEGS = ConfigTree.from_tuples([(0, 0, 10, 0), (0, 1, 10, 0)])


@contextmanager
def criterion(log, n: int, title: str):
    notes: list[str] = []
    t0 = time.perf_counter()
    status = "FAIL"
    try:
        yield notes
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - t0
        detail = "; ".join(notes + [f"{elapsed:.1f} s"])
        line = f"criterion {n:2d} {status}: {title} ({detail})"
        log[n] = line
        print(line, flush=True)


# ---------------------------------------------------------------------------
# 1-4: combinatorics, encoding, sampling
# ---------------------------------------------------------------------------


def brute_two_module(D, O, S):
    side = set(range(D - S, D))
    reps = set()
    for a, b, o in itertools.product(range(D), range(D), range(O)):
        if a in side and b in side and o == 0:
            continue
        reps.add(min((a, b, o), (b, a, o)))
    return len(reps)


def test_criterion_01_combinatorics(acceptance_log):
    with criterion(acceptance_log, 1, "two-module count") as notes:
        t0 = time.perf_counter()
        assert count_two_module(18, 3, 12) == 435
        bad = [(D, O, S) for D in range(1, 5) for O in range(1, 5) for S in range(D + 1)
               if count_two_module(D, O, S) != brute_two_module(D, O, S)]
        elapsed = time.perf_counter() - t0
        assert bad == []
        assert len(enumerate_two_module()) == 435
        notes.append(f"435, {len(bad)} brute-force discrepancies")
        assert elapsed < 1.0


def test_criterion_02_estimate(acceptance_log):
    with criterion(acceptance_log, 2, "unique-design estimate") as notes:
        assert estimate_unique(5) == float(Fraction(864**4, 5))
        assert estimate_unique(5) == pytest.approx(1.1145e11, rel=1e-4)
        for n in range(1, 11):
            assert abs(estimate_recurrence(n) - 864.0 ** (n - 1) / n) <= 1e-12 * 864.0 ** (n - 1) / n
        notes.append(f"{estimate_unique(5):.5e}")


def test_criterion_03_encoding_roundtrip(acceptance_log):
    with criterion(acceptance_log, 3, "encoding round trip") as notes:
        t0 = time.perf_counter()
        trees = sample_trees(2024, 10_000, "2..5", check_collision=False)
        ok = sum(decode_seq(encode_tree(t)) == t for t in trees)
        elapsed = time.perf_counter() - t0
        sizes = {t.n_modules for t in trees}
        notes.append(f"{ok}/10000, module counts {sorted(sizes)}")
        assert ok == 10_000 and sizes == {2, 3, 4, 5}
        assert elapsed < 10.0


def test_criterion_04_sampling_validity(acceptance_log):
    with criterion(acceptance_log, 4, "sampling validity") as notes:
        trees = sample_trees(99, 1000)
        colliding = sum(self_collides(t, np.zeros(t.n_modules)) for t in trees)
        interfering = sum(interference_rule(c.parent_dock, c.child_dock, c.orientation)
                          for t in trees for c in t.connections)
        forbidden = sum(interference_rule(a, b, o) for a in range(18) for b in range(18) for o in range(3))
        side = sum(dock_category(d) is DockCategory.SIDE for d in range(18))
        notes.append(f"{colliding} colliding, {interfering} interfering, {forbidden} forbidden pairs")
        assert colliding == 0 and interfering == 0
        assert forbidden == count_forbidden_pairs() == side * side == 144


# ---------------------------------------------------------------------------
# 5: rewards against closed-form oracles
# ---------------------------------------------------------------------------


def walk_oracle(v, x, om, gp, touching, qd, qd_prev, ap, ac):
    vf = sum(a * b for a, b in zip(v, x))
    wz = sum(a * b for a, b in zip(om, gp))
    mv = min(max(sum(abs(t) - 10.0 for t in qd), 0.0), 1e5)
    acc = sum(((p - c) / 0.05) ** 2 for p, c in zip(qd_prev, qd))
    return (0.6 * math.exp(-((0.6 - vf) ** 2) / 0.15) + 0.2 * math.exp(-(wz**2) / 0.15)
            - 0.1 * sum((p - c) ** 2 for p, c in zip(ap, ac)) - 0.02 * touching - 0.01 * mv - 2e-6 * acc)


def pose_oracle(th, th0):
    return math.exp(-sum((a - b) ** 2 for a, b in zip(th, th0)) / 10.0)


def test_criterion_05_rewards(acceptance_log):
    with criterion(acceptance_log, 5, "reward fidelity") as notes:
        rng = np.random.default_rng(5)
        worst = 0.0

        def check(got, ref):
            nonlocal worst
            err = abs(got - ref) / max(1.0, abs(ref))
            worst = max(worst, err)
            assert err <= 1e-12, (got, ref)

        unit = lambda v: v / np.linalg.norm(v)
        for _ in range(1000):
            n = int(rng.integers(1, 6))
            inp = WalkInputs(rng.normal(0, 0.5, 3), unit(rng.normal(size=3)), rng.normal(0, 2, 3),
                             unit(rng.normal(size=3)), int(rng.integers(0, n + 1)), rng.normal(0, 12, n),
                             rng.normal(0, 12, n), rng.normal(size=n), rng.normal(size=n))
            check(walking_reward(inp)[0], walk_oracle(inp.v, inp.x_hat, inp.omega, inp.g_p, inp.spheres_touching,
                                                      inp.theta_dot, inp.theta_dot_prev, inp.a_prev, inp.a_curr))
            d = rng.uniform(-1, 1)
            th, th0, ap, ac = (rng.normal(size=n) for _ in range(4))
            check(selfright_reward(d, th, th0, ap, ac)[0],
                  d * pose_oracle(th, th0) - 0.02 * sum((p - c) ** 2 for p, c in zip(ap, ac)))
            cmd, h, wz, hs = int(rng.integers(0, 2)), rng.uniform(0, 1.2), rng.normal(0, 3), rng.uniform(0.5, 0.8)
            air = bool(rng.integers(0, 2))
            if cmd == 1:
                ref = 0.2 * d + min(h, hs) + 100.0 * air + min(wz, 2.0)
            else:
                ref = 0.2 * d + d * pose_oracle(th, th0) + math.exp(-(wz**2) / 0.15)
            check(jumpturn_reward(cmd, d, th, th0, h, air, wz, RewardBundle.standard("jumpturn", h_star=hs))[0], ref)
            theta = rng.uniform(-math.pi, math.pi)
            fr = rolling_frame(theta)
            w = rng.normal(0, 5, 3)
            check(r_roll(w, fr), min(1.0, float(w @ fr.rolling_axis) / 4.0))
            g = unit(rng.normal(size=3))
            check(r_turn(g, w), min(1.0, float(g @ w) / 3.0))
            a_p, a_c = rng.normal(size=1), rng.normal(size=1)
            act = float((a_p[0] - a_c[0]) ** 2)
            check(r_action(a_p, a_c), act)
            main = rng.uniform(-1, 1)
            check(single_module_reward("roll", main, act), main - 0.1 * act)
            check(single_module_reward("turn", main, act), main - 0.1 * act)
        # fixed values
        still = WalkInputs(np.zeros(3), np.array([1.0, 0, 0]), np.zeros(3), np.array([0, 0, -1.0]), 0,
                           np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2))
        check(walking_reward(still)[1]["forward"], math.exp(-2.4))
        th0 = np.zeros(3)
        check(selfright_reward(1.0, th0 + np.array([math.sqrt(10.0), 0, 0]), th0, th0, th0)[0], math.exp(-1.0))
        boundary = (walking_terminated(0.1 - 1e-15), walking_terminated(0.1), bool(is_fallen(0.1)),
                    bool(is_fallen(np.nextafter(0.1, 0))))
        notes.append(f"worst relative error {worst:.1e}, boundary {boundary}")
        assert boundary == (True, False, False, True)


# ---------------------------------------------------------------------------
# 6: simulator sanity
# ---------------------------------------------------------------------------


def test_criterion_06_simulator(acceptance_log):
    with criterion(acceptance_log, 6, "simulator physical sanity") as notes:
        sphere = Simulator(ArticulatedSystem.sphere(), SimConfig())
        st = SimState.rest(1, 0)
        st.pos[:, 2] = 0.2
        rest = settle(sphere, st)
        height_err = abs(rest.state.pos[0, 2] - 0.07)

        sim = Simulator(ArticulatedSystem.from_tree(sample_tree(11, 3)))
        quat, q = random_poses(1, 16, 3)
        res = settle(sim, sim.initial_state(quat, q))
        ke = float(sim.kinetic_energy(res.state)[res.converged].max())

        psim = Simulator(ArticulatedSystem.from_tree(sample_tree(8, 4)))
        quat, _ = random_poses(8, 16, 4)
        zeros = np.zeros((16, 4))
        cur = psim.initial_state(quat, zeros)
        energy = [psim.energy(cur, zeros)["total"]]
        for _ in range(200):  # 10 s of control steps
            cur = psim.step(cur, zeros)
            energy.append(psim.energy(cur, zeros)["total"])
        rise = float(np.diff(np.array(energy), axis=0).max())

        tsim = Simulator(ArticulatedSystem.from_tree(sample_tree(5, 3)))
        quat, q = random_poses(5, 40, 3)
        cur = settle(tsim, tsim.initial_state(quat, q)).state
        log = []
        for k in range(250):
            target = q + 2.5 * math.sin(2 * math.pi * 5 * k * 0.02)
            cur = tsim.step(cur, target, dt=0.02, torque_log=log, raise_on_divergence=False)
        tau = np.array([t for t, _ in log])
        lim = np.array([lim for _, lim in log])
        logged = tau.shape[0] * tau.shape[1]
        excess = float((np.abs(tau) - lim).max())
        notes.append(f"rest error {height_err:.1e} m, KE {ke:.1e} J, energy rise {rise:.1e} J/step, "
                     f"{logged} torque steps, max excess {excess:.1e}")
        assert height_err < 1e-3
        assert res.converged.any() and ke < 1e-4
        assert rise <= 1e-3
        assert logged >= 100_000 and excess <= 1e-12


# ---------------------------------------------------------------------------
# 7: pose optimizer
# ---------------------------------------------------------------------------


def test_criterion_07_pose_optimizer(acceptance_log):
    with criterion(acceptance_log, 7, "pose optimizer") as notes:
        t0 = time.perf_counter()
        res = optimize_pose(TWO_LEGS, seed=0, count=4096)
        elapsed = time.perf_counter() - t0
        s = res.scores
        evaluated = int(np.isfinite(s.total).sum())
        again = score_poses(TWO_LEGS, res.quat[:512], res.q[:512])
        same = np.array_equal(again.total, s.total[:512], equal_nan=True)
        fallen, standing = s.total[s.fell], s.total[~s.fell & np.isfinite(s.total)]
        dominance = (not len(fallen) or not len(standing)) or fallen.max() < standing.min()
        sym = optimize_pose(TWO_LEGS, seed=1, count=512, use_symmetry=True)
        ss = sym.scores
        violations = sum(not all(symmetry_clauses(TWO_LEGS, sym.q[i], int(ss.spheres_touching[i])).values())
                         for i in np.nonzero(ss.accepted)[0])
        notes.append(f"{evaluated}/4096 evaluated, {int(s.fell.sum())} fell, reproducible={same}, "
                     f"{int(ss.accepted.sum())} symmetric poses with {violations} clause violations, "
                     f"full run {elapsed:.0f} s")
        assert evaluated == 4096 and same and dominance
        assert ss.accepted.any() and violations == 0
        assert elapsed < 600


# ---------------------------------------------------------------------------
# 8: autoencoder
# ---------------------------------------------------------------------------


def test_criterion_08_autoencoder(acceptance_log):
    with criterion(acceptance_log, 8, "autoencoder") as notes:
        seqs = np.array([encode_tree(t) for t in sample_trees(8, 10_000, "1..5", check_collision=False)])
        roundtrip = float(np.mean(np.all(unhot_batch(onehot_batch(seqs)) == seqs, axis=1)))

        rng = np.random.default_rng(0)
        model = VAE.init(AutoencoderSpec(), seed=1)
        X = onehot_batch(seqs[:16])
        eps = rng.standard_normal((16, 8))
        _, _, _, grads = model.loss_and_grad(X, eps, 0.5)
        worst = 0.0
        names = sorted(model.params)
        for _ in range(10):
            name = names[rng.integers(len(names))]
            idx = tuple(int(rng.integers(k)) for k in model.params[name].shape)
            old = model.params[name][idx]
            vals = []
            for h in (1e-5, -1e-5):
                model.params[name][idx] = old + h
                vals.append(model.loss_and_grad(X, eps, 0.5, need_grad=False)[0])
            model.params[name][idx] = old
            fd = (vals[0] - vals[1]) / 2e-5
            worst = max(worst, abs(fd - grads[name][idx]) / max(abs(fd), abs(grads[name][idx]), 1e-8))

        space = two_module_space()
        perm = np.random.default_rng(0).permutation(len(space))
        n_test = len(space) // 5
        train, test = space[perm[n_test:]], space[perm[:n_test]]
        trained = vae_train(train, AutoencoderSpec(beta=0.0, epochs=150, batch_size=32), seed=0).model
        acc = slot_accuracy(trained, test)
        notes.append(f"round trip {roundtrip:.0%}, gradient error {worst:.1e}, "
                     f"held-out slot accuracy min {acc.min():.3f} on {len(test)} designs")
        assert roundtrip == 1.0
        assert worst < 1e-4
        assert acc.min() >= 0.95


# ---------------------------------------------------------------------------
# 9: Bayesian optimization
# ---------------------------------------------------------------------------


def test_criterion_09_bayesopt(acceptance_log):
    with criterion(acceptance_log, 9, "asynchronous BO") as notes:
        t0 = time.perf_counter()
        f = NegSquaredNorm()
        cfg = BOConfig(box=(-2.0, 2.0))
        plain_cfg = BOConfig(box=(-2.0, 2.0), penalize=False)
        good = beats = 0
        pen, plain = [], []
        for seed in range(20):
            run = bo_run(f, 200, 4, seed, cfg)
            pen.append(mean_pending_distance(run.history))
            plain.append(mean_pending_distance(bo_run(f, 200, 4, seed, plain_cfg).history))
            good += run.best.fitness >= -0.5
            beats += run.best.fitness > random_search(f, 200, seed, dim=8, box=(-2.0, 2.0))[1]
        a = bo_run(f, 60, 1, 3, cfg)
        b = bo_run_sync(f, 60, 3, cfg)
        sync_same = all(np.array_equal(x.z, y.z) and x.fitness == y.fitness for x, y in zip(a.history, b.history))
        elapsed = time.perf_counter() - t0
        notes.append(f"best >= -0.5 in {good}/20, beats random in {beats}/20, pending distance "
                     f"{np.mean(pen):.3f} penalized vs {np.mean(plain):.3f} plain, sync match {sync_same}")
        assert good >= 18 and beats >= 18
        assert np.mean(pen) > np.mean(plain)
        assert sync_same
        assert elapsed < 300


# ---------------------------------------------------------------------------
# 10: amputation pipeline
# ---------------------------------------------------------------------------


def test_criterion_10_amputation(acceptance_log):
    with criterion(acceptance_log, 10, "amputation pipeline") as notes:
        trials = amp.test_matrix()
        counts = amp.trial_counts(trials)
        assert counts["one-limb"] == 4 * 10 * 5
        assert counts["two-hindlimbs"] == 1 * 10 * 5 and counts["single-module"] == 1 * 10 * 5
        assert counts["diagonal-two"] == 2 * 10 * 5 and counts["three-limbs"] == 4 * 10 * 5

        rng = np.random.default_rng(0)

        def traj(n, T):
            q = rng.uniform(-np.pi, np.pi, (T, n))
            s = rng.standard_normal((T, n, 8))
            s[..., 6] = np.cos(q)
            return amp.Trajectory(s, rng.uniform(-1, 1, (T, n)), q)

        merged = amp.merge_trajectories([traj(1, 120), traj(4, 120)])
        ctx = amp.build_context(merged, 119, K=60)
        assert ctx.n_tokens == 360 and len(ctx.tokens()) == 360

        one_limb = {t.topology[0]: t.training_torso_joint for t in trials if t.scenario == "one-limb"}
        assert one_limb == {"front-right": 0.6, "front-left": -0.6, "back-right": 1.0, "back-left": -1.0}
        assert all((t.friction, t.duration, t.initial_torso_joint, t.initial_limb_joint) == (0.8, 5.0, 0.0, 1.5)
                   for t in trials)

        base = Simulator(amp.Remnant(amp.QUADRUPED, [], tuple(range(5))).system())
        sim = amp.dead_module(base, [1])
        q0 = np.array([0.0, 1.5, 1.5, 1.5, 1.5])
        st = SimState.rest(1, 5)
        st.pos[:, 2] = 0.25
        st.q[:] = q0
        log, qd = [], []
        for _ in range(50):
            st = sim.step(st, q0, torque_log=log)
            qd.append(abs(st.qd[0, 1]))
        tau = np.array([t for t, _ in log])[:, 0, 1]
        notes.append(f"{len(trials)} trials, one-limb {counts['one-limb']}, context {ctx.n_tokens} tokens, "
                     f"dead torque max {np.abs(tau).max():.1e}, dead joint speed max {max(qd):.2f} rad/s")
        assert np.all(tau == 0.0)
        assert max(qd) > 1e-3
