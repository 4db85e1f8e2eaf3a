"""Damage scenarios for the five-module quadruped.

Covers cut-point sampling, removal of limbs from the tree with a residual
stub for partial cuts, sensor-motor trajectory tokens, merging trajectories
from policies of different sizes, dead modules and the evaluation trial
matrix.

Trajectory file layout (little-endian)::

    offset 0   8 bytes   magic b"MMTRJ\\x00\\x01\\x00"
    offset 8   uint32    length H of the JSON header
    offset 12  H bytes   UTF-8 JSON: n_modules, steps, state_dim, zero_offsets,
                         source, normalization and the record layout
    then       steps fixed-width records of float64:
               states (n_modules * 8), actions (n_modules), joint angles (n_modules)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import DEFAULT_GEOMETRY, ModuleGeometry, dock_frames, mate_transform, self_collides
from .morphology import Connection, ConfigTree, StructuralError, dock_half
from .simcore import (
    ArticulatedSystem,
    Heightfield,
    SimConfig,
    Simulator,
    Stub,
    module_state_tokens,
    random_heightfield,
)

N_MODULES = 5
STATE_DIM = 8
CONTEXT_K = 60
CUT_SETS = 10
REPETITIONS = 5
TRIAL_SECONDS = 5.0
TEST_FRICTION = 0.8
TEST_TORSO_JOINT = 0.0
TEST_LIMB_JOINT = 1.5
OBSTACLE_MAX_HEIGHT = 0.03

# torso is module 0; legs hang tip-first from the four sphere docks
SITES = ("front-right", "front-left", "back-right", "back-left")
SITE_MODULE = {"front-right": 1, "front-left": 2, "back-right": 3, "back-left": 4}
QUADRUPED = ConfigTree.from_tuples([(0, 2, 10, 0), (0, 0, 10, 0), (0, 3, 10, 0), (0, 1, 10, 0)])

# initial torso joint when one limb is missing, per amputation site
ONE_LIMB_TORSO_JOINT = {"front-right": 0.6, "front-left": -0.6, "back-right": 1.0, "back-left": -1.0}

TRAJ_MAGIC = b"MMTRJ\x00\x01\x00"


# ---------------------------------------------------------------------------
# Scenario classes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioClass:
    name: str
    topologies: tuple[tuple[str, ...], ...]  # removed (or dead) sites per topology
    in_distribution: bool
    dead: bool = False


SCENARIO_CLASSES: dict[str, ScenarioClass] = {
    c.name: c
    for c in (
        ScenarioClass("intact", ((),), True),
        ScenarioClass("one-limb", tuple((s,) for s in SITES), True),
        ScenarioClass("two-hindlimbs", (("back-right", "back-left"),), True),
        ScenarioClass("single-module", (SITES,), True),
        ScenarioClass("diagonal-two", (("front-right", "back-left"), ("front-left", "back-right")), False),
        ScenarioClass("three-limbs", tuple(tuple(s for s in SITES if s != keep) for keep in SITES), False),
        ScenarioClass(
            "dead-modules",
            tuple((s,) for s in SITES) + (("back-right", "back-left"), ("front-right", "back-left"),
                                          ("front-left", "back-right")),
            False,
            dead=True,
        ),
    )
}
IN_DISTRIBUTION = tuple(n for n, c in SCENARIO_CLASSES.items() if c.in_distribution)


@dataclass(frozen=True)
class CutPoint:
    limb: int  # module index in the intact quadruped
    fraction: float  # 0 where the limb meets the torso, 1 at the limb sphere

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"cut fraction {self.fraction} outside [0, 1]")


def sample_cutpoints(rng, sites: Sequence[str]) -> list[CutPoint]:
    """One uniform cut per amputated site."""
    rng = np.random.default_rng(rng)
    return [CutPoint(SITE_MODULE[s], float(rng.uniform(0.0, 1.0))) for s in sites]


def sample_cut_sets(rng, scenario: str, sets: int = CUT_SETS) -> list[list[list[CutPoint]]]:
    """``sets`` cut-point sets for each topology of a scenario class."""
    rng = np.random.default_rng(rng)
    cls = SCENARIO_CLASSES[scenario]
    if cls.dead:
        return [[[]] for _ in cls.topologies]
    return [[sample_cutpoints(rng, topo) for _ in range(sets)] if topo else [[]] for topo in cls.topologies]


# ---------------------------------------------------------------------------
# Tree reduction
# ---------------------------------------------------------------------------


@dataclass
class Remnant:
    tree: ConfigTree
    stubs: list[Stub]
    kept: tuple[int, ...]  # original module index of each remaining module
    cuts: tuple[CutPoint, ...] = ()

    def system(self, geom: ModuleGeometry = DEFAULT_GEOMETRY) -> ArticulatedSystem:
        return ArticulatedSystem.from_tree(self.tree, geom, stubs=self.stubs)

    def stub_lengths(self) -> list[float]:
        return [float(np.linalg.norm(s.end - s.start)) for s in self.stubs]


def _children(tree: ConfigTree) -> list[list[int]]:
    kids: list[list[int]] = [[] for _ in range(tree.n_modules)]
    for i, c in enumerate(tree.connections):
        kids[c.parent_module].append(i + 1)
    return kids


def remove_modules(tree: ConfigTree, removed: Sequence[int]) -> tuple[ConfigTree, tuple[int, ...]]:
    """Drop leaf modules and renumber the rest, keeping their relative order."""
    removed = set(int(m) for m in removed)
    kids = _children(tree)
    for m in removed:
        if m == 0 or not 0 < m < tree.n_modules:
            raise StructuralError(f"module {m} cannot be removed")
        if any(k not in removed for k in kids[m]):
            raise StructuralError(f"module {m} is not a leaf")
    kept = tuple(m for m in range(tree.n_modules) if m not in removed)
    new_index = {m: i for i, m in enumerate(kept)}
    conns = [replace(tree.connections[m - 1], parent_module=new_index[tree.connections[m - 1].parent_module])
             for m in kept[1:]]
    return ConfigTree(tuple(conns)), kept


def apply_amputation(tree: ConfigTree, cutpoints: Sequence[CutPoint], geom: ModuleGeometry = DEFAULT_GEOMETRY) -> Remnant:
    """Remove each cut limb and leave a stub of the cut fraction on its parent.

    The stub runs from the dock on the parent toward the removed limb's
    sphere, ``fraction`` of the way; a fraction of 0 removes the limb fully.
    """
    reduced, kept = remove_modules(tree, [c.limb for c in cutpoints])
    new_index = {m: i for i, m in enumerate(kept)}
    frames = dock_frames(geom)
    stubs = []
    for cut in cutpoints:
        if cut.fraction <= 0.0:
            continue
        c: Connection = tree.connections[cut.limb - 1]
        start = frames[c.parent_dock].position
        centre = mate_transform(c.parent_dock, c.child_dock, c.orientation, geom)[:3, 3]
        end = start + cut.fraction * (centre - start)
        length = float(np.linalg.norm(end - start))
        mass = geom.link_mass * length / geom.link_length
        stubs.append(Stub(new_index[c.parent_module], dock_half(c.parent_dock), start.copy(), end, mass,
                          geom.link_radius))
    return Remnant(reduced, stubs, kept, tuple(cutpoints))


def initial_joint_angles(remnant: Remnant, torso: float = TEST_TORSO_JOINT, limb: float = TEST_LIMB_JOINT) -> np.ndarray:
    q = np.full(remnant.tree.n_modules, float(limb))
    q[0] = torso
    return q


def remnant_collides(remnant: Remnant, q=None, geom: ModuleGeometry = DEFAULT_GEOMETRY) -> bool:
    """Self-collision of the remaining modules; stubs are short rods along the removed link and are not checked."""
    q = initial_joint_angles(remnant) if q is None else q
    return self_collides(remnant.tree, q, geom)


def obstacle_terrain(rng, max_height: float = OBSTACLE_MAX_HEIGHT) -> Heightfield:
    """Seeded obstacle tile for single-module data collection."""
    return random_heightfield(rng, max_height=max_height)


# ---------------------------------------------------------------------------
# Dead modules
# ---------------------------------------------------------------------------


def dead_module(sim: Simulator, modules: Sequence[int]) -> Simulator:
    """A copy of ``sim`` whose listed modules produce no torque but stay attached."""
    dead = sorted(set(int(m) for m in modules) | {int(m) for m in np.nonzero(sim.torque_mask == 0)[0]})
    return Simulator(sim.system, sim.config, motor=sim.motor, gains=sim.gains, terrain=sim.terrain, dead_modules=dead)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Per-step module states (T, N, 8), joint targets (T, N) and joint angles (T, N).

    Joint angles ride along so the cosine tokens can be recomputed when the
    zero position changes.
    """

    states: np.ndarray
    actions: np.ndarray
    joint_angles: np.ndarray
    zero_offsets: np.ndarray = None
    source: str = ""
    normalization: dict = field(default_factory=lambda: {"states": "raw"})

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        self.joint_angles = np.asarray(self.joint_angles, dtype=float)
        T, N, D = self.states.shape
        if D != STATE_DIM or self.actions.shape != (T, N) or self.joint_angles.shape != (T, N):
            raise ValueError("trajectory arrays have inconsistent shapes")
        self.zero_offsets = np.zeros(N) if self.zero_offsets is None else np.asarray(self.zero_offsets, dtype=float)

    @property
    def n_modules(self) -> int:
        return self.states.shape[1]

    @property
    def steps(self) -> int:
        return self.states.shape[0]

    def truncate(self, steps: int) -> "Trajectory":
        return Trajectory(self.states[:steps], self.actions[:steps], self.joint_angles[:steps],
                          self.zero_offsets, self.source, dict(self.normalization))

    def tokens_at(self, t: int) -> list[np.ndarray]:
        """State tokens of every module at step ``t`` followed by the action token."""
        return [self.states[t, m] for m in range(self.n_modules)] + [self.actions[t]]

    # -- file format ------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "n_modules": self.n_modules, "steps": self.steps, "state_dim": STATE_DIM,
            "zero_offsets": self.zero_offsets.tolist(), "source": self.source,
            "normalization": self.normalization,
            "record": ["states", "actions", "joint_angles"],
        }
        hb = json.dumps(header, sort_keys=True).encode()
        rec = np.concatenate([self.states.reshape(self.steps, -1), self.actions, self.joint_angles], axis=1)
        return TRAJ_MAGIC + struct.pack("<I", len(hb)) + hb + np.ascontiguousarray(rec, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Trajectory":
        if data[:8] != TRAJ_MAGIC:
            raise ValueError("not a trajectory file")
        (h,) = struct.unpack("<I", data[8:12])
        hd = json.loads(data[12: 12 + h].decode())
        N, T = hd["n_modules"], hd["steps"]
        width = N * STATE_DIM + 2 * N
        rec = np.frombuffer(data, dtype="<f8", offset=12 + h).astype(float)
        if rec.size != T * width:
            raise ValueError("trajectory file is truncated")
        rec = rec.reshape(T, width)
        s = N * STATE_DIM
        return cls(rec[:, :s].reshape(T, N, STATE_DIM), rec[:, s: s + N], rec[:, s + N:], hd["zero_offsets"],
                   hd["source"], hd.get("normalization", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Trajectory":
        return cls.from_bytes(Path(path).read_bytes())


def normalize_zero_positions(trajs: Sequence[Trajectory], offsets: Sequence[Sequence[float]] | None = None) -> list[Trajectory]:
    """Shift joint angles and targets into a shared zero and recompute cosine tokens.

    ``offsets[i][m]`` is where policy ``i`` puts its zero for module ``m`` in
    the shared convention; by default each trajectory's recorded offsets are
    used. The results carry zero offsets, so normalizing again is a no-op.
    """
    out = []
    for i, tr in enumerate(trajs):
        off = tr.zero_offsets if offsets is None else np.asarray(offsets[i], dtype=float)
        if not np.any(off):
            out.append(Trajectory(tr.states.copy(), tr.actions.copy(), tr.joint_angles.copy(), np.zeros(tr.n_modules),
                                  tr.source, dict(tr.normalization)))
            continue
        q = tr.joint_angles + off
        states = tr.states.copy()
        states[..., 6] = np.cos(q)
        out.append(Trajectory(states, tr.actions + off, q, np.zeros(tr.n_modules), tr.source, dict(tr.normalization)))
    return out


class ArityError(ValueError):
    pass


def merge_trajectories(parts: Sequence[Trajectory], n_modules: int = N_MODULES) -> Trajectory:
    """Stack parts module-wise into one ``n_modules`` trajectory, truncated to the shortest part."""
    total = sum(p.n_modules for p in parts)
    if total != n_modules:
        raise ArityError(f"parts provide {total} modules, expected {n_modules}")
    T = min(p.steps for p in parts)
    return Trajectory(
        np.concatenate([p.states[:T] for p in parts], axis=1),
        np.concatenate([p.actions[:T] for p in parts], axis=1),
        np.concatenate([p.joint_angles[:T] for p in parts], axis=1),
        np.concatenate([p.zero_offsets for p in parts]),
        "+".join(p.source or "?" for p in parts),
        dict(parts[0].normalization),
    )


MERGE_RECIPES = ((1, 4), (5,), (1, 1, 3), (1, 1, 1, 1, 1))


@dataclass
class Context:
    states: np.ndarray  # (k, N, 8)
    actions: np.ndarray  # (k, N)
    start: int
    end: int  # inclusive
    short: bool

    @property
    def n_tokens(self) -> int:
        return self.states.shape[0] * (self.states.shape[1] + 1)

    def tokens(self) -> list[np.ndarray]:
        out = []
        for k in range(self.states.shape[0]):
            out.extend(self.states[k, m] for m in range(self.states.shape[1]))
            out.append(self.actions[k])
        return out


def build_context(traj: Trajectory, t: int, K: int = CONTEXT_K) -> Context:
    """The last ``K`` steps ending at ``t``; shorter near the start of the trajectory."""
    if not 0 <= t < traj.steps:
        raise IndexError(f"step {t} outside trajectory of length {traj.steps}")
    start = max(0, t - K + 1)
    return Context(traj.states[start: t + 1], traj.actions[start: t + 1], start, t, t + 1 - start < K)


def record_trajectory(sim: Simulator, state, policy, steps: int, source: str = "", dt: float | None = None) -> Trajectory:
    """Roll out ``policy(states_tokens, step) -> targets`` for one batch item and record tokens."""
    states, actions, angles = [], [], []
    cur = state
    for k in range(steps):
        tok = module_state_tokens(sim, cur)[0]
        a = np.asarray(policy(tok, k), dtype=float)
        states.append(tok)
        actions.append(a)
        angles.append(cur.q[0].copy())
        cur = sim.step(cur, a[None], dt=dt, raise_on_divergence=False)
    return Trajectory(np.array(states), np.array(actions), np.array(angles), source=source)


# ---------------------------------------------------------------------------
# Test matrix
# ---------------------------------------------------------------------------


@dataclass
class Trial:
    scenario: str
    topology: tuple[str, ...]
    cut_set: int
    repetition: int
    seed: int
    cuts: tuple[tuple[int, float], ...]
    in_distribution: bool
    dead_modules: tuple[int, ...] = ()
    duration: float = TRIAL_SECONDS
    friction: float = TEST_FRICTION
    initial_torso_joint: float = TEST_TORSO_JOINT
    initial_limb_joint: float = TEST_LIMB_JOINT
    training_torso_joint: float | None = None  # one-limb sites only

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topology"] = list(self.topology)
        d["cuts"] = [list(c) for c in self.cuts]
        d["dead_modules"] = list(self.dead_modules)
        return d

    def remnant(self) -> Remnant:
        if self.dead_modules or not self.cuts:
            return Remnant(QUADRUPED, [], tuple(range(N_MODULES)))
        return apply_amputation(QUADRUPED, [CutPoint(m, f) for m, f in self.cuts])


@dataclass(frozen=True)
class MatrixConfig:
    seed: int = 0
    classes: tuple[str, ...] = tuple(SCENARIO_CLASSES)
    cut_sets: int = CUT_SETS
    repetitions: int = REPETITIONS


def test_matrix(config: MatrixConfig = MatrixConfig()) -> list[Trial]:
    """Every trial of every requested scenario class, with derived per-trial seeds."""
    trials: list[Trial] = []
    ss = np.random.SeedSequence(config.seed)
    class_seeds = dict(zip(SCENARIO_CLASSES, ss.spawn(len(SCENARIO_CLASSES))))
    for name in config.classes:
        cls = SCENARIO_CLASSES[name]
        rng = np.random.default_rng(class_seeds[name])
        cut_sets = sample_cut_sets(rng, name, config.cut_sets)
        for topo, sets in zip(cls.topologies, cut_sets):
            dead = tuple(SITE_MODULE[s] for s in topo) if cls.dead else ()
            train_torso = ONE_LIMB_TORSO_JOINT[topo[0]] if name == "one-limb" else None
            for ci, cuts in enumerate(sets):
                for rep in range(config.repetitions):
                    trials.append(Trial(
                        scenario=name, topology=topo, cut_set=ci, repetition=rep,
                        seed=int(rng.integers(2**31)),
                        cuts=tuple((c.limb, c.fraction) for c in cuts),
                        in_distribution=cls.in_distribution, dead_modules=dead,
                        training_torso_joint=train_torso,
                    ))
    return trials


test_matrix.__test__ = False  # keep pytest from collecting it when imported


def trial_counts(trials: Sequence[Trial]) -> dict[str, int]:
    out: dict[str, int] = {}
    for t in trials:
        out[t.scenario] = out.get(t.scenario, 0) + 1
    return out


def dumps_manifest(trials: Sequence[Trial]) -> str:
    return "".join(json.dumps(t.to_dict()) + "\n" for t in trials)


def loads_manifest(text: str) -> list[Trial]:
    trials = []
    for line in text.splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        d["topology"] = tuple(d["topology"])
        d["cuts"] = tuple(tuple(c) for c in d["cuts"])
        d["dead_modules"] = tuple(d["dead_modules"])
        trials.append(Trial(**d))
    return trials


def trial_simulator(trial: Trial, geom: ModuleGeometry = DEFAULT_GEOMETRY) -> Simulator:
    rem = trial.remnant()
    cfg = SimConfig(friction_coeff=trial.friction)
    return Simulator(rem.system(geom), cfg, dead_modules=trial.dead_modules)


def site_of(module: int) -> str:
    return {v: k for k, v in SITE_MODULE.items()}[module]


def all_topologies() -> list[tuple[str, tuple[str, ...]]]:
    return [(n, t) for n, c in SCENARIO_CLASSES.items() for t in c.topologies]
