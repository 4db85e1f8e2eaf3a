"""Neutral-pose search: sample random poses, settle them, probe them with a sine drive, keep the best.

Poses are evaluated in fixed-size chunks. The simulator gathers active
contacts per batch, so the floating-point path depends on which poses share a
batch; fixing the chunk size makes every run bit-reproducible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import DEFAULT_GEOMETRY, ModuleGeometry, quat_to_matrix
from .morphology import MIRROR_DOCK, ConfigTree, encode_tree, format_seq
from .simcore import (
    ArticulatedSystem,
    MotorModel,
    PDGains,
    SimConfig,
    Simulator,
    random_poses,
    rollout_openloop,
    settle,
    state_support_area,
)

log = logging.getLogger(__name__)

DEFAULT_COUNT = 4096
DEFAULT_CHUNK = 512
SPHERE_CLEARANCE = 1e-3  # a sphere closer than this to the floor counts as touching


@dataclass(frozen=True)
class PoseWeights:
    area: float = 10.0  # per m^2
    displacement: float = 1.0  # per m
    fall_penalty: float = 100.0


@dataclass(frozen=True)
class ProbeConfig:
    amplitude: float = 1.0
    freq: float = 5.0
    steps: int = 250
    dt: float = 0.02
    epsilon: float = 0.1


@dataclass
class Pose:
    quat: np.ndarray
    joint_angles: np.ndarray
    x_hat: np.ndarray | None = None  # forward direction, root frame
    z_hat: np.ndarray | None = None  # upward direction, root frame

    def to_dict(self) -> dict:
        out = {"quat": self.quat.tolist(), "joint_angles": self.joint_angles.tolist()}
        for k in ("x_hat", "z_hat"):
            v = getattr(self, k)
            out[k] = None if v is None else np.asarray(v).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        get = lambda k: None if d.get(k) is None else np.asarray(d[k], dtype=float)
        return cls(np.asarray(d["quat"], float), np.asarray(d["joint_angles"], float), get("x_hat"), get("z_hat"))


@dataclass
class PoseScores:
    """Per-pose results; rejected poses carry NaN totals."""

    area: np.ndarray
    displacement: np.ndarray
    fell: np.ndarray
    total: np.ndarray
    settled: np.ndarray
    accepted: np.ndarray
    z_hat: np.ndarray
    x_hat: np.ndarray
    spheres_touching: np.ndarray

    @classmethod
    def empty(cls, count: int) -> "PoseScores":
        return cls(
            area=np.zeros(count), displacement=np.zeros(count), fell=np.zeros(count, bool),
            total=np.full(count, np.nan), settled=np.zeros(count, bool), accepted=np.zeros(count, bool),
            z_hat=np.zeros((count, 3)), x_hat=np.zeros((count, 3)), spheres_touching=np.zeros(count, int),
        )


def sample_poses(rng, count: int = DEFAULT_COUNT, n_joints: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Uniform orientations and joint angles in [-pi, pi], as ``(quat, q)`` arrays."""
    if count < 1:
        raise ValueError("count must be positive")
    return random_poses(rng, count, n_joints)


def pose_list(quat: np.ndarray, q: np.ndarray) -> list[Pose]:
    return [Pose(quat[i].copy(), q[i].copy()) for i in range(len(quat))]


def pose_score(area, displacement, fell, weights: PoseWeights = PoseWeights()):
    return weights.area * np.asarray(area) + weights.displacement * np.asarray(displacement) \
        - weights.fall_penalty * np.asarray(fell, dtype=float)


# ---------------------------------------------------------------------------
# Symmetry constraints
# ---------------------------------------------------------------------------


def leg_pairs(tree: ConfigTree) -> tuple[list[tuple[int, int]], list[int]]:
    """Mirror-docked sibling pairs and the non-root modules left unpaired."""
    pairs: list[tuple[int, int]] = []
    taken: set[int] = set()
    for i, ci in enumerate(tree.connections):
        for j in range(i + 1, len(tree.connections)):
            cj = tree.connections[j]
            a, b = i + 1, j + 1
            if a in taken or b in taken or ci.parent_module != cj.parent_module:
                continue
            if ci.parent_dock != cj.parent_dock and MIRROR_DOCK[ci.parent_dock] == cj.parent_dock:
                pairs.append((a, b))
                taken.update((a, b))
    unpaired = [m for m in range(1, tree.n_modules) if m not in taken]
    return pairs, unpaired


def tree_allows_symmetry(tree: ConfigTree) -> bool:
    return len(leg_pairs(tree)[1]) <= 1


def symmetric_repose(tree: ConfigTree, q: np.ndarray) -> np.ndarray:
    """Pin the root joint at zero and give each leg pair a shared |angle|.

    The second leg keeps its own sign and takes the first leg's magnitude.
    """
    q = np.array(q, dtype=float, copy=True)
    q[..., 0] = 0.0
    for a, b in leg_pairs(tree)[0]:
        sign = np.where(q[..., b] < 0, -1.0, 1.0)
        q[..., b] = sign * np.abs(q[..., a])
    return q


def symmetry_clauses(tree: ConfigTree, q: np.ndarray, spheres_touching: int) -> dict:
    """The four constraints checked one by one for a single evaluated pose."""
    q = np.asarray(q, dtype=float)
    pairs, unpaired = leg_pairs(tree)
    return {
        "root_zero": bool(q[0] == 0.0),
        "at_most_one_unpaired": len(unpaired) <= 1,
        "pairs_share_abs_angle": all(abs(q[a]) == abs(q[b]) for a, b in pairs),
        "spheres_clear": int(spheres_touching) == 0,
    }


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def make_simulator(tree: ConfigTree, config: SimConfig = SimConfig(), geom: ModuleGeometry = DEFAULT_GEOMETRY,
                   gains: PDGains = PDGains(), motor: MotorModel = MotorModel()) -> Simulator:
    return Simulator(ArticulatedSystem.from_tree(tree, geom), config, motor=motor, gains=gains)


def score_poses(tree: ConfigTree, quat: np.ndarray, q: np.ndarray, config: SimConfig = SimConfig(),
                weights: PoseWeights = PoseWeights(), probe: ProbeConfig = ProbeConfig(),
                use_symmetry: bool = False, chunk: int = DEFAULT_CHUNK, sim: Simulator | None = None,
                progress=None, xy=None) -> PoseScores:
    """Settle, measure and probe every pose; returns per-pose scores.

    ``xy`` places every pose at a horizontal offset; scores do not depend on it.
    """
    quat = np.atleast_2d(np.asarray(quat, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if len(quat) != len(q):
        raise ValueError("quat and q must have the same length")
    if q.shape[1] != tree.n_modules:
        raise ValueError(f"expected {tree.n_modules} joint angles per pose, got {q.shape[1]}")
    sim = sim or make_simulator(tree, config)
    count = len(q)
    out = PoseScores.empty(count)
    if use_symmetry:
        if not tree_allows_symmetry(tree):
            return out
        q = symmetric_repose(tree, q)
    for start in range(0, count, chunk):
        idx = np.arange(start, min(start + chunk, count))
        _score_chunk(sim, quat[idx], q[idx], weights, probe, use_symmetry, out, idx, xy)
        if progress is not None:
            progress(idx[-1] + 1, count)
    return out


def _score_chunk(sim, quat, q, weights, probe, use_symmetry, out: PoseScores, idx, xy=None):
    rest = settle(sim, sim.initial_state(quat, q, xy=xy), targets=q)
    if (~rest.converged).any():
        log.debug("%d of %d poses hit the settle cap", int((~rest.converged).sum()), len(q))
    st = rest.state
    out.settled[idx] = rest.converged
    touching = sim.spheres_touching(st, tol=SPHERE_CLEARANCE)
    out.spheres_touching[idx] = touching
    accept = np.ones(len(q), dtype=bool)
    if use_symmetry:
        accept = touching == 0
    out.accepted[idx] = accept
    if not accept.any():
        return
    keep = np.nonzero(accept)[0]
    st = st.take(keep)
    z_hat = -sim.projected_gravity(st)
    area = state_support_area(sim, st, tol=SPHERE_CLEARANCE)
    ro = rollout_openloop(sim, st, q[keep], amplitude=probe.amplitude, freq=probe.freq, steps=probe.steps,
                          dt=probe.dt, z_hat=z_hat, epsilon=probe.epsilon)
    disp = ro.displacement
    horiz = np.linalg.norm(disp[:, :2], axis=1)
    fwd_world = np.zeros((len(keep), 3))
    moved = horiz > 0
    fwd_world[moved, :2] = disp[moved, :2] / horiz[moved, None]
    # express the forward direction in the settled root frame
    R0 = quat_to_matrix(st.quat)
    x_hat = np.einsum("bji,bj->bi", R0, fwd_world)
    fell = ro.fell
    rows = idx[keep]
    out.area[rows] = area
    out.displacement[rows] = horiz
    out.fell[rows] = fell
    out.total[rows] = pose_score(area, horiz, fell, weights)
    out.z_hat[rows] = z_hat
    out.x_hat[rows] = x_hat


def score_pose(tree: ConfigTree, pose: Pose, config: SimConfig = SimConfig(), weights: PoseWeights = PoseWeights(),
               probe: ProbeConfig = ProbeConfig()) -> PoseScores:
    return score_poses(tree, pose.quat[None], pose.joint_angles[None], config, weights, probe, chunk=1)


@dataclass
class PoseResult:
    tree: ConfigTree
    seed: int | None
    weights: PoseWeights
    quat: np.ndarray
    q: np.ndarray
    scores: PoseScores
    best_index: int | None
    use_symmetry: bool = False
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @property
    def best(self) -> Pose | None:
        if self.best_index is None:
            return None
        i = self.best_index
        return Pose(self.quat[i].copy(), self.q[i].copy(), self.scores.x_hat[i].copy(), self.scores.z_hat[i].copy())

    @property
    def best_total(self) -> float:
        return float("nan") if self.best_index is None else float(self.scores.total[self.best_index])

    def to_json(self) -> str:
        best = self.best
        rec = {
            "design": format_seq(encode_tree(self.tree)),
            "seed": self.seed,
            "weights": asdict(self.weights),
            "probe": asdict(self.probe),
            "use_symmetry": self.use_symmetry,
            "scores": [None if np.isnan(t) else float(t) for t in self.scores.total],
            "fell": self.scores.fell.astype(int).tolist(),
            "best_index": self.best_index,
            "best": None if best is None else best.to_dict(),
        }
        return json.dumps(rec)


def select_best(total: np.ndarray) -> int | None:
    """Index of the highest score; the lowest index wins ties, NaN entries never win."""
    t = np.where(np.isnan(total), -np.inf, total)
    if not np.isfinite(t).any():
        return None
    return int(np.argmax(t))


def optimize_pose(tree: ConfigTree, seed=0, count: int = DEFAULT_COUNT, use_symmetry: bool = False,
                  config: SimConfig = SimConfig(), weights: PoseWeights = PoseWeights(),
                  probe: ProbeConfig = ProbeConfig(), chunk: int = DEFAULT_CHUNK, progress=None) -> PoseResult:
    """Sample ``count`` poses from ``seed`` and return the best one with all scores."""
    quat, q = sample_poses(seed, count, tree.n_modules)
    if use_symmetry:
        q = symmetric_repose(tree, q)
    scores = score_poses(tree, quat, q, config, weights, probe, use_symmetry, chunk, progress=progress)
    return PoseResult(tree, seed if isinstance(seed, (int, np.integer)) else None, weights, quat, q, scores,
                      select_best(scores.total), use_symmetry, probe)


def octant_counts(quat: np.ndarray) -> np.ndarray:
    """Counts of rotation axes per octant (sign pattern of x, y, z)."""
    q = np.asarray(quat, dtype=float)
    q = q * np.where(q[:, :1] < 0, -1.0, 1.0)  # canonical hemisphere
    axis = q[:, 1:]
    code = (axis[:, 0] > 0).astype(int) * 4 + (axis[:, 1] > 0).astype(int) * 2 + (axis[:, 2] > 0).astype(int)
    return np.bincount(code, minlength=8)


def batch_counts(values: Sequence[int]) -> dict:
    return {int(v): int(c) for v, c in zip(*np.unique(values, return_counts=True))}
