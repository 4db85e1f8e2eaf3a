"""Reward terms, action and observation pipelines, and training-time randomization.

Every reward function here is pure: the same inputs give bit-identical
outputs. Vectors are plain numpy arrays expressed in the root module's body
frame unless a docstring says otherwise.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import signal

from .geometry import DEFAULT_GEOMETRY, ModuleGeometry
from .simcore import PDGains, SimConfig, is_fallen

TASKS = ("roll", "turn", "walk", "selfright", "jumpturn")

WALK_WEIGHTS = {
    "forward": 0.6,
    "walk_turn": 0.2,
    "action": -0.1,
    "fall": -0.02,
    "motor_vel": -0.01,
    "motor_acc": -2e-6,
}
JUMPTURN_WEIGHTS = {"upward": 0.2, "pose": 1.0, "height": 1.0, "jump": 100.0, "jump_turn": 1.0}
SINGLE_WEIGHTS = {"roll": {"roll": 1.0, "action": -0.1}, "turn": {"turn": 1.0, "action": -0.1}}
SELFRIGHT_WEIGHTS = {"pose": 1.0, "action": -0.02}

# desired jump height per design, metres
DESIRED_HEIGHT = {"quadruped5": 0.6, "bo3": 0.5, "bo4": 0.8, "bo5": 0.7}
# self-righting activation window per design, seconds
SELFRIGHT_ACTIVATION = {"bo3": 1.5, "bo4": 5.0, "bo5": 3.0, "quadruped5": 3.0}
JUMP_ACTIVATION = 0.75

ACTION_CLIP = {"walk": 1.2, "jumpturn": 2.5, "selfright": math.pi, "roll": math.pi, "turn": math.pi}

OBS_NOISE_STD = 0.2
ACTION_NOISE_STD = 0.1
FRAME_STACK = 4
CONTROL_DT = 0.05


@dataclass(frozen=True)
class RewardBundle:
    """Weights, targets and tolerances for one task."""

    task: str
    weights: Mapping[str, float]
    omega_roll: float = 4.0
    omega_turn: float = 3.0
    v_star: float = 0.6
    omega_z_star: float = 0.0
    h_star: float = 0.6
    omega_jump: float = 2.0
    sigma_forward: float = 0.15
    sigma_walk_turn: float = 0.15
    sigma_joint: float = 10.0
    theta_dot_limit: float = 10.0
    motor_vel_clip: float = 1e5
    dt: float = CONTROL_DT

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if min(self.sigma_forward, self.sigma_walk_turn, self.sigma_joint) <= 0:
            raise ValueError("tolerances must be positive")
        if self.omega_roll <= 0 or self.omega_turn <= 0:
            raise ValueError("target speeds must be positive")

    @classmethod
    def standard(cls, task: str, **overrides) -> "RewardBundle":
        weights = {
            "roll": SINGLE_WEIGHTS["roll"],
            "turn": SINGLE_WEIGHTS["turn"],
            "walk": WALK_WEIGHTS,
            "selfright": SELFRIGHT_WEIGHTS,
            "jumpturn": JUMPTURN_WEIGHTS,
        }[task]
        return cls(task, dict(weights), **overrides)


def weighted_sum(terms: Mapping[str, float], weights: Mapping[str, float]) -> float:
    total = 0.0
    for name, w in weights.items():
        total += w * terms[name]
    return total


# ---------------------------------------------------------------------------
# Single module
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RollingFrame:
    psi: float
    bisector: np.ndarray
    rolling_axis: np.ndarray


def rolling_frame(theta: float, geom: ModuleGeometry = DEFAULT_GEOMETRY) -> RollingFrame:
    """Link-angle bisector and rolling axis in the module frame at joint angle ``theta``.

    With link directions ``a`` and ``b``, ``a + b`` is proportional to
    ``(sin(theta/2), -cos(theta/2), 0)``; using that closed form keeps the
    bisector defined where the links are anti-parallel (``theta = 0``).
    """
    a = geom.link_axis
    c, s = math.cos(theta), math.sin(theta)
    b = np.array([-a[0] * c, -a[0] * s, -a[2]])
    psi = math.acos(float(np.clip(a @ b, -1.0, 1.0)))
    half = 0.5 * theta
    bis = np.array([math.sin(half), -math.cos(half), 0.0])
    diff = a - b
    return RollingFrame(psi, bis, diff / np.linalg.norm(diff))


def r_roll(omega, frame: RollingFrame, omega_star: float = 4.0) -> float:
    if omega_star <= 0:
        raise ValueError("omega_star must be positive")
    omega_f = float(np.dot(omega, frame.rolling_axis))
    return min(1.0, omega_f / omega_star)


def r_turn(g_p, omega, omega_turn_star: float = 3.0) -> float:
    return min(1.0, float(np.dot(g_p, omega)) / omega_turn_star)


def r_turn_from_speed(omega_turn: float, omega_turn_star: float = 3.0) -> float:
    return min(1.0, omega_turn / omega_turn_star)


def r_action(a_prev, a_curr) -> float:
    d = np.asarray(a_prev, dtype=float) - np.asarray(a_curr, dtype=float)
    return float(d @ d)


def single_module_reward(task: str, main_term: float, action_term: float) -> float:
    if task not in SINGLE_WEIGHTS:
        raise ValueError(f"single-module task must be roll or turn, got {task!r}")
    w = SINGLE_WEIGHTS[task]
    return weighted_sum({task: main_term, "action": action_term}, w)


# ---------------------------------------------------------------------------
# Multi-module tasks
# ---------------------------------------------------------------------------


def r_forward(v, x_hat, bundle: RewardBundle) -> float:
    v_fwd = float(np.dot(v, x_hat))
    return math.exp(-((bundle.v_star - v_fwd) ** 2) / bundle.sigma_forward)


def r_walk_turn(omega, g_p, bundle: RewardBundle) -> float:
    omega_z = float(np.dot(omega, g_p))
    return math.exp(-((bundle.omega_z_star - omega_z) ** 2) / bundle.sigma_walk_turn)


def r_motor_vel(theta_dot, bundle: RewardBundle) -> float:
    excess = float(np.sum(np.abs(theta_dot) - bundle.theta_dot_limit))
    return min(max(excess, 0.0), bundle.motor_vel_clip)


def r_motor_acc(theta_dot_prev, theta_dot, bundle: RewardBundle) -> float:
    acc = (np.asarray(theta_dot_prev, dtype=float) - np.asarray(theta_dot, dtype=float)) / bundle.dt
    return float(acc @ acc)


def r_joint(theta, theta0, bundle: RewardBundle) -> float:
    d = np.asarray(theta0, dtype=float) - np.asarray(theta, dtype=float)
    return math.exp(-float(d @ d) / bundle.sigma_joint)


@dataclass(frozen=True)
class WalkInputs:
    """Everything the walking reward reads at one control step."""

    v: np.ndarray  # mean module velocity, world frame
    x_hat: np.ndarray
    omega: np.ndarray
    g_p: np.ndarray
    spheres_touching: int
    theta_dot: np.ndarray
    theta_dot_prev: np.ndarray
    a_prev: np.ndarray
    a_curr: np.ndarray


def walking_terms(inp: WalkInputs, bundle: RewardBundle) -> dict:
    return {
        "forward": r_forward(inp.v, inp.x_hat, bundle),
        "walk_turn": r_walk_turn(inp.omega, inp.g_p, bundle),
        "action": r_action(inp.a_prev, inp.a_curr),
        "fall": float(inp.spheres_touching),
        "motor_vel": r_motor_vel(inp.theta_dot, bundle),
        "motor_acc": r_motor_acc(inp.theta_dot_prev, inp.theta_dot, bundle),
    }


def walking_reward(inp: WalkInputs, bundle: RewardBundle | None = None) -> tuple[float, dict]:
    bundle = bundle or RewardBundle.standard("walk")
    terms = walking_terms(inp, bundle)
    return weighted_sum(terms, bundle.weights), terms


def selfright_reward(d: float, theta, theta0, a_prev, a_curr,
                     bundle: RewardBundle | None = None) -> tuple[float, dict]:
    bundle = bundle or RewardBundle.standard("selfright")
    terms = {"pose": d * r_joint(theta, theta0, bundle), "action": r_action(a_prev, a_curr)}
    return weighted_sum(terms, bundle.weights), terms


def jumpturn_terms(command: int, d: float, theta, theta0, height: float, airborne: bool,
                   omega_z: float, bundle: RewardBundle) -> dict:
    if command not in (0, 1):
        raise ValueError(f"jump command must be 0 or 1, got {command!r}")
    if command == 1:
        return {
            "upward": d,
            "pose": 0.0,
            "height": min(height, bundle.h_star),
            "jump": 1.0 if airborne else 0.0,
            "jump_turn": min(omega_z, bundle.omega_jump),
        }
    return {
        "upward": d,
        "pose": d * r_joint(theta, theta0, bundle),
        "height": 0.0,
        "jump": 0.0,
        "jump_turn": math.exp(-((bundle.omega_z_star - omega_z) ** 2) / bundle.sigma_walk_turn),
    }


def jumpturn_reward(command: int, d: float, theta, theta0, height: float, airborne: bool, omega_z: float,
                    bundle: RewardBundle | None = None) -> tuple[float, dict]:
    bundle = bundle or RewardBundle.standard("jumpturn")
    terms = jumpturn_terms(command, d, theta, theta0, height, airborne, omega_z, bundle)
    return weighted_sum(terms, bundle.weights), terms


def walking_terminated(d: float, epsilon: float = 0.1) -> bool:
    """Walking episodes stop early exactly when the body has fallen."""
    return bool(is_fallen(d, epsilon))


def reward_log_record(step: int, terms: Mapping[str, float], total: float) -> str:
    rec = {"step": int(step), "total": float(total)}
    rec.update({k: float(v) for k, v in terms.items()})
    return json.dumps(rec, sort_keys=True)


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------


class ActionFilter:
    """Second-order low-pass Butterworth biquad with per-joint state."""

    def __init__(self, n_joints: int, cutoff: float = 3.0, rate: float = 20.0, order: int = 2):
        b, a = signal.butter(order, cutoff, btype="low", fs=rate)
        if len(b) != 3:
            raise ValueError("only a single biquad is supported")
        self.b = b
        self.a = a
        self.z = np.zeros((2, n_joints))

    def reset(self, value=None):
        self.z[:] = 0.0
        if value is not None:
            # start at steady state for a held input
            x = np.asarray(value, dtype=float)
            zi = signal.lfilter_zi(self.b, self.a)
            self.z = zi[:, None] * x[None, :]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        b, a, z = self.b, self.a, self.z
        y = b[0] * x + z[0]
        z0 = b[1] * x - a[1] * y + z[1]
        z1 = b[2] * x - a[2] * y
        self.z = np.stack([z0, z1])
        return y


def action_pipeline(raw, task: str, neutral_pose, action_filter: ActionFilter | None = None) -> np.ndarray:
    """Joint targets from a raw policy output.

    The raw output is an offset from the neutral pose. Walking offsets pass the
    low-pass filter first; every task then clips the offset to its limit.
    """
    if task not in ACTION_CLIP:
        raise ValueError(f"unknown task {task!r}")
    offset = np.asarray(raw, dtype=float)
    if task == "walk":
        if action_filter is None:
            raise ValueError("walking actions need an ActionFilter")
        offset = action_filter(offset)
    lim = ACTION_CLIP[task]
    return np.asarray(neutral_pose, dtype=float) + np.clip(offset, -lim, lim)


def noisy_action(rng: np.random.Generator, action, std: float = ACTION_NOISE_STD) -> np.ndarray:
    a = np.asarray(action, dtype=float)
    return a + rng.normal(0.0, std, a.shape)


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


def observation_frame(g_p, omega, theta, theta_dot, prev_action) -> np.ndarray:
    return np.concatenate([
        np.asarray(g_p, float), np.asarray(omega, float), np.cos(np.asarray(theta, float)),
        np.asarray(theta_dot, float), np.asarray(prev_action, float),
    ])


class ObservationBuilder:
    """Keeps the last four frames and emits the stacked observation."""

    def __init__(self, frames: int = FRAME_STACK, noise_std: float = OBS_NOISE_STD, jump_command: bool = False):
        self.frames: deque = deque(maxlen=frames)
        self.noise_std = noise_std
        self.jump_command = jump_command

    def reset(self):
        self.frames.clear()

    def push(self, frame) -> None:
        frame = np.asarray(frame, dtype=float)
        if not self.frames:
            for _ in range(self.frames.maxlen - 1):
                self.frames.append(frame.copy())
        self.frames.append(frame)

    def observe(self, rng: np.random.Generator | None = None, command: int | None = None) -> np.ndarray:
        if not self.frames:
            raise ValueError("no frames pushed yet")
        obs = np.concatenate(list(self.frames))
        if rng is not None and self.noise_std > 0:
            obs = obs + rng.normal(0.0, self.noise_std, obs.shape)
        if self.jump_command:
            if command not in (0, 1):
                raise ValueError("jump-turn observations need a 0/1 command")
            obs = np.append(obs, float(command))
        return obs


def frame_from_sim(sim, state, index: int, prev_action) -> np.ndarray:
    """Observation frame for item ``index`` of a batched simulator state."""
    g_p = sim.projected_gravity(state)[index]
    omega = sim.body_angular_velocity(state)[index]
    return observation_frame(g_p, omega, state.q[index], state.qd[index], prev_action)


# ---------------------------------------------------------------------------
# Randomization and schedules
# ---------------------------------------------------------------------------

SINGLE_RANGES = {
    "motor_mass": (0.45, 0.6),
    "total_mass": (0.7, 1.3),  # times the agent mass
    "friction": (0.6, 0.8),
    "kp": (4.0, 8.0),
    "kd": (0.1, 0.3),
    "leg_length": (0.22, 0.28),
    "motor_offset": (-0.0025, 0.0025),
    "joint_damping": (0.02, 0.06),
    "armature": (0.01, 0.02),
}
PHASE_RANGES = {
    1: {"friction": (0.8, 1.2), "total_mass": (0.9, 1.1)},
    2: {"friction": (0.4, 0.8), "total_mass": (0.8, 1.2)},
}


@dataclass(frozen=True)
class DomainParams:
    motor_mass: float
    total_mass: float
    friction: float
    kp: float
    kd: float
    leg_length: float
    motor_offset: float
    joint_damping: float
    armature: float

    def sim_config(self, base: SimConfig = SimConfig()) -> SimConfig:
        return replace(base, friction_coeff=self.friction, joint_damping=self.joint_damping, armature=self.armature)

    def gains(self) -> PDGains:
        return PDGains(self.kp, self.kd)

    def geometry(self, base: ModuleGeometry = DEFAULT_GEOMETRY) -> ModuleGeometry:
        return replace(base, link_length=self.leg_length)


def randomization_ranges(phase: int | None, agent_mass: float) -> dict:
    """Absolute sampling bounds; ``phase=None`` selects the single-module table."""
    ranges = dict(SINGLE_RANGES)
    if phase is not None:
        if phase not in PHASE_RANGES:
            raise ValueError(f"phase must be 1 or 2, got {phase!r}")
        ranges.update(PHASE_RANGES[phase])
    lo, hi = ranges["total_mass"]
    ranges["total_mass"] = (lo * agent_mass, hi * agent_mass)
    return ranges


def sample_domain_randomization(rng, phase: int | None, agent_mass: float) -> DomainParams:
    rng = np.random.default_rng(rng)
    ranges = randomization_ranges(phase, agent_mass)
    names = [f for f in DomainParams.__dataclass_fields__]
    return DomainParams(**{n: float(rng.uniform(*ranges[n])) for n in names})


def curriculum_weight(step: int, switch: int = 200_000) -> float:
    """Angular-velocity reward weight over training."""
    return 0.2 if step < switch else 0.4


def stochastic_jump_policy(rng, n_joints: int = 1, limit: float = 3.0) -> np.ndarray:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return rng.uniform(-limit, limit, n_joints)


@dataclass
class JumpCommand:
    """Training-time jump command: resampled every 100 steps, reset at target height.

    On hardware the height is not observed, so ``use_timer`` switches the reset
    to a fixed activation window instead.
    """

    h_star: float
    resample_every: int = 100
    activation: float = JUMP_ACTIVATION
    use_timer: bool = False
    value: int = 0
    _active_for: float = field(default=0.0, repr=False)

    def update(self, step: int, rng: np.random.Generator, height: float, dt: float = CONTROL_DT) -> int:
        if step % self.resample_every == 0:
            self.value = int(rng.integers(0, 2))
            self._active_for = 0.0
        if self.value == 1:
            self._active_for += dt
            done = self._active_for >= self.activation if self.use_timer else height >= self.h_star
            if done:
                self.value = 0
        return self.value


def mean_velocity(points_prev: np.ndarray, points: np.ndarray, dt: float = CONTROL_DT) -> np.ndarray:
    """Velocity of the average module position between two control steps."""
    return (np.mean(points, axis=-2) - np.mean(points_prev, axis=-2)) / dt


def stack_terms(records: Sequence[Mapping[str, float]]) -> dict:
    keys = records[0].keys() if records else ()
    return {k: np.array([r[k] for r in records]) for k in keys}
