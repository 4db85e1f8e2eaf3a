"""Batched articulated rigid-body simulator with penalty ground contact.

A metamachine of ``n`` modules is a tree of ``n + 1`` rigid bodies: module
halves welded through docks, connected by the ``n`` motorized hinges. The
state is stored in reduced coordinates (root pose, joint angles and their
rates) for a whole batch of independent systems that share one topology,
which keeps every operation a vectorized numpy call.

Each physics step solves the linearly-implicit system

    (M + dt J^T D J + dt C) u' = M u + dt (Q - h + J^T f0)

where ``D`` collects contact normal stiffness/damping and adaptive viscous
friction, ``C`` is joint damping and ``Q`` the (explicit) PD torques. Contacts
with negative normal force are released and friction coefficients rescaled
to the Coulomb cone over a few re-solve passes.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import (
    DEFAULT_GEOMETRY,
    FLIP_Y,
    ModuleGeometry,
    invert_transform,
    make_transform,
    mate_transform,
    quat_from_rotvec,
    quat_mul,
    quat_to_matrix,
    random_quaternions,
)
from .morphology import ConfigTree, check_structure, dock_half

GRAVITY_DIR = np.array([0.0, 0.0, -1.0])
FALL_EPSILON = 0.1

CONTACT_SPHERE = 0
CONTACT_LINK = 1
CONTACT_STUB = 2


class SimulationDivergedError(RuntimeError):
    """Raised when the state becomes non-finite; carries the last finite state."""

    def __init__(self, message: str, last_state: "SimState"):
        super().__init__(message)
        self.last_state = last_state


@dataclass(frozen=True)
class SimConfig:
    control_dt: float = 0.05
    physics_dt: float = 0.002
    gravity: float = 9.81
    contact_stiffness: float = 2.0e4
    contact_damping: float = 150.0
    friction_coeff: float = 0.8
    slip_velocity: float = 1e-4
    joint_damping: float = 0.0
    armature: float = 0.01
    contact_passes: int = 4
    settle_ke: float = 1e-4
    settle_cap: float = 3.0
    settle_hold: float = 0.1
    settle_min_time: float = 0.1
    drop_clearance: float = 0.005

    def __post_init__(self):
        if self.contact_stiffness <= 0 or self.contact_damping <= 0:
            raise ValueError("contact stiffness and damping must be positive")
        if self.physics_dt <= 0 or self.control_dt <= 0:
            raise ValueError("time steps must be positive")
        if abs(self.substeps(self.control_dt) * self.physics_dt - self.control_dt) > 1e-9:
            raise ValueError("physics_dt must divide control_dt")

    def substeps(self, dt: float) -> int:
        return max(1, int(round(dt / self.physics_dt)))


@dataclass(frozen=True)
class MotorModel:
    """Torque-speed envelope: flat up to ``rated_speed``, linear to zero at ``max_speed``."""

    peak_torque: float = 12.0
    rated_speed: float = 15.0
    max_speed: float = 30.0

    def __post_init__(self):
        if not 0 < self.rated_speed < self.max_speed:
            raise ValueError("need 0 < rated_speed < max_speed")

    def limit(self, speed):
        s = np.abs(np.asarray(speed, dtype=float))
        frac = np.clip((self.max_speed - s) / (self.max_speed - self.rated_speed), 0.0, 1.0)
        return self.peak_torque * frac


@dataclass(frozen=True)
class PDGains:
    kp: float = 12.0
    kd: float = 0.4

    def __post_init__(self):
        if self.kp < 0 or self.kd < 0:
            raise ValueError("gains must be non-negative")


def pd_torque(target, theta, theta_dot, gains: PDGains = PDGains(), motor: MotorModel = MotorModel()):
    """PD torque with damping on measured velocity, clipped to the motor envelope."""
    raw = gains.kp * (np.asarray(target) - theta) - gains.kd * np.asarray(theta_dot)
    lim = motor.limit(theta_dot)
    return np.clip(raw, -lim, lim)


# ---------------------------------------------------------------------------
# Terrain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Heightfield:
    """Piecewise-constant terrain tile; heights outside the tile are zero."""

    heights: np.ndarray
    cell: float = 0.1
    origin: tuple[float, float] = (0.0, 0.0)

    def height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        i = np.floor((x - self.origin[0]) / self.cell).astype(int)
        j = np.floor((y - self.origin[1]) / self.cell).astype(int)
        nx, ny = self.heights.shape
        inside = (i >= 0) & (i < nx) & (j >= 0) & (j < ny)
        return np.where(inside, self.heights[np.clip(i, 0, nx - 1), np.clip(j, 0, ny - 1)], 0.0)


def random_heightfield(rng, size: int = 40, cell: float = 0.1, max_height: float = 0.03,
                       obstacle_fraction: float = 0.3) -> Heightfield:
    """Flat tile scattered with box obstacles of uniform random height."""
    rng = np.random.default_rng(rng)
    heights = np.where(rng.random((size, size)) < obstacle_fraction, rng.uniform(0.0, max_height, (size, size)), 0.0)
    half = 0.5 * size * cell
    return Heightfield(heights, cell, (-half, -half))


# ---------------------------------------------------------------------------
# System description
# ---------------------------------------------------------------------------


@dataclass
class Stub:
    """Residual piece of a severed link, welded to one half of a module."""

    module: int
    half: int
    start: np.ndarray  # in the half frame
    end: np.ndarray
    mass: float
    radius: float = 0.02


@dataclass
class ArticulatedSystem:
    """Mass properties, hinge layout and contact spheres of a body tree.

    Bodies are topologically ordered (parent index < child index). Body ``b``
    (``b >= 1``) hangs from ``parent[b]`` through hinge ``joint[b]``; its frame
    is ``P * Trans(anchor) Rot(axis, q) Trans(-anchor) * X0``.
    """

    mass: np.ndarray
    com: np.ndarray
    inertia: np.ndarray
    parent: np.ndarray
    joint: np.ndarray
    axis: np.ndarray
    anchor: np.ndarray
    x0_R: np.ndarray
    x0_p: np.ndarray
    contact_body: np.ndarray
    contact_pos: np.ndarray
    contact_radius: np.ndarray
    contact_module: np.ndarray
    contact_kind: np.ndarray
    n_joints: int
    half_body: np.ndarray | None = None  # (n, 2)
    half_offset: np.ndarray | None = None  # (n, 2, 4, 4) half frame in its body frame
    tree: ConfigTree | None = None

    def __post_init__(self):
        nb = len(self.mass)
        self.ancestors = np.zeros((nb, nb), dtype=bool)  # ancestors[b, h]: hinge into h moves b
        for b in range(1, nb):
            h = b
            while h > 0:
                self.ancestors[b, h] = True
                h = int(self.parent[h])
        self._K = np.array([_skew(a) for a in self.axis])
        self._K2 = self._K @ self._K

    @property
    def n_bodies(self) -> int:
        return len(self.mass)

    @property
    def n_dof(self) -> int:
        return 6 + self.n_joints

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    @classmethod
    def single_body(cls, mass: float, inertia: np.ndarray, contact_pos: Sequence, contact_radius: Sequence) -> "ArticulatedSystem":
        contact_pos = np.atleast_2d(np.asarray(contact_pos, dtype=float))
        k = len(contact_pos)
        return cls(
            mass=np.array([float(mass)]), com=np.zeros((1, 3)), inertia=np.asarray(inertia, dtype=float).reshape(1, 3, 3),
            parent=np.array([-1]), joint=np.array([-1]), axis=np.zeros((1, 3)), anchor=np.zeros((1, 3)),
            x0_R=np.eye(3)[None], x0_p=np.zeros((1, 3)),
            contact_body=np.zeros(k, dtype=int), contact_pos=contact_pos,
            contact_radius=np.asarray(contact_radius, dtype=float).reshape(k),
            contact_module=np.full(k, -1), contact_kind=np.zeros(k, dtype=int), n_joints=0,
        )

    @classmethod
    def sphere(cls, radius: float = 0.07, mass: float = 0.98) -> "ArticulatedSystem":
        return cls.single_body(mass, 0.4 * mass * radius**2 * np.eye(3), [[0.0, 0.0, 0.0]], [radius])

    @classmethod
    def from_tree(cls, tree: ConfigTree, geom: ModuleGeometry = DEFAULT_GEOMETRY, stubs: Sequence[Stub] = (),
                  link_lengths: np.ndarray | None = None) -> "ArticulatedSystem":
        return _build_tree_system(tree, geom, stubs, link_lengths)


def _skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _half_mass_properties(geom: ModuleGeometry, length: float):
    """Mass, com and inertia (about com) of one half in its own frame.

    Each half carries half of the sphere (as a centred ball share) plus one
    link modelled as a solid rod from the sphere surface to the tip.
    """
    u = geom.link_axis
    ms = 0.5 * geom.sphere_mass
    ml = geom.link_mass * length / geom.link_length
    rod = length - geom.sphere_radius
    c_link = 0.5 * (geom.sphere_radius + length) * u
    I_ball = 0.4 * ms * geom.sphere_radius**2 * np.eye(3)
    I_rod = ml * rod**2 / 12.0 * (np.eye(3) - np.outer(u, u)) + 0.5 * ml * geom.link_radius**2 * np.outer(u, u)
    parts = [(ms, np.zeros(3), I_ball), (ml, c_link, I_rod)]
    return _combine(parts)


def _combine(parts):
    m = sum(p[0] for p in parts)
    c = sum(p[0] * p[1] for p in parts) / m
    I = np.zeros((3, 3))
    for mi, ci, Ii in parts:
        r = ci - c
        I += Ii + mi * (np.dot(r, r) * np.eye(3) - np.outer(r, r))
    return m, c, I


def _rod_properties(a: np.ndarray, b: np.ndarray, mass: float, radius: float):
    d = b - a
    length = float(np.linalg.norm(d))
    u = d / length if length > 0 else np.array([0.0, 0.0, 1.0])
    I = mass * length**2 / 12.0 * (np.eye(3) - np.outer(u, u)) + 0.5 * mass * radius**2 * np.outer(u, u)
    return mass, 0.5 * (a + b), I


def _build_tree_system(tree: ConfigTree, geom: ModuleGeometry, stubs: Sequence[Stub], link_lengths) -> ArticulatedSystem:
    check_structure(tree)
    n = tree.n_modules
    lengths = np.full((n, 2), geom.link_length) if link_lengths is None else np.asarray(link_lengths, dtype=float)
    welds: dict[tuple[int, int], list[tuple[tuple[int, int], np.ndarray]]] = {(m, h): [] for m in range(n) for h in (0, 1)}
    for k, c in enumerate(tree.connections):
        a = (c.parent_module, dock_half(c.parent_dock))
        b = (k + 1, dock_half(c.child_dock))
        T = mate_transform(c.parent_dock, c.child_dock, c.orientation, geom)
        welds[a].append((b, T))
        welds[b].append((a, invert_transform(T)))

    flip = make_transform(FLIP_Y, np.zeros(3))
    half_body = np.full((n, 2), -1, dtype=int)
    half_offset = np.zeros((n, 2, 4, 4))
    parent, joint, axis, anchor, x0 = [-1], [-1], [np.zeros(3)], [np.zeros(3)], [np.eye(4)]

    def flood(body: int, entry: tuple[int, int]):
        half_body[entry] = body
        half_offset[entry] = np.eye(4)
        stack = [entry]
        while stack:
            h = stack.pop()
            for other, T in welds[h]:
                if half_body[other] < 0:
                    half_body[other] = body
                    half_offset[other] = half_offset[h] @ T
                    stack.append(other)

    flood(0, (0, 0))
    queue = deque([0])
    while queue:
        body = queue.popleft()
        for m in range(n):
            for h in (0, 1):
                if half_body[m, h] != body or half_body[m, 1 - h] >= 0:
                    continue
                child = len(parent)
                E = half_offset[m, h]
                parent.append(body)
                joint.append(m)
                axis.append(E[:3, 2].copy())
                anchor.append(E[:3, 3].copy())
                x0.append(E @ flip)
                flood(child, (m, 1 - h))
                queue.append(child)
    nb = len(parent)
    assert nb == n + 1 and np.all(half_body >= 0)

    body_parts: list[list] = [[] for _ in range(nb)]
    c_body, c_pos, c_rad, c_mod, c_kind = [], [], [], [], []
    u = geom.link_axis
    for m in range(n):
        for h in (0, 1):
            b = half_body[m, h]
            E = half_offset[m, h]
            R, p = E[:3, :3], E[:3, 3]
            mh, ch, Ih = _half_mass_properties(geom, lengths[m, h])
            body_parts[b].append((mh, R @ ch + p, R @ Ih @ R.T))
            if h == 0:
                c_body.append(b); c_pos.append(p.copy()); c_rad.append(geom.sphere_radius)
                c_mod.append(m); c_kind.append(CONTACT_SPHERE)
            for s in (geom.sphere_radius, lengths[m, h] - geom.link_radius):
                c_body.append(b); c_pos.append(R @ (s * u) + p); c_rad.append(geom.link_radius)
                c_mod.append(m); c_kind.append(CONTACT_LINK)
    for st in stubs:
        b = half_body[st.module, st.half]
        E = half_offset[st.module, st.half]
        R, p = E[:3, :3], E[:3, 3]
        a_, b_ = R @ st.start + p, R @ st.end + p
        if st.mass > 0:
            body_parts[b].append(_rod_properties(a_, b_, st.mass, st.radius))
        c_body.append(b); c_pos.append(b_); c_rad.append(st.radius)
        c_mod.append(st.module); c_kind.append(CONTACT_STUB)

    mass = np.zeros(nb)
    com = np.zeros((nb, 3))
    inertia = np.zeros((nb, 3, 3))
    for b in range(nb):
        mass[b], com[b], inertia[b] = _combine(body_parts[b])
    x0 = np.array(x0)
    return ArticulatedSystem(
        mass=mass, com=com, inertia=inertia, parent=np.array(parent), joint=np.array(joint),
        axis=np.array(axis), anchor=np.array(anchor), x0_R=x0[:, :3, :3].copy(), x0_p=x0[:, :3, 3].copy(),
        contact_body=np.array(c_body), contact_pos=np.array(c_pos), contact_radius=np.array(c_rad),
        contact_module=np.array(c_mod), contact_kind=np.array(c_kind), n_joints=n,
        half_body=half_body, half_offset=half_offset, tree=tree,
    )


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass
class SimState:
    """Batch of simulator states; leading axis indexes independent systems."""

    pos: np.ndarray  # (B, 3) root body origin, world
    quat: np.ndarray  # (B, 4) root body orientation (w, x, y, z)
    q: np.ndarray  # (B, n) joint angles
    vel: np.ndarray  # (B, 3) root origin velocity, world
    omega: np.ndarray  # (B, 3) root angular velocity, world
    qd: np.ndarray  # (B, n) joint rates
    time: float = 0.0
    diverged: np.ndarray | None = None
    contact_force: np.ndarray | None = None  # (B, nc) last normal forces

    def __post_init__(self):
        if self.diverged is None:
            self.diverged = np.zeros(len(self.pos), dtype=bool)

    @property
    def batch(self) -> int:
        return len(self.pos)

    def copy(self) -> "SimState":
        return SimState(self.pos.copy(), self.quat.copy(), self.q.copy(), self.vel.copy(), self.omega.copy(),
                        self.qd.copy(), self.time, self.diverged.copy(),
                        None if self.contact_force is None else self.contact_force.copy())

    def take(self, idx) -> "SimState":
        return SimState(self.pos[idx], self.quat[idx], self.q[idx], self.vel[idx], self.omega[idx], self.qd[idx],
                        self.time, self.diverged[idx],
                        None if self.contact_force is None else self.contact_force[idx])

    def put(self, idx, other: "SimState") -> None:
        for name in ("pos", "quat", "q", "vel", "omega", "qd", "diverged"):
            getattr(self, name)[idx] = getattr(other, name)
        if other.contact_force is not None:
            if self.contact_force is None:
                self.contact_force = np.zeros((self.batch,) + other.contact_force.shape[1:])
            self.contact_force[idx] = other.contact_force

    def is_finite(self) -> np.ndarray:
        arrs = (self.pos, self.quat, self.q, self.vel, self.omega, self.qd)
        return np.all(np.concatenate([np.isfinite(a).reshape(self.batch, -1) for a in arrs], axis=1), axis=1)

    def generalized_velocity(self) -> np.ndarray:
        return np.concatenate([self.vel, self.omega, self.qd], axis=1)

    @classmethod
    def rest(cls, batch: int, n_joints: int) -> "SimState":
        quat = np.zeros((batch, 4))
        quat[:, 0] = 1.0
        z = np.zeros((batch, 3))
        return cls(z.copy(), quat, np.zeros((batch, n_joints)), z.copy(), z.copy(), np.zeros((batch, n_joints)))


@dataclass
class Kinematics:
    R: np.ndarray  # (B, nb, 3, 3)
    p: np.ndarray  # (B, nb, 3) body origins
    omega: np.ndarray  # (B, nb, 3)
    vel: np.ndarray  # (B, nb, 3) velocity of body origins
    axis_w: np.ndarray  # (B, nb, 3) hinge axis into each body (world)
    anchor_w: np.ndarray  # (B, nb, 3)
    acc: np.ndarray | None = None  # (B, nb, 3) velocity-product acceleration of origins
    alpha: np.ndarray | None = None


def _cross(a, b):
    return np.stack([
        a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
        a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
        a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
    ], axis=-1)


def _screw_displacement(rotvec, disp):
    """Displacement of a point moved by a constant twist, given its linear step."""
    theta = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    small = theta < 1e-8
    t = np.where(small, 1.0, theta)
    a = np.where(small, 0.5, (1.0 - np.cos(t)) / t**2)
    b = np.where(small, 1.0 / 6.0, (t - np.sin(t)) / t**3)
    c1 = np.cross(rotvec, disp)
    return disp + a * c1 + b * np.cross(rotvec, c1)


def _matvec(R, v):
    return np.einsum("...ij,...j->...i", R, v)


class Simulator:
    """Integrates a batch of states of one :class:`ArticulatedSystem`."""

    def __init__(self, system: ArticulatedSystem, config: SimConfig = SimConfig(), motor: MotorModel = MotorModel(),
                 gains: PDGains = PDGains(), terrain: Heightfield | None = None, dead_modules: Sequence[int] = ()):
        self.system = system
        self.config = config
        self.motor = motor
        self.gains = gains
        self.terrain = terrain
        self.torque_mask = np.ones(system.n_joints)
        for m in dead_modules:
            if not 0 <= m < system.n_joints:
                raise ValueError(f"dead module {m} out of range")
            self.torque_mask[m] = 0.0

    # -- kinematics -------------------------------------------------------

    def kinematics(self, state: SimState, with_bias: bool = False) -> Kinematics:
        sysm = self.system
        B, nb = state.batch, sysm.n_bodies
        R = np.empty((B, nb, 3, 3))
        p = np.empty((B, nb, 3))
        w = np.empty((B, nb, 3))
        v = np.empty((B, nb, 3))
        aw = np.zeros((B, nb, 3))
        ow = np.zeros((B, nb, 3))
        R[:, 0] = quat_to_matrix(state.quat)
        p[:, 0] = state.pos
        w[:, 0] = state.omega
        v[:, 0] = state.vel
        if with_bias:
            acc = np.zeros((B, nb, 3))
            alpha = np.zeros((B, nb, 3))
        for b in range(1, nb):
            P = sysm.parent[b]
            j = sysm.joint[b]
            qj = state.q[:, j][:, None, None]
            Rrel = np.eye(3) + np.sin(qj) * sysm._K[b] + (1.0 - np.cos(qj)) * sysm._K2[b]
            RP = R[:, P]
            R[:, b] = RP @ (Rrel @ sysm.x0_R[b])
            local = sysm.anchor[b] + _matvec(Rrel, sysm.x0_p[b] - sysm.anchor[b])
            p[:, b] = p[:, P] + _matvec(RP, local)
            a = _matvec(RP, sysm.axis[b])
            o = p[:, P] + _matvec(RP, sysm.anchor[b])
            aw[:, b], ow[:, b] = a, o
            qdj = state.qd[:, j][:, None]
            w[:, b] = w[:, P] + qdj * a
            vPo = v[:, P] + _cross(w[:, P], o - p[:, P])
            v[:, b] = v[:, P] + _cross(w[:, P], p[:, b] - p[:, P]) + qdj * _cross(a, p[:, b] - o)
            if with_bias:
                wPa = _cross(w[:, P], a)
                r = p[:, b] - p[:, P]
                acc[:, b] = (acc[:, P] + _cross(alpha[:, P], r) + _cross(w[:, P], v[:, b] - v[:, P])
                             + qdj * (_cross(wPa, p[:, b] - o) + _cross(a, v[:, b] - vPo)))
                alpha[:, b] = alpha[:, P] + qdj * wPa
        kin = Kinematics(R, p, w, v, aw, ow)
        if with_bias:
            kin.acc, kin.alpha = acc, alpha
        return kin

    def point_jacobian(self, kin: Kinematics, root_pos: np.ndarray, X: np.ndarray, bodies: np.ndarray) -> np.ndarray:
        """Linear velocity Jacobian (B, K, 3, ndof) of world points X rigidly on ``bodies``.

        ``bodies`` is either shared by the batch, shape (K,), or per item, (B, K).
        """
        sysm = self.system
        B, K = X.shape[:2]
        J = np.zeros((B, K, 3, sysm.n_dof))
        J[:, :, 0, 0] = J[:, :, 1, 1] = J[:, :, 2, 2] = 1.0
        r = X - root_pos[:, None, :]
        # v = omega x r  ->  columns of -skew(r)
        J[:, :, 0, 4], J[:, :, 0, 5] = r[..., 2], -r[..., 1]
        J[:, :, 1, 3], J[:, :, 1, 5] = -r[..., 2], r[..., 0]
        J[:, :, 2, 3], J[:, :, 2, 4] = r[..., 1], -r[..., 0]
        shared = np.ndim(bodies) == 1
        for h in range(1, sysm.n_bodies):
            mask = sysm.ancestors[bodies, h]
            if not mask.any():
                continue
            if shared:
                col = _cross(kin.axis_w[:, h][:, None, :], X[:, mask] - kin.anchor_w[:, h][:, None, :])
                J[..., 6 + sysm.joint[h]][:, mask] = col
            else:
                col = _cross(kin.axis_w[:, h][:, None, :], X - kin.anchor_w[:, h][:, None, :])
                J[..., 6 + sysm.joint[h]] = col * mask[..., None]
        return J

    def angular_jacobian(self, kin: Kinematics) -> np.ndarray:
        sysm = self.system
        B, nb = kin.p.shape[:2]
        J = np.zeros((B, nb, 3, sysm.n_dof))
        J[:, :, 0, 3] = J[:, :, 1, 4] = J[:, :, 2, 5] = 1.0
        for h in range(1, nb):
            mask = sysm.ancestors[:, h]
            J[..., 6 + sysm.joint[h]][:, mask] = kin.axis_w[:, h][:, None, :]
        return J

    def com_positions(self, kin: Kinematics) -> np.ndarray:
        return kin.p + _matvec(kin.R, self.system.com)

    def dynamics(self, state: SimState, kin: Kinematics):
        """Mass matrix (with armature) and bias forces (velocity products and gravity)."""
        sysm = self.system
        B, nb = state.batch, sysm.n_bodies
        xc = self.com_positions(kin)
        Jc = self.point_jacobian(kin, state.pos, xc, np.arange(nb))
        Jw = self.angular_jacobian(kin)
        Iw = kin.R @ sysm.inertia @ np.swapaxes(kin.R, -1, -2)
        mJc = sysm.mass[None, :, None, None] * Jc
        Jc2 = Jc.reshape(B, nb * 3, -1)
        M = np.swapaxes(Jc2, 1, 2) @ mJc.reshape(B, nb * 3, -1)
        IJw = (Iw @ Jw).reshape(B, nb * 3, -1)
        M += np.swapaxes(Jw.reshape(B, nb * 3, -1), 1, 2) @ IJw
        idx = np.arange(6, sysm.n_dof)
        M[:, idx, idx] += self.config.armature

        # velocity-product accelerations of the coms
        rc = xc - kin.p
        vc = kin.vel + _cross(kin.omega, rc)
        ac = kin.acc + _cross(kin.alpha, rc) + _cross(kin.omega, vc - kin.vel)
        ac[..., 2] += self.config.gravity
        force = sysm.mass[None, :, None] * ac
        Iwv = _matvec(Iw, kin.omega)
        torque = _matvec(Iw, kin.alpha) + _cross(kin.omega, Iwv)
        h = (np.swapaxes(Jc2, 1, 2) @ force.reshape(B, nb * 3, 1)
             + np.swapaxes(Jw.reshape(B, nb * 3, -1), 1, 2) @ torque.reshape(B, nb * 3, 1))[..., 0]
        return M, h

    # -- contacts ---------------------------------------------------------

    def contact_points(self, kin: Kinematics, xy_offset: np.ndarray | None = None):
        """Centres and penetrations of every contact sphere.

        ``xy_offset`` shifts the terrain lookup when ``kin`` was computed with
        the root moved to the vertical axis.
        """
        sysm = self.system
        cb = sysm.contact_body
        X = kin.p[:, cb] + _matvec(kin.R[:, cb], sysm.contact_pos)
        if self.terrain is None:
            ground = np.zeros(X.shape[:2])
        elif xy_offset is None:
            ground = self.terrain.height(X[..., 0], X[..., 1])
        else:
            ground = self.terrain.height(X[..., 0] + xy_offset[:, None, 0], X[..., 1] + xy_offset[:, None, 1])
        depth = ground + sysm.contact_radius - X[..., 2]
        return X, depth

    # -- integration ------------------------------------------------------

    def joint_torque(self, state: SimState, targets: np.ndarray) -> np.ndarray:
        return pd_torque(targets, state.q, state.qd, self.gains, self.motor) * self.torque_mask

    def physics_step(self, state: SimState, targets: np.ndarray, torque_log: list | None = None) -> SimState:
        cfg = self.config
        sysm = self.system
        dt = cfg.physics_dt
        B, ndof = state.batch, sysm.n_dof
        # the dynamics never see the absolute horizontal position, which keeps
        # trajectories bit-identical under horizontal translation
        origin = state.pos[:, :2].copy()
        local = state.copy()
        local.pos[:, :2] = 0.0
        kin = self.kinematics(local, with_bias=True)
        M, h = self.dynamics(local, kin)
        tau = self.joint_torque(state, targets)
        if torque_log is not None:
            torque_log.append((tau.copy(), self.motor.limit(state.qd)))
        u = state.generalized_velocity()
        Q = np.zeros((B, ndof))
        Q[:, 6:] = tau
        rhs_base = (M @ u[..., None])[..., 0] + dt * (Q - h)
        A_base = M.copy()
        if cfg.joint_damping > 0:
            idx = np.arange(6, ndof)
            A_base[:, idx, idx] += dt * cfg.joint_damping

        X, depth = self.contact_points(kin, origin)
        # A contact joins the solve if it penetrates now or would by the end of
        # the step; otherwise its spring energy would appear out of nowhere.
        cb = self.system.contact_body
        vz = kin.vel[:, cb, 2] + _cross(kin.omega[:, cb], X - kin.p[:, cb])[..., 2]
        active = (depth > 0) | (depth - dt * vz > 0)
        fn = np.zeros(depth.shape)
        n_act = active.sum(axis=1)
        free = n_act == 0
        u_new = np.empty((B, ndof))
        if free.any():
            u_new[free] = np.linalg.solve(A_base[free], rhs_base[free][..., None])[..., 0]
        if not free.all():
            rows = np.nonzero(~free)[0]
            # gather the active contacts of each row to the front, padded to the widest row
            K = int(n_act.max())
            order = np.argsort(~active[rows], axis=1, kind="stable")[:, :K]
            take = lambda arr: np.take_along_axis(arr, order, axis=1)
            sel_X = np.take_along_axis(X[rows], order[..., None], axis=1)
            sel_depth = take(depth[rows])
            sel_active = take(active[rows])
            sub = Kinematics(kin.R[rows], kin.p[rows], kin.omega[rows], kin.vel[rows], kin.axis_w[rows], kin.anchor_w[rows])
            bodies = self.system.contact_body[order]
            radius = self.system.contact_radius[order]
            sol, f = self._solve_contacts(sub, local.pos[rows], sel_X, radius, bodies, sel_depth, sel_active,
                                          A_base[rows], rhs_base[rows], u[rows])
            u_new[rows] = sol
            fr = np.zeros((len(rows), depth.shape[1]))
            np.put_along_axis(fr, order, f, axis=1)
            fn[rows] = fr

        new = state.copy()
        new.vel = u_new[:, :3]
        new.omega = u_new[:, 3:6]
        new.qd = u_new[:, 6:]
        # screw-motion update of the base so that a point with zero velocity
        # stays put (a pivot on the ground does not drift inward)
        new.pos = state.pos + _screw_displacement(new.omega * dt, new.vel * dt)
        qn = quat_mul(quat_from_rotvec(new.omega * dt), state.quat)
        new.quat = qn / np.linalg.norm(qn, axis=1, keepdims=True)
        new.q = state.q + dt * new.qd
        new.time = state.time + dt
        new.contact_force = fn
        return new

    def _solve_contacts(self, kin, root_pos, X, radius, bodies, depth, active, A_base, rhs_base, u):
        cfg = self.config
        dt = cfg.physics_dt
        k, c, mu = cfg.contact_stiffness, cfg.contact_damping, cfg.friction_coeff
        Xc = X.copy()
        Xc[..., 2] -= radius
        J = self.point_jacobian(kin, root_pos, Xc, bodies)
        Bn, nc, _, ndof = J.shape
        Jr = J.reshape(Bn, nc * 3, ndof)
        vc = (Jr @ u[..., None]).reshape(Bn, nc, 3)
        # damping only acts on contacts that already touch
        kz = k * dt + c * (depth > 0)
        fn_est = np.maximum(k * (depth - dt * vc[..., 2]) - c * (depth > 0) * vc[..., 2], 0.0)
        ct = mu * fn_est / np.maximum(np.hypot(vc[..., 0], vc[..., 1]), cfg.slip_velocity)
        act = active.copy()
        todo = np.arange(Bn)
        u_new = np.empty((Bn, ndof))
        fn = np.zeros((Bn, nc))
        for it in range(cfg.contact_passes):
            a = act[todo].astype(float)
            d = np.stack([ct[todo] * a, ct[todo] * a, kz[todo] * a], axis=-1).reshape(len(todo), nc * 3, 1)
            Jt = Jr[todo]
            JtT = np.swapaxes(Jt, 1, 2)
            A = A_base[todo] + dt * (JtT @ (d * Jt))
            f0 = np.zeros((len(todo), nc, 3))
            f0[..., 2] = k * depth[todo] * a
            rhs = rhs_base[todo] + dt * (JtT @ f0.reshape(len(todo), nc * 3, 1))[..., 0]
            sol = np.linalg.solve(A, rhs[..., None])
            u_new[todo] = sol[..., 0]
            vn = (Jt @ sol).reshape(len(todo), nc, 3)
            fz = (k * depth[todo] - kz[todo] * vn[..., 2]) * a
            fn[todo] = np.maximum(fz, 0.0)
            if it == cfg.contact_passes - 1:
                break
            vt = np.hypot(vn[..., 0], vn[..., 1])
            ft = ct[todo] * vt * a
            release = (fz < 0) & (a > 0)
            slip = (ft > mu * np.maximum(fz, 0.0) * (1 + 1e-6) + 1e-9) & (a > 0)
            redo = release.any(axis=1) | slip.any(axis=1)
            if not redo.any():
                break
            sel = todo[redo]
            act[sel] &= ~release[redo]
            ct_new = mu * np.maximum(fz[redo], 0.0) / np.maximum(vt[redo], cfg.slip_velocity)
            ct[sel] = np.where(slip[redo], ct_new, ct[sel])
            todo = sel
        return u_new, fn

    def step(self, state: SimState, targets, dt: float | None = None, torque_log: list | None = None,
             raise_on_divergence: bool = True) -> SimState:
        """Advance one control period holding ``targets`` fixed."""
        targets = np.broadcast_to(np.asarray(targets, dtype=float), state.q.shape)
        n_sub = self.config.substeps(self.config.control_dt if dt is None else dt)
        cur = state
        for _ in range(n_sub):
            nxt = self._guarded_step(cur, targets, torque_log)
            if raise_on_divergence and nxt.diverged.any() and not cur.diverged.any():
                raise SimulationDivergedError("simulation produced non-finite state", cur)
            cur = nxt
        return cur

    def _guarded_step(self, state: SimState, targets, torque_log=None) -> SimState:
        live = ~state.diverged
        if live.all():
            with np.errstate(all="ignore"):
                try:
                    nxt = self.physics_step(state, targets, torque_log)
                except np.linalg.LinAlgError:
                    nxt = self._stepwise(state, targets, torque_log)
        else:
            nxt = state.copy()
            nxt.time = state.time + self.config.physics_dt
            if live.any():
                idx = np.nonzero(live)[0]
                with np.errstate(all="ignore"):
                    sub = self.physics_step(state.take(idx), targets[idx], None)
                nxt.put(idx, sub)
        bad = ~nxt.is_finite() & ~state.diverged
        if bad.any():
            nxt.put(bad, state.take(bad))
            nxt.diverged[bad] = True
        return nxt

    def _stepwise(self, state, targets, torque_log):
        out = state.copy()
        for i in range(state.batch):
            try:
                out.put([i], self.physics_step(state.take([i]), targets[[i]], None))
            except np.linalg.LinAlgError:
                out.diverged[i] = True
        out.time = state.time + self.config.physics_dt
        return out

    # -- diagnostics -------------------------------------------------------

    def kinetic_energy(self, state: SimState) -> np.ndarray:
        kin = self.kinematics(state, with_bias=True)
        M, _ = self.dynamics(state, kin)
        u = state.generalized_velocity()
        return 0.5 * np.einsum("bi,bij,bj->b", u, M, u)

    def energy(self, state: SimState, targets=None) -> dict:
        """Kinetic, gravitational, contact-spring and PD-spring energy per item."""
        kin = self.kinematics(state, with_bias=True)
        M, _ = self.dynamics(state, kin)
        u = state.generalized_velocity()
        ke = 0.5 * np.einsum("bi,bij,bj->b", u, M, u)
        xc = self.com_positions(kin)
        pe = self.config.gravity * np.einsum("k,bk->b", self.system.mass, xc[..., 2])
        _, depth = self.contact_points(kin)
        contact = 0.5 * self.config.contact_stiffness * np.sum(np.maximum(depth, 0.0) ** 2, axis=1)
        spring = np.zeros(state.batch)
        if targets is not None and self.system.n_joints:
            e = np.abs(np.broadcast_to(targets, state.q.shape) - state.q)
            kp, tmax = self.gains.kp, self.motor.peak_torque
            es = tmax / kp if kp > 0 else np.inf
            quad = 0.5 * kp * np.minimum(e, es) ** 2
            lin = tmax * np.maximum(e - es, 0.0)
            spring = np.sum((quad + lin) * self.torque_mask, axis=1)
        return {"kinetic": ke, "gravity": pe, "contact": contact, "pd": spring, "total": ke + pe + contact + spring}

    # -- observables ------------------------------------------------------

    def module_halves(self, state: SimState) -> np.ndarray:
        """World transforms (B, n, 2, 4, 4) of every module half."""
        sysm = self.system
        kin = self.kinematics(state)
        B = state.batch
        T = np.zeros((B, sysm.n_bodies, 4, 4))
        T[:, :, :3, :3] = kin.R
        T[:, :, :3, 3] = kin.p
        T[:, :, 3, 3] = 1.0
        return T[:, sysm.half_body] @ sysm.half_offset

    def sphere_centers(self, state: SimState) -> np.ndarray:
        kin = self.kinematics(state)
        X, _ = self.contact_points(kin)
        return X[:, self.system.contact_kind == CONTACT_SPHERE]

    def projected_gravity(self, state: SimState) -> np.ndarray:
        R0 = quat_to_matrix(state.quat)
        return np.einsum("bji,j->bi", R0, GRAVITY_DIR)

    def body_angular_velocity(self, state: SimState) -> np.ndarray:
        R0 = quat_to_matrix(state.quat)
        return np.einsum("bji,bj->bi", R0, state.omega)

    def contacts(self, state: SimState, tol: float = 0.0):
        """Boolean (B, nc) mask of touching contact spheres and their lowest points."""
        kin = self.kinematics(state)
        X, depth = self.contact_points(kin)
        low = X.copy()
        low[..., 2] -= self.system.contact_radius
        return depth > -tol, low

    def spheres_touching(self, state: SimState, tol: float = 0.0) -> np.ndarray:
        touch, _ = self.contacts(state, tol)
        return np.sum(touch[:, self.system.contact_kind == CONTACT_SPHERE], axis=1)

    def initial_state(self, quat: np.ndarray, joint_angles: np.ndarray, xy: np.ndarray | None = None,
                      clearance: float | None = None) -> SimState:
        """States at rest with the lowest contact point ``clearance`` above the ground."""
        quat = np.atleast_2d(np.asarray(quat, dtype=float))
        q = np.atleast_2d(np.asarray(joint_angles, dtype=float))
        B = max(len(quat), len(q))
        quat = np.broadcast_to(quat, (B, 4)).copy()
        q = np.broadcast_to(q, (B, self.system.n_joints)).copy()
        state = SimState.rest(B, self.system.n_joints)
        state.quat = quat / np.linalg.norm(quat, axis=1, keepdims=True)
        state.q = q
        if xy is not None:
            state.pos[:, :2] = xy
        kin = self.kinematics(state)
        X, depth = self.contact_points(kin)
        gap = self.config.drop_clearance if clearance is None else clearance
        state.pos[:, 2] += np.max(depth, axis=1) + gap
        return state


def upright_deviation(g_p, z_hat) -> np.ndarray:
    """``d = -g_p . z_hat`` for stacked or single vectors."""
    return -np.sum(np.asarray(g_p) * np.asarray(z_hat), axis=-1)


def is_fallen(d, epsilon: float = FALL_EPSILON):
    return np.asarray(d) < epsilon


# ---------------------------------------------------------------------------
# Settling and rollouts
# ---------------------------------------------------------------------------


@dataclass
class SettleResult:
    state: SimState
    converged: np.ndarray
    settle_time: np.ndarray
    energy_trace: np.ndarray | None = None  # (steps + 1, B), NaN once an item has settled


def settle(sim: Simulator, state: SimState, targets=None, record_energy: bool = False) -> SettleResult:
    """Integrate until kinetic energy stays below threshold or the time cap.

    Joint targets default to the starting joint angles. Items that settle are
    removed from the working batch, so the cost shrinks as the batch settles.
    """
    cfg = sim.config
    targets = state.q.copy() if targets is None else np.broadcast_to(np.asarray(targets, float), state.q.shape).copy()
    out = state.copy()
    B = state.batch
    converged = np.zeros(B, dtype=bool)
    settle_time = np.full(B, cfg.settle_cap)
    check_every = max(1, int(round(0.02 / cfg.physics_dt)))
    hold_needed = max(1, int(math.ceil(cfg.settle_hold / (check_every * cfg.physics_dt) - 1e-9)))
    hold = np.zeros(B, dtype=int)
    idx = np.arange(B)
    cur = state.copy()
    n_steps = int(round(cfg.settle_cap / cfg.physics_dt))
    trace = None
    if record_energy:
        trace = np.full((n_steps + 1, B), np.nan)
        trace[0] = sim.energy(cur, targets)["total"]
    for s in range(1, n_steps + 1):
        cur = sim._guarded_step(cur, targets[idx])
        if record_energy:
            trace[s, idx] = sim.energy(cur, targets[idx])["total"]
        if s % check_every:
            continue
        t = s * cfg.physics_dt
        ke = sim.kinetic_energy(cur)
        calm = (ke < cfg.settle_ke) & ~cur.diverged
        hold[idx] = np.where(calm, hold[idx] + 1, 0)
        done = (hold[idx] >= hold_needed) & (t >= cfg.settle_min_time) & calm
        done |= cur.diverged
        if done.any():
            fin = idx[done]
            out.put(fin, cur.take(np.nonzero(done)[0]))
            converged[fin] = ~cur.diverged[done]
            settle_time[fin] = t
            keep = np.nonzero(~done)[0]
            idx = idx[keep]
            cur = cur.take(keep)
            if not idx.size:
                break
    if idx.size:
        out.put(idx, cur)
    out.time = 0.0
    if trace is not None:
        trace = trace[: s + 1]
    return SettleResult(out, converged, settle_time, trace)


@dataclass
class Rollout:
    com: np.ndarray  # (T + 1, B, 3) mean sphere centre
    d: np.ndarray | None  # (T + 1, B) upright deviation
    fell: np.ndarray  # (B,)
    diverged: np.ndarray
    mean_velocity: np.ndarray  # (B, 3)
    final: SimState
    joint_angles: np.ndarray | None = None
    torques: np.ndarray | None = None

    @property
    def displacement(self) -> np.ndarray:
        return self.com[-1] - self.com[0]


def rollout_openloop(sim: Simulator, state: SimState, base_angles, amplitude: float = 1.0, freq: float = 5.0,
                     steps: int = 250, dt: float = 0.02, z_hat=None, epsilon: float = FALL_EPSILON,
                     record_joints: bool = False) -> Rollout:
    """Drive every joint with ``base + amplitude * sin(2 pi f t)`` under PD tracking."""
    base = np.broadcast_to(np.asarray(base_angles, dtype=float), state.q.shape)
    cur = state.copy()
    com = [sim.sphere_centers(cur).mean(axis=1)]
    ds = []
    fell = np.zeros(state.batch, dtype=bool)
    if z_hat is not None:
        ds.append(upright_deviation(sim.projected_gravity(cur), z_hat))
    joints = [cur.q.copy()] if record_joints else None
    torque_log = [] if record_joints else None
    for k in range(steps):
        t = k * dt
        target = base + amplitude * math.sin(2.0 * math.pi * freq * t)
        cur = sim.step(cur, target, dt=dt, torque_log=torque_log, raise_on_divergence=False)
        com.append(sim.sphere_centers(cur).mean(axis=1))
        if z_hat is not None:
            d = upright_deviation(sim.projected_gravity(cur), z_hat)
            ds.append(d)
            fell |= is_fallen(d, epsilon)
        if record_joints:
            joints.append(cur.q.copy())
    com = np.array(com)
    fell |= cur.diverged
    span = steps * dt
    torques = None
    if torque_log:
        torques = np.array([t for t, _ in torque_log])
    return Rollout(com=com, d=np.array(ds) if ds else None, fell=fell, diverged=cur.diverged.copy(),
                   mean_velocity=(com[-1] - com[0]) / span, final=cur,
                   joint_angles=np.array(joints) if joints else None, torques=torques)


def latency_jitter(rng, current_action, previous_action):
    """Return the current or the previous action with equal probability."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    cur = np.asarray(current_action)
    prev = np.asarray(previous_action)
    if cur.shape != prev.shape:
        raise ValueError("actions must have the same shape")
    return prev.copy() if rng.random() < 0.5 else cur.copy()


def support_polygon_area(points) -> float:
    """Area of the convex hull of 2-D points (monotone chain + shoelace)."""
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        return 0.0
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(seq):
        out: list = []
        for p in seq:
            while len(out) >= 2 and _turn(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        return 0.0
    x, y = hull[:, 0], hull[:, 1]
    return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _turn(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def state_support_area(sim: Simulator, state: SimState, tol: float = 0.0) -> np.ndarray:
    touch, low = sim.contacts(state, tol)
    return np.array([support_polygon_area(low[i, touch[i], :2]) for i in range(state.batch)])


def module_state_tokens(sim: Simulator, state: SimState) -> np.ndarray:
    """Per-module (g_p, omega, cos theta, theta_dot) in each module's own frame, shape (B, n, 8)."""
    halves = sim.module_halves(state)
    R = halves[:, :, 0, :3, :3]
    g = np.einsum("bnji,j->bni", R, GRAVITY_DIR)
    kin = sim.kinematics(state)
    w_body = kin.omega[:, sim.system.half_body[:, 0]]
    w = np.einsum("bnji,bnj->bni", R, w_body)
    return np.concatenate([g, w, np.cos(state.q)[..., None], state.qd[..., None]], axis=-1)


def random_poses(rng, count: int, n_joints: int):
    rng = np.random.default_rng(rng)
    quat = random_quaternions(rng, count)
    q = rng.uniform(-np.pi, np.pi, (count, n_joints))
    return quat, q


