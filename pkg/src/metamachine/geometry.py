"""Module geometry, dock frames, forward kinematics and collision checks.

Frames
------
Each module has a frame centred on its sphere with ``z`` along the joint
axis. The module consists of two rigid halves:

* half A carries the sphere docks and link A, whose axis is
  ``u_A = (sin a, 0, cos a)`` with ``a`` the joint-axis tilt;
* half B carries link B. Its frame is ``Rz(theta) @ Ry(pi)`` relative to the
  module frame, so at ``theta = 0`` the links are collinear and at
  ``theta = pi`` they fold to the V shape.

Link B docks are defined in the half-B frame with exactly the same local
coordinates as the link A docks, which makes the link-swap symmetry a pure
relabeling of dock indices.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .morphology import (
    LINK_A_TIP,
    N_DOCKS,
    ConfigTree,
    DockCategory,
    check_structure,
    dock_category,
    dock_half,
)

ORIENT_STEP = 2.0 * np.pi / 3.0
PARALLEL_TOL = 1e-6


@dataclass(frozen=True)
class ModuleGeometry:
    link_length: float = 0.24
    sphere_radius: float = 0.07
    link_mass: float = 0.194
    sphere_mass: float = 0.98
    joint_axis_tilt: float = 63.5  # degrees between joint axis and each link
    link_radius: float = 0.02

    def __post_init__(self):
        for name in ("link_length", "sphere_radius", "link_mass", "sphere_mass", "link_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.joint_axis_tilt < 90.0:
            raise ValueError("joint_axis_tilt must lie in (0, 90) degrees")
        if self.link_length <= self.sphere_radius + self.link_radius:
            raise ValueError("link must protrude beyond the sphere")

    @functools.cached_property
    def tilt(self) -> float:
        return float(np.deg2rad(self.joint_axis_tilt))

    @functools.cached_property
    def link_axis(self) -> np.ndarray:
        """Unit axis of link A in the module frame (link B in its own half frame)."""
        a = self.tilt
        return np.array([np.sin(a), 0.0, np.cos(a)])

    @functools.cached_property
    def link_normal(self) -> np.ndarray:
        """Outward face normal of the link, perpendicular to the link axis."""
        a = self.tilt
        return np.array([np.cos(a), 0.0, -np.sin(a)])

    @property
    def module_mass(self) -> float:
        return self.sphere_mass + 2.0 * self.link_mass


DEFAULT_GEOMETRY = ModuleGeometry()


@dataclass(frozen=True)
class DockFrame:
    """Dock pose in the frame of the half that carries it.

    The rotation columns are (tangent, binormal, normal); ``normal`` points out
    of the module and the tangent fixes orientation 0.
    """

    index: int
    half: int
    position: np.ndarray
    rotation: np.ndarray

    @property
    def category(self) -> DockCategory:
        return dock_category(self.index)

    @property
    def normal(self) -> np.ndarray:
        return self.rotation[:, 2]

    def matrix(self) -> np.ndarray:
        return make_transform(self.rotation, self.position)


@dataclass(frozen=True)
class BodyPose:
    position: np.ndarray
    orientation: np.ndarray  # unit quaternion (w, x, y, z)

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=float)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("orientation quaternion must be unit norm")
        object.__setattr__(self, "orientation", q)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))

    @classmethod
    def identity(cls) -> "BodyPose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def matrix(self) -> np.ndarray:
        return make_transform(quat_to_matrix(self.orientation), self.position)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "BodyPose":
        return cls(T[:3, 3].copy(), matrix_to_quat(T[:3, :3]))


# ---------------------------------------------------------------------------
# Rotation helpers
# ---------------------------------------------------------------------------


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# Ry(pi) written exactly so link-B frames carry no rounding noise.
FLIP_Y = np.diag([-1.0, 1.0, -1.0])
FLIP_X = np.diag([1.0, -1.0, -1.0])


def make_transform(R: np.ndarray, p: np.ndarray) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = p
    return T


def invert_transform(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    return make_transform(R.T, -R.T @ T[:3, 3])


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; works on stacked inputs."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion (w >= 0) of a single rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    """Exponential map from rotation vectors to quaternions (stacked)."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x)/x written to stay accurate at tiny angles
    k = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 1e-12, angle, 1.0), 0.5 - angle**2 / 48.0)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def random_quaternions(rng: np.random.Generator, count: int) -> np.ndarray:
    """Uniformly distributed rotations as normalized 4-D Gaussian draws."""
    q = rng.standard_normal((count, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Docks
# ---------------------------------------------------------------------------

SPHERE_DOCK_AZIMUTH_DEG = (45.0, 135.0, -45.0, -135.0)
# orientation 1 is the straight mating; 0 and 2 add a -120 or +120 degree twist
MATING = tuple(rot_z((k - 1) * ORIENT_STEP) @ FLIP_X for k in range(3))


def _frame(tangent: np.ndarray, normal: np.ndarray) -> np.ndarray:
    x = tangent / np.linalg.norm(tangent)
    z = normal / np.linalg.norm(normal)
    return np.column_stack([x, np.cross(z, x), z])


def dock_frames(geom: ModuleGeometry = DEFAULT_GEOMETRY) -> list[DockFrame]:
    """All 18 dock frames in the frame of the half that carries them."""
    u, n = geom.link_axis, geom.link_normal
    frames: list[DockFrame] = []
    for i, az in enumerate(np.deg2rad(SPHERE_DOCK_AZIMUTH_DEG)):
        radial = np.array([np.cos(az), np.sin(az), 0.0])
        frames.append(DockFrame(i, 0, geom.sphere_radius * radial, _frame(np.array([0.0, 0.0, 1.0]), radial)))
    link_docks = []
    exposed = geom.link_length - geom.sphere_radius
    for k in range(1, 7):
        s = geom.sphere_radius + k / 7.0 * exposed
        link_docks.append((s * u + geom.link_radius * n, _frame(u, n)))
    link_docks.append((geom.link_length * u, _frame(n, u)))
    for half, start in ((0, 4), (1, 11)):
        for off, (p, R) in enumerate(link_docks):
            frames.append(DockFrame(start + off, half, p.copy(), R.copy()))
    return frames


def dock_link_axis(index: int, geom: ModuleGeometry = DEFAULT_GEOMETRY) -> np.ndarray | None:
    """Link axis carrying a link dock, in that dock's half frame; None for sphere docks."""
    if dock_category(index) is DockCategory.SPHERE:
        return None
    return geom.link_axis


def interference_rule(parent_dock: int, child_dock: int, orientation: int,
                      geom: ModuleGeometry = DEFAULT_GEOMETRY) -> bool:
    """True when two side docks would mate with the two links parallel."""
    dock_category(parent_dock), dock_category(child_dock)
    return bool(_interference_table(geom)[parent_dock, child_dock, orientation])


@functools.lru_cache(maxsize=16)
def _interference_table(geom: ModuleGeometry) -> np.ndarray:
    side = np.array([dock_category(d) is DockCategory.SIDE for d in range(N_DOCKS)])
    u = geom.link_axis
    # Child link axis expressed in the parent half frame.
    axis_c = _mate_table(geom)[:, :, :, :3, :3] @ u
    parallel = np.abs(axis_c @ u) > 1.0 - PARALLEL_TOL
    table = parallel & side[:, None, None] & side[None, :, None]
    table.flags.writeable = False
    return table


_FRAME_CACHE: dict[ModuleGeometry, list[DockFrame]] = {}


def _cached_frames(geom: ModuleGeometry) -> list[DockFrame]:
    if geom not in _FRAME_CACHE:
        _FRAME_CACHE[geom] = dock_frames(geom)
    return _FRAME_CACHE[geom]


def count_forbidden_pairs(geom: ModuleGeometry = DEFAULT_GEOMETRY) -> int:
    """Number of labeled (parent dock, child dock) pairs with an interfering orientation."""
    return sum(
        any(interference_rule(a, b, o, geom) for o in range(3))
        for a in range(N_DOCKS) for b in range(N_DOCKS)
    )


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------


def half_b_offset(theta: float) -> np.ndarray:
    """Transform from the module (half A) frame to the half B frame."""
    c, s = np.cos(theta), np.sin(theta)
    T = np.zeros((4, 4))
    # Rz(theta) @ Ry(pi)
    T[0, 0], T[0, 1] = -c, -s
    T[1, 0], T[1, 1] = -s, c
    T[2, 2] = -1.0
    T[3, 3] = 1.0
    return T


def mate_transform(parent_dock: int, child_dock: int, orientation: int,
                   geom: ModuleGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Child dock-carrying half frame relative to the parent dock-carrying half frame."""
    return _mate_table(geom)[parent_dock, child_dock, orientation]


@functools.lru_cache(maxsize=16)
def _mate_table(geom: ModuleGeometry) -> np.ndarray:
    frames = _cached_frames(geom)
    table = np.empty((N_DOCKS, N_DOCKS, 3, 4, 4))
    for o in range(3):
        M = make_transform(MATING[o], np.zeros(3))
        for a in range(N_DOCKS):
            for b in range(N_DOCKS):
                table[a, b, o] = frames[a].matrix() @ M @ invert_transform(frames[b].matrix())
    table.flags.writeable = False
    return table


@dataclass
class TreePose:
    """World transforms of every module half, indexed ``halves[module, half]``."""

    halves: np.ndarray  # (n, 2, 4, 4)

    @property
    def n_modules(self) -> int:
        return self.halves.shape[0]

    def module_frame(self, m: int) -> np.ndarray:
        return self.halves[m, 0]

    def sphere_centers(self) -> np.ndarray:
        return self.halves[:, 0, :3, 3].copy()

    def body_poses(self) -> list[dict[str, BodyPose]]:
        out = []
        for m in range(self.n_modules):
            out.append({
                "sphere": BodyPose.from_matrix(self.halves[m, 0]),
                "link_a": BodyPose.from_matrix(self.halves[m, 0]),
                "link_b": BodyPose.from_matrix(self.halves[m, 1]),
            })
        return out


def forward_kinematics(tree: ConfigTree, joint_angles: Sequence[float], base: BodyPose | np.ndarray | None = None,
                       geom: ModuleGeometry = DEFAULT_GEOMETRY) -> TreePose:
    """Place every module half given joint angles and the root module pose."""
    check_structure(tree)
    theta = np.asarray(joint_angles, dtype=float)
    if theta.shape != (tree.n_modules,):
        raise ValueError(f"expected {tree.n_modules} joint angles, got shape {theta.shape}")
    if base is None:
        root = np.eye(4)
    elif isinstance(base, BodyPose):
        root = base.matrix()
    else:
        root = np.asarray(base, dtype=float)
    halves = np.zeros((tree.n_modules, 2, 4, 4))
    halves[0, 0] = root
    halves[0, 1] = root @ half_b_offset(theta[0])
    for i, c in enumerate(tree.connections):
        child = i + 1
        hp, hc = dock_half(c.parent_dock), dock_half(c.child_dock)
        X = halves[c.parent_module, hp] @ mate_transform(c.parent_dock, c.child_dock, c.orientation, geom)
        B = half_b_offset(theta[child])
        if hc == 0:
            halves[child, 0] = X
            halves[child, 1] = X @ B
        else:
            halves[child, 1] = X
            halves[child, 0] = X @ B.T  # B is a pure rotation
    return TreePose(halves)


# ---------------------------------------------------------------------------
# Collision primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Capsule:
    """Swept sphere between ``a`` and ``b``; a sphere when ``a == b``."""

    a: np.ndarray
    b: np.ndarray
    radius: float
    module: int = -1
    part: str = ""


def segment_distances(a0: np.ndarray, a1: np.ndarray, b0: np.ndarray, b1: np.ndarray) -> np.ndarray:
    """Closest distance between segment pairs, vectorized over leading axes."""
    d1 = a1 - a0
    d2 = b1 - b0
    r = a0 - b0
    a = np.einsum("...i,...i", d1, d1)
    e = np.einsum("...i,...i", d2, d2)
    f = np.einsum("...i,...i", d2, r)
    c = np.einsum("...i,...i", d1, r)
    b = np.einsum("...i,...i", d1, d2)
    eps = 1e-15
    denom = a * e - b * b
    safe_a = np.where(a > eps, a, 1.0)
    safe_e = np.where(e > eps, e, 1.0)
    s = np.where(denom > eps, np.clip((b * f - c * e) / np.where(denom > eps, denom, 1.0), 0.0, 1.0), 0.0)
    s = np.where(a > eps, s, 0.0)
    t = np.where(e > eps, (b * s + f) / safe_e, 0.0)
    # Clamp t, then recompute s for the clamped t.
    t_lo = t < 0.0
    t_hi = t > 1.0
    t = np.clip(t, 0.0, 1.0)
    s = np.where(t_lo & (a > eps), np.clip(-c / safe_a, 0.0, 1.0), s)
    s = np.where(t_hi & (a > eps), np.clip((b - c) / safe_a, 0.0, 1.0), s)
    pa = a0 + s[..., None] * d1
    pb = b0 + t[..., None] * d2
    return np.linalg.norm(pa - pb, axis=-1)


def module_capsules(pose: TreePose, geom: ModuleGeometry = DEFAULT_GEOMETRY) -> list[Capsule]:
    """Three primitives per module: sphere, link A and link B."""
    u = geom.link_axis
    lo = geom.sphere_radius * u
    hi = (geom.link_length - geom.link_radius) * u
    caps: list[Capsule] = []
    for m in range(pose.n_modules):
        A, B = pose.halves[m, 0], pose.halves[m, 1]
        c = A[:3, 3]
        caps.append(Capsule(c, c, geom.sphere_radius, m, "sphere"))
        caps.append(Capsule(A[:3, :3] @ lo + c, A[:3, :3] @ hi + c, geom.link_radius, m, "link_a"))
        caps.append(Capsule(B[:3, :3] @ lo + B[:3, 3], B[:3, :3] @ hi + B[:3, 3], geom.link_radius, m, "link_b"))
    return caps


def dock_primitive(module: int, dock: int) -> int:
    """Index into :func:`module_capsules` output of the primitive carrying ``dock``."""
    cat = dock_category(dock)
    if cat is DockCategory.SPHERE:
        return 3 * module
    return 3 * module + (1 if dock <= LINK_A_TIP else 2)


def exempt_pairs(tree: ConfigTree) -> set[tuple[int, int]]:
    pairs: set[tuple[int, int]] = set()
    for m in range(tree.n_modules):
        for i in range(3):
            for j in range(i + 1, 3):
                pairs.add((3 * m + i, 3 * m + j))
    for k, c in enumerate(tree.connections):
        a, b = dock_primitive(c.parent_module, c.parent_dock), dock_primitive(k + 1, c.child_dock)
        pairs.add((min(a, b), max(a, b)))
    return pairs


def pair_clearances(capsules: Sequence[Capsule], exempt: set[tuple[int, int]] = frozenset()) -> tuple[list, np.ndarray]:
    """Surface clearance (distance minus radii) for every non-exempt pair."""
    pairs = [(i, j) for i in range(len(capsules)) for j in range(i + 1, len(capsules)) if (i, j) not in exempt]
    if not pairs:
        return pairs, np.zeros(0)
    I = np.array([p[0] for p in pairs])
    J = np.array([p[1] for p in pairs])
    A0 = np.array([c.a for c in capsules])
    A1 = np.array([c.b for c in capsules])
    rad = np.array([c.radius for c in capsules])
    d = segment_distances(A0[I], A1[I], A0[J], A1[J])
    return pairs, d - rad[I] - rad[J]


def any_overlap(capsules: Sequence[Capsule], exempt: set[tuple[int, int]] = frozenset(), tol: float = 1e-9) -> bool:
    _, clearance = pair_clearances(capsules, exempt)
    return bool(np.any(clearance < -tol))


def primitive_arrays(pose: TreePose, geom: ModuleGeometry = DEFAULT_GEOMETRY):
    """Endpoints and radii of the ``3 n`` primitives, ordered like :func:`module_capsules`."""
    u = geom.link_axis
    lo = geom.sphere_radius * u
    hi = (geom.link_length - geom.link_radius) * u
    R = pose.halves[:, :, :3, :3]
    p = pose.halves[:, :, :3, 3]
    n = pose.n_modules
    a0 = np.empty((n, 3, 3))
    a1 = np.empty((n, 3, 3))
    a0[:, 0] = a1[:, 0] = p[:, 0]
    a0[:, 1:] = R @ lo + p
    a1[:, 1:] = R @ hi + p
    rad = np.tile([geom.sphere_radius, geom.link_radius, geom.link_radius], n)
    return a0.reshape(-1, 3), a1.reshape(-1, 3), rad


@functools.lru_cache(maxsize=4096)
def _pair_index(tree: ConfigTree):
    exempt = exempt_pairs(tree)
    k = 3 * tree.n_modules
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k) if (i, j) not in exempt]
    return np.array([p[0] for p in pairs], dtype=int), np.array([p[1] for p in pairs], dtype=int)


def tree_clearances(tree: ConfigTree, joint_angles, geom: ModuleGeometry = DEFAULT_GEOMETRY, base=None) -> np.ndarray:
    """Surface clearance of every non-adjacent primitive pair."""
    pose = forward_kinematics(tree, joint_angles, base, geom)
    a0, a1, rad = primitive_arrays(pose, geom)
    I, J = _pair_index(tree)
    if I.size == 0:
        return np.zeros(0)
    return segment_distances(a0[I], a1[I], a0[J], a1[J]) - rad[I] - rad[J]


def min_clearance(tree: ConfigTree, joint_angles, geom: ModuleGeometry = DEFAULT_GEOMETRY, base=None) -> float:
    clearance = tree_clearances(tree, joint_angles, geom, base)
    return float(clearance.min()) if clearance.size else float("inf")


def self_collides(tree: ConfigTree, joint_angles, geom: ModuleGeometry = DEFAULT_GEOMETRY, base=None,
                  extra: Sequence[Capsule] = (), extra_exempt: set[tuple[int, int]] = frozenset()) -> bool:
    """Whether any two non-adjacent primitives overlap.

    Primitives of the same module and the two primitives joined by each dock
    are adjacent. ``extra`` appends further capsules (amputation stubs) whose
    exemptions are given by index in ``extra_exempt``.
    """
    if not extra:
        if tree.n_modules == 1:
            return False
        return bool(np.any(tree_clearances(tree, joint_angles, geom, base) < -1e-9))
    pose = forward_kinematics(tree, joint_angles, base, geom)
    caps = module_capsules(pose, geom) + list(extra)
    return any_overlap(caps, exempt_pairs(tree) | set(extra_exempt))
