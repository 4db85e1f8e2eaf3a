"""Discrete design space for metamachines.

A design is a rooted tree of identical modules. Module ``0`` is the root and
every further module is attached by one :class:`Connection` naming an
already-present parent module, a dock on that parent, a dock on the new
module and one of three mating orientations.

Dock numbering (fixed, so that sequences are portable between tools)::

    0-3    sphere docks
    4-9    link A side docks (proximal to distal)
    10     link A tip
    11-16  link B side docks (proximal to distal)
    17     link B tip
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

N_DOCKS = 18
N_ORIENT = 3
MAX_MODULES = 5
N_GROUPS = MAX_MODULES - 1
SEQ_LEN = 4 * N_GROUPS

# Sentinels are one past the largest valid value of each slot.
NULL_PARENT = MAX_MODULES
NULL_DOCK = N_DOCKS
NULL_ORIENT = N_ORIENT
NULL_GROUP = (NULL_PARENT, NULL_DOCK, NULL_DOCK, NULL_ORIENT)
SLOT_VOCAB = (MAX_MODULES + 1, N_DOCKS + 1, N_DOCKS + 1, N_ORIENT + 1)

SPHERE_DOCKS = tuple(range(0, 4))
LINK_A_SIDE_DOCKS = tuple(range(4, 10))
LINK_A_TIP = 10
LINK_B_SIDE_DOCKS = tuple(range(11, 17))
LINK_B_TIP = 17
SIDE_DOCKS = LINK_A_SIDE_DOCKS + LINK_B_SIDE_DOCKS

# Rotating a module by pi about its y axis swaps the two links; this is the
# dock permutation it induces (used to detect leg pairs).
MIRROR_DOCK = (1, 0, 3, 2) + tuple(range(11, 18)) + tuple(range(4, 11))


class DockCategory(str, Enum):
    SPHERE = "sphere"
    SIDE = "link-side"
    TIP = "link-tip"


class DesignError(ValueError):
    """Base class for problems with a design or its encoding."""


class StructuralError(DesignError):
    """Tree structure is broken (dangling parent, out-of-range tokens)."""


class MalformedSequenceError(DesignError):
    """A genome sequence cannot be parsed into a tree."""


class InvalidDesignError(DesignError):
    """The tree parses but cannot be assembled (interference, dock reuse)."""


class SamplingExhaustedError(RuntimeError):
    pass


class IntegrityError(ArithmeticError):
    """Counting parameters describe an inconsistent dock model."""


def dock_category(index: int) -> DockCategory:
    if not 0 <= index < N_DOCKS:
        raise StructuralError(f"dock index {index} outside [0, {N_DOCKS - 1}]")
    if index < 4:
        return DockCategory.SPHERE
    if index in (LINK_A_TIP, LINK_B_TIP):
        return DockCategory.TIP
    return DockCategory.SIDE


def dock_half(index: int) -> int:
    """Rigid half carrying the dock: 0 for the sphere/link A half, 1 for link B."""
    dock_category(index)
    return 1 if index >= LINK_B_SIDE_DOCKS[0] else 0


@dataclass(frozen=True)
class Connection:
    parent_module: int
    parent_dock: int
    child_dock: int
    orientation: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.parent_module, self.parent_dock, self.child_dock, self.orientation)


@dataclass(frozen=True)
class ConfigTree:
    """Rooted module tree; connection ``i`` attaches module ``i + 1``."""

    connections: tuple[Connection, ...] = field(default_factory=tuple)

    def __post_init__(self):
        conns = tuple(c if isinstance(c, Connection) else Connection(*c) for c in self.connections)
        object.__setattr__(self, "connections", conns)

    @property
    def n_modules(self) -> int:
        return len(self.connections) + 1

    @classmethod
    def from_tuples(cls, groups: Iterable[Sequence[int]]) -> "ConfigTree":
        return cls(tuple(Connection(*map(int, g)) for g in groups))

    def parent_of(self, module: int) -> int:
        return -1 if module == 0 else self.connections[module - 1].parent_module

    def children_of(self, module: int) -> list[int]:
        return [i + 1 for i, c in enumerate(self.connections) if c.parent_module == module]

    def is_leaf(self, module: int) -> bool:
        return module != 0 and not self.children_of(module)

    def used_docks(self) -> list[set[int]]:
        used: list[set[int]] = [set() for _ in range(self.n_modules)]
        for i, c in enumerate(self.connections):
            used[c.parent_module].add(c.parent_dock)
            used[i + 1].add(c.child_dock)
        return used

    def to_dict(self) -> dict:
        return {"n_modules": self.n_modules, "connections": [list(c.as_tuple()) for c in self.connections]}

    @classmethod
    def from_dict(cls, data: dict) -> "ConfigTree":
        tree = cls.from_tuples(data.get("connections", []))
        if "n_modules" in data and int(data["n_modules"]) != tree.n_modules:
            raise StructuralError(
                f"n_modules={data['n_modules']} disagrees with {len(tree.connections)} connections"
            )
        return tree


def check_structure(tree: ConfigTree) -> None:
    """Raise :class:`StructuralError` for dangling parents or bad token ranges."""
    if tree.n_modules > MAX_MODULES:
        raise StructuralError(f"{tree.n_modules} modules exceeds the maximum of {MAX_MODULES}")
    for i, c in enumerate(tree.connections):
        if not 0 <= c.parent_module <= i:
            raise StructuralError(f"connection {i}: parent module {c.parent_module} is not yet in the tree")
        for dock in (c.parent_dock, c.child_dock):
            if not 0 <= dock < N_DOCKS:
                raise StructuralError(f"connection {i}: dock {dock} out of range")
        if not 0 <= c.orientation < N_ORIENT:
            raise StructuralError(f"connection {i}: orientation {c.orientation} out of range")


def check_assembly(tree: ConfigTree) -> None:
    """Raise :class:`InvalidDesignError` on dock reuse or rule-based interference."""
    from .geometry import interference_rule

    used: list[set[int]] = [set() for _ in range(tree.n_modules)]
    for i, c in enumerate(tree.connections):
        if c.parent_dock in used[c.parent_module]:
            raise InvalidDesignError(
                f"connection {i}: dock {c.parent_dock} of module {c.parent_module} is already occupied"
            )
        if interference_rule(c.parent_dock, c.child_dock, c.orientation):
            raise InvalidDesignError(
                f"connection {i}: side docks {c.parent_dock}/{c.child_dock} mate with parallel links"
            )
        used[c.parent_module].add(c.parent_dock)
        used[i + 1].add(c.child_dock)


def validate_tree(tree: ConfigTree) -> None:
    check_structure(tree)
    check_assembly(tree)


# ---------------------------------------------------------------------------
# Integer sequences
# ---------------------------------------------------------------------------


def encode_tree(tree: ConfigTree) -> tuple[int, ...]:
    """Serialize a tree into the fixed 16-token genome sequence."""
    check_structure(tree)
    tokens: list[int] = []
    for c in tree.connections:
        tokens.extend(c.as_tuple())
    tokens.extend(NULL_GROUP * (N_GROUPS - len(tree.connections)))
    return tuple(tokens)


def decode_seq(seq: Sequence[int]) -> ConfigTree:
    """Parse a 16-token sequence.

    Raises :class:`MalformedSequenceError` when the tokens do not describe a
    tree and :class:`InvalidDesignError` when they do but the tree cannot be
    assembled.
    """
    tokens = [int(t) for t in seq]
    if len(tokens) != SEQ_LEN:
        raise MalformedSequenceError(f"expected {SEQ_LEN} tokens, got {len(tokens)}")
    groups = [tuple(tokens[4 * g: 4 * g + 4]) for g in range(N_GROUPS)]
    conns: list[Connection] = []
    seen_null = False
    for g, group in enumerate(groups):
        nulls = [tok == null for tok, null in zip(group, NULL_GROUP)]
        if all(nulls):
            seen_null = True
            continue
        if any(nulls):
            raise MalformedSequenceError(f"group {g} mixes NULL and non-NULL tokens: {group}")
        if seen_null:
            raise MalformedSequenceError(f"group {g} follows a NULL group")
        for tok, vocab in zip(group, SLOT_VOCAB):
            if not 0 <= tok < vocab - 1:
                raise MalformedSequenceError(f"group {g}: token {tok} outside vocabulary")
        if group[0] > g:
            raise MalformedSequenceError(
                f"group {g}: parent module {group[0]} has not been placed yet"
            )
        conns.append(Connection(*group))
    tree = ConfigTree(tuple(conns))
    check_assembly(tree)
    return tree


def format_seq(seq: Sequence[int]) -> str:
    return " ".join(str(int(t)) for t in seq)


def parse_seq(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split())
    except ValueError as exc:
        raise MalformedSequenceError(f"non-integer token in {text!r}") from exc


# ---------------------------------------------------------------------------
# Counting
# ---------------------------------------------------------------------------


def count_two_module(n_docks: int = N_DOCKS, n_orient: int = N_ORIENT, n_side: int = 12) -> int:
    """Unique two-module assemblies.

    Ordered (dock, dock, orientation) triples minus the side-side parallel
    matings, plus the swap-invariant same-dock cases, halved.
    """
    if min(n_docks, n_orient, n_side) < 0 or n_side > n_docks:
        raise IntegrityError(f"inconsistent dock model D={n_docks}, O={n_orient}, S={n_side}")
    if n_side > 0 and n_orient < 1:
        raise IntegrityError("side-dock interference needs at least one orientation")
    numerator = n_docks * n_docks * n_orient - n_side * n_side + n_docks * n_orient - n_side
    if numerator % 2:
        raise IntegrityError(f"odd numerator {numerator}: swap symmetry cannot pair configurations")
    return numerator // 2


def estimate_unique(n_modules: int) -> float:
    """Estimated number of unique ``n_modules`` assemblies, ``864**(N-1) / N``."""
    if n_modules < 1:
        raise ValueError(f"n_modules must be >= 1, got {n_modules}")
    closed = Fraction(864 ** (n_modules - 1), n_modules)
    recursive = estimate_recurrence(n_modules)
    if abs(float(closed) - recursive) > 1e-12 * float(closed):
        raise IntegrityError(f"closed form {float(closed)} disagrees with recurrence {recursive}")
    return float(closed)


def estimate_recurrence(n_modules: int) -> float:
    """Same estimate built by adding one module at a time: M' = 864 N M / (N + 1)."""
    if n_modules < 1:
        raise ValueError(f"n_modules must be >= 1, got {n_modules}")
    m = 1.0
    for n in range(1, n_modules):
        m = 864.0 * n * m / (n + 1)
    return m


def enumerate_two_module() -> list[tuple[int, int, int]]:
    """Canonical representatives of all rule-valid two-module assemblies."""
    from .geometry import interference_rule

    reps = set()
    for a in range(N_DOCKS):
        for b in range(N_DOCKS):
            for o in range(N_ORIENT):
                if interference_rule(a, b, o):
                    continue
                reps.add(min((a, b, o), (b, a, o)))
    return sorted(reps)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _parse_module_count(n_modules, rng: np.random.Generator) -> int:
    if n_modules is None or n_modules == "uniform":
        return int(rng.integers(2, MAX_MODULES + 1))
    if isinstance(n_modules, str) and ".." in n_modules:
        lo, hi = (int(x) for x in n_modules.split(".."))
        return int(rng.integers(lo, hi + 1))
    n = int(n_modules)
    if not 1 <= n <= MAX_MODULES:
        raise ValueError(f"n_modules must be in [1, {MAX_MODULES}], got {n}")
    return n


def sample_tree(rng=None, n_modules=None, max_attempts: int = 10_000, geom=None,
                check_collision: bool = True) -> ConfigTree:
    """Draw a random assembly by repeated uniform attachment.

    ``rng`` may be a seed or a ``numpy.random.Generator``. ``n_modules`` is an
    integer, ``"lo..hi"`` or ``None``/``"uniform"`` (uniform over 2..5).
    Each new module picks a uniform parent among the placed modules, a uniform
    free dock on it, a uniform own dock and a uniform orientation; the whole
    tree is redrawn when a mating interferes or the zero-angle pose
    self-collides.
    """
    from .geometry import DEFAULT_GEOMETRY, interference_rule, self_collides

    rng = np.random.default_rng(rng)
    geom = geom or DEFAULT_GEOMETRY
    n = _parse_module_count(n_modules, rng)
    if n == 1:
        return ConfigTree()
    for _ in range(max_attempts):
        used: list[set[int]] = [set() for _ in range(n)]
        conns: list[Connection] = []
        for child in range(1, n):
            parent = int(rng.integers(0, child))
            free = [d for d in range(N_DOCKS) if d not in used[parent]]
            pdock = free[int(rng.integers(len(free)))]
            cdock = int(rng.integers(N_DOCKS))
            orient = int(rng.integers(N_ORIENT))
            if interference_rule(pdock, cdock, orient):
                break
            used[parent].add(pdock)
            used[child].add(cdock)
            conns.append(Connection(parent, pdock, cdock, orient))
        else:
            tree = ConfigTree(tuple(conns))
            if check_collision and self_collides(tree, np.zeros(n), geom=geom):
                continue
            return tree
    raise SamplingExhaustedError(f"no valid {n}-module tree after {max_attempts} attempts")


def sample_trees(seed, count: int, n_modules=None, **kwargs) -> list[ConfigTree]:
    rng = np.random.default_rng(seed)
    return [sample_tree(rng, n_modules, **kwargs) for _ in range(count)]


# ---------------------------------------------------------------------------
# Canonical form
# ---------------------------------------------------------------------------


def _adjacency(tree: ConfigTree) -> list[dict[int, tuple[int, int, int]]]:
    """Per module: neighbour -> (own dock, neighbour dock, orientation)."""
    adj: list[dict[int, tuple[int, int, int]]] = [dict() for _ in range(tree.n_modules)]
    for i, c in enumerate(tree.connections):
        child = i + 1
        adj[c.parent_module][child] = (c.parent_dock, c.child_dock, c.orientation)
        # Mating orientation is symmetric under exchanging the two modules.
        adj[child][c.parent_module] = (c.child_dock, c.parent_dock, c.orientation)
    return adj


def relabelings(tree: ConfigTree) -> Iterable[ConfigTree]:
    """Every tree obtained by re-rooting and re-numbering the same assembly."""
    n = tree.n_modules
    adj = _adjacency(tree)
    for order in itertools.permutations(range(n)):
        label = {m: k for k, m in enumerate(order)}
        conns = []
        for k in range(1, n):
            node = order[k]
            placed = [nb for nb in adj[node] if label[nb] < k]
            if len(placed) != 1:
                break
            parent = placed[0]
            own, theirs, orient = adj[parent][node]
            conns.append(Connection(label[parent], own, theirs, orient))
        else:
            yield ConfigTree(tuple(conns))


def canonical_form(tree: ConfigTree) -> tuple[int, ...]:
    """Lexicographically smallest sequence over all relabelings of ``tree``."""
    check_structure(tree)
    return min(encode_tree(t) for t in relabelings(tree))


# ---------------------------------------------------------------------------
# Design files
# ---------------------------------------------------------------------------


def design_record(tree: ConfigTree, provenance: str = "", seed=None) -> dict:
    rec = tree.to_dict()
    rec["provenance"] = provenance
    rec["seed"] = seed
    return rec


def dumps_designs(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def loads_designs(text: str) -> list[ConfigTree]:
    trees = []
    for line in text.splitlines():
        line = line.strip()
        if line:
            trees.append(ConfigTree.from_dict(json.loads(line)))
    return trees
