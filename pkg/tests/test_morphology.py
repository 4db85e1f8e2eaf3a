from __future__ import annotations

import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metamachine.geometry import interference_rule, self_collides
from metamachine.morphology import (
    MIRROR_DOCK,
    N_DOCKS,
    NULL_GROUP,
    SEQ_LEN,
    ConfigTree,
    DockCategory,
    IntegrityError,
    InvalidDesignError,
    MalformedSequenceError,
    StructuralError,
    canonical_form,
    count_two_module,
    decode_seq,
    design_record,
    dock_category,
    dumps_designs,
    encode_tree,
    enumerate_two_module,
    estimate_recurrence,
    estimate_unique,
    format_seq,
    loads_designs,
    parse_seq,
    relabelings,
    sample_tree,
    sample_trees,
)

NULLS = NULL_GROUP * 4


def test_dock_categories():
    cats = [dock_category(i) for i in range(N_DOCKS)]
    assert cats.count(DockCategory.SPHERE) == 4
    assert cats.count(DockCategory.SIDE) == 12
    assert cats.count(DockCategory.TIP) == 2
    with pytest.raises(ValueError):
        dock_category(18)


def test_mirror_dock_is_involution():
    assert sorted(MIRROR_DOCK) == list(range(N_DOCKS))
    assert all(MIRROR_DOCK[MIRROR_DOCK[d]] == d for d in range(N_DOCKS))
    assert all(dock_category(MIRROR_DOCK[d]) == dock_category(d) for d in range(N_DOCKS))


def test_encode_examples():
    assert encode_tree(ConfigTree()) == NULLS
    assert encode_tree(ConfigTree.from_tuples([(0, 4, 4, 0)])) == (0, 4, 4, 0) + NULL_GROUP * 3
    assert len(NULLS) == SEQ_LEN


def test_decode_examples():
    assert decode_seq(NULLS) == ConfigTree()
    assert decode_seq((0, 4, 4, 0) + NULL_GROUP * 3) == ConfigTree.from_tuples([(0, 4, 4, 0)])
    with pytest.raises(MalformedSequenceError):
        decode_seq((3, 4, 4, 0) + NULL_GROUP * 3)


def test_decode_rejects_malformed():
    with pytest.raises(MalformedSequenceError):
        decode_seq((0, 4, 4) + NULL_GROUP * 3)
    with pytest.raises(MalformedSequenceError):
        decode_seq((0, 4, 18, 0) + NULL_GROUP * 3)
    with pytest.raises(MalformedSequenceError):
        decode_seq(NULL_GROUP + (0, 4, 4, 0) + NULL_GROUP * 2)
    with pytest.raises(MalformedSequenceError):
        decode_seq((0, 4, 4, 7) + NULL_GROUP * 3)


def test_decode_rejects_interfering_mating():
    a, b, o = next((a, b, o) for a in range(4, 10) for b in range(4, 10) for o in range(3)
                   if interference_rule(a, b, o))
    with pytest.raises(InvalidDesignError):
        decode_seq((0, a, b, o) + NULL_GROUP * 3)


def test_structural_errors():
    with pytest.raises(StructuralError):
        encode_tree(ConfigTree.from_tuples([(1, 4, 4, 0)]))
    with pytest.raises(StructuralError):
        encode_tree(ConfigTree.from_tuples([(0, 4, 4, 0)] * 5))


def test_roundtrip_sampled_trees():
    trees = sample_trees(0, 10_000, n_modules=5)
    for t in trees:
        assert decode_seq(encode_tree(t)) == t


def test_text_format_roundtrip():
    t = sample_tree(3, 4)
    seq = encode_tree(t)
    assert parse_seq(format_seq(seq)) == seq
    with pytest.raises(MalformedSequenceError):
        parse_seq("0 4 x")


def test_design_file_roundtrip():
    trees = sample_trees(5, 20)
    text = dumps_designs([design_record(t, "sampled", 5) for t in trees])
    assert loads_designs(text) == trees
    rec = json.loads(text.splitlines()[0])
    assert set(rec) == {"n_modules", "connections", "provenance", "seed"}
    with pytest.raises(StructuralError):
        ConfigTree.from_dict({"n_modules": 3, "connections": [[0, 4, 4, 0]]})


def _brute_two_module(D, O, S):
    # side docks are the last S indices; orientation 0 of a side-side pair interferes
    side = set(range(D - S, D))
    reps = set()
    for a, b, o in itertools.product(range(D), range(D), range(O)):
        if a in side and b in side and o == 0:
            continue
        reps.add(min((a, b, o), (b, a, o)))
    return len(reps)


def test_count_two_module_examples():
    assert count_two_module(18, 3, 12) == 435
    assert count_two_module(2, 1, 0) == 3
    assert count_two_module(18, 3, 0) == 513
    assert _brute_two_module(18, 3, 0) == 513


@pytest.mark.parametrize("D,O,S", [(D, O, S) for D in range(1, 5) for O in range(1, 5) for S in range(0, D + 1)])
def test_count_matches_brute_force(D, O, S):
    assert count_two_module(D, O, S) == _brute_two_module(D, O, S)


def test_count_rejects_inconsistent_model():
    with pytest.raises(IntegrityError):
        count_two_module(4, 3, 5)


def test_enumeration_agrees_with_count():
    assert len(enumerate_two_module()) == 435


def test_estimate_examples():
    assert estimate_unique(1) == 1.0
    assert estimate_unique(2) == 432.0
    assert estimate_unique(5) == pytest.approx(864**4 / 5, rel=1e-15)
    assert estimate_unique(5) == pytest.approx(1.1145e11, rel=1e-4)
    for n in range(1, 6):
        assert estimate_unique(n) == pytest.approx(estimate_recurrence(n), rel=1e-12)
    with pytest.raises(ValueError):
        estimate_unique(0)


def test_sampling_deterministic():
    assert sample_tree(7, 2) == sample_tree(7, 2)
    assert sample_tree(7, 1) == ConfigTree()


def test_sampled_trees_are_valid():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        t = sample_tree(rng)
        assert 2 <= t.n_modules <= 5
        for c in t.connections:
            assert not interference_rule(c.parent_dock, c.child_dock, c.orientation)
        assert not self_collides(t, np.zeros(t.n_modules))
        used = [[] for _ in range(t.n_modules)]
        for i, c in enumerate(t.connections):
            used[c.parent_module].append(c.parent_dock)
            used[i + 1].append(c.child_dock)
        assert all(len(u) == len(set(u)) for u in used)


def test_canonical_examples():
    assert canonical_form(ConfigTree()) == NULLS
    t = ConfigTree.from_tuples([(0, 4, 10, 1)])
    swapped = ConfigTree.from_tuples([(0, 10, 4, 1)])
    assert canonical_form(t) == canonical_form(swapped)


def test_canonical_idempotent():
    for t in sample_trees(21, 1000):
        c = canonical_form(t)
        assert canonical_form(decode_seq(c)) == c


def test_relabelings_preserve_assembly():
    t = sample_tree(4, 4)
    forms = {canonical_form(r) for r in relabelings(t)}
    assert forms == {canonical_form(t)}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_roundtrip_property(seed, n):
    t = sample_tree(seed, n)
    assert decode_seq(encode_tree(t)) == t
