import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ranslice.mdp import (InvalidStateError, RbAllocation, State, Transition, UserTuple, all_allocations,
                          all_user_tuples, apply_action, encode_state, prbs_of, valid_actions, valid_mask)

allocs = st.sampled_from(all_allocations())
actions = st.integers(0, 6)


def test_prb_map():
    assert prbs_of(RbAllocation(1, 1)) == (3, 3, 44)
    assert prbs_of(RbAllocation(15, 1)) == (45, 3, 2)


def test_apply_action_examples():
    assert apply_action(RbAllocation(5, 5), 0) == (5, 5)
    assert apply_action(RbAllocation(5, 5), 1) == (4, 6)
    assert apply_action(RbAllocation(1, 5), 1) == (1, 5)
    with pytest.raises(InvalidStateError):
        apply_action(RbAllocation(5, 5), 7)


def test_valid_actions_examples():
    # mMTC and URLLC at 1 Rb: only moves out of eMBB remain
    assert set(valid_actions(State(UserTuple(1, 1, 1), RbAllocation(1, 1)))) == {0, 5, 6}
    assert set(valid_actions(State(UserTuple(1, 1, 1), RbAllocation(5, 5)))) == set(range(7))
    assert set(valid_actions(State(UserTuple(1, 1, 1), RbAllocation(15, 1)))) == {0, 1, 2}


def test_encode_state_examples():
    np.testing.assert_allclose(encode_state(State(UserTuple(1, 2, 3), RbAllocation(5, 6))),
                               [0.1, 0.2, 0.3, 5 / 17, 6 / 17])
    np.testing.assert_allclose(encode_state(State(UserTuple(10, 0, 0), RbAllocation(15, 1))),
                               [1.0, 0, 0, 15 / 17, 1 / 17])


def test_universe_sizes():
    assert len(all_allocations()) == 120
    assert len(all_user_tuples()) == 285
    assert len(set(all_user_tuples())) == 285


def test_invalid_values_rejected():
    with pytest.raises(InvalidStateError):
        UserTuple(0, 0, 0).validate()
    with pytest.raises(InvalidStateError):
        UserTuple(5, 5, 1).validate()
    with pytest.raises(InvalidStateError):
        RbAllocation(0, 5).validate()
    with pytest.raises(InvalidStateError):
        RbAllocation(10, 7).validate()


@given(allocs, st.lists(actions, max_size=50))
def test_rb_conservation(rbs, seq):
    for a in seq:
        rbs = apply_action(rbs, a)
        assert sum(rbs.as_triple()) == 17
        assert min(rbs.as_triple()) >= 1
        assert sum(prbs_of(rbs)) == 50


@given(allocs, actions)
def test_valid_iff_allocation_changes(rbs, a):
    s = State(UserTuple(1, 1, 1), rbs)
    changes = apply_action(rbs, a) != rbs
    assert (a in valid_actions(s)) == (a == 0 or changes)
    assert valid_mask(s)[a] == (a in valid_actions(s))


@given(allocs)
def test_inverse_pairs_on_interior(rbs):
    if min(rbs.as_triple()) < 2:
        return
    for a, b in ((1, 3), (2, 5), (4, 6)):
        assert apply_action(apply_action(rbs, a), b) == rbs
        assert apply_action(apply_action(rbs, b), a) == rbs


@given(st.sampled_from(all_user_tuples()), allocs)
def test_encoding_in_unit_cube(users, rbs):
    x = encode_state(State(users, rbs))
    assert x.shape == (5,)
    assert np.all((0 <= x) & (x <= 1))


def test_transition_json_format():
    t = Transition(State(UserTuple(1, 2, 3), RbAllocation(5, 6)), 1,
                   State(UserTuple(1, 2, 3), RbAllocation(4, 7)), 0.25, 2, 9, 17)
    d = json.loads(t.to_json())
    assert d == {"s": [1, 2, 3, 5, 6], "a": 1, "r": 0.25, "sp": [1, 2, 3, 4, 7], "epoch": 2,
                 "tuple": [1, 2, 3], "trial": 9, "period": 17}
    assert Transition.from_json(t.to_json()) == t
    assert State.from_key(t.s.key()) == t.s
