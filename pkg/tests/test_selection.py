import numpy as np
import pytest
from conftest import toy_states, toy_transitions, toy_valid, value_iteration
from hypothesis import given, strategies as st

from ranslice.agents import Hyperparams, TabularPolicy, tabular_train
from ranslice.mdp import RbAllocation, State, Transition, UserTuple
from ranslice.selection import (EvalStats, SelectionError, bellman_error, eval_stats, required_trials,
                                select_policy, split_dataset, t_halfwidth)

S0 = State(UserTuple(1, 1, 1), RbAllocation(5, 5))


def exact_policy(gamma=0.99):
    Q = value_iteration(gamma)
    return TabularPolicy({s: np.nan_to_num(Q[s]) for s in toy_states()}, toy_valid)


def test_bellman_error_examples():
    zero = TabularPolicy()
    assert bellman_error(zero, [Transition(S0, 0, S0, 0.0)] * 3, 0.99) == 0.0
    assert bellman_error(zero, [Transition(S0, 2, S0, 0.5)], 0.99) == pytest.approx(0.5)
    with pytest.raises(SelectionError):
        bellman_error(zero, [], 0.99)


def test_bellman_error_zero_at_fixed_point():
    assert bellman_error(exact_policy(), toy_transitions(), 0.99) <= 1e-9


def test_bellman_error_uses_valid_next_actions():
    # the large value sits on an action that is invalid in s'
    sp = State(UserTuple(1, 1, 1), RbAllocation(1, 1))
    q = np.zeros(7)
    q[1] = 50.0
    pol = TabularPolicy({sp.key(): q})
    assert bellman_error(pol, [Transition(S0, 0, sp, 0.0)], 0.9) == 0.0


def test_select_policy_examples():
    data = toy_transitions()
    zero = TabularPolicy({}, toy_valid)
    name, pol, errs = select_policy([("zero", zero), ("exact", exact_policy())], data, 0.99)
    assert name == "exact" and errs["exact"] < errs["zero"]
    assert select_policy([("only", zero)], data, 0.99)[0] == "only"
    assert select_policy([("a", zero), ("b", TabularPolicy({}, toy_valid))], data, 0.99)[0] == "a"
    with pytest.raises(SelectionError):
        select_policy([], data, 0.99)


def test_converged_tabular_beats_untrained():
    hp = Hyperparams(tabular_max_passes=50_000, tabular_tol=1e-9)
    data = toy_transitions()
    trained = tabular_train(data, hp, valid_fn=toy_valid)
    name = select_policy([("zero", TabularPolicy({}, toy_valid)), ("tab", trained)], data, hp.discount)[0]
    assert name == "tab"


def test_bellman_error_falls_once_values_have_propagated():
    data = toy_transitions()
    bes = [bellman_error(tabular_train(data, Hyperparams(tabular_max_passes=p, tabular_tol=0),
                                       valid_fn=toy_valid), data, 0.99)
           for p in (160, 320, 640, 1280, 2560, 5120)]
    assert all(b <= a + 1e-6 for a, b in zip(bes, bes[1:]))


@pytest.mark.xfail(strict=True, reason="sparse rewards: early passes raise the residual before it falls")
def test_bellman_error_non_increasing_in_passes_from_the_start():
    data = toy_transitions()
    bes = [bellman_error(tabular_train(data, Hyperparams(tabular_max_passes=p, tabular_tol=0),
                                       valid_fn=toy_valid), data, 0.99)
           for p in (1, 2, 4, 8, 16)]
    assert all(b <= a + 1e-6 for a, b in zip(bes, bes[1:]))


def _trials(n, per=3):
    return [Transition(S0, 0, S0, 0.1, 0, k, p) for k in range(n) for p in range(per)]


def test_split_examples():
    train, val = split_dataset(_trials(10), 0.8, seed=4)
    assert len({t.trial_key for t in train}) == 8
    assert len({t.trial_key for t in val}) == 2
    assert split_dataset(_trials(10), 0.8, seed=4) == (train, val)
    with pytest.raises(SelectionError):
        split_dataset(_trials(10), 1.0)
    with pytest.raises(SelectionError):
        split_dataset(_trials(1), 0.8)


@given(st.integers(2, 40), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_a_trial_partition(n, ratio, seed):
    data = _trials(n, per=2)
    train, val = split_dataset(data, ratio, seed)
    tk, vk = {t.trial_key for t in train}, {t.trial_key for t in val}
    assert tk and vk and not (tk & vk)
    assert sorted(train + val) == sorted(data)


def test_eval_stats_examples():
    s = eval_stats([0.6] * 5)
    assert s.cv == 0 and s.ci_halfwidth == 0
    s = eval_stats([0.5, 0.7])
    assert s.mean == pytest.approx(0.6)
    assert s.std == pytest.approx(0.1414, abs=1e-4)
    assert s.cv == pytest.approx(0.2357, abs=1e-4)
    for bad in ([0.5], [0.0, 0.0], [-1, 0.5]):
        with pytest.raises(SelectionError):
            eval_stats(bad)


def test_eval_stats_table_row_shape():
    # synthetic scores around a near-perfect tuple: mean ~0.997, cv well under 1%
    x = 0.9972 + 0.0060 * 0.9972 * np.array([1, -1] * 5)
    s = eval_stats(x)
    assert round(s.mean, 4) == 0.9972
    assert s.cv == pytest.approx(0.0060 * np.sqrt(10 / 9), rel=1e-6)


def test_required_trials_examples():
    assert required_trials(eval_stats([0.6] * 4)) == 0
    assert required_trials(EvalStats(0.6, 0.01, 0.01 / 0.6, 10, t_halfwidth(0.01, 10))) == 0
    # smallest n with t(0.975, n-1) * 0.15 / sqrt(n) <= 0.06 is 27
    stats = EvalStats(0.6, 0.15, 0.25, 5, t_halfwidth(0.15, 5))
    assert required_trials(stats) == 22


@given(st.floats(0.01, 1), st.integers(2, 500))
def test_ci_halfwidth_shrinks_with_n(std, n):
    assert t_halfwidth(std, n + 1) <= t_halfwidth(std, n)
