"""Bellman-error policy selection and trial statistics."""
from __future__ import annotations

import logging
import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats as _st

from .agents import Policy, state_key
from .mdp import N_ACTIONS, Transition

log = logging.getLogger(__name__)


class SelectionError(ValueError):
    pass


class EvalStats(NamedTuple):
    mean: float
    std: float
    cv: float
    n_trials: int
    ci_halfwidth: float


def _valid_mask_rows(states, valid_fn) -> np.ndarray:
    cache: dict = {}
    rows = np.zeros((len(states), N_ACTIONS), dtype=bool)
    for i, s in enumerate(states):
        k = state_key(s)
        if k not in cache:
            cache[k] = list(valid_fn(s))
        rows[i, cache[k]] = True
    return rows


def bellman_error(policy: Policy, val: Sequence[Transition], discount: float) -> float:
    """Mean absolute TD residual of the policy's Q-estimate, max over valid next actions."""
    if len(val) == 0:
        raise SelectionError("validation set is empty")
    q = policy.q_values([t.s for t in val])
    qn = policy.q_values([t.s_next for t in val])
    qn = np.where(_valid_mask_rows([t.s_next for t in val], policy.valid_fn), qn, -np.inf)
    a = np.array([t.a for t in val])
    r = np.array([t.r for t in val], dtype=np.float64)
    resid = q[np.arange(len(val)), a] - (r + discount * qn.max(axis=1))
    return float(np.mean(np.abs(resid)))


def select_policy(candidates: Sequence[tuple[str, Policy]], val: Sequence[Transition],
                  discount: float) -> tuple[str, Policy, dict[str, float]]:
    """Return the candidate with the smallest Bellman error (first wins ties) and all errors."""
    if not candidates:
        raise SelectionError("no candidate policies")
    errors = {}
    best = None
    for name, pol in candidates:
        be = bellman_error(pol, val, discount)
        errors[name] = be
        log.info("candidate %s: Bellman error %.6f", name, be)
        if best is None or be < errors[best[0]]:
            best = (name, pol)
    return best[0], best[1], errors


def split_dataset(transitions: Sequence[Transition], ratio: float = 0.8,
                  seed: int = 0) -> tuple[list[Transition], list[Transition]]:
    """Random train/validation partition that keeps whole trials together."""
    if not 0 < ratio < 1:
        raise SelectionError(f"split ratio must lie in (0, 1), got {ratio}")
    trials = sorted({t.trial_key for t in transitions})
    if len(trials) < 2:
        raise SelectionError("need at least two trials to split")
    n_train = min(len(trials) - 1, max(1, int(round(ratio * len(trials)))))
    perm = np.random.default_rng(seed).permutation(len(trials))
    train_keys = {trials[i] for i in perm[:n_train]}
    train = [t for t in transitions if t.trial_key in train_keys]
    val = [t for t in transitions if t.trial_key not in train_keys]
    return train, val


def t_halfwidth(std: float, n: int, confidence: float = 0.95) -> float:
    return float(_st.t.ppf(0.5 + confidence / 2, n - 1) * std / math.sqrt(n))


def eval_stats(trial_scores: Sequence[float], confidence: float = 0.95) -> EvalStats:
    x = np.asarray(trial_scores, dtype=np.float64)
    if x.size < 2:
        raise SelectionError("eval_stats needs at least two trials")
    mean = float(x.mean())
    if mean <= 0:
        raise SelectionError("eval_stats needs a positive mean")
    std = float(x.std(ddof=1))
    return EvalStats(mean, std, std / mean, int(x.size), t_halfwidth(std, x.size, confidence))


def required_trials(stats: EvalStats, target_rel_halfwidth: float = 0.10,
                    confidence: float = 0.95, max_total: int = 1_000_000) -> int:
    """Extra trials until the Student-t CI halfwidth is within ``target_rel_halfwidth * mean``."""
    goal = target_rel_halfwidth * stats.mean
    if stats.std == 0 or stats.ci_halfwidth <= goal:
        return 0
    # normal-quantile guess, then walk to the smallest n that satisfies the t bound
    z = _st.norm.ppf(0.5 + confidence / 2)
    n = max(stats.n_trials, 2, math.ceil((z * stats.std / goal) ** 2))
    while t_halfwidth(stats.std, n, confidence) > goal:
        n += 1
        if n > max_total:
            raise SelectionError("required trial count exceeds max_total")
    while n - 1 >= max(stats.n_trials, 2) and t_halfwidth(stats.std, n - 1, confidence) <= goal:
        n -= 1
    return n - stats.n_trials
