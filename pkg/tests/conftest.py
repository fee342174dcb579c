from __future__ import annotations

import numpy as np
import pytest

from ranslice.config import config_from_dict
from ranslice.mdp import Transition

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# --------------------------------------------------------------------------- toy MDP
# 7x7 grid, reward 1 on entering (or staying at) the centre cell.

GRID = 7
GOAL = (3, 3)
MOVES = {0: (0, 0), 1: (0, 1), 2: (0, -1), 3: (-1, 0), 4: (1, 0), 5: (1, 1), 6: (-1, -1)}


def toy_states() -> list[tuple[int, int]]:
    return [(x, y) for x in range(GRID) for y in range(GRID)]


def toy_valid(s) -> tuple[int, ...]:
    return tuple(a for a, (dx, dy) in MOVES.items() if 0 <= s[0] + dx < GRID and 0 <= s[1] + dy < GRID)


def toy_step(s, a):
    dx, dy = MOVES[a]
    nxt = (s[0] + dx, s[1] + dy)
    return nxt, 1.0 if nxt == GOAL else 0.0


def toy_encode(s) -> np.ndarray:
    return np.array([s[0] / (GRID - 1), s[1] / (GRID - 1), 0.0, 0.0, 0.0])


def toy_transitions(repeat: int = 1) -> list[Transition]:
    out = []
    for k in range(repeat):
        for i, s in enumerate(toy_states()):
            for a in toy_valid(s):
                nxt, r = toy_step(s, a)
                out.append(Transition(s, a, nxt, r, 0, k * 1000 + i, a))
    return out


def value_iteration(gamma: float, tol: float = 1e-14) -> dict:
    """Exact Q* of the toy grid (NaN for invalid actions)."""
    Q = {s: np.full(7, np.nan) for s in toy_states()}
    for s in Q:
        Q[s][list(toy_valid(s))] = 0.0
    while True:
        V = {s: np.nanmax(q) for s, q in Q.items()}
        delta = 0.0
        for s in Q:
            for a in toy_valid(s):
                nxt, r = toy_step(s, a)
                new = r + gamma * V[nxt]
                delta = max(delta, abs(new - Q[s][a]))
                Q[s][a] = new
        if delta < tol:
            return Q


def optimal_actions(q: np.ndarray, tol: float = 1e-9) -> set[int]:
    best = np.nanmax(q)
    return {a for a in range(7) if not np.isnan(q[a]) and q[a] >= best - tol}


@pytest.fixture(scope="session")
def small_cfg():
    """Short trials and tiny training budgets for fast end-to-end checks."""
    return config_from_dict({
        "seed": 11,
        "jobs": 1,
        "traffic": {"traces_per_slice": 1, "trace_duration_s": 60.0, "chunk_s": 30.0},
        "agents": {"dqn_steps": 200, "hidden": 32, "tabular_max_passes": 5},
        "pipeline": {"epochs": 2, "trials_per_tuple": 2, "common_tuples": [[0, 1, 2], [1, 1, 1]],
                     "extra_tuples": 1, "episode_periods": 40, "topup_cap": 1, "eval_trials": 2,
                     "eval_tuples": [[0, 1, 2]]},
    })


@pytest.fixture(scope="session")
def small_library(small_cfg):
    from ranslice.pipeline import build_library
    return build_library(small_cfg)
