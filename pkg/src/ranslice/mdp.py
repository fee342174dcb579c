"""State/action algebra of the PRB-allocation MDP.

Resource bits (Rbs) are the coarse allocation unit: 17 Rbs cover 50 PRBs,
three PRBs each except the last eMBB Rb, which holds two. Slices are always
ordered (mMTC, URLLC, eMBB).
"""
from __future__ import annotations

import json
from typing import NamedTuple

import numpy as np

TOTAL_RBS = 17
TOTAL_PRBS = 50
PRBS_PER_RB = 3
MAX_USERS = 10
N_ACTIONS = 7

# action -> (donor slice, recipient slice)
TRANSFERS = {
    1: (0, 1),  # mMTC -> URLLC
    2: (0, 2),  # mMTC -> eMBB
    3: (1, 0),  # URLLC -> mMTC
    4: (1, 2),  # URLLC -> eMBB
    5: (2, 0),  # eMBB -> mMTC
    6: (2, 1),  # eMBB -> URLLC
}
ACTION_FOR_TRANSFER = {v: k for k, v in TRANSFERS.items()}
ACTION_MEANING = {
    0: "keep the current allocation",
    1: "move one Rb from mMTC to URLLC",
    2: "move one Rb from mMTC to eMBB",
    3: "move one Rb from URLLC to mMTC",
    4: "move one Rb from URLLC to eMBB",
    5: "move one Rb from eMBB to mMTC",
    6: "move one Rb from eMBB to URLLC",
}


class InvalidStateError(ValueError):
    pass


class UserTuple(NamedTuple):
    n_mmtc: int
    n_urllc: int
    n_embb: int

    def validate(self) -> "UserTuple":
        if min(self) < 0 or not 1 <= sum(self) <= MAX_USERS:
            raise InvalidStateError(f"invalid user tuple {tuple(self)}")
        return self


class RbAllocation(NamedTuple):
    rb_mmtc: int
    rb_urllc: int

    @property
    def rb_embb(self) -> int:
        return TOTAL_RBS - self.rb_mmtc - self.rb_urllc

    def as_triple(self) -> tuple[int, int, int]:
        return (self.rb_mmtc, self.rb_urllc, self.rb_embb)

    def validate(self) -> "RbAllocation":
        if min(self.as_triple()) < 1:
            raise InvalidStateError(f"invalid Rb allocation {self.as_triple()}")
        return self


class State(NamedTuple):
    users: UserTuple
    rbs: RbAllocation

    def key(self) -> tuple[int, int, int, int, int]:
        return (*self.users, *self.rbs)

    @classmethod
    def from_key(cls, key) -> "State":
        m, u, e, rbm, rbu = (int(v) for v in key)
        return cls(UserTuple(m, u, e), RbAllocation(rbm, rbu))


class Transition(NamedTuple):
    s: State
    a: int
    s_next: State
    r: float
    epoch: int = 0
    trial: int = 0
    period: int = 0

    @property
    def trial_key(self) -> tuple[int, int]:
        return (self.epoch, self.trial)

    def to_json(self) -> str:
        return json.dumps({
            "s": list(self.s.key()), "a": int(self.a), "r": float(self.r),
            "sp": list(self.s_next.key()), "epoch": int(self.epoch),
            "tuple": list(self.s.users), "trial": int(self.trial), "period": int(self.period),
        })

    @classmethod
    def from_json(cls, line: str) -> "Transition":
        d = json.loads(line)
        return cls(State.from_key(d["s"]), int(d["a"]), State.from_key(d["sp"]), float(d["r"]),
                   int(d["epoch"]), int(d["trial"]), int(d["period"]))


def prbs_of(rbs: RbAllocation) -> tuple[int, int, int]:
    rbs.validate()
    return (PRBS_PER_RB * rbs.rb_mmtc, PRBS_PER_RB * rbs.rb_urllc, PRBS_PER_RB * rbs.rb_embb - 1)


def apply_action(rbs: RbAllocation, a: int) -> RbAllocation:
    """Move one Rb per the action table; transfers that would empty a slice are no-ops."""
    if a == 0:
        return rbs
    if a not in TRANSFERS:
        raise InvalidStateError(f"action {a} out of range")
    donor, recipient = TRANSFERS[a]
    alloc = list(rbs.as_triple())
    if alloc[donor] <= 1:
        return rbs
    alloc[donor] -= 1
    alloc[recipient] += 1
    return RbAllocation(alloc[0], alloc[1])


def valid_actions(s: State) -> tuple[int, ...]:
    rbs = s.rbs if isinstance(s, State) else s
    alloc = rbs.as_triple()
    return (0,) + tuple(a for a, (donor, _) in TRANSFERS.items() if alloc[donor] > 1)


def valid_mask(s: State) -> np.ndarray:
    m = np.zeros(N_ACTIONS, dtype=bool)
    m[list(valid_actions(s))] = True
    return m


def encode_state(s: State) -> np.ndarray:
    m, u, e = s.users
    return np.array([m / MAX_USERS, u / MAX_USERS, e / MAX_USERS,
                     s.rbs.rb_mmtc / TOTAL_RBS, s.rbs.rb_urllc / TOTAL_RBS])


def all_allocations() -> list[RbAllocation]:
    return [RbAllocation(m, u) for m in range(1, TOTAL_RBS - 1)
            for u in range(1, TOTAL_RBS - m)]


def all_user_tuples(max_users: int = MAX_USERS) -> list[UserTuple]:
    return [UserTuple(m, u, e)
            for m in range(max_users + 1) for u in range(max_users + 1) for e in range(max_users + 1)
            if 1 <= m + u + e <= max_users]
