"""Offline Q-learning agents (tabular and DQN), baseline policies, and policy files.

Everything trains from logged transitions only; nothing here steps the
environment. Q-functions are evaluated in batches: ``q_values(states)``
returns an ``(n, 7)`` float64 array.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Hashable, Sequence

import numpy as np

from .mdp import (ACTION_FOR_TRANSFER, N_ACTIONS, TOTAL_RBS, RbAllocation, State, Transition,
                  UserTuple, encode_state, valid_actions)


class TrainingError(RuntimeError):
    pass


@dataclass
class Hyperparams:
    tabular_lr: float = 0.1
    dqn_lr: float = 0.01
    discount: float = 0.99
    minibatch: int = 64
    target_sync_interval: int = 500
    dqn_steps: int = 20_000
    hidden: int = 256
    tabular_max_passes: int = 200
    tabular_tol: float = 1e-4
    epsilon: float = 0.05

    def validate(self) -> "Hyperparams":
        if self.tabular_lr <= 0 or self.dqn_lr <= 0:
            raise ValueError("agents: learning rates must be > 0")
        if not 0 <= self.discount < 1:
            raise ValueError("agents.discount must lie in [0, 1)")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("agents.epsilon must lie in [0, 1]")
        for name in ("minibatch", "target_sync_interval", "dqn_steps", "hidden", "tabular_max_passes"):
            if getattr(self, name) < 1:
                raise ValueError(f"agents.{name} must be >= 1")
        if self.tabular_tol < 0:
            raise ValueError("agents.tabular_tol must be >= 0")
        return self


def state_key(s) -> Hashable:
    return s.key() if isinstance(s, State) else s


# --------------------------------------------------------------------------- policies

class Policy:
    kind = "base"
    valid_fn: Callable = staticmethod(valid_actions)
    info: dict

    def q_values(self, states: Sequence) -> np.ndarray:
        raise NotImplementedError(f"{self.kind} policy has no Q-function")


class RandomPolicy(Policy):
    kind = "random"

    def __init__(self, valid_fn: Callable = valid_actions):
        self.valid_fn = valid_fn
        self.info = {}


class TabularPolicy(Policy):
    kind = "tabular"

    def __init__(self, table: dict | None = None, valid_fn: Callable = valid_actions, info: dict | None = None):
        self.table: dict[Hashable, np.ndarray] = table if table is not None else {}
        self.valid_fn = valid_fn
        self.info = info or {}

    def q(self, s, a: int) -> float:
        row = self.table.get(state_key(s))
        return 0.0 if row is None else float(row[a])

    def q_values(self, states: Sequence) -> np.ndarray:
        out = np.zeros((len(states), N_ACTIONS))
        for i, s in enumerate(states):
            row = self.table.get(state_key(s))
            if row is not None:
                out[i] = row
        return out


class DeepQPolicy(Policy):
    kind = "deepq"

    def __init__(self, net: "QNetwork", encode_fn: Callable = encode_state,
                 valid_fn: Callable = valid_actions, info: dict | None = None):
        self.net = net
        self.encode_fn = encode_fn
        self.valid_fn = valid_fn
        self.info = info or {}

    def q_values(self, states: Sequence) -> np.ndarray:
        if len(states) == 0:
            return np.zeros((0, self.net.n_out))
        X = np.stack([self.encode_fn(s) for s in states])
        return self.net.forward(X)[0]


def expert_target(users: UserTuple, weights: Sequence[float] = (1, 2, 3)) -> RbAllocation:
    """Rbs proportional to weight x user count per slice, at least one each, summing to 17."""
    demand = [w * n for w, n in zip(weights, users)]
    total = sum(demand)
    if total <= 0:
        return RbAllocation(1, 1)
    raw = [TOTAL_RBS * d / total for d in demand]
    t = [max(1, math.floor(x)) for x in raw]
    rem = [x - math.floor(x) for x in raw]
    while sum(t) < TOTAL_RBS:
        i = max(range(3), key=lambda j: (rem[j], -j))
        t[i] += 1
        rem[i] = -1.0
    while sum(t) > TOTAL_RBS:
        i = max(range(3), key=lambda j: (t[j], -j))
        t[i] -= 1
    return RbAllocation(t[0], t[1])


class ExpertPolicy(Policy):
    """Static rule: step one Rb at a time toward a per-tuple target allocation."""

    kind = "expert"

    def __init__(self, weights: Sequence[float] = (1, 2, 3), targets: dict | None = None):
        self.weights = tuple(float(w) for w in weights)
        self.targets = {tuple(k): RbAllocation(*v) for k, v in (targets or {}).items()}
        self.valid_fn = valid_actions
        self.info = {"weights": list(self.weights)}

    def target(self, users: UserTuple) -> RbAllocation:
        return self.targets.get(tuple(users)) or expert_target(users, self.weights)

    def decide(self, s: State) -> int:
        target = self.target(s.users).as_triple()
        cur = s.rbs.as_triple()
        if cur == target:
            return 0
        donor = max(range(3), key=lambda i: (cur[i] - target[i], -i))
        recipient = max(range(3), key=lambda i: (target[i] - cur[i], -i))
        return ACTION_FOR_TRANSFER[(donor, recipient)]


def act_greedy(policy: Policy, s, rng: np.random.Generator | None = None) -> int:
    """Highest-Q valid action, ties to the lowest action code."""
    valid = policy.valid_fn(s)
    if policy.kind == "random":
        if rng is None:
            raise ValueError("random policy needs an rng")
        return int(valid[int(rng.integers(len(valid)))])
    if policy.kind == "expert":
        return policy.decide(s)
    q = policy.q_values([s])[0]
    best = valid[0]
    for a in valid[1:]:
        if q[a] > q[best]:
            best = a
    return int(best)


def act_epsilon(policy: Policy, s, epsilon: float, rng: np.random.Generator) -> int:
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0 and rng.random() < epsilon:
        valid = policy.valid_fn(s)
        return int(valid[int(rng.integers(len(valid)))])
    return act_greedy(policy, s, rng)


# --------------------------------------------------------------------------- tabular

def tabular_train(dataset: Sequence[Transition], hp: Hyperparams, seed: int = 0,
                  valid_fn: Callable = valid_actions) -> TabularPolicy:
    """Watkins Q-learning swept repeatedly over a fixed batch of transitions.

    Each pass visits the data in a seed-shuffled order; training stops once the
    largest update of a pass falls below ``hp.tabular_tol`` or after
    ``hp.tabular_max_passes`` passes.
    """
    if not dataset:
        raise TrainingError("tabular_train needs a non-empty dataset")
    index: dict[Hashable, int] = {}
    objs = []

    def idx(s) -> int:
        k = state_key(s)
        if k not in index:
            index[k] = len(objs)
            objs.append(s)
        return index[k]

    S = [idx(t.s) for t in dataset]
    SP = [idx(t.s_next) for t in dataset]
    A = [int(t.a) for t in dataset]
    R = [float(t.r) for t in dataset]
    valid = [tuple(valid_fn(o)) for o in objs]
    Q = [[0.0] * N_ACTIONS for _ in objs]
    lr, g = hp.tabular_lr, hp.discount
    rng = np.random.default_rng(seed)
    passes, max_delta = 0, float("inf")
    for passes in range(1, hp.tabular_max_passes + 1):
        max_delta = 0.0
        for i in rng.permutation(len(dataset)).tolist():
            qn = Q[SP[i]]
            best = max([qn[b] for b in valid[SP[i]]])
            row = Q[S[i]]
            d = lr * (R[i] + g * best - row[A[i]])
            row[A[i]] += d
            if d > max_delta or -d > max_delta:
                max_delta = abs(d)
        if max_delta < hp.tabular_tol:
            break
    table = {}
    for k, i in index.items():
        row = np.array(Q[i])
        if any(row):
            table[k] = row
    return TabularPolicy(table, valid_fn, info={"passes": passes, "final_max_delta": max_delta,
                                                "n_transitions": len(dataset)})


# --------------------------------------------------------------------------- DQN

class QNetwork:
    """Two-layer perceptron ``n_in -> hidden (ReLU) -> n_out`` in float64."""

    def __init__(self, n_in: int = 5, hidden: int = 256, n_out: int = N_ACTIONS,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.n_in, self.hidden, self.n_out = n_in, hidden, n_out
        self.params = {
            "W1": rng.normal(0.0, math.sqrt(2.0 / n_in), (n_in, hidden)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, math.sqrt(1.0 / hidden), (hidden, n_out)),
            "b2": np.zeros(n_out),
        }

    def forward(self, X: np.ndarray, params: dict | None = None):
        p = params or self.params
        z = X @ p["W1"] + p["b1"]
        h = np.maximum(z, 0.0)
        return h @ p["W2"] + p["b2"], (X, z, h)

    def backward(self, cache, dq: np.ndarray, params: dict | None = None) -> dict:
        p = params or self.params
        X, z, h = cache
        dh = (dq @ p["W2"].T) * (z > 0)
        return {"W1": X.T @ dh, "b1": dh.sum(0), "W2": h.T @ dq, "b2": dq.sum(0)}

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}


class Adam:
    def __init__(self, params: dict, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        # in place with one scratch buffer: the classifier's dense layer has ~10^7 weights
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            tmp = np.multiply(g, 1 - self.b1)
            m *= self.b1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1 - self.b2
            v *= self.b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp *= 1 / math.sqrt(c2)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / c1
            params[k] -= tmp

    def state_arrays(self) -> dict:
        out = {f"adam_m_{k}": v for k, v in self.m.items()}
        out.update({f"adam_v_{k}": v for k, v in self.v.items()})
        return out


@dataclass
class TransitionArrays:
    X: np.ndarray
    A: np.ndarray
    R: np.ndarray
    XP: np.ndarray
    MP: np.ndarray  # valid-action mask of s_next


def transition_arrays(dataset: Sequence[Transition], encode_fn: Callable = encode_state,
                      valid_fn: Callable = valid_actions) -> TransitionArrays:
    enc: dict = {}
    masks: dict = {}

    def e(s):
        k = state_key(s)
        if k not in enc:
            enc[k] = np.asarray(encode_fn(s), dtype=np.float64)
        return enc[k]

    def m(s):
        k = state_key(s)
        if k not in masks:
            row = np.zeros(N_ACTIONS, dtype=bool)
            row[list(valid_fn(s))] = True
            masks[k] = row
        return masks[k]

    return TransitionArrays(
        X=np.stack([e(t.s) for t in dataset]),
        A=np.array([t.a for t in dataset], dtype=np.int64),
        R=np.array([t.r for t in dataset], dtype=np.float64),
        XP=np.stack([e(t.s_next) for t in dataset]),
        MP=np.stack([m(t.s_next) for t in dataset]),
    )


def td_targets(net: QNetwork, target_params: dict, R, XP, MP, discount: float) -> np.ndarray:
    qn = net.forward(XP, target_params)[0]
    qn = np.where(MP, qn, -np.inf)
    return R + discount * qn.max(axis=1)


def td_loss_and_grad(net: QNetwork, X, A, y) -> tuple[float, dict]:
    """Mean squared TD error against fixed targets ``y`` and its parameter gradient."""
    q, cache = net.forward(X)
    rows = np.arange(len(A))
    err = q[rows, A] - y
    loss = float(np.mean(err ** 2))
    dq = np.zeros_like(q)
    dq[rows, A] = 2.0 * err / len(A)
    return loss, net.backward(cache, dq)


def dqn_train(dataset: Sequence[Transition], hp: Hyperparams, seed: int = 0,
              encode_fn: Callable = encode_state, valid_fn: Callable = valid_actions) -> DeepQPolicy:
    """Fitted DQN on a fixed batch: uniform minibatches, periodic target sync, Adam."""
    if not dataset:
        raise TrainingError("dqn_train needs a non-empty dataset")
    arr = transition_arrays(dataset, encode_fn, valid_fn)
    rng = np.random.default_rng(seed)
    net = QNetwork(arr.X.shape[1], hp.hidden, N_ACTIONS, rng)
    opt = Adam(net.params, hp.dqn_lr)
    target = net.copy_params()
    n = len(dataset)
    loss = float("nan")
    for step in range(1, hp.dqn_steps + 1):
        b = rng.integers(0, n, size=hp.minibatch)
        y = td_targets(net, target, arr.R[b], arr.XP[b], arr.MP[b], hp.discount)
        loss, grads = td_loss_and_grad(net, arr.X[b], arr.A[b], y)
        if not math.isfinite(loss):
            norms = {k: float(np.linalg.norm(v)) for k, v in net.params.items()}
            raise TrainingError(f"non-finite TD loss at step {step}: loss={loss}, param norms={norms}")
        opt.step(net.params, grads)
        if step % hp.target_sync_interval == 0:
            target = net.copy_params()
    pol = DeepQPolicy(net, encode_fn, valid_fn, info={"steps": hp.dqn_steps, "final_loss": loss,
                                                      "n_transitions": n})
    pol.optimizer = opt
    return pol


# --------------------------------------------------------------------------- files

def save_policy(policy: Policy, path: str | Path, hp: Hyperparams | None = None) -> None:
    """Write a self-describing ``.npz`` archive (kind, hyperparameters, tables or weights)."""
    meta = {"kind": policy.kind, "hyperparams": asdict(hp) if hp else None, "info": policy.info}
    arrays: dict[str, np.ndarray] = {}
    if isinstance(policy, TabularPolicy):
        keys = sorted(policy.table)
        arrays["keys"] = np.array(keys, dtype=np.int64).reshape(len(keys), 5)
        arrays["values"] = np.array([policy.table[k] for k in keys], dtype=np.float64).reshape(len(keys), N_ACTIONS)
    elif isinstance(policy, DeepQPolicy):
        arrays.update(policy.net.params)
        opt = getattr(policy, "optimizer", None)
        if opt is not None:
            arrays.update(opt.state_arrays())
            meta["adam_t"] = opt.t
    elif isinstance(policy, ExpertPolicy):
        meta["weights"] = list(policy.weights)
        meta["targets"] = [[list(k), list(v)] for k, v in sorted(policy.targets.items())]
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_policy(path: str | Path) -> Policy:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        kind = meta["kind"]
        if kind == "tabular":
            table = {tuple(int(v) for v in k): row.copy() for k, row in zip(z["keys"], z["values"])}
            return TabularPolicy(table, info=meta["info"])
        if kind == "deepq":
            W1 = z["W1"]
            net = QNetwork(W1.shape[0], W1.shape[1], z["W2"].shape[1])
            net.params = {k: z[k].copy() for k in ("W1", "b1", "W2", "b2")}
            pol = DeepQPolicy(net, info=meta["info"])
            if "adam_t" in meta:
                opt = Adam(net.params, (meta["hyperparams"] or {}).get("dqn_lr", 0.01))
                opt.t = meta["adam_t"]
                opt.m = {k: z[f"adam_m_{k}"].copy() for k in net.params}
                opt.v = {k: z[f"adam_v_{k}"].copy() for k in net.params}
                pol.optimizer = opt
            return pol
        if kind == "random":
            return RandomPolicy()
        if kind == "expert":
            return ExpertPolicy(meta["weights"], {tuple(k): tuple(v) for k, v in meta["targets"]})
    raise ValueError(f"unknown policy kind {kind!r} in {path}")
