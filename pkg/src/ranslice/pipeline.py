"""Train-test-improve loop: collect trials, grow the dataset, train, select, redeploy.

All randomness derives from the root seed through :func:`derive_seed`, keyed by
epoch and trial index, so a run's outputs do not depend on ``jobs`` and an
interrupted run resumed from disk reproduces the uninterrupted one.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .agents import (ExpertPolicy, Policy, RandomPolicy, act_epsilon, dqn_train, load_policy, save_policy,
                     tabular_train)
from .config import Config
from .env import Gnb, emit_kpi_records, write_kpi_csv
from .mdp import RbAllocation, State, Transition, UserTuple, all_user_tuples, apply_action
from .scoring import reward
from .selection import SelectionError, eval_stats, required_trials, select_policy, split_dataset
from .traffic import SLICES, TraceLibrary, chunk_trace, period_arrays, read_trace_csv

log = logging.getLogger(__name__)

# stream tags for derive_seed
_TRIAL, _SPLIT, _TABULAR, _DQN, _EXTRAS, _EVAL, _LIB_TRAIN, _LIB_EVAL = range(8)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# --------------------------------------------------------------------------- traces

def build_library(cfg: Config, evaluation: bool = False) -> TraceLibrary:
    """Trace pool for collection (or, with ``evaluation``, an independently seeded one)."""
    t = cfg.traffic
    n_periods = int(round(t.chunk_s * 1000)) // cfg.env.period_ms
    if t.trace_dir:
        chunks = {}
        for s in SLICES:
            files = sorted(Path(t.trace_dir).glob(f"{s}_*.csv"))
            pool = [period_arrays(ch, cfg.env.period_ms, n_periods)
                    for f in files for ch in chunk_trace(read_trace_csv(f), t.chunk_s)]
            if not pool:
                raise FileNotFoundError(f"no usable {s}_*.csv traces in {t.trace_dir}")
            chunks[s] = pool
        return TraceLibrary(chunks)
    seed = derive_seed(cfg.seed, 0, _LIB_EVAL if evaluation else _LIB_TRAIN)
    return TraceLibrary.build(t.slice_profiles(), t.traces_per_slice, t.trace_duration_s, seed,
                              t.chunk_s, cfg.env.period_ms)


# --------------------------------------------------------------------------- episodes

def run_episode(policy: Policy, users: Sequence[int], seed: int, library: TraceLibrary, cfg: Config,
                epsilon: float = 0.0, epoch: int = 0, trial: int = 0,
                kpi_sink: list | None = None) -> tuple[list[Transition], float]:
    """One trial: a random trace chunk per UE, ``episode_periods`` control steps.

    The reward stored with ``(s, a)`` is computed from the frame produced after
    ``a`` is applied. KPI rows are appended to ``kpi_sink`` when given.
    """
    users = UserTuple(*(int(v) for v in users)).validate()
    n = cfg.pipeline.episode_periods
    trace_rng, act_rng, radio_rng = (np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(3))
    ue_arrivals = tuple([library.draw(s, trace_rng) for _ in range(k)] for s, k in zip(SLICES, users))
    for ues in ue_arrivals:
        for ua in ues:
            if ua.n_periods < n:
                raise ValueError(f"trace chunks hold {ua.n_periods} periods, episode needs {n}")
    ue_map, next_id = [], 0
    for k in users:
        ue_map.append(list(range(next_id, next_id + k)))
        next_id += k
    gnb = Gnb(ue_arrivals, cfg.env)
    rbs = RbAllocation(*cfg.pipeline.initial_rbs).validate()
    out: list[Transition] = []
    total = 0.0
    for t in range(n):
        s = State(users, rbs)
        a = act_epsilon(policy, s, epsilon, act_rng)
        rbs_next = apply_action(rbs, a)
        frame = gnb.step(rbs_next, t)
        r = reward(frame, cfg.score)
        total += r
        out.append(Transition(s, a, State(users, rbs_next), r, epoch, trial, t))
        if kpi_sink is not None:
            kpi_sink.extend(emit_kpi_records(frame, tuple(ue_map), cfg.env, radio_rng))
        rbs = rbs_next
    return out, total / n


def sample_extra_tuples(n: int, seed: int, exclude: Sequence[Sequence[int]] = ()) -> list[UserTuple]:
    """``n`` distinct tuples drawn uniformly from the valid universe minus ``exclude``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    skip = {tuple(int(v) for v in t) for t in exclude}
    pool = [t for t in all_user_tuples() if tuple(t) not in skip]
    if n > len(pool):
        raise ValueError(f"only {len(pool)} tuples available, asked for {n}")
    idx = np.random.default_rng(seed).choice(len(pool), size=n, replace=False)
    return [pool[i] for i in sorted(idx.tolist())]


# --------------------------------------------------------------------------- trial collection

@dataclass
class TrialResult:
    trial: int
    users: tuple
    transitions: list
    mean_score: float
    kpis: list | None = None


_WORKER: dict = {}


def _init_worker(library: TraceLibrary, cfg: Config, policy: Policy) -> None:
    _WORKER.update(library=library, cfg=cfg, policy=policy)


def _run_job(job: tuple) -> TrialResult:
    epoch, trial, users, seed, epsilon, want_kpis = job
    sink = [] if want_kpis else None
    tr, mean = run_episode(_WORKER["policy"], users, seed, _WORKER["library"], _WORKER["cfg"],
                           epsilon, epoch, trial, sink)
    return TrialResult(trial, tuple(users), tr, mean, sink)


def collect_trials(jobs: list[tuple], policy: Policy, library: TraceLibrary, cfg: Config,
                   n_workers: int = 1) -> list[TrialResult]:
    """Run trial jobs ``(epoch, trial, users, seed, epsilon, want_kpis)``; results keep job order."""
    if n_workers <= 1 or len(jobs) <= 1:
        _init_worker(library, cfg, policy)
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers, initializer=_init_worker,
                             initargs=(library, cfg, policy)) as ex:
        return list(ex.map(_run_job, jobs))


# --------------------------------------------------------------------------- epochs

def tuple_stats(scores: Sequence[float]) -> dict:
    """Mean/std/CV/CI of per-trial scores; spread fields are ``None`` below two trials."""
    out = {"mean": float(np.mean(scores)), "std": None, "cv": None, "n_trials": len(scores),
           "ci_halfwidth": None}
    if len(scores) >= 2 and out["mean"] > 0:
        st = eval_stats(scores)
        out.update(std=st.std, cv=st.cv, ci_halfwidth=st.ci_halfwidth)
    return out


@dataclass
class EpochConfig:
    epoch: int
    policy: Policy
    deployed: str
    tuples: list
    trials: list                 # trials per tuple, aligned with ``tuples``
    seed: int
    epsilon: float = 0.05


@dataclass
class EpochReport:
    epoch: int
    deployed: str
    tuples: list = field(default_factory=list)       # per-tuple stats dicts
    candidate_bes: dict = field(default_factory=dict)
    selected: str = ""
    dataset: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "deployed": self.deployed, "tuples": self.tuples,
                "candidate_bes": self.candidate_bes, "selected": self.selected,
                "dataset": self.dataset, "training": self.training}

    @classmethod
    def from_dict(cls, d: dict) -> "EpochReport":
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def epoch_config(cfg: Config, epoch: int, policy: Policy, deployed: str) -> EpochConfig:
    p = cfg.pipeline
    common = [UserTuple(*t) for t in p.common_tuples]
    extras = sample_extra_tuples(p.extra_tuples, derive_seed(cfg.seed, epoch, _EXTRAS), common)
    return EpochConfig(epoch, policy, deployed, common + extras,
                       [p.trials_per_tuple] * len(common) + [p.extra_trials] * len(extras),
                       cfg.seed, cfg.agents.epsilon)


def run_epoch(ec: EpochConfig, dataset: list[Transition], library: TraceLibrary, cfg: Config,
              out_dir: Path | None = None, n_workers: int = 1):
    """Collect, top up, train both candidates, select by Bellman error.

    Returns ``(dataset', report, {"tabular": ..., "deepq": ...}, new_transitions)``.
    """
    want_kpis = out_dir is not None and cfg.pipeline.write_kpis
    jobs, trial = [], 0
    for users, k in zip(ec.tuples, ec.trials):
        for _ in range(k):
            jobs.append((ec.epoch, trial, tuple(users), derive_seed(ec.seed, ec.epoch, _TRIAL, trial),
                         ec.epsilon, want_kpis))
            trial += 1
    results = collect_trials(jobs, ec.policy, library, cfg, n_workers)

    # top up tuples whose CI is still wider than the target
    by_tuple: dict[tuple, list[TrialResult]] = {tuple(u): [] for u in ec.tuples}
    for r in results:
        by_tuple[r.users].append(r)
    topup_jobs, topups = [], {}
    for users, rs in by_tuple.items():
        scores = [r.mean_score for r in rs]
        if len(scores) < 2 or np.mean(scores) <= 0:
            continue
        extra = min(required_trials(eval_stats(scores), cfg.pipeline.target_rel_halfwidth),
                    cfg.pipeline.topup_cap)
        topups[users] = extra
        for _ in range(extra):
            topup_jobs.append((ec.epoch, trial, users, derive_seed(ec.seed, ec.epoch, _TRIAL, trial),
                               ec.epsilon, want_kpis))
            trial += 1
    if topup_jobs:
        more = collect_trials(topup_jobs, ec.policy, library, cfg, n_workers)
        for r in more:
            by_tuple[r.users].append(r)
        results = results + more

    new = [t for r in results for t in r.transitions]
    dataset = dataset + new
    per_tuple = []
    for users, rs in by_tuple.items():
        scores = [r.mean_score for r in rs]
        per_tuple.append({"users": list(users), "scores": scores, "topup": topups.get(users, 0),
                          **tuple_stats(scores)})

    train, val = split_dataset(dataset, cfg.pipeline.split_ratio, derive_seed(ec.seed, ec.epoch, _SPLIT))
    hp = cfg.agents
    log.info("epoch %d: %d new transitions, training on %d (validation %d)",
             ec.epoch, len(new), len(train), len(val))
    cands = {"tabular": tabular_train(train, hp, derive_seed(ec.seed, ec.epoch, _TABULAR)),
             "deepq": dqn_train(train, hp, derive_seed(ec.seed, ec.epoch, _DQN))}
    selected, _, bes = select_policy(list(cands.items()), val, hp.discount)
    report = EpochReport(
        epoch=ec.epoch, deployed=ec.deployed, tuples=per_tuple, candidate_bes=bes, selected=selected,
        dataset={"new": len(new), "total": len(dataset), "train": len(train), "validation": len(val),
                 "trials": len(results)},
        training={k: {kk: v for kk, v in p.info.items()} for k, p in cands.items()},
    )
    if out_dir is not None:
        _persist_epoch(out_dir, ec.epoch, new, cands, report, results if want_kpis else [], cfg)
    return dataset, report, cands, new


def _epoch_dir(out_dir: Path, epoch: int) -> Path:
    return Path(out_dir) / f"epoch_{epoch}"


def _persist_epoch(out_dir: Path, epoch: int, new: list[Transition], cands: dict, report: EpochReport,
                   results: list[TrialResult], cfg: Config) -> None:
    d = _epoch_dir(out_dir, epoch)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "transitions.jsonl", "w") as fh:
        for t in new:
            fh.write(t.to_json() + "\n")
    for name, pol in cands.items():
        save_policy(pol, d / f"policy_{name}.bin", cfg.agents)
    if results:
        (d / "kpis").mkdir(exist_ok=True)
        for r in results:
            write_kpi_csv(r.kpis, d / "kpis" / f"trial_{r.trial}.csv")
    # the report goes last: its presence marks the epoch as complete
    tmp = d / "report.json.tmp"
    tmp.write_text(report.dumps())
    os.replace(tmp, d / "report.json")


def _load_epoch(out_dir: Path, epoch: int):
    d = _epoch_dir(out_dir, epoch)
    need = [d / "report.json", d / "transitions.jsonl", d / "policy_tabular.bin", d / "policy_deepq.bin"]
    if not all(p.exists() for p in need):
        return None
    report = EpochReport.from_dict(json.loads((d / "report.json").read_text()))
    with open(d / "transitions.jsonl") as fh:
        new = [Transition.from_json(line) for line in fh if line.strip()]
    cands = {k: load_policy(d / f"policy_{k}.bin") for k in ("tabular", "deepq")}
    return report, cands, new


def initial_policy(cfg: Config) -> Policy:
    if cfg.pipeline.initial_policy == "expert":
        return ExpertPolicy(cfg.pipeline.expert_weights)
    return RandomPolicy()


def train_test_improve(cfg: Config, out_dir: str | Path | None = None, resume: bool = True,
                       n_workers: int | None = None, library: TraceLibrary | None = None):
    """Chain ``cfg.pipeline.epochs`` epochs; returns ``(reports, final_policy, dataset)``."""
    if cfg.pipeline.epochs < 1:
        raise ValueError("at least one epoch is required")
    n_workers = n_workers or cfg.jobs or os.cpu_count() or 1
    out = Path(out_dir) if out_dir is not None else None
    library = library or build_library(cfg)
    policy, deployed = initial_policy(cfg), cfg.pipeline.initial_policy
    dataset: list[Transition] = []
    reports: list[EpochReport] = []
    for epoch in range(1, cfg.pipeline.epochs + 1):
        loaded = _load_epoch(out, epoch) if (out is not None and resume) else None
        if loaded is not None:
            report, cands, new = loaded
            dataset = dataset + new
            log.info("epoch %d: resumed from %s", epoch, _epoch_dir(out, epoch))
        else:
            ec = epoch_config(cfg, epoch, policy, deployed)
            dataset, report, cands, _ = run_epoch(ec, dataset, library, cfg, out, n_workers)
        reports.append(report)
        policy = cands[report.selected]
        deployed = f"{report.selected}@{epoch}"
        log.info("epoch %d: BEs %s -> deploy %s", epoch, report.candidate_bes, deployed)
    return reports, policy, dataset


# --------------------------------------------------------------------------- evaluation

def evaluate_policies(policies: dict[str, Policy], tuples: Sequence[Sequence[int]], n_trials: int,
                      cfg: Config, library: TraceLibrary | None = None, n_workers: int = 1) -> dict:
    """Greedy evaluation on fresh trials; every policy sees the same per-trial seeds."""
    if n_trials < 2:
        raise SelectionError("evaluation needs at least two trials per tuple")
    library = library or build_library(cfg, evaluation=True)
    out = {"tuples": [list(t) for t in tuples], "n_trials": n_trials, "policies": {}}
    for name, pol in policies.items():
        jobs = [(0, ti * n_trials + k, tuple(t), derive_seed(cfg.seed, 0, _EVAL, ti, k), 0.0, False)
                for ti, t in enumerate(tuples) for k in range(n_trials)]
        results = collect_trials(jobs, pol, library, cfg, n_workers)
        rows = []
        for ti, t in enumerate(tuples):
            scores = [r.mean_score for r in results[ti * n_trials:(ti + 1) * n_trials]]
            rows.append({"users": list(t), "scores": scores, **tuple_stats(scores)})
        out["policies"][name] = {"kind": pol.kind, "per_tuple": rows}
    return out


def final_evaluation(cfg: Config, policy: Policy, out_dir: str | Path | None = None,
                     n_workers: int = 1) -> dict:
    pols = {"selected": policy, "expert": ExpertPolicy(cfg.pipeline.expert_weights), "random": RandomPolicy()}
    res = evaluate_policies(pols, cfg.pipeline.eval_tuples, cfg.pipeline.eval_trials, cfg, n_workers=n_workers)
    if out_dir is not None:
        Path(out_dir, "final_eval.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    return res
