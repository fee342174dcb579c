"""``ranslice`` command line.

Every subcommand reads an optional YAML config (``--config``), applies
``--section.key value`` overrides on top, writes the resolved config to the
output directory and prints a short human-readable summary next to its
machine-readable outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import yaml

from . import classifier as clf
from .agents import ExpertPolicy, RandomPolicy, dqn_train, load_policy, save_policy, tabular_train
from .config import Config, ConfigError, dump_config, parse_config
from .env import write_kpi_csv
from .mdp import Transition
from .pipeline import _DQN, _TABULAR, build_library, derive_seed, final_evaluation, run_episode, train_test_improve
from .report import emit_report, load_reports, render_text
from .selection import select_policy
from .traffic import SLICES, generate_trace, write_trace_csv

log = logging.getLogger("ranslice")

# classifier seed streams
_CLF_DATA, _CLF_SPLIT, _CLF_TRAIN = 20, 21, 22


def _parse_overrides(extra: list[str]) -> dict:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} needs a value")
            raw = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = yaml.safe_load(raw)
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (default: built-in defaults)")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--jobs", type=int, help="parallel trial workers (0 = all cores)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ranslice", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-traces", help="write synthetic per-slice packet traces as CSV")
    _common(p)

    p = sub.add_parser("episode", help="run one trial and log its transitions and KPIs")
    _common(p)
    p.add_argument("--users", required=True, help="user tuple m,u,e")
    p.add_argument("--policy", default="random", help="random, expert or a policy .bin file")
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--trial", type=int, default=0, help="trial index (selects the seed)")

    p = sub.add_parser("train", help="train tabular and/or DQN policies on logged transitions")
    _common(p)
    p.add_argument("transitions", nargs="+", help="transitions.jsonl files")
    p.add_argument("--kind", choices=("tabular", "deepq", "both"), default="both")

    p = sub.add_parser("select", help="pick the minimum-Bellman-error policy on validation data")
    _common(p)
    p.add_argument("--validation", action="append", required=True,
                   help="transitions.jsonl file (repeat for several)")
    p.add_argument("policies", nargs="+", help="policy .bin files")

    p = sub.add_parser("pipeline", help="run the train-test-improve loop")
    _common(p)
    p.add_argument("--no-resume", action="store_true", help="ignore completed epochs on disk")
    p.add_argument("--skip-eval", action="store_true", help="skip the held-out baseline comparison")

    p = sub.add_parser("classify-train", help="simulate a labelled KPI dataset and train CNN classifiers")
    _common(p)
    p.add_argument("--dataset", help="existing manifest directory (KPI CSVs + labels.csv)")

    p = sub.add_parser("classify-eval", help="evaluate trained classifiers on the test split")
    _common(p)
    p.add_argument("--dataset", help="manifest directory (default: <out-dir>/classifier/dataset)")

    p = sub.add_parser("report", help="re-render tables from a pipeline output directory")
    _common(p)
    p.add_argument("--format", choices=("json", "text", "both"), default="both")
    return ap


def load_config(args, extra: list[str]) -> Config:
    overrides = _parse_overrides(extra)
    for flag, key in (("seed", "seed"), ("out_dir", "out_dir"), ("jobs", "jobs")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    return parse_config(args.config, overrides)


def _out(cfg: Config) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.resolved.yaml")
    return out


def _read_transitions(paths) -> list[Transition]:
    out = []
    for p in paths:
        with open(p) as fh:
            out += [Transition.from_json(line) for line in fh if line.strip()]
    return out


def _policy_arg(name: str, cfg: Config):
    if name == "random":
        return RandomPolicy()
    if name == "expert":
        return ExpertPolicy(cfg.pipeline.expert_weights)
    return load_policy(name)


def cmd_gen_traces(cfg: Config, args) -> int:
    out = _out(cfg) / "traces"
    out.mkdir(exist_ok=True)
    t = cfg.traffic
    profiles = t.slice_profiles()
    for si, s in enumerate(SLICES):
        for i in range(t.traces_per_slice):
            tr = generate_trace(profiles[s], t.trace_duration_s, derive_seed(cfg.seed, si, i))
            write_trace_csv(tr, out / f"{s}_{i:03d}.csv")
            dl = sum(e.bytes for e in tr if e.direction == "downlink")
            print(f"{s}_{i:03d}.csv: {len(tr)} packets, {dl * 8 / t.trace_duration_s / 1e6:.3f} Mbps downlink")
    return 0


def cmd_episode(cfg: Config, args) -> int:
    out = _out(cfg) / "episode"
    out.mkdir(exist_ok=True)
    users = tuple(int(v) for v in args.users.split(","))
    pol = _policy_arg(args.policy, cfg)
    kpis: list = []
    trs, mean = run_episode(pol, users, derive_seed(cfg.seed, 0, 0, args.trial), build_library(cfg), cfg,
                            args.epsilon, 0, args.trial, kpis)
    with open(out / "transitions.jsonl", "w") as fh:
        fh.writelines(t.to_json() + "\n" for t in trs)
    write_kpi_csv(kpis, out / "kpis.csv")
    summary = {"users": list(users), "policy": pol.kind, "mean_score": mean, "n_transitions": len(trs),
               "final_rbs": list(trs[-1].s_next.rbs.as_triple())}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"users {users} under {pol.kind}: mean score {mean:.4f} over {len(trs)} periods, "
          f"final Rbs {summary['final_rbs']}")
    return 0


def cmd_train(cfg: Config, args) -> int:
    out = _out(cfg)
    data = _read_transitions(args.transitions)
    kinds = ("tabular", "deepq") if args.kind == "both" else (args.kind,)
    for k in kinds:
        seed = derive_seed(cfg.seed, 0, _TABULAR if k == "tabular" else _DQN)
        pol = tabular_train(data, cfg.agents, seed) if k == "tabular" else dqn_train(data, cfg.agents, seed)
        save_policy(pol, out / f"policy_{k}.bin", cfg.agents)
        print(f"{k}: trained on {len(data)} transitions -> {out / f'policy_{k}.bin'} {pol.info}")
    return 0


def cmd_select(cfg: Config, args) -> int:
    out = _out(cfg)
    val = _read_transitions(args.validation)
    cands = [(p, load_policy(p)) for p in args.policies]
    name, _, bes = select_policy(cands, val, cfg.agents.discount)
    (out / "selection.json").write_text(json.dumps({"bellman_errors": bes, "selected": name}, indent=2) + "\n")
    for p, be in bes.items():
        print(f"{'*' if p == name else ' '} {p}: Bellman error {be:.6f}")
    return 0


def cmd_pipeline(cfg: Config, args) -> int:
    out = _out(cfg)
    reports, policy, _ = train_test_improve(cfg, out, resume=not args.no_resume)
    fe = None
    if not args.skip_eval and cfg.pipeline.eval_trials >= 2:
        fe = final_evaluation(cfg, policy, out, n_workers=cfg.jobs or 1)
    emit_report(reports, out, fe)
    print(render_text(reports, fe))
    return 0


def _clf_data(cfg: Config, dataset_dir: str | None, out: Path, generate: bool) -> clf.Dataset:
    if dataset_dir:
        return clf.load_dataset(dataset_dir)
    d = out / "classifier" / "dataset"
    if (d / "labels.csv").exists():
        return clf.load_dataset(d)
    if not generate:
        raise FileNotFoundError(f"no dataset at {d}; run classify-train first or pass --dataset")
    c = cfg.classifier
    return clf.generate_dataset(c.trials_per_class, derive_seed(cfg.seed, 0, _CLF_DATA), build_library(cfg),
                                cfg.env, c.rbs, cfg.pipeline.episode_periods, d)


def cmd_classify_train(cfg: Config, args) -> int:
    out = _out(cfg)
    ds = _clf_data(cfg, args.dataset, out, generate=True)
    c = cfg.classifier
    train, _ = clf.split_streams(ds, c.test_fraction, derive_seed(cfg.seed, 0, _CLF_SPLIT))
    hp = clf.CnnHyperparams.from_config(c)
    mdir = out / "classifier"
    mdir.mkdir(parents=True, exist_ok=True)
    for T in c.window_sizes:
        model = clf.train_for_window(train, int(T), hp, c.max_train_per_class,
                                     derive_seed(cfg.seed, 0, _CLF_TRAIN, int(T)))
        clf.save_model(model, mdir / f"model_T{T}.bin")
        last = model.history[-1]
        print(f"T={T}: {len(model.history)} epochs, final val loss {last['val_loss']:.4f}, lr {model.lr:g}")
    return 0


def cmd_classify_eval(cfg: Config, args) -> int:
    out = _out(cfg)
    ds = _clf_data(cfg, args.dataset, out, generate=False)
    c = cfg.classifier
    _, test = clf.split_streams(ds, c.test_fraction, derive_seed(cfg.seed, 0, _CLF_SPLIT))
    mdir = out / "classifier"
    results = {}
    for T in c.window_sizes:
        model = clf.load_model(mdir / f"model_T{T}.bin")
        r = clf.evaluate_model(model, test, c.itr_threshold)
        results[str(T)] = r
        for tag in ("no_itr", "itr"):
            with open(mdir / f"confusion_T{T}_{tag}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["truth\\pred", *clf.CLASSES])
                w.writerows([clf.CLASSES[i], *row] for i, row in enumerate(r[tag]["confusion"]))
        print(f"T={T}: accuracy {r['no_itr']['accuracy']:.4f}, with ITR {r['itr']['accuracy']:.4f}, "
              f"inference {r['latency']['mean_ms']:.2f} ms/window")
    (mdir / "metrics.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_report(cfg: Config, args) -> int:
    out = Path(cfg.out_dir)
    reports, fe = load_reports(out)
    if not reports:
        raise FileNotFoundError(f"no epoch reports under {out}")
    formats = ("json", "text") if args.format == "both" else (args.format,)
    emit_report(reports, out, fe, formats)
    print(render_text(reports, fe))
    return 0


COMMANDS = {
    "gen-traces": cmd_gen_traces, "episode": cmd_episode, "train": cmd_train, "select": cmd_select,
    "pipeline": cmd_pipeline, "classify-train": cmd_classify_train, "classify-eval": cmd_classify_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args, extra = build_parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args, extra)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
