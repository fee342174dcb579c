"""Epoch reports rendered as JSON and as plain-text tables."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from .pipeline import EpochReport


def _num(v, digits: int = 4) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


def _users(u) -> str:
    return ", ".join(str(int(x)) for x in u)


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    line = " | ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()
    sep = "-+-".join("-" * w for w in widths)
    body = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join([line, sep, *body])


def per_tuple_table(rows: Sequence[dict]) -> str:
    """``Users | Mean | CV | Trials`` for one policy."""
    return format_table(("Users", "Mean", "CV", "Trials"),
                        [(_users(r["users"]), _num(r["mean"]), _num(r["cv"]), str(r["n_trials"])) for r in rows])


def selection_table(reports: Sequence[EpochReport]) -> str:
    names = sorted({k for r in reports for k in r.candidate_bes})
    rows = [[str(r.epoch), r.deployed] + [_num(r.candidate_bes.get(n), 6) for n in names] + [r.selected]
            for r in reports]
    return format_table(["Epoch", "Deployed"] + [f"BE {n}" for n in names] + ["Selected"], rows)


def comparison_table(final_eval: dict) -> str:
    """Mean and CV per policy per tuple, one row per tuple."""
    pols = list(final_eval["policies"])
    header = ["Users"] + [f"{p} {m}" for p in pols for m in ("Mean", "CV")]
    rows = []
    for i, users in enumerate(final_eval["tuples"]):
        row = [_users(users)]
        for p in pols:
            r = final_eval["policies"][p]["per_tuple"][i]
            row += [_num(r["mean"]), _num(r["cv"])]
        rows.append(row)
    return format_table(header, rows)


def render_text(reports: Sequence[EpochReport], final_eval: dict | None = None) -> str:
    parts = ["Policy selection by Bellman error", selection_table(reports), ""]
    for r in reports:
        parts += [f"Epoch {r.epoch}: deployed {r.deployed}, {r.dataset.get('trials', '?')} trials, "
                  f"dataset {r.dataset.get('total', '?')} transitions", per_tuple_table(r.tuples), ""]
    if final_eval is not None:
        parts += [f"Held-out evaluation ({final_eval['n_trials']} trials per tuple)", comparison_table(final_eval), ""]
    return "\n".join(parts)


def report_dict(reports: Sequence[EpochReport], final_eval: dict | None = None) -> dict:
    return {"epochs": [r.to_dict() for r in reports], "final_eval": final_eval}


def emit_report(reports: Sequence[EpochReport], out_dir: str | Path, final_eval: dict | None = None,
                formats: Sequence[str] = ("json", "text")) -> list[Path]:
    """Write ``report.json`` and/or ``report.txt`` under ``out_dir``; returns the paths written."""
    if not reports:
        raise ValueError("no epoch reports to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = out / "report.json"
        p.write_text(json.dumps(report_dict(reports, final_eval), indent=2, sort_keys=True) + "\n")
        written.append(p)
    if "text" in formats:
        p = out / "report.txt"
        p.write_text(render_text(reports, final_eval))
        written.append(p)
    return written


def load_reports(out_dir: str | Path) -> tuple[list[EpochReport], dict | None]:
    out = Path(out_dir)
    reports = []
    k = 1
    while (out / f"epoch_{k}" / "report.json").exists():
        reports.append(EpochReport.from_dict(json.loads((out / f"epoch_{k}" / "report.json").read_text())))
        k += 1
    fe = out / "final_eval.json"
    return reports, (json.loads(fe.read_text()) if fe.exists() else None)
