"""Synthetic per-slice packet traces, trace CSV I/O, chunking and period bucketing.

Traces are lists of :class:`TraceEvent` sorted by ``t_ms``. The three default
profiles stand in for real phone captures:

* eMBB  - on/off downlink streaming
* URLLC - periodic bidirectional small packets with jitter
* mMTC  - sparse Poisson bursts of small packets
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

SLICES = ("mMTC", "URLLC", "eMBB")
DOWNLINK = "downlink"
UPLINK = "uplink"
PERIOD_MS = 250
CHUNK_S = 120


class ParameterError(ValueError):
    pass


class TraceEvent(NamedTuple):
    t_ms: int
    bytes: int
    direction: str


class PeriodArrivals(NamedTuple):
    period_idx: int
    dl_bytes: int
    ul_bytes: int
    dl_pkts: int = 0
    ul_pkts: int = 0


@dataclass(frozen=True)
class SliceProfile:
    """Traffic model parameters for one slice.

    Only the parameters relevant to ``slice`` are used by :func:`generate_trace`.
    """

    slice: str
    # eMBB on/off streaming
    on_s: float = 2.0
    off_mean_s: float = 1.0
    rate_mbps: float = 8.0
    # URLLC periodic
    rate_pps: float = 50.0
    jitter_ms: float = 2.0
    bidirectional: bool = True
    # mMTC bursts
    burst_gap_mean_s: float = 10.0
    burst_pkts: tuple[int, int] = (5, 20)
    burst_span_s: float = 1.0
    pkt_bytes_range: tuple[int, int] = (100, 400)
    downlink_fraction: float = 0.5
    # shared
    pkt_bytes: int = 1400

    def validate(self) -> None:
        if self.slice not in SLICES:
            raise ParameterError(f"unknown slice {self.slice!r}")
        for name in ("rate_mbps", "rate_pps", "jitter_ms", "off_mean_s"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("on_s", "burst_gap_mean_s", "burst_span_s"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.pkt_bytes < 1:
            raise ParameterError("pkt_bytes must be >= 1")
        lo, hi = self.burst_pkts
        if not 1 <= lo <= hi:
            raise ParameterError(f"burst_pkts must satisfy 1 <= lo <= hi, got {self.burst_pkts}")
        lo, hi = self.pkt_bytes_range
        if not 1 <= lo <= hi:
            raise ParameterError(f"pkt_bytes_range must satisfy 1 <= lo <= hi, got {self.pkt_bytes_range}")
        if not 0.0 <= self.downlink_fraction <= 1.0:
            raise ParameterError("downlink_fraction must lie in [0, 1]")

    @classmethod
    def from_dict(cls, slice_name: str, params: dict) -> "SliceProfile":
        known = {f.name for f in fields(cls)} - {"slice"}
        unknown = set(params) - known
        if unknown:
            raise ParameterError(f"unknown profile parameter(s) for {slice_name}: {sorted(unknown)}")
        kw = dict(params)
        for key in ("burst_pkts", "pkt_bytes_range"):
            if key in kw:
                kw[key] = tuple(int(v) for v in kw[key])
        prof = replace(default_profile(slice_name), **kw)
        prof.validate()
        return prof


def default_profile(slice_name: str) -> SliceProfile:
    if slice_name == "eMBB":
        return SliceProfile("eMBB", pkt_bytes=1400)
    if slice_name == "URLLC":
        return SliceProfile("URLLC", pkt_bytes=200)
    if slice_name == "mMTC":
        return SliceProfile("mMTC")
    raise ParameterError(f"unknown slice {slice_name!r}")


def generate_trace(profile: SliceProfile, duration_s: float, seed: int) -> list[TraceEvent]:
    """Draw a packet trace spanning ``[0, duration_s * 1000)`` ms.

    Identical ``(profile, duration_s, seed)`` always yields identical output.
    """
    if duration_s < 0:
        raise ParameterError("duration_s must be >= 0")
    profile.validate()
    end_ms = int(round(duration_s * 1000))
    if end_ms == 0:
        return []
    rng = np.random.default_rng(seed)
    gen = {"eMBB": _embb, "URLLC": _urllc, "mMTC": _mmtc}[profile.slice]
    t, size, is_dl = gen(profile, end_ms, rng)
    t = np.asarray(t, dtype=np.int64)
    keep = (t >= 0) & (t < end_ms)
    t, size, is_dl = t[keep], np.asarray(size, dtype=np.int64)[keep], np.asarray(is_dl, dtype=bool)[keep]
    # stable sort, downlink first on equal timestamps
    order = np.lexsort((~is_dl, t))
    return [
        TraceEvent(int(ti), int(bi), DOWNLINK if di else UPLINK)
        for ti, bi, di in zip(t[order], size[order], is_dl[order])
    ]


def _embb(p: SliceProfile, end_ms: int, rng: np.random.Generator):
    times: list[np.ndarray] = []
    if p.rate_mbps > 0:
        gap_ms = p.pkt_bytes * 8 / (p.rate_mbps * 1e3)
        start = 0.0
        while start < end_ms:
            on_ms = p.on_s * 1000
            n = int(math.ceil(on_ms / gap_ms))
            times.append(np.floor(start + gap_ms * np.arange(n)))
            start += on_ms + rng.exponential(p.off_mean_s * 1000) if p.off_mean_s > 0 else on_ms
    t = np.concatenate(times) if times else np.zeros(0)
    return t, np.full(t.size, p.pkt_bytes), np.ones(t.size, dtype=bool)


def _urllc(p: SliceProfile, end_ms: int, rng: np.random.Generator):
    if p.rate_pps == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool)
    nominal = np.arange(0.0, end_ms, 1000.0 / p.rate_pps)
    dirs = [True, False] if p.bidirectional else [True]
    ts, ds = [], []
    for d in dirs:
        jitter = rng.uniform(-p.jitter_ms, p.jitter_ms, nominal.size) if p.jitter_ms > 0 else 0.0
        t = np.clip(np.round(nominal + jitter), 0, end_ms - 1)
        ts.append(t)
        ds.append(np.full(t.size, d))
    t = np.concatenate(ts)
    return t, np.full(t.size, p.pkt_bytes), np.concatenate(ds)


def _mmtc(p: SliceProfile, end_ms: int, rng: np.random.Generator):
    ts, sizes, dirs = [], [], []
    start = rng.exponential(p.burst_gap_mean_s * 1000)
    while start < end_ms:
        n = int(rng.integers(p.burst_pkts[0], p.burst_pkts[1] + 1))
        ts.append(np.floor(start + rng.uniform(0, p.burst_span_s * 1000, n)))
        sizes.append(rng.integers(p.pkt_bytes_range[0], p.pkt_bytes_range[1] + 1, n))
        dirs.append(rng.random(n) < p.downlink_fraction)
        start += rng.exponential(p.burst_gap_mean_s * 1000)
    if not ts:
        return np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool)
    return np.concatenate(ts), np.concatenate(sizes), np.concatenate(dirs)


def chunk_trace(trace: list[TraceEvent], chunk_s: float = CHUNK_S,
                duration_s: float | None = None) -> list[list[TraceEvent]]:
    """Split a trace into consecutive ``chunk_s`` pieces, each rebased to t=0.

    The trailing remainder shorter than ``chunk_s`` is dropped. Without
    ``duration_s`` the trace is assumed to end just after its last event.
    """
    if chunk_s <= 0:
        raise ParameterError("chunk_s must be > 0")
    if not trace and duration_s is None:
        return []
    chunk_ms = int(round(chunk_s * 1000))
    span_ms = int(round(duration_s * 1000)) if duration_s is not None else trace[-1].t_ms + 1
    n_chunks = span_ms // chunk_ms
    chunks: list[list[TraceEvent]] = [[] for _ in range(n_chunks)]
    for ev in trace:
        k = ev.t_ms // chunk_ms
        if k >= n_chunks:
            break
        chunks[k].append(TraceEvent(ev.t_ms - k * chunk_ms, ev.bytes, ev.direction))
    return chunks


def arrivals_by_period(trace: list[TraceEvent], period_ms: int = PERIOD_MS,
                       n_periods: int | None = None) -> list[PeriodArrivals]:
    """Bucket events into half-open periods ``[k*period_ms, (k+1)*period_ms)``."""
    arr = period_arrays(trace, period_ms, n_periods)
    return [PeriodArrivals(k, int(arr.dl_bytes[k]), int(arr.ul_bytes[k]),
                           int(arr.dl_pkts[k]), int(arr.ul_pkts[k]))
            for k in range(arr.dl_bytes.size)]


@dataclass(frozen=True)
class ArrivalArrays:
    """Per-period arrival totals for one UE, plus FIFO byte offsets of its DL packets."""

    dl_bytes: np.ndarray
    ul_bytes: np.ndarray
    dl_pkts: np.ndarray
    ul_pkts: np.ndarray
    dl_pkt_ends: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_periods(self) -> int:
        return int(self.dl_bytes.size)

    @classmethod
    def idle(cls, n_periods: int) -> "ArrivalArrays":
        z = np.zeros(n_periods, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy())

    def period(self, k: int) -> PeriodArrivals:
        return PeriodArrivals(k, int(self.dl_bytes[k]), int(self.ul_bytes[k]),
                              int(self.dl_pkts[k]), int(self.ul_pkts[k]))


def period_arrays(trace: list[TraceEvent], period_ms: int = PERIOD_MS,
                  n_periods: int | None = None) -> ArrivalArrays:
    if period_ms <= 0:
        raise ParameterError("period_ms must be > 0")
    if not trace:
        return ArrivalArrays.idle(n_periods or 0)
    t = np.fromiter((e.t_ms for e in trace), dtype=np.int64, count=len(trace))
    b = np.fromiter((e.bytes for e in trace), dtype=np.int64, count=len(trace))
    dl = np.fromiter((e.direction == DOWNLINK for e in trace), dtype=bool, count=len(trace))
    if np.any(np.diff(t) < 0):
        raise ParameterError("trace must be sorted by t_ms")
    if n_periods is None:
        n_periods = int(t[-1] // period_ms) + 1
    k = t // period_ms
    inside = k < n_periods
    k, b, dl = k[inside], b[inside], dl[inside]
    return ArrivalArrays(
        dl_bytes=np.bincount(k[dl], weights=b[dl], minlength=n_periods).astype(np.int64),
        ul_bytes=np.bincount(k[~dl], weights=b[~dl], minlength=n_periods).astype(np.int64),
        dl_pkts=np.bincount(k[dl], minlength=n_periods).astype(np.int64),
        ul_pkts=np.bincount(k[~dl], minlength=n_periods).astype(np.int64),
        dl_pkt_ends=np.cumsum(b[dl]),
    )


TRACE_HEADER = ("t_ms", "bytes", "direction")


def write_trace_csv(trace: list[TraceEvent], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        w.writerows(trace)


def read_trace_csv(path: str | Path) -> list[TraceEvent]:
    """Read a ``t_ms,bytes,direction`` CSV (any packet-capture export adapted to it)."""
    out: list[TraceEvent] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_HEADER:
            raise ParameterError(f"{path}: expected header {','.join(TRACE_HEADER)}")
        for line, row in enumerate(reader, start=2):
            ev = TraceEvent(int(row["t_ms"]), int(row["bytes"]), row["direction"].strip())
            if ev.t_ms < 0 or ev.bytes < 1 or ev.direction not in (DOWNLINK, UPLINK):
                raise ParameterError(f"{path}:{line}: malformed event {row}")
            out.append(ev)
    out.sort(key=lambda e: e.t_ms)
    return out


class TraceLibrary:
    """Pool of pre-bucketed 2-minute chunks per slice, drawn at random for each UE."""

    def __init__(self, chunks: dict[str, list[ArrivalArrays]]):
        self.chunks = chunks

    @classmethod
    def build(cls, profiles: dict[str, SliceProfile], traces_per_slice: int, trace_duration_s: float,
              seed: int, chunk_s: float = CHUNK_S, period_ms: int = PERIOD_MS) -> "TraceLibrary":
        n_periods = int(round(chunk_s * 1000)) // period_ms
        ss = np.random.SeedSequence(seed)
        chunks: dict[str, list[ArrivalArrays]] = {}
        for name, child in zip(SLICES, ss.spawn(len(SLICES))):
            trace_seeds = child.generate_state(traces_per_slice)
            pool = []
            for s in trace_seeds:
                tr = generate_trace(profiles[name], trace_duration_s, int(s))
                for ch in chunk_trace(tr, chunk_s, duration_s=trace_duration_s):
                    pool.append(period_arrays(ch, period_ms, n_periods))
            if not pool:
                raise ParameterError("trace library is empty; trace_duration_s must be >= chunk length")
            chunks[name] = pool
        return cls(chunks)

    def draw(self, slice_name: str, rng: np.random.Generator) -> ArrivalArrays:
        pool = self.chunks[slice_name]
        return pool[int(rng.integers(len(pool)))]
