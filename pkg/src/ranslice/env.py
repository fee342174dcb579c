"""Queueing model of the gNB downlink.

Each slice owns a downlink queue served every 250 ms period by a capacity
linear in its PRB count. Service inside a slice is shared equally between
its UEs (unused share flows to the others). Uplink traffic is delivered
within the period it arrives; it only shapes the emitted KPIs.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .mdp import RbAllocation, prbs_of
from .traffic import SLICES, ArrivalArrays, PeriodArrivals

KPI_COLUMNS = (
    "dl_mcs", "dl_n_samples", "dl_buffer_bytes", "tx_brate_downlink_Mbps", "tx_pkts_downlink",
    "dl_cqi", "ul_mcs", "ul_n_samples", "ul_buffer_bytes", "rx_brate_uplink_Mbps",
    "rx_pkts_uplink", "rx_errors_up_perc", "ul_sinr", "phr", "sum_reqsted_prbs",
    "sum_granted_prbs", "ul_turbo_iters",
)
META_COLUMNS = ("timestamp_ms", "ue_id", "slice_id")
RADIO_KPIS = ("dl_mcs", "dl_cqi", "ul_mcs", "rx_errors_up_perc", "ul_sinr", "phr", "ul_turbo_iters")
INTEGER_RADIO = {"dl_mcs", "dl_cqi", "ul_mcs"}


class ConfigurationError(ValueError):
    pass


def _default_radio() -> dict[str, list[float]]:
    # name -> [mean, std, low, high]
    return {
        "dl_mcs": [20.0, 1.0, 0.0, 28.0],
        "dl_cqi": [15.0, 0.5, 1.0, 15.0],
        "ul_mcs": [18.0, 1.0, 0.0, 28.0],
        "rx_errors_up_perc": [0.0, 0.5, 0.0, 100.0],
        "ul_sinr": [20.0, 1.0, -10.0, 40.0],
        "phr": [40.0, 2.0, -23.0, 40.0],
        "ul_turbo_iters": [1.5, 0.2, 1.0, 8.0],
    }


@dataclass
class EnvConfig:
    bits_per_prb_subframe: int = 350
    period_ms: int = 250
    ul_bits_per_subframe: int = 8750
    radio: dict[str, list[float]] = field(default_factory=_default_radio)

    def validate(self) -> None:
        if self.bits_per_prb_subframe <= 0:
            raise ConfigurationError("env.bits_per_prb_subframe must be > 0")
        if self.period_ms <= 0:
            raise ConfigurationError("env.period_ms must be > 0")
        if self.ul_bits_per_subframe <= 0:
            raise ConfigurationError("env.ul_bits_per_subframe must be > 0")
        for name in RADIO_KPIS:
            if name not in self.radio:
                raise ConfigurationError(f"env.radio.{name} missing")
        for name, vals in self.radio.items():
            if name not in RADIO_KPIS:
                raise ConfigurationError(f"env.radio.{name} is not a radio KPI")
            if len(vals) != 4 or vals[1] < 0 or vals[2] > vals[3]:
                raise ConfigurationError(f"env.radio.{name} must be [mean, std>=0, low, high<=]")


class SliceQueueState(NamedTuple):
    dl_buffer_bytes: int = 0
    ue_buffers: tuple[int, ...] = ()


class UeKpis(NamedTuple):
    dl_served_bytes: int
    dl_buffer_bytes: int
    prb_req: int
    prb_granted: int
    ul_bytes: int
    ul_pkts: int
    tx_pkts: int = 0


class SliceKpis(NamedTuple):
    tx_brate_mbps: float
    dl_buffer_bytes: int
    prb_req: int
    prb_granted: int
    slice_prb: int
    n_users: int
    served_bytes: int = 0
    ues: tuple[UeKpis, ...] = ()


class KpiFrame(NamedTuple):
    period_idx: int
    slices: tuple[SliceKpis, SliceKpis, SliceKpis]  # (mMTC, URLLC, eMBB)

    def slice(self, name: str) -> SliceKpis:
        return self.slices[SLICES.index(name)]


KpiRecord = NamedTuple("KpiRecord", [(c, float) for c in META_COLUMNS + KPI_COLUMNS])


def capacity_bits(n_prbs: int, bits_per_prb_subframe: int = 350, period_ms: int = 250) -> int:
    """Bits deliverable by ``n_prbs`` PRBs over one period of 1 ms subframes."""
    if n_prbs < 0:
        raise ConfigurationError("n_prbs must be >= 0")
    return n_prbs * period_ms * bits_per_prb_subframe


def step_slice(state: SliceQueueState, arrivals: PeriodArrivals, slice_prbs: int,
               cfg: EnvConfig) -> tuple[SliceQueueState, SliceKpis]:
    """Serve one slice's aggregate downlink queue for one period.

    Service is byte-granular: at most ``capacity_bits // 8`` bytes leave the queue.
    """
    if slice_prbs < 1:
        raise ConfigurationError("a slice needs at least one PRB")
    backlog = state.dl_buffer_bytes + arrivals.dl_bytes
    cap_bytes = capacity_bits(slice_prbs, cfg.bits_per_prb_subframe, cfg.period_ms) // 8
    served = min(backlog, cap_bytes)
    prb_req = math.ceil(backlog * 8 / cfg.bits_per_prb_subframe)
    kpis = SliceKpis(
        tx_brate_mbps=served * 8 / (cfg.period_ms / 1000) / 1e6,
        dl_buffer_bytes=backlog - served,
        prb_req=prb_req,
        prb_granted=min(prb_req, slice_prbs * cfg.period_ms),
        slice_prb=slice_prbs,
        n_users=len(state.ue_buffers),
        served_bytes=served,
    )
    return SliceQueueState(backlog - served, state.ue_buffers), kpis


def share_service(backlogs: list[int], cap_bytes: int) -> list[int]:
    """Max-min fair split of ``cap_bytes`` over UE backlogs (equal shares, unused share redistributed)."""
    n = len(backlogs)
    served = [0] * n
    remaining = cap_bytes
    for rank, i in enumerate(sorted(range(n), key=lambda j: (backlogs[j], j))):
        give = min(backlogs[i], remaining // (n - rank))
        served[i] = give
        remaining -= give
    for i in range(n):
        if remaining == 0:
            break
        extra = min(backlogs[i] - served[i], remaining)
        served[i] += extra
        remaining -= extra
    return served


def step_env(queues: tuple[SliceQueueState, ...], arrivals: tuple[list[PeriodArrivals], ...],
             rb_alloc: RbAllocation, cfg: EnvConfig, period_idx: int = 0
             ) -> tuple[tuple[SliceQueueState, ...], KpiFrame]:
    """Advance all three slices one period. ``arrivals[i]`` lists per-UE arrivals of slice i."""
    new_queues, slices = [], []
    for q, ue_arr, prbs in zip(queues, arrivals, prbs_of(rb_alloc)):
        if len(ue_arr) != len(q.ue_buffers):
            raise ConfigurationError("per-UE arrivals do not match the slice's UE count")
        agg = PeriodArrivals(period_idx, sum(a.dl_bytes for a in ue_arr), sum(a.ul_bytes for a in ue_arr),
                             sum(a.dl_pkts for a in ue_arr), sum(a.ul_pkts for a in ue_arr))
        nq, kpis = step_slice(q, agg, prbs, cfg)
        ue_backlog = [b + a.dl_bytes for b, a in zip(q.ue_buffers, ue_arr)]
        ue_served = share_service(ue_backlog, kpis.served_bytes)
        ues = []
        for back, srv, a in zip(ue_backlog, ue_served, ue_arr):
            req = math.ceil(back * 8 / cfg.bits_per_prb_subframe)
            granted = min(req, math.ceil(srv * 8 / cfg.bits_per_prb_subframe))
            ues.append(UeKpis(srv, back - srv, req, granted, a.ul_bytes, a.ul_pkts))
        ue_buffers = tuple(u.dl_buffer_bytes for u in ues)
        new_queues.append(SliceQueueState(nq.dl_buffer_bytes, ue_buffers))
        slices.append(kpis._replace(ues=tuple(ues)))
    return tuple(new_queues), KpiFrame(period_idx, tuple(slices))


class Gnb:
    """One trial's gNB: per-UE arrival arrays stepped through :func:`step_env`.

    Tracks cumulative served bytes per UE so that delivered downlink packet
    counts follow FIFO order exactly.
    """

    def __init__(self, ue_arrivals: tuple[list[ArrivalArrays], ...], cfg: EnvConfig):
        self.cfg = cfg
        self.ue_arrivals = ue_arrivals
        self.queues = tuple(SliceQueueState(0, (0,) * len(ues)) for ues in ue_arrivals)
        self._served_total = [[0] * len(ues) for ues in ue_arrivals]
        self._delivered = [[0] * len(ues) for ues in ue_arrivals]

    def step(self, rbs: RbAllocation, period_idx: int) -> KpiFrame:
        arrivals = tuple([ue.period(period_idx) for ue in ues] for ues in self.ue_arrivals)
        self.queues, frame = step_env(self.queues, arrivals, rbs, self.cfg, period_idx)
        slices = []
        for i, sk in enumerate(frame.slices):
            ues = []
            for j, u in enumerate(sk.ues):
                self._served_total[i][j] += u.dl_served_bytes
                ends = self.ue_arrivals[i][j].dl_pkt_ends
                done = int(np.searchsorted(ends, self._served_total[i][j], side="right"))
                ues.append(u._replace(tx_pkts=done - self._delivered[i][j]))
                self._delivered[i][j] = done
            slices.append(sk._replace(ues=tuple(ues)))
        return KpiFrame(frame.period_idx, tuple(slices))


def emit_kpi_records(frame: KpiFrame, ue_map: tuple[list[int], ...], cfg: EnvConfig,
                     rng: np.random.Generator) -> list[KpiRecord]:
    """One 17-KPI row per UE. Radio KPIs the queue model does not produce are sampled."""
    rows = []
    ts = (frame.period_idx + 1) * cfg.period_ms
    period_s = cfg.period_ms / 1000
    for slice_id, (sk, ids) in enumerate(zip(frame.slices, ue_map)):
        slice_bits_per_sf = sk.slice_prb * cfg.bits_per_prb_subframe
        for ue_id, u in zip(ids, sk.ues):
            radio = {}
            for name in RADIO_KPIS:
                mean, std, lo, hi = cfg.radio[name]
                v = float(np.clip(mean + std * rng.standard_normal(), lo, hi))
                radio[name] = float(round(v)) if name in INTEGER_RADIO else v
            dl_bits = u.dl_served_bytes * 8
            ul_bits = u.ul_bytes * 8
            rows.append(KpiRecord(
                timestamp_ms=ts, ue_id=ue_id, slice_id=slice_id,
                dl_mcs=radio["dl_mcs"],
                dl_n_samples=min(cfg.period_ms, math.ceil(dl_bits / slice_bits_per_sf)) if slice_bits_per_sf else 0,
                dl_buffer_bytes=u.dl_buffer_bytes,
                tx_brate_downlink_Mbps=dl_bits / period_s / 1e6,
                tx_pkts_downlink=u.tx_pkts,
                dl_cqi=radio["dl_cqi"],
                ul_mcs=radio["ul_mcs"],
                ul_n_samples=min(cfg.period_ms, math.ceil(ul_bits / cfg.ul_bits_per_subframe)),
                ul_buffer_bytes=0,
                rx_brate_uplink_Mbps=ul_bits / period_s / 1e6,
                rx_pkts_uplink=u.ul_pkts,
                rx_errors_up_perc=radio["rx_errors_up_perc"],
                ul_sinr=radio["ul_sinr"],
                phr=radio["phr"],
                sum_reqsted_prbs=u.prb_req,
                sum_granted_prbs=u.prb_granted,
                ul_turbo_iters=radio["ul_turbo_iters"],
            ))
    return rows


def write_kpi_csv(records: list[KpiRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(META_COLUMNS + KPI_COLUMNS)
        for r in records:
            w.writerow([_fmt(v) for v in r])


def read_kpi_csv(path: str | Path) -> list[KpiRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != META_COLUMNS + KPI_COLUMNS:
            raise ConfigurationError(f"{path}: unexpected KPI header")
        return [KpiRecord(*(float(v) for v in row)) for row in reader]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) or float(v).is_integer():
        return str(int(v))
    return repr(float(v))
