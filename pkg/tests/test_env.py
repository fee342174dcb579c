import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ranslice.env import (KPI_COLUMNS, META_COLUMNS, ConfigurationError, EnvConfig, Gnb, SliceQueueState,
                          capacity_bits, emit_kpi_records, read_kpi_csv, share_service, step_env, step_slice,
                          write_kpi_csv)
from ranslice.mdp import RbAllocation, all_allocations
from ranslice.traffic import ArrivalArrays, PeriodArrivals

CFG = EnvConfig()

EXPECTED_KPIS = (
    "dl_mcs", "dl_n_samples", "dl_buffer_bytes", "tx_brate_downlink_Mbps", "tx_pkts_downlink", "dl_cqi",
    "ul_mcs", "ul_n_samples", "ul_buffer_bytes", "rx_brate_uplink_Mbps", "rx_pkts_uplink", "rx_errors_up_perc",
    "ul_sinr", "phr", "sum_reqsted_prbs", "sum_granted_prbs", "ul_turbo_iters",
)


def test_capacity():
    assert capacity_bits(0, 350, 250) == 0
    assert capacity_bits(1, 350, 250) == 87_500
    assert capacity_bits(50, 350, 250) == 4_375_000


def test_step_slice_examples():
    q, k = step_slice(SliceQueueState(), PeriodArrivals(0, 0, 0), 3, CFG)
    assert (k.tx_brate_mbps, k.prb_req, q.dl_buffer_bytes) == (0, 0, 0)

    # 1 Mbit queued, 50 PRBs worth of capacity
    q, k = step_slice(SliceQueueState(125_000), PeriodArrivals(0, 0, 0), 50, CFG)
    assert k.tx_brate_mbps == pytest.approx(4.0)
    assert q.dl_buffer_bytes == 0

    q, k = step_slice(SliceQueueState(), PeriodArrivals(0, 1_093_750, 0), 50, CFG)
    assert k.served_bytes * 8 == 4_375_000
    assert q.dl_buffer_bytes == 546_875
    assert k.prb_granted == min(k.prb_req, 50 * 250)

    with pytest.raises(ConfigurationError):
        step_slice(SliceQueueState(), PeriodArrivals(0, 0, 0), 0, CFG)


def test_zero_traffic_frame():
    queues = tuple(SliceQueueState(0, (0,)) for _ in range(3))
    arr = tuple([PeriodArrivals(0, 0, 0)] for _ in range(3))
    _, frame = step_env(queues, arr, RbAllocation(5, 6), CFG)
    assert len(frame.slices) == 3
    for s in frame.slices:
        assert s.tx_brate_mbps == 0 and s.dl_buffer_bytes == 0 and s.prb_req == 0
    assert [s.slice_prb for s in frame.slices] == [15, 18, 17]


def test_embb_stream_below_capacity_does_not_queue():
    # 8 Mbps = 250,000 bytes per period into 44 PRBs (15.4 Mbps)
    arr = ArrivalArrays(*(np.array(v) for v in ([250_000] * 8, [0] * 8, [179] * 8, [0] * 8)))
    gnb = Gnb(([], [], [arr]), CFG)
    for t in range(8):
        f = gnb.step(RbAllocation(1, 1), t)
        e = f.slice("eMBB")
        assert e.dl_buffer_bytes == 0
        assert e.tx_brate_mbps == pytest.approx(8.0)


@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=6), st.integers(0, 3 * 10**6))
def test_share_service_is_fair_and_work_conserving(backlogs, cap):
    served = share_service(backlogs, cap)
    assert all(0 <= s <= b for s, b in zip(served, backlogs))
    assert sum(served) == min(cap, sum(backlogs))
    # nobody is short-changed while another UE got more than them
    for i, (s, b) in enumerate(zip(served, backlogs)):
        if s < b:
            assert all(s >= o - 1 for o in served)


@given(st.integers(0, 2_000_000), st.integers(0, 2_000_000), st.integers(1, 50))
def test_slice_flow_conservation(buf, arr, prbs):
    q, k = step_slice(SliceQueueState(buf), PeriodArrivals(0, arr, 0), prbs, CFG)
    assert q.dl_buffer_bytes - buf == arr - k.served_bytes
    assert q.dl_buffer_bytes >= 0
    if k.served_bytes < capacity_bits(prbs) // 8:
        assert q.dl_buffer_bytes == 0
    assert k.prb_granted <= prbs * CFG.period_ms


@given(st.integers(0, 2_000_000), st.integers(0, 2_000_000), st.integers(1, 49))
def test_more_prbs_never_leave_more_backlog(buf, arr, prbs):
    a = step_slice(SliceQueueState(buf), PeriodArrivals(0, arr, 0), prbs, CFG)[0]
    b = step_slice(SliceQueueState(buf), PeriodArrivals(0, arr, 0), prbs + 1, CFG)[0]
    assert b.dl_buffer_bytes <= a.dl_buffer_bytes


def test_prb_totals_for_every_allocation():
    queues = tuple(SliceQueueState() for _ in range(3))
    for rbs in all_allocations():
        _, f = step_env(queues, ([], [], []), rbs, CFG)
        assert sum(s.slice_prb for s in f.slices) == 50


def _trial_records(n_periods=480, seed=0):
    rng = np.random.default_rng(seed)
    mk = lambda: ArrivalArrays(*(rng.integers(0, 40_000, n_periods) for _ in range(4)))
    ues = ([mk()], [mk()], [mk()])
    gnb = Gnb(ues, CFG)
    rows = []
    for t in range(n_periods):
        rows += emit_kpi_records(gnb.step(RbAllocation(5, 6), t), ([0], [1], [2]), CFG, rng)
    return rows


def test_kpi_rows_and_columns(tmp_path):
    assert KPI_COLUMNS == EXPECTED_KPIS
    rows = _trial_records()
    assert len(rows) == 3 * 480
    assert rows[0]._fields == META_COLUMNS + KPI_COLUMNS
    write_kpi_csv(rows[:30], tmp_path / "k.csv")
    with open(tmp_path / "k.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["timestamp_ms", "ue_id", "slice_id", *EXPECTED_KPIS]
    back = read_kpi_csv(tmp_path / "k.csv")
    assert [tuple(r) for r in back] == [tuple(float(v) for v in r) for r in rows[:30]]


def test_single_ue_single_period_row():
    f = step_env((SliceQueueState(0, (0,)), SliceQueueState(), SliceQueueState()),
                 ([PeriodArrivals(0, 0, 0)], [], []), RbAllocation(5, 6), CFG)[1]
    rows = emit_kpi_records(f, ([7], [], []), CFG, np.random.default_rng(0))
    assert len(rows) == 1
    r = rows[0]
    assert (r.ue_id, r.slice_id, r.timestamp_ms) == (7, 0, 250)
    assert r.tx_brate_downlink_Mbps == r.rx_brate_uplink_Mbps == 0
    assert r.dl_n_samples == r.ul_n_samples == 0
    assert 1 <= r.dl_cqi <= 15


def test_same_arrivals_same_frames():
    a = _trial_records(40, seed=3)
    b = _trial_records(40, seed=3)
    assert a == b


def test_fifo_packet_delivery_counts():
    # two 1000-byte packets arrive in period 0; only 1 PRB-worth of capacity per period
    arr = ArrivalArrays(np.array([2000, 0, 0, 0]), np.zeros(4, int), np.array([2, 0, 0, 0]), np.zeros(4, int),
                        np.array([1000, 2000]))
    cfg = EnvConfig(bits_per_prb_subframe=4)     # 3 PRBs -> 375 bytes per period
    gnb = Gnb(([arr], [], []), cfg)
    delivered = [gnb.step(RbAllocation(1, 1), t).slices[0].ues[0].tx_pkts for t in range(4)]
    # 375, 750, 1125 (first packet done), 1500
    assert delivered == [0, 0, 1, 0]


def test_env_config_validation():
    with pytest.raises(ConfigurationError):
        EnvConfig(bits_per_prb_subframe=0).validate()
    bad = EnvConfig()
    bad.radio["dl_cqi"] = [15, -1, 1, 15]
    with pytest.raises(ConfigurationError):
        bad.validate()
