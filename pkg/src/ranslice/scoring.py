"""Per-slice performance scores and the MDP reward. All scores lie in [0, 1]."""
from __future__ import annotations

from dataclasses import dataclass

from .env import KpiFrame


@dataclass(frozen=True)
class ScoreConstants:
    alpha: float = 1 / 3
    beta: float = 3 / 2          # Mbit
    gamma_delay: float = 1.0     # s, largest tolerated RAN queueing delay
    period_s: float = 0.25
    kappa: float = 8 / 1e6       # bytes -> Mbit

    def validate(self) -> "ScoreConstants":
        for name in ("alpha", "beta", "gamma_delay", "period_s", "kappa"):
            if not getattr(self, name) > 0:
                raise ValueError(f"score.{name} must be > 0, got {getattr(self, name)}")
        return self


DEFAULT_CONSTANTS = ScoreConstants()


def _clip01(x: float) -> float:
    return min(1.0, max(0.0, x))


def score_embb(tx_brate_mbps: float, dl_buffer_bytes: float, c: ScoreConstants = DEFAULT_CONSTANTS) -> float:
    # megabits drained this period minus megabits still queued
    return _clip01(c.alpha * (c.beta + tx_brate_mbps * c.period_s - dl_buffer_bytes * c.kappa))


def score_urllc(tx_brate_mbps: float, dl_buffer_bytes: float, c: ScoreConstants = DEFAULT_CONSTANTS) -> float:
    """Linear penalty on the queueing-delay proxy buffer/rate, zero beyond ``gamma_delay``."""
    if tx_brate_mbps == 0:
        return 1.0 if dl_buffer_bytes == 0 else 0.0
    delay_s = dl_buffer_bytes * c.kappa / tx_brate_mbps
    return max(0.0, c.gamma_delay - delay_s) / c.gamma_delay


def score_mmtc(prb_req: float, prb_granted: float, slice_prb: int, c: ScoreConstants = DEFAULT_CONSTANTS) -> float:
    if slice_prb < 1:
        raise ValueError("slice_prb must be >= 1")
    if prb_req == 0:
        return 1.0 / slice_prb
    return min(1.0, prb_granted / prb_req)


def slice_scores(frame: KpiFrame, c: ScoreConstants = DEFAULT_CONSTANTS) -> tuple[float, float, float]:
    m, u, e = frame.slices
    return (score_mmtc(m.prb_req, m.prb_granted, m.slice_prb, c),
            score_urllc(u.tx_brate_mbps, u.dl_buffer_bytes, c),
            score_embb(e.tx_brate_mbps, e.dl_buffer_bytes, c))


def reward(frame: KpiFrame, c: ScoreConstants = DEFAULT_CONSTANTS) -> float:
    """Mean of the three slice scores on the frame that follows the action."""
    return sum(slice_scores(frame, c)) / 3
