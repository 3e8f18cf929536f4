"""Batch-service duty cycling: sleep length, latency and average power."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .framing import FrameTiming, RadioProfile, pack
from .profiles import DutyCycleConstants

log = logging.getLogger(__name__)


def max_agg_len(msdu_bytes: int, timing: FrameTiming, k_cap: int | None = None, per_amsdu: int | None = None) -> int:
    """Largest K whose packed A-MPDU fits the size cap."""
    if msdu_bytes <= 0:
        raise ValueError("msdu_bytes must be positive")

    def fits(k):
        return pack(k, msdu_bytes, timing, per_amsdu).ampdu_bytes <= timing.max_ampdu_bytes

    if not fits(1):
        raise ValueError(f"a single {msdu_bytes}-byte MSDU exceeds the A-MPDU cap")
    lo, hi = 1, 2
    while fits(hi):
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo if k_cap is None else min(lo, k_cap)


def sleep_duration(k: int, lam: float, t_exchange: float, constants: DutyCycleConstants) -> float | None:
    """Sleep that keeps the batch queue just stable; None when below t_sl_min."""
    if lam <= 0:
        raise ValueError("arrival rate must be positive")
    t_sl = k / lam - t_exchange - constants.delta
    if t_sl < constants.t_sl_min:
        return None
    return t_sl


def service_rate(k: int, t_sleep: float, t_exchange: float) -> float:
    return k / (t_sleep + t_exchange)


def latency_term(k: int, lam: float, delta: float) -> float:
    return k / lam - delta


def path_latency(path: Iterable[tuple[float, Sequence[int]]], constants: DutyCycleConstants) -> float:
    """Sum of K/lambda - delta over every sub-link of every link on the path.

    ``path`` yields (lambda_l, [K for each sub-link of l]).
    """
    return sum(latency_term(k, lam, constants.delta) for lam, ks in path for k in ks)


def duty_power(t_sleep: float, t_exchange: float, gamma_d: float, radio: RadioProfile, constants: DutyCycleConstants) -> float:
    """Mean power of both radios of one sub-link over a full cycle.

    Defined for ``t_sleep >= t_sl_min``; shorter sleeps are evaluated with the
    same formula so infeasible plans can still be reported.
    """
    num = (
        2 * radio.gamma_sl * (t_sleep - constants.t_sl_min)
        + 2 * radio.gamma_idle * constants.t_sl_min
        + gamma_d * t_exchange
    )
    return num / (t_sleep + t_exchange)


def duty_power_k(k: int, lam: float, t_exchange: float, gamma_d: float, radio: RadioProfile, constants: DutyCycleConstants) -> float:
    """Same quantity with the sleep length substituted in."""
    denom = k - lam * constants.delta
    return (
        2 * radio.gamma_sl
        + 2 * (radio.gamma_idle - radio.gamma_sl) * constants.t_sl_min * lam / denom
        + (gamma_d - 2 * radio.gamma_sl) * t_exchange * lam / denom
    )


@dataclass(frozen=True)
class SubLinkPlan:
    link: int
    index: int  # position of the sub-link inside its link, 0 = upstream end
    d: float
    lam: float
    theta: tuple[int, int, int]  # (tx power dBm, MCS, K)
    t_sleep: float
    t_exchange: float
    gamma_d: float
    theta_cci: tuple[int, int, int] | None = None
    t_sleep_cci: float | None = None
    t_exchange_cci: float | None = None
    gamma_d_cci: float | None = None
    p_cci: float = 0.0
    p_out: float = 0.0
    p_out_cci: float = 0.0
    ber: float = 0.0
    ber_cci: float = 0.0
    channel: int = 0

    def __post_init__(self):
        if self.theta[2] < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 <= self.p_cci <= 1.0:
            raise ValueError("p_cci must be a probability")

    @property
    def period(self) -> float:
        return self.t_sleep + self.t_exchange

    def cci_view(self) -> "SubLinkPlan":
        """The plan as it runs while CCI is present (falls back to nominal)."""
        if self.theta_cci is None:
            return self
        return replace(
            self,
            theta=self.theta_cci,
            t_sleep=self.t_sleep_cci,
            t_exchange=self.t_exchange_cci,
            gamma_d=self.gamma_d_cci,
        )


def sublink_power_parts(plan: SubLinkPlan, radio: RadioProfile, constants: DutyCycleConstants) -> tuple[float, float]:
    p_no = duty_power(plan.t_sleep, plan.t_exchange, plan.gamma_d, radio, constants)
    if plan.theta_cci is None:
        return p_no, p_no
    p_c = duty_power(plan.t_sleep_cci, plan.t_exchange_cci, plan.gamma_d_cci, radio, constants)
    return p_no, p_c


def sublink_power(plan: SubLinkPlan, radio: RadioProfile, constants: DutyCycleConstants) -> float:
    p_no, p_c = sublink_power_parts(plan, radio, constants)
    if plan.p_cci == 0.0:
        return p_no
    return (1 - plan.p_cci) * p_no + plan.p_cci * p_c


def link_power(plans: Iterable[SubLinkPlan], radio: RadioProfile, constants: DutyCycleConstants) -> float:
    return sum(sublink_power(p, radio, constants) for p in plans)


def overlap_prob(t_ld: float, t_md: float, t_msl: float, period_m: float) -> float:
    """Chance that an on-window of l meets an on-window of m (random phase)."""
    x = (t_md + t_ld) / period_m
    p = x if t_msl > t_ld else 0.5 * (1 + x)
    if p > 1.0:
        log.debug("overlap probability %.4g clamped to 1", p)
    return min(1.0, max(0.0, p))


def overlap_probability(plan_l: SubLinkPlan, plan_m: SubLinkPlan, lambda_m: float, constants: DutyCycleConstants) -> float:
    period_m = plan_m.theta[2] / lambda_m - constants.delta
    return overlap_prob(plan_l.t_exchange, plan_m.t_exchange, plan_m.t_sleep, period_m)


def cci_probability(p_los: Sequence[float], p_ov: Sequence[float]) -> float:
    """CCI occurs if any first-tier co-channel neighbour is both in LoS and on."""
    if len(p_los) != len(p_ov):
        raise ValueError("p_los and p_ov must pair up")
    if len(p_los) > 2:
        raise ValueError("only the two nearest co-channel neighbours are modelled")
    q = 1.0
    for a, b in zip(p_los, p_ov):
        q *= 1.0 - a * b
    return 1.0 - q
