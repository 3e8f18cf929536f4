"""Frame timing, error probabilities and the semi-Markov exchange model.

One sub-link carries a TCP payload A-MPDU (plus BAR) and a TCP-ack A-MPDU in
the opposite direction, each answered by a block ack.  Both directions have
their own retry ladder of ``M`` 802.11 retransmissions, after which the
segment is resent from scratch.  Everything here is a pure function of its
inputs.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np


class UnknownMcsError(KeyError):
    pass


class ChainDivergenceError(ValueError):
    """The retry chain can never complete (an error probability is 1)."""


class ModelValidityError(ValueError):
    """Exchange-time formula breaks down (retransmission-saturated regime)."""


@dataclass(frozen=True)
class McsEntry:
    index: int
    phy_rate: float  # bits/s
    rx_sensitivity: float  # dBm
    sinr_min: float  # dB


class McsTable:
    def __init__(self, entries: Sequence[McsEntry]):
        entries = sorted(entries, key=lambda e: e.index)
        if not entries:
            raise ValueError("empty MCS table")
        for e in entries:
            if e.phy_rate <= 0:
                raise ValueError(f"MCS {e.index}: phy_rate must be positive")
        for lo, hi in zip(entries, entries[1:]):
            if hi.index == lo.index:
                raise ValueError(f"duplicate MCS index {lo.index}")
            if hi.sinr_min <= lo.sinr_min:
                raise ValueError("sinr_min must increase strictly with the MCS index")
        self._entries = {e.index: e for e in entries}

    def __getitem__(self, index: int) -> McsEntry:
        try:
            return self._entries[index]
        except KeyError:
            raise UnknownMcsError(f"MCS index {index} not in table") from None

    def __contains__(self, index) -> bool:
        return index in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def indices(self) -> list[int]:
        return list(self._entries)

    @classmethod
    def from_csv(cls, path) -> "McsTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [
                McsEntry(
                    index=int(r["index"]),
                    phy_rate=float(r["phy_rate_bps"]),
                    rx_sensitivity=float(r["rx_sensitivity_dbm"]),
                    sinr_min=float(r["sinr_min_db"]),
                )
                for r in rows
            ]
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "phy_rate_bps", "rx_sensitivity_dbm", "sinr_min_db"])
            for e in self:
                w.writerow([e.index, repr(e.phy_rate), repr(e.rx_sensitivity), repr(e.sinr_min)])


DATA_DIR = Path(__file__).parent / "data"


def load_mcs_table(name: str = "80211ad") -> McsTable:
    """Load one of the bundled tables ("80211ad" or "80211ac") or a CSV path."""
    p = DATA_DIR / f"mcs_{name}.csv"
    if not p.exists():
        p = Path(name)
    return McsTable.from_csv(p)


@dataclass(frozen=True)
class FrameTiming:
    """MAC/PHY timing and frame-size constants.

    Durations are in seconds; the ``*_bits`` fields are transmitted at the
    PHY rate of the selected MCS.
    """

    aifs: float
    sifs: float
    t_slot: float
    t_pre: float  # preamble + PHY header
    delim_bits: int  # A-MPDU delimiter
    mpdu_header_bits: int  # MAC header in front of each A-MSDU
    subframe_header_bits: int  # A-MSDU subframe header in front of each MSDU
    fcs_bits: int
    s_bar: int
    s_ba: int
    cw_min: int
    cw_max: int
    max_amsdu_bytes: int = 7935
    max_ampdu_bytes: int = 262_143

    def __post_init__(self):
        for name in ("aifs", "sifs", "t_slot", "t_pre"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cw_min < 1 or self.cw_max <= self.cw_min:
            raise ValueError("need 1 <= cw_min < cw_max")
        ratio = self.cw_max / self.cw_min
        m = round(math.log2(ratio))
        if m < 1 or self.cw_min * 2**m != self.cw_max:
            raise ValueError("cw_max must equal cw_min * 2**M for an integer M >= 1")

    @property
    def m_max(self) -> int:
        """Retry-ladder depth M, fixed by the contention-window range."""
        return round(math.log2(self.cw_max / self.cw_min))

    def mean_backoff(self, m: int = 0) -> float:
        return (2**m * self.cw_min - 1) * self.t_slot / 2

    def t_bar(self, rate: float) -> float:
        return self.t_pre + self.s_bar / rate

    def t_ba(self, rate: float) -> float:
        return self.t_pre + self.s_ba / rate


@dataclass(frozen=True)
class RadioProfile:
    """Supply voltage and per-mode currents.

    The transmit current falls linearly (in dB of output power) below its
    value at ``p_tx_max``.
    """

    v_s: float
    i_tx_max: float
    i_rx: float
    i_idle: float
    i_sl: float
    p_tx_max: float = 5.0  # dBm
    i_tx_slope: float = 0.02  # A per dB below p_tx_max

    def __post_init__(self):
        if not (self.i_sl < self.i_idle < self.i_rx <= self.i_tx_max):
            raise ValueError("currents must satisfy i_sl < i_idle < i_rx <= i_tx_max")
        if self.i_tx_slope < 0:
            raise ValueError("i_tx_slope must be non-negative")

    def i_tx(self, tx_power_dbm: float) -> float:
        drop = self.i_tx_slope * max(0.0, self.p_tx_max - tx_power_dbm)
        return max(self.i_idle, self.i_tx_max - drop)

    @property
    def gamma_sl(self) -> float:
        return self.i_sl * self.v_s

    @property
    def gamma_idle(self) -> float:
        return self.i_idle * self.v_s


@dataclass(frozen=True)
class AggregationShape:
    """How ``k`` MSDUs are packed into A-MSDUs inside one A-MPDU."""

    k: int
    n_msdu_per: tuple[int, ...]
    msdu_bits: int
    s_amsdu: tuple[int, ...]  # bits per MPDU (MAC header + A-MSDU + FCS)
    ampdu_bytes: int = 0

    @property
    def n_amsdu(self) -> int:
        return len(self.n_msdu_per)


def pack(k: int, msdu_bytes: int, timing: FrameTiming, per_amsdu: int | None = None) -> AggregationShape:
    """Pack ``k`` MSDUs into A-MSDUs.

    By default A-MSDUs are filled greedily up to the size cap, with the last
    one partial; ``per_amsdu`` forces a fixed count instead.
    """
    if k < 1:
        raise ValueError("aggregation length must be >= 1")
    if msdu_bytes <= 0:
        raise ValueError("msdu_bytes must be positive")
    sub_bytes = timing.subframe_header_bits // 8 + msdu_bytes
    cap = timing.max_amsdu_bytes // sub_bytes
    if cap < 1:
        raise ValueError(f"a {msdu_bytes}-byte MSDU does not fit in one A-MSDU")
    per = cap if per_amsdu is None else per_amsdu
    if not 1 <= per <= cap:
        raise ValueError(f"per_amsdu must lie in [1, {cap}]")
    counts = [per] * (k // per)
    if k % per:
        counts.append(k % per)
    msdu_bits = 8 * msdu_bytes
    s = tuple(
        timing.mpdu_header_bits + n * (timing.subframe_header_bits + msdu_bits) + timing.fcs_bits
        for n in counts
    )
    ampdu_bytes = sum((timing.delim_bits + bits) // 8 for bits in s)
    return AggregationShape(k, tuple(counts), msdu_bits, s, ampdu_bytes)


def ampdu_duration(shape: AggregationShape, eta: int, timing: FrameTiming, table: McsTable) -> float:
    """Airtime of the A-MPDU and its BAR at MCS ``eta``."""
    rate = table[eta].phy_rate
    t = timing.t_bar(rate) + timing.t_pre
    for n in shape.n_msdu_per:
        t += (
            timing.delim_bits
            + timing.mpdu_header_bits
            + n * (timing.subframe_header_bits + shape.msdu_bits)
            + timing.fcs_bits
        ) / rate
    return t


def _survive(ber: float, bits) -> np.ndarray | float:
    # (1 - ber)**bits without underflow trouble for multi-megabit frames
    if ber <= 0.0:
        return np.ones_like(np.asarray(bits, dtype=float)) if np.ndim(bits) else 1.0
    return np.exp(np.asarray(bits, dtype=float) * math.log1p(-ber))


class ErrorProbs(NamedTuple):
    p_payload: float
    p_ba: float
    p_ack: float
    p_payload_amsdu: float
    p_ack_amsdu: float


def frame_error_probs(shape: AggregationShape, ber: float, timing: FrameTiming, ack_shape: AggregationShape | None = None) -> ErrorProbs:
    if not 0.0 <= ber <= 0.5:
        raise ValueError("ber must lie in [0, 0.5]")
    ack_shape = ack_shape or shape

    def side(sh):
        per = _survive(ber, sh.s_amsdu)
        p_whole = 1.0 - float(_survive(ber, timing.s_bar) * np.prod(per))
        p_amsdu = float(np.mean(1.0 - per))
        return p_whole, p_amsdu

    p_p, p_p_ams = side(shape)
    p_ack, p_ack_ams = side(ack_shape)
    p_ba = 1.0 - float(_survive(ber, timing.s_ba))
    return ErrorProbs(p_p, p_ba, p_ack, p_p_ams, p_ack_ams)


@dataclass(frozen=True)
class StateDurations:
    payload: tuple[float, ...]  # T_P, T_P-R_1 .. T_P-R_M
    ack: tuple[float, ...]  # T_ACK, T_ACK-R_1 .. T_ACK-R_M
    block_ack: float  # shared by every "-A" state
    t_p: float
    t_ack: float
    t_ba: float

    @property
    def m_max(self) -> int:
        return len(self.payload) - 1


def state_durations(shape: AggregationShape, eta: int, timing: FrameTiming, table: McsTable, m_max: int | None = None, ack_shape: AggregationShape | None = None) -> StateDurations:
    m_max = timing.m_max if m_max is None else m_max
    if m_max < 1:
        raise ValueError("m_max must be >= 1")
    t_p = ampdu_duration(shape, eta, timing, table)
    t_ack = ampdu_duration(ack_shape or shape, eta, timing, table)
    t_ba = timing.t_ba(table[eta].phy_rate)
    wait = [timing.aifs + timing.mean_backoff(m) for m in range(m_max + 1)]
    return StateDurations(
        payload=tuple(w + t_p for w in wait),
        ack=tuple(w + t_ack for w in wait),
        block_ack=timing.sifs + t_ba,
        t_p=t_p,
        t_ack=t_ack,
        t_ba=t_ba,
    )


@dataclass(frozen=True)
class SteadyState:
    """Embedded-chain probabilities; index m = 0 is the first attempt."""

    payload: np.ndarray  # kappa_P, kappa_P-R_m
    payload_ba: np.ndarray  # kappa_P-A, kappa_P-R_m-A
    ack: np.ndarray
    ack_ba: np.ndarray

    def total(self) -> float:
        return float(self.payload.sum() + self.payload_ba.sum() + self.ack.sum() + self.ack_ba.sum())


def _retry_fail(p_frame: float, p_ba: float) -> float:
    return p_frame + p_ba - p_frame * p_ba


def steady_state(p_p: float, p_a: float, p_ack: float, m_max: int) -> SteadyState:
    for name, p in (("p_P", p_p), ("p_A", p_a), ("p_ACK", p_ack)):
        if not 0.0 <= p < 1.0:
            raise ChainDivergenceError(f"{name}={p}: exchange never completes")
    m = np.arange(m_max + 1)
    q_p = _retry_fail(p_p, p_a)
    q_ack = _retry_fail(p_ack, p_a)
    norm = 4 - 3 * p_ack - 3 * p_p + 2 * p_ack * p_p
    k_p = (1 - p_ack) / (norm * np.sum(q_p**m))
    k_ack = (1 - p_p) / (norm * np.sum(q_ack**m))
    payload = k_p * q_p**m
    ack = k_ack * q_ack**m
    return SteadyState(payload, payload * (1 - p_p), ack, ack * (1 - p_ack))


@dataclass(frozen=True)
class StateRow:
    name: str
    duration: float
    kappa: float
    pi: float
    e_tx: float
    e_rx: float


@dataclass(frozen=True)
class ExchangeResult:
    t_exchange: float
    t_payload_side: float
    t_ack_side: float
    p_tx: float
    p_rx: float
    probs: ErrorProbs
    state_table: tuple[StateRow, ...] = field(repr=False, default=())

    @property
    def gamma_d(self) -> float:
        """Combined power of both radios while the exchange is running."""
        return self.p_tx + self.p_rx


def _side_time(kappa_first, kappa_ba, durations, t_block_ack, p_amsdu):
    weights = float(np.dot(kappa_first, durations) + kappa_ba.sum() * t_block_ack)
    pi_first = kappa_first * durations / weights
    pi_ba = kappa_ba * t_block_ack / weights
    rate = pi_first[0] / durations[0] - pi_first[-1] / durations[-1] - pi_ba[-1] / t_block_ack
    if rate <= 0:
        raise ModelValidityError("exchange-time denominator is not positive")
    return 1.0 / ((1.0 - p_amsdu) * rate), pi_first, pi_ba


def analyze_exchange(
    shape: AggregationShape,
    eta: int,
    timing: FrameTiming,
    table: McsTable,
    ber: float,
    radio: RadioProfile | None = None,
    tx_power: float | None = None,
    ack_shape: AggregationShape | None = None,
    m_max: int | None = None,
) -> ExchangeResult:
    """Mean exchange time and (optionally) mean tx/rx radio power."""
    ack_shape = ack_shape or shape
    m_max = timing.m_max if m_max is None else m_max
    probs = frame_error_probs(shape, ber, timing, ack_shape)
    dur = state_durations(shape, eta, timing, table, m_max, ack_shape)
    ss = steady_state(probs.p_payload, probs.p_ba, probs.p_ack, m_max)

    t_pay_states = np.array(dur.payload)
    t_ack_states = np.array(dur.ack)
    t_pay, pi_p, pi_pa = _side_time(ss.payload, ss.payload_ba, t_pay_states, dur.block_ack, probs.p_payload_amsdu)
    t_ack, pi_k, pi_ka = _side_time(ss.ack, ss.ack_ba, t_ack_states, dur.block_ack, probs.p_ack_amsdu)
    t_total = t_pay + t_ack

    if radio is None:
        return ExchangeResult(t_total, t_pay, t_ack, math.nan, math.nan, probs)

    v = radio.v_s
    i_tx = radio.i_tx(radio.p_tx_max if tx_power is None else tx_power)
    wait = t_pay_states - dur.t_p
    e_pay_tx = wait * radio.i_idle * v + dur.t_p * i_tx * v
    e_pay_rx = wait * radio.i_idle * v + dur.t_p * radio.i_rx * v
    e_ack_tx = wait * radio.i_idle * v + dur.t_ack * i_tx * v
    e_ack_rx = wait * radio.i_idle * v + dur.t_ack * radio.i_rx * v
    e_ba_tx = timing.sifs * radio.i_idle * v + dur.t_ba * i_tx * v
    e_ba_rx = timing.sifs * radio.i_idle * v + dur.t_ba * radio.i_rx * v

    def avg(pi, e, t):
        return float(np.sum(pi * e / t))

    f_pay, f_ack = t_pay / t_total, t_ack / t_total
    tb = dur.block_ack
    p_tx = f_pay * (avg(pi_p, e_pay_tx, t_pay_states) + avg(pi_pa, e_ba_rx, tb)) + f_ack * (
        avg(pi_k, e_ack_rx, t_ack_states) + avg(pi_ka, e_ba_tx, tb)
    )
    p_rx = f_pay * (avg(pi_p, e_pay_rx, t_pay_states) + avg(pi_pa, e_ba_tx, tb)) + f_ack * (
        avg(pi_k, e_ack_tx, t_ack_states) + avg(pi_ka, e_ba_rx, tb)
    )

    rows = []
    for m in range(m_max + 1):
        tag = "" if m == 0 else f"-R{m}"
        rows.append(StateRow(f"P{tag}", t_pay_states[m], ss.payload[m], pi_p[m], e_pay_tx[m], e_pay_rx[m]))
        rows.append(StateRow(f"P{tag}-A", tb, ss.payload_ba[m], pi_pa[m], e_ba_tx, e_ba_rx))
    for m in range(m_max + 1):
        tag = "" if m == 0 else f"-R{m}"
        rows.append(StateRow(f"ACK{tag}", t_ack_states[m], ss.ack[m], pi_k[m], e_ack_tx[m], e_ack_rx[m]))
        rows.append(StateRow(f"ACK{tag}-A", tb, ss.ack_ba[m], pi_ka[m], e_ba_tx, e_ba_rx))
    return ExchangeResult(t_total, t_pay, t_ack, p_tx, p_rx, probs, tuple(rows))


def exchange_time(shape, eta, timing, table, ber, ack_shape=None, m_max=None) -> ExchangeResult:
    return analyze_exchange(shape, eta, timing, table, ber, ack_shape=ack_shape, m_max=m_max)


def exchange_power(shape, eta, timing, table, ber, radio, tx_power, ack_shape=None, m_max=None) -> ExchangeResult:
    return analyze_exchange(shape, eta, timing, table, ber, radio, tx_power, ack_shape, m_max)
