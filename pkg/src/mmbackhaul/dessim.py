"""Discrete-event simulation of a planned duty-cycled mesh.

Each sub-link wakes on a fixed grid (period K/lambda - delta), runs one
TCP payload/ack exchange for the packets it holds and sleeps until the next
grid point.  An exchange is simulated frame by frame: EDCA waits with drawn
backoff, A-MPDU+BAR, SIFS+BA, retries climbing the contention ladder and
restarting after the last stage.  Sub-links only interact through co-channel
on-window overlap, which switches the sub-link to its CCI parameters.
"""
from __future__ import annotations

import csv
import heapq
import math
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .channel import ChannelStats
from .dutycycle import SubLinkPlan
from .framing import ampdu_duration, frame_error_probs
from .profiles import SystemProfile

MODES = ("tx", "rx", "idle", "sleep")
_WAKE, _END = 0, 1


class SimulationError(RuntimeError):
    pass


@dataclass
class RadioMeter:
    """Seconds spent in each mode by one radio."""

    seconds: dict = field(default_factory=lambda: dict.fromkeys(MODES, 0.0))
    tx_charge: float = 0.0  # amp-seconds; tx current depends on the power level

    def add(self, mode: str, dt: float, current: float | None = None):
        if dt < 0:
            raise SimulationError(f"negative {mode} interval {dt}")
        self.seconds[mode] += dt
        if mode == "tx":
            self.tx_charge += dt * current

    def total(self) -> float:
        return sum(self.seconds.values())

    def joules(self, currents: dict, v_s: float) -> float:
        return v_s * (self.tx_charge + sum(self.seconds[m] * currents[m] for m in ("rx", "idle", "sleep")))


@dataclass
class SimReport:
    duration: float
    seed: int
    radio_seconds: dict  # (sub-link, "a"|"b") -> {mode: seconds}
    radio_joules: dict
    node_of_radio: dict
    sublink_power: np.ndarray  # W, both radios
    exchange_mean: np.ndarray  # s, NaN if the sub-link never ran
    exchange_count: np.ndarray
    cci_fraction: np.ndarray
    packets: list  # (source, seq, generated_t, delivered_t)
    generated: int
    delivered: int
    in_flight: int
    queued: int
    unstable: bool = False
    reason: str = ""
    overruns: int = 0

    @property
    def latencies(self) -> np.ndarray:
        return np.array([p[3] - p[2] for p in self.packets])

    def latency_percentile(self, q: float) -> float:
        lat = self.latencies
        return float(np.percentile(lat, q)) if lat.size else math.nan

    @property
    def node_power(self) -> dict:
        out: dict = {}
        for r, j in self.radio_joules.items():
            n = self.node_of_radio[r]
            out[n] = out.get(n, 0.0) + j / self.duration
        return dict(sorted(out.items()))

    @property
    def total_power(self) -> float:
        return float(np.sum(self.sublink_power))

    def summary(self) -> dict:
        lat = self.latencies
        return {
            "duration_s": self.duration,
            "seed": self.seed,
            "generated": self.generated,
            "delivered": self.delivered,
            "in_flight": self.in_flight,
            "queued": self.queued,
            "unstable": self.unstable,
            "overruns": self.overruns,
            "total_power_w": self.total_power,
            "latency_mean_s": float(lat.mean()) if lat.size else math.nan,
            "latency_p50_s": self.latency_percentile(50),
            "latency_p99_s": self.latency_percentile(99),
            "latency_max_s": float(lat.max()) if lat.size else math.nan,
        }

    def write_csv(self, directory: str) -> dict:
        os.makedirs(directory, exist_ok=True)
        paths = {k: os.path.join(directory, f"{k}.csv") for k in ("radios", "packets", "sublinks", "summary")}
        with open(paths["radios"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sublink", "end", "node", *[f"{m}_s" for m in MODES], "joules"])
            for r in sorted(self.radio_seconds):
                sec = self.radio_seconds[r]
                w.writerow([r[0], r[1], self.node_of_radio[r], *[repr(sec[m]) for m in MODES], repr(self.radio_joules[r])])
        with open(paths["packets"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "seq", "generated_s", "delivered_s"])
            for p in self.packets:
                w.writerow([p[0], p[1], repr(p[2]), repr(p[3])])
        with open(paths["sublinks"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sublink", "power_w", "exchange_mean_s", "exchanges", "cci_fraction"])
            for i in range(len(self.sublink_power)):
                w.writerow([i, repr(float(self.sublink_power[i])), repr(float(self.exchange_mean[i])), int(self.exchange_count[i]), repr(float(self.cci_fraction[i]))])
        with open(paths["summary"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "value"])
            for k, v in self.summary().items():
                w.writerow([k, repr(v) if isinstance(v, float) else v])
        return paths


class _Exchange:
    """Frame-level parameters of one (MCS, K, BER, tx power) operating point."""

    def __init__(self, profile: SystemProfile, eta: int, k: int, ber: float, tx: float):
        t = profile.timing
        pay, ack = profile.shapes(k)
        probs = frame_error_probs(pay, ber, t, ack)
        self.p_pay = probs.p_payload
        self.p_ack = probs.p_ack
        self.p_ba = probs.p_ba
        self.t_pay = ampdu_duration(pay, eta, t, profile.table)
        self.t_ackf = ampdu_duration(ack, eta, t, profile.table)
        self.t_ba = t.t_ba(profile.table[eta].phy_rate)
        self.i_tx = profile.radio.i_tx(tx)


def _backoff(timing, m: int, rng, mode: str) -> float:
    if mode == "mean":
        return timing.mean_backoff(m)
    cw = (2**m) * timing.cw_min
    return int(rng.integers(cw)) * timing.t_slot


def _run_exchange(ex: _Exchange, timing, m_max: int, rng, backoff: str):
    """One payload + ack exchange.  Returns (duration, {end: {mode: s}})."""
    sec = {"a": dict.fromkeys(MODES, 0.0), "b": dict.fromkeys(MODES, 0.0)}
    total = 0.0
    for sender, receiver, t_frame, p_frame in (("a", "b", ex.t_pay, ex.p_pay), ("b", "a", ex.t_ackf, ex.p_ack)):
        m = 0
        while True:
            wait = timing.aifs + _backoff(timing, m, rng, backoff)
            sec[sender]["idle"] += wait
            sec[receiver]["idle"] += wait
            sec[sender]["tx"] += t_frame
            sec[receiver]["rx"] += t_frame
            total += wait + t_frame
            ok = rng.random() >= p_frame
            if ok:
                sec[sender]["idle"] += timing.sifs
                sec[receiver]["idle"] += timing.sifs
                sec[receiver]["tx"] += ex.t_ba
                sec[sender]["rx"] += ex.t_ba
                total += timing.sifs + ex.t_ba
                if rng.random() >= ex.p_ba:
                    break
            m = m + 1 if m < m_max else 0
    return total, sec


def _node_lookup(topo):
    return {(round(n.x, 6), round(n.y, 6)): n.id for n in topo.nodes}


def run(
    plan,
    profile: SystemProfile,
    duration: float,
    seed: int = 0,
    *,
    stats: ChannelStats | None = None,
    cci: bool = True,
    ber: float | Callable[[SubLinkPlan, bool], float] | None = None,
    backoff: str = "uniform",
    phase: str = "aligned",
    queue_cap: int = 1_000_000,
    warmup: float = 0.0,
) -> SimReport:
    """Simulate ``plan`` for ``duration`` seconds.

    ``ber`` overrides the planned bit error rates (a constant, or a function
    of (sub-link plan, cci_active)).  Co-channel pairs are in LoS with the
    fitted probability when ``stats`` is given, otherwise always.  Packets
    generated before ``warmup`` are not counted in the latency sample.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if backoff not in ("uniform", "mean"):
        raise ValueError("backoff must be 'uniform' or 'mean'")
    if phase not in ("aligned", "random"):
        raise ValueError("phase must be 'aligned' or 'random'")
    topo = plan.topo
    plans: Sequence[SubLinkPlan] = plan.sublinks
    n = len(plans)
    timing = profile.timing
    radio = profile.radio
    c = profile.constants
    m_max = timing.m_max
    rng = np.random.default_rng(seed)
    currents = {"rx": radio.i_rx, "idle": radio.i_idle, "sleep": radio.i_sl}

    # routing: next sub-link downstream, or None at the DCC
    nxt: list[int | None] = [None] * n
    dst_link = {ln.src: ln.id for ln in topo.links}
    for ln in topo.links:
        subs = list(ln.sublinks)
        for a, b in zip(subs, subs[1:]):
            nxt[a] = b
        parent = dst_link.get(ln.dst)
        nxt[subs[-1]] = topo.links[parent].sublinks[0] if parent is not None else None
    sources = {}  # first sub-link -> WGN node id
    for ln in topo.links:
        if topo.nodes[ln.src].kind == "WGN":
            sources[ln.sublinks[0]] = ln.src

    lookup = _node_lookup(topo)
    node_of_radio = {}
    for s in topo.sublinks:
        node_of_radio[(s.id, "a")] = lookup.get((round(s.a[0], 6), round(s.a[1], 6)), -1)
        node_of_radio[(s.id, "b")] = lookup.get((round(s.b[0], 6), round(s.b[1], 6)), -1)

    los = {}
    for s in topo.sublinks:
        for j, sep in s.cochannel:
            key = (min(s.id, j), max(s.id, j))
            if key not in los:
                los[key] = True if stats is None else bool(rng.random() < float(stats.plos(sep)))

    def ber_of(i, active):
        p = plans[i]
        if ber is None:
            return p.ber_cci if active else p.ber
        if callable(ber):
            return ber(p, active)
        return float(ber)

    ex_cache: dict = {}

    def exchange_params(i, active):
        p = plans[i]
        th = p.theta_cci if (active and p.theta_cci is not None) else p.theta
        key = (th[1], th[2], ber_of(i, active), th[0])
        if key not in ex_cache:
            ex_cache[key] = _Exchange(profile, th[1], th[2], key[2], th[0])
        return th, ex_cache[key]

    lam_w = topo.wgn_rate
    if phase == "random":
        offsets = rng.uniform(0, 1, n)
        wgn_phase = {w: float(rng.uniform(0, 1.0 / lam_w)) if lam_w > 0 else 0.0 for w in sorted(set(sources.values()))}
    else:
        offsets = np.zeros(n)
        wgn_phase = {w: 0.0 for w in sources.values()}
    pulled = {w: 0 for w in wgn_phase}

    meters = {(i, e): RadioMeter() for i in range(n) for e in ("a", "b")}
    mark = np.zeros(n)  # time up to which the radios' modes are accounted
    queues = [deque() for _ in range(n)]
    in_flight = [[] for _ in range(n)]
    last_window = [(-math.inf, -math.inf)] * n
    next_wake = np.full(n, math.inf)
    ex_sum = np.zeros(n)
    ex_cnt = np.zeros(n, dtype=int)
    cci_cnt = np.zeros(n, dtype=int)
    delivered: list = []
    overruns = 0
    unstable = False
    reason = ""

    def period(i, k):
        lam = plans[i].lam
        return k / lam - c.delta

    events: list = []
    for i in range(n):
        if plans[i].lam <= 0:
            continue
        t0 = offsets[i] * period(i, plans[i].theta[2])
        next_wake[i] = t0
        heapq.heappush(events, (t0, i, _WAKE))

    def account_sleep(i, upto):
        gap = upto - mark[i]
        if gap <= 0:
            return
        idle = min(gap, c.t_sl_min)
        for e in ("a", "b"):
            meters[(i, e)].add("idle", idle)
            meters[(i, e)].add("sleep", gap - idle)
        mark[i] = upto

    def cci_active(i, t):
        if not cci:
            return False
        p = plans[i]
        t_end = t + p.t_exchange
        for j, _ in topo.sublinks[i].cochannel:
            if not los[(min(i, j), max(i, j))]:
                continue
            a0, a1 = last_window[j]
            if a0 < t_end and t < a1:
                return True
            b0 = next_wake[j]
            if b0 < t_end and t < b0 + plans[j].t_exchange:
                return True
        return False

    while events:
        t, i, kind = heapq.heappop(events)
        if t > duration:
            break
        if kind == _WAKE:
            account_sleep(i, t)
            w = sources.get(i)
            if w is not None:
                n_now = int(math.floor((t - wgn_phase[w]) * lam_w + 1e-9)) + 1 if t >= wgn_phase[w] else 0
                for seq in range(pulled[w], n_now):
                    queues[i].append((w, seq, wgn_phase[w] + seq / lam_w))
                pulled[w] = max(pulled[w], n_now)
            if len(queues[i]) > queue_cap:
                unstable = True
                reason = f"sub-link {i} queue exceeded {queue_cap} packets at t={t:.3f}s"
                break
            active = cci_active(i, t)
            th, ex = exchange_params(i, active)
            k = th[2]
            batch = [queues[i].popleft() for _ in range(min(k, len(queues[i])))]
            dur, sec = _run_exchange(ex, timing, m_max, rng, backoff)
            for e in ("a", "b"):
                for m in MODES:
                    meters[(i, e)].add(m, sec[e][m], ex.i_tx)
            mark[i] = t + dur
            in_flight[i] = batch
            last_window[i] = (t, t + dur)
            ex_sum[i] += dur
            ex_cnt[i] += 1
            cci_cnt[i] += int(active)
            nw = t + period(i, k)
            if nw < t + dur:
                overruns += 1
                nw = t + dur
            next_wake[i] = nw
            heapq.heappush(events, (t + dur, i, _END))
            heapq.heappush(events, (nw, i, _WAKE))
        else:
            batch = in_flight[i]
            in_flight[i] = []
            j = nxt[i]
            if j is None:
                delivered.extend((src, seq, g, t) for src, seq, g in batch)
            else:
                queues[j].extend(batch)
                if len(queues[j]) > queue_cap:
                    unstable = True
                    reason = f"sub-link {j} queue exceeded {queue_cap} packets at t={t:.3f}s"
                    break

    end_t = duration
    if unstable:
        end_t = t
    for i in range(n):
        if mark[i] < end_t:
            account_sleep(i, end_t)
    # an exchange still running at the horizon is metered in full, so each
    # sub-link's own horizon is where its accounting stops
    radio_seconds = {k: dict(m.seconds) for k, m in meters.items()}
    radio_joules = {k: m.joules(currents, radio.v_s) for k, m in meters.items()}
    horizon = np.array([max(end_t, mark[i]) for i in range(n)])
    sub_power = np.array([(radio_joules[(i, "a")] + radio_joules[(i, "b")]) / horizon[i] for i in range(n)])

    generated = 0
    for w in wgn_phase:
        if end_t >= wgn_phase[w]:
            generated += int(math.floor((end_t - wgn_phase[w]) * lam_w + 1e-9)) + 1
    queued = sum(len(q) for q in queues) + sum(
        (int(math.floor((end_t - wgn_phase[w]) * lam_w + 1e-9)) + 1 if end_t >= wgn_phase[w] else 0) - pulled[w] for w in wgn_phase
    )
    flying = sum(len(b) for b in in_flight)
    packets = [p for p in delivered if p[2] >= warmup]
    with np.errstate(invalid="ignore", divide="ignore"):
        ex_mean = np.where(ex_cnt > 0, ex_sum / np.maximum(ex_cnt, 1), np.nan)
        cci_frac = np.where(ex_cnt > 0, cci_cnt / np.maximum(ex_cnt, 1), 0.0)
    return SimReport(
        duration=float(end_t),
        seed=seed,
        radio_seconds=radio_seconds,
        radio_joules=radio_joules,
        node_of_radio=node_of_radio,
        sublink_power=sub_power,
        exchange_mean=ex_mean,
        exchange_count=ex_cnt,
        cci_fraction=cci_frac,
        packets=packets,
        generated=generated,
        delivered=len(delivered),
        in_flight=flying,
        queued=queued,
        unstable=unstable,
        reason=reason,
        overruns=overruns,
    )


def duty_overlap_experiment(
    plan_pair: tuple[SubLinkPlan, SubLinkPlan],
    lambdas: tuple[float, float],
    periods: int,
    seed: int = 0,
    *,
    delta: float = 5e-6,
    phase: str = "random",
) -> float:
    """Fraction of l's on-windows that meet an on-window of m.

    Every period of l gets an independent uniform phase of m's cycle, except
    with ``phase="zero"`` where both cycles start together.
    """
    if periods < 1:
        raise ValueError("periods must be >= 1")
    pl, pm = plan_pair
    lam_m = lambdas[1]
    t_ld, t_md = pl.t_exchange, pm.t_exchange
    period_m = pm.theta[2] / lam_m - delta
    if period_m <= 0:
        raise ValueError("non-positive period for m")
    rng = np.random.default_rng(seed)
    if phase == "zero":
        phi = np.zeros(periods)
    elif phase == "random":
        phi = rng.uniform(0.0, period_m, periods)
    else:
        raise ValueError("phase must be 'random' or 'zero'")
    # m's windows start at phi + n*T; the nearest start at or before t_ld
    # decides whether [0, t_ld] is hit
    start = phi - np.floor(phi / period_m) * period_m  # in [0, T)
    hit = (start < t_ld) | (start + t_md - period_m > 0)
    return float(np.mean(hit))
