"""Network power minimisation.

Scenario 1 searches (relays, tx power, MCS) per link at the largest
aggregation length.  CCI is then repaired by stepping down the power (and if
needed the MCS) of dominant interferers.  When the resulting latency breaks
the budget, scenario 2 re-allocates aggregation lengths under per-path
latency constraints.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, least_squares, milp
from scipy.sparse import lil_matrix

from .channel import ChannelStats, InterferenceMoments, combine_interferers, outage_probability, received_moments
from .dutycycle import SubLinkPlan, duty_power_k, overlap_prob, sublink_power, sublink_power_parts
from .framing import ChainDivergenceError, ExchangeResult, ModelValidityError, analyze_exchange
from .profiles import SystemProfile
from .topology import MeshTopology, SurveySpec, build_topology, with_relays

log = logging.getLogger(__name__)


class InfeasibleError(RuntimeError):
    def __init__(self, message: str, link: int | None = None, constraint: str | None = None):
        super().__init__(message)
        self.link = link
        self.constraint = constraint


class FitError(RuntimeError):
    pass


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class SubLinkEval:
    tx: float
    eta: int
    k: int
    d: float
    lam: float
    p_out: float
    ber: float
    t_exchange: float
    gamma_d: float
    t_sleep: float  # may be below t_sl_min; see ``sleep_ok``
    power: float
    sleep_ok: bool


class LinkModel:
    """Evaluates one sub-link for a given (tx, MCS, K) with memoised exchanges."""

    def __init__(self, profile: SystemProfile, stats: ChannelStats):
        self.profile = profile
        self.stats = stats
        self.noise = InterferenceMoments(profile.budget.noise_dbm, 0.0)
        self._cache: dict = {}

    def outage(self, tx: float, eta: int, d: float, interference: InterferenceMoments | None = None) -> float:
        return outage_probability(self.stats, (tx, eta), d, self.profile.budget.gains, interference or self.noise, self.profile.table)

    def mean_sinr(self, tx: float, d: float, interference: InterferenceMoments | None = None) -> float:
        im = interference or self.noise
        rx, _ = received_moments(self.stats, tx, d, self.profile.budget.gains)
        return rx - im.mu_I

    def ber(self, tx: float, eta: int, d: float, interference: InterferenceMoments | None = None) -> float:
        sinr = self.mean_sinr(tx, d, interference)
        if math.isnan(sinr):
            return 0.5
        return self.profile.ber(sinr, self.profile.table[eta].sinr_min)

    def exchange(self, eta: int, k: int, ber: float, tx: float) -> ExchangeResult | None:
        key = (eta, k, ber, tx)
        if key not in self._cache:
            pay, ack = self.profile.shapes(k)
            p = self.profile
            try:
                self._cache[key] = analyze_exchange(pay, eta, p.timing, p.table, ber, p.radio, tx, ack)
            except (ChainDivergenceError, ModelValidityError):
                self._cache[key] = None
        return self._cache[key]

    def evaluate(self, tx: float, eta: int, k: int, lam: float, d: float, interference: InterferenceMoments | None = None) -> SubLinkEval:
        c = self.profile.constants
        p_out = self.outage(tx, eta, d, interference)
        ber = self.ber(tx, eta, d, interference)
        ex = self.exchange(eta, k, ber, tx)
        if ex is None:
            return SubLinkEval(tx, eta, k, d, lam, p_out, ber, math.inf, math.nan, -math.inf, math.inf, False)
        t_sl = k / lam - ex.t_exchange - c.delta
        power = duty_power_k(k, lam, ex.t_exchange, ex.gamma_d, self.profile.radio, c)
        return SubLinkEval(tx, eta, k, d, lam, p_out, ber, ex.t_exchange, ex.gamma_d, t_sl, power, t_sl >= c.t_sl_min)

    def classical_power(self, tx: float, eta: int, lam: float, d: float) -> tuple[float, float]:
        """Power of a sub-link that never sleeps and sends one packet per exchange.

        With no sleep the radios cycle through exchange states back to back, so
        the mean power is gamma_d at K = 1.  The utilisation lam * t_d is
        returned alongside; it may exceed 1 on the busiest links.
        """
        ber = self.ber(tx, eta, d)
        ex = self.exchange(eta, 1, ber, tx)
        if ex is None:
            return math.inf, math.inf
        return ex.gamma_d, lam * ex.t_exchange


# ---------------------------------------------------------------- scenario 1


@dataclass(frozen=True)
class LinkChoice:
    link: int | None
    relays: int
    tx: float
    eta: int
    k: int
    objective: float
    sublink: SubLinkEval | None
    evaluated: int


def scenario1_candidates(profile: SystemProfile, r_min: int, r_span: int = 3) -> list[tuple[int, int, int]]:
    tx0, tx1 = profile.tx_power_range
    m0, m1 = profile.mcs_range
    return [
        (r, tx, eta)
        for r in range(r_min, r_min + r_span + 1)
        for tx in range(tx0, tx1 + 1)
        for eta in range(m0, m1 + 1)
        if eta in profile.table
    ]


def optimize_link_scenario1(
    model: LinkModel,
    length: float,
    lam: float,
    r_min: int,
    *,
    link_id: int | None = None,
    r_span: int = 3,
    k: int | None = None,
    candidates: Iterable[tuple[int, int, int]] | None = None,
    classical: bool = False,
    fallback: bool = False,
) -> LinkChoice:
    """Exhaustive search of (r, tx, MCS) at a fixed K; ties go to lower tx, then lower MCS.

    With ``fallback`` a link that cannot sleep long enough still gets the
    candidate with the shortest exchange, so an overloaded network can be
    reported and simulated instead of rejected.
    """
    p = model.profile
    k = p.constants.k_max if k is None else k
    if candidates is None:
        candidates = scenario1_candidates(p, r_min, r_span)
    best = None
    fast = None
    n = 0
    n_outage_ok = 0
    for r, tx, eta in candidates:
        n += 1
        d = length / (r + 1)
        if model.outage(tx, eta, d) > p.p_th_out:
            continue
        n_outage_ok += 1
        if classical:
            power, _ = model.classical_power(tx, eta, lam, d)
            if not math.isfinite(power):
                continue
            ev = None
        else:
            ev = model.evaluate(tx, eta, k, lam, d)
            if not ev.sleep_ok:
                if fallback and math.isfinite(ev.t_exchange):
                    fk = (ev.t_exchange, r, tx, eta)
                    if fast is None or fk < fast[0]:
                        fast = (fk, r, tx, eta, ev)
                continue
            power = ev.power
        key = ((r + 1) * power, tx, eta, r)
        if best is None or key < best[0]:
            best = (key, r, tx, eta, ev)
    if best is None and fast is not None:
        _, r, tx, eta, ev = fast
        log.warning("link %s: no candidate sleeps >= t_sl_min; using the fastest exchange", link_id)
        return LinkChoice(link_id, r, tx, eta, k, (r + 1) * ev.power, ev, n)
    if best is None:
        what = "outage" if n_outage_ok == 0 else ("chain" if classical else "sleep")
        raise InfeasibleError(
            f"link {link_id}: no (r, tx, MCS) satisfies the {what} constraint at K={k}, lambda={lam:.1f}/s",
            link_id,
            what,
        )
    key, r, tx, eta, ev = best
    return LinkChoice(link_id, r, tx, eta, 1 if classical else k, key[0], ev, n)


# ---------------------------------------------------------------- Phi fitting


@dataclass(frozen=True)
class PhiFit:
    alpha1: float
    beta1: float
    alpha2: float
    beta2: float
    psi: tuple | None = None
    rel_rmse: float = math.nan

    def __post_init__(self):
        if min(self.alpha1, self.beta1, self.alpha2, self.beta2) <= 0:
            raise ValueError("all Phi parameters must be positive")

    def __call__(self, k):
        k = np.asarray(k, dtype=float)
        return 1.0 / (self.alpha1 * np.exp(self.beta1 * k) - self.alpha2 * np.exp(-self.beta2 * k))


def phi_model(params, k):
    a1, b1, a2, b2 = params
    return 1.0 / (a1 * np.exp(b1 * k) - a2 * np.exp(-b2 * k))


def phi_samples(model: LinkModel, tx: float, eta: int, lam: float, d: float, ks: Sequence[int], interference=None, ber: float | None = None) -> np.ndarray:
    """Exact per-window energy kernel (gamma_d - 2 gamma_sl) t_d / (K - lambda delta).

    ``ber`` overrides the channel-derived bit error rate.
    """
    g_sl = model.profile.radio.gamma_sl
    delta = model.profile.constants.delta
    if ber is None:
        ber = model.ber(tx, eta, d, interference)
    out = []
    for k in ks:
        ex = model.exchange(eta, int(k), ber, tx)
        if ex is None:
            raise FitError(f"exchange model invalid at K={k}, MCS {eta}")
        out.append((ex.gamma_d - 2 * g_sl) * ex.t_exchange / (k - lam * delta))
    return np.array(out)


def fit_phi(ks: Sequence[float], values: Sequence[float], psi=None, max_rel_rmse: float = 0.05) -> PhiFit:
    """Least squares on relative residuals, multi-started over (beta1, beta2)."""
    k = np.asarray(ks, dtype=float)
    y = np.asarray(values, dtype=float)
    if k.size < 4 or k.size != y.size:
        raise FitError("need at least four (K, Phi) samples")
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise FitError("Phi samples must be positive and finite")

    def resid(x):
        with np.errstate(all="ignore"):
            m = phi_model(np.exp(x), k)
        r = (m - y) / y
        return np.where(np.isfinite(r) & (m > 0), r, 1e3)

    def jac(x):
        a1, b1, a2, b2 = np.exp(x)
        with np.errstate(all="ignore"):
            e1 = a1 * np.exp(b1 * k)
            e2 = a2 * np.exp(-b2 * k)
            m = 1.0 / (e1 - e2)
            dd = np.column_stack([e1, e1 * b1 * k, -e2, e2 * b2 * k])
            j = -(m * m / y)[:, None] * dd
        return np.where(np.isfinite(j), j, 0.0)

    best = None
    for b1 in np.geomspace(1e-5, 1e-1, 4):
        for b2 in np.geomspace(1e-2, 3.0, 4):
            a1 = 1.0 / (y[-1] * np.exp(b1 * k[-1]))
            gap = a1 * np.exp(b1 * k[0]) - 1.0 / y[0]
            if gap <= 0:
                continue
            x0 = np.log([a1, b1, gap * np.exp(b2 * k[0]), b2])
            sol = least_squares(resid, x0, jac=jac, method="trf", x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=3000)
            err = float(np.sqrt(np.mean(resid(sol.x) ** 2)))
            if best is None or err < best[0]:
                best = (err, sol.x)
    if best is None:
        raise FitError("no admissible starting point (Phi increasing in K?)")
    err, x = best
    a1, b1, a2, b2 = (float(v) for v in np.exp(x))
    if min(a1, b1, a2, b2) <= 0.0 or not math.isfinite(a1 + b1 + a2 + b2):
        raise FitError("Phi fit degenerated (a parameter under- or overflowed)")
    if err > max_rel_rmse:
        raise FitError(f"Phi fit relative RMSE {err:.3%} exceeds {max_rel_rmse:.0%}")
    return PhiFit(a1, b1, a2, b2, psi, err)


# ---------------------------------------------------------------- scenario 2


@dataclass
class AllocationProblem:
    """Separable integer allocation: min sum c_s(K_s) s.t. per-path sum w_s K_s <= budget."""

    costs: list[np.ndarray]  # costs[s][j] is the cost at K = lb[s] + j
    lb: list[int]
    weights: list[float]
    paths: list[list[int]]
    budgets: list[float]

    @property
    def ub(self) -> list[int]:
        return [l + len(c) - 1 for l, c in zip(self.lb, self.costs)]

    def cost(self, ks: Sequence[int]) -> float:
        return float(sum(c[k - l] for c, k, l in zip(self.costs, ks, self.lb)))

    def path_load(self, ks: Sequence[int]) -> list[float]:
        return [sum(self.weights[s] * ks[s] for s in p) for p in self.paths]

    def feasible(self, ks: Sequence[int], tol: float = 0.0) -> bool:
        return all(load <= b + tol for load, b in zip(self.path_load(ks), self.budgets))


def brute_force_allocation(prob: AllocationProblem) -> tuple[list[int], float]:
    best = None
    for ks in itertools.product(*(range(l, u + 1) for l, u in zip(prob.lb, prob.ub))):
        if not prob.feasible(ks):
            continue
        c = prob.cost(ks)
        if best is None or c < best[1] or (c == best[1] and list(ks) > best[0]):
            best = (list(ks), c)
    if best is None:
        raise InfeasibleError("no integer allocation meets the latency budget", constraint="latency")
    return best


def greedy_allocation(prob: AllocationProblem, sweeps: int = 50) -> list[int]:
    """Dual bisection on per-path multipliers, then greedy integer repair and fill."""
    n = len(prob.costs)
    if not prob.feasible(prob.lb):
        raise InfeasibleError("lower bounds alone violate the latency budget", constraint="latency")
    member = [[i for i, p in enumerate(prob.paths) if s in p] for s in range(n)]
    slopes = [np.diff(c) for c in prob.costs]  # non-decreasing for convex costs

    def best_k(s, price):
        # largest K whose marginal cost drop still beats the latency price
        gain = -slopes[s] - price * prob.weights[s]
        j = int(np.sum(gain > 0))
        return prob.lb[s] + j

    mu = np.zeros(len(prob.paths))
    ks = [best_k(s, 0.0) for s in range(n)]
    for _ in range(sweeps):
        changed = False
        for i, p in enumerate(prob.paths):
            def load(m):
                trial = mu.copy()
                trial[i] = m
                return sum(prob.weights[s] * best_k(s, trial[member[s]].sum()) for s in p)

            if load(mu[i]) <= prob.budgets[i] and (mu[i] == 0 or load(0.0) > prob.budgets[i]):
                continue
            if load(0.0) <= prob.budgets[i]:
                new = 0.0
            else:
                lo, hi = 0.0, 1.0
                while load(hi) > prob.budgets[i] and hi < 1e30:
                    hi *= 4
                for _ in range(100):
                    mid = 0.5 * (lo + hi)
                    if load(mid) > prob.budgets[i]:
                        lo = mid
                    else:
                        hi = mid
                new = hi
            if new != mu[i]:
                mu[i] = new
                changed = True
        ks = [best_k(s, mu[member[s]].sum()) for s in range(n)]
        if not changed:
            break

    # repair: shave the cheapest latency until every path fits
    while not prob.feasible(ks):
        loads = prob.path_load(ks)
        bad = {i for i, (l, b) in enumerate(zip(loads, prob.budgets)) if l > b}
        cand = []
        for s in range(n):
            hits = sum(1 for i in member[s] if i in bad)
            if hits and ks[s] > prob.lb[s]:
                j = ks[s] - prob.lb[s]
                rise = prob.costs[s][j - 1] - prob.costs[s][j]
                cand.append((rise / (prob.weights[s] * hits), s))
        if not cand:
            raise InfeasibleError("latency repair ran out of slack", constraint="latency")
        ks[min(cand)[1]] -= 1
    # fill: spend leftover slack on the best marginal gains
    while True:
        loads = prob.path_load(ks)
        cand = []
        for s in range(n):
            if ks[s] >= prob.ub[s]:
                continue
            if all(loads[i] + prob.weights[s] <= prob.budgets[i] for i in member[s]):
                j = ks[s] - prob.lb[s]
                gain = prob.costs[s][j] - prob.costs[s][j + 1]
                if gain > 0:
                    cand.append((-gain / prob.weights[s], s))
        if not cand:
            return ks
        ks[min(cand)[1]] += 1


def _is_convex(c: np.ndarray) -> bool:
    d2 = np.diff(c, 2)
    scale = max(1.0, float(np.max(np.abs(c))))
    return bool(np.all(d2 >= -1e-12 * scale))


def milp_allocation(prob: AllocationProblem) -> list[int]:
    """Exact solve: integer K with an epigraph of each convex piecewise cost."""
    n = len(prob.costs)
    for s, c in enumerate(prob.costs):
        if not _is_convex(c):
            raise ValueError(f"cost curve of sub-link {s} is not convex; use brute force")
    if not prob.feasible(prob.lb):
        raise InfeasibleError("lower bounds alone violate the latency budget", constraint="latency")
    # shift and scale costs so solver tolerances sit far below cost steps
    base = [float(c[-1]) for c in prob.costs]
    steps = np.concatenate([np.abs(np.diff(c)) for c in prob.costs if len(c) > 1] or [np.array([1.0])])
    steps = steps[steps > 0]
    scale = 1.0 / float(steps.min()) if steps.size else 1.0
    n_cuts = sum(max(len(c) - 1, 0) for c in prob.costs)
    a = lil_matrix((n_cuts + len(prob.paths), 2 * n))
    lo, hi = [], []
    row = 0
    for s, c in enumerate(prob.costs):
        cs = (np.asarray(c) - base[s]) * scale
        for j in range(len(c) - 1):
            slope = cs[j + 1] - cs[j]
            k0 = prob.lb[s] + j
            # t_s - slope * K_s >= cs[j] - slope * k0
            a[row, n + s] = 1.0
            a[row, s] = -slope
            lo.append(cs[j] - slope * k0)
            hi.append(np.inf)
            row += 1
    for i, p in enumerate(prob.paths):
        for s in p:
            a[row, s] = prob.weights[s]
        lo.append(-np.inf)
        hi.append(prob.budgets[i])
        row += 1
    cmin = [((np.asarray(c) - base[s]) * scale).min() for s, c in enumerate(prob.costs)]
    bounds = Bounds(list(prob.lb) + cmin, list(prob.ub) + [np.inf] * n)
    obj = np.r_[np.zeros(n), np.ones(n)]
    integrality = np.r_[np.ones(n), np.zeros(n)]
    res = milp(obj, constraints=LinearConstraint(a.tocsr(), lo, hi), integrality=integrality, bounds=bounds, options={"mip_rel_gap": 1e-12})
    if res.x is None:
        raise InfeasibleError(f"allocation MILP failed: {res.message}", constraint="latency")
    ks = [int(round(v)) for v in res.x[:n]]
    return _polish(prob, _make_feasible(prob, ks))


def _make_feasible(prob: AllocationProblem, ks: list[int]) -> list[int]:
    # solver tolerances can admit a hair of excess latency; shave it exactly
    member = [[i for i, p in enumerate(prob.paths) if s in p] for s in range(len(ks))]
    while not prob.feasible(ks):
        loads = prob.path_load(ks)
        bad = {i for i, (l, b) in enumerate(zip(loads, prob.budgets)) if l > b}
        cand = [
            ((prob.costs[s][ks[s] - prob.lb[s] - 1] - prob.costs[s][ks[s] - prob.lb[s]]) / prob.weights[s], s)
            for s in range(len(ks))
            if ks[s] > prob.lb[s] and any(i in bad for i in member[s])
        ]
        ks[min(cand)[1]] -= 1
    return ks


def _polish(prob: AllocationProblem, ks: list[int]) -> list[int]:
    """Exact 1- and 2-exchange descent; guards against solver tolerance slips."""
    n = len(ks)
    cur = prob.cost(ks)
    improved = True
    while improved:
        improved = False
        moves = [(s, d) for s in range(n) for d in (1, -1)]
        moves += [((s, 1), (t, -1)) for s in range(n) for t in range(n) if s != t]
        for mv in moves:
            trial = list(ks)
            for s, d in ([mv] if isinstance(mv[0], int) else mv):
                trial[s] += d
            if any(not (l <= k <= u) for k, l, u in zip(trial, prob.lb, prob.ub)):
                continue
            if not prob.feasible(trial):
                continue
            c = prob.cost(trial)
            if c < cur - 1e-15 * max(1.0, abs(cur)):
                ks, cur, improved = trial, c, True
                break
    return ks


def solve_allocation(prob: AllocationProblem, method: str = "milp") -> list[int]:
    if method == "milp":
        return milp_allocation(prob)
    if method == "greedy":
        return greedy_allocation(prob)
    if method == "brute":
        return brute_force_allocation(prob)[0]
    raise ValueError(f"unknown allocation method {method!r}")


# ---------------------------------------------------------------- network plan


@dataclass(frozen=True)
class MitigationConfig:
    epsilon: float = 1.0
    max_iterations: int = 10_000

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class MitigationReport:
    initial: tuple[int, ...]
    omega: tuple[int, ...]
    iterations: int
    changed: tuple[int, ...]
    unresolved: tuple[int, ...]
    partial: bool


@dataclass(frozen=True)
class NetworkPlan:
    topo: MeshTopology
    sublinks: tuple[SubLinkPlan, ...]
    objective: float
    objective_no_cci: float
    scenario: int
    path_latency: tuple[float, ...]
    path_latency_cci: tuple[float, ...]
    feasibility: dict = field(default_factory=dict)
    violations: tuple[str, ...] = ()
    mitigation: MitigationReport | None = None
    baseline_power: float | None = None
    phi_fits: tuple = ()
    profile: str = ""

    @property
    def max_latency(self) -> float:
        return max(max(self.path_latency), max(self.path_latency_cci))

    @property
    def feasible(self) -> bool:
        return all(self.feasibility.values())

    def to_dict(self) -> dict:
        return {
            "schema": "mmbackhaul.plan/1",
            "profile": self.profile,
            "objective_w": self.objective,
            "objective_no_cci_w": self.objective_no_cci,
            "baseline_power_w": self.baseline_power,
            "scenario": self.scenario,
            "path_latency_s": list(self.path_latency),
            "path_latency_cci_s": list(self.path_latency_cci),
            "feasibility": self.feasibility,
            "violations": list(self.violations),
            "mitigation": asdict(self.mitigation) if self.mitigation else None,
            "phi_fits": [asdict(f) for f in self.phi_fits],
            "sublinks": [asdict(s) for s in self.sublinks],
            "topology": self.topo.to_dict(),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkPlan":
        def tup(v):
            return tuple(tup(x) for x in v) if isinstance(v, list) else v

        mit = d.get("mitigation")
        return cls(
            topo=MeshTopology.from_dict(d["topology"]),
            sublinks=tuple(SubLinkPlan(**{k: tup(v) for k, v in s.items()}) for s in d["sublinks"]),
            objective=d["objective_w"],
            objective_no_cci=d["objective_no_cci_w"],
            scenario=d["scenario"],
            path_latency=tuple(d["path_latency_s"]),
            path_latency_cci=tuple(d["path_latency_cci_s"]),
            feasibility=d["feasibility"],
            violations=tuple(d["violations"]),
            mitigation=MitigationReport(**{k: tup(v) for k, v in mit.items()}) if mit else None,
            baseline_power=d.get("baseline_power_w"),
            phi_fits=tuple(PhiFit(**{k: tup(v) for k, v in f.items()}) for f in d.get("phi_fits", [])),
            profile=d.get("profile", ""),
        )

    @classmethod
    def from_json(cls, path) -> "NetworkPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def recompute_objective(plan: NetworkPlan, profile: SystemProfile) -> float:
    """Double sum over links and sub-links of the CCI-weighted power."""
    total = 0.0
    for ln in plan.topo.links:
        total += sum(sublink_power(plan.sublinks[i], profile.radio, profile.constants) for i in ln.sublinks)
    return total


def _cci_interference(model: LinkModel, topo: MeshTopology, i: int, tx_cci: dict) -> InterferenceMoments:
    g = model.profile.budget.interferer_gains
    terms = [(model.noise.mu_I, 0.0)]
    for j, sep in topo.sublinks[i].cochannel:
        m, s = received_moments(model.stats, tx_cci[j], sep, g)
        if math.isfinite(m):
            terms.append((m, s))
    return combine_interferers(terms)


def _stable(k, t_sleep, t_exchange, lam) -> bool:
    # an overloaded sub-link skips sleep entirely, so service is K per max(period, t_d)
    busy = max(t_sleep, 0.0) + t_exchange
    return math.isfinite(busy) and k / busy > lam


def evaluate_network(
    topo: MeshTopology,
    model: LinkModel,
    theta: dict[int, tuple],
    theta_cci: dict[int, tuple],
    *,
    scenario: int = 1,
    mitigation: MitigationReport | None = None,
    baseline_power: float | None = None,
    phi_fits: tuple = (),
) -> NetworkPlan:
    """Assemble every sub-link plan, CCI probability and the feasibility report."""
    prof = model.profile
    c = prof.constants
    tx_cci = {i: th[0] for i, th in theta_cci.items()}
    ev_no: dict[int, SubLinkEval] = {}
    ev_c: dict[int, SubLinkEval] = {}
    for s in topo.sublinks:
        lam = topo.links[s.link].lam
        ev_no[s.id] = model.evaluate(*theta[s.id], lam, s.length)
        im = _cci_interference(model, topo, s.id, tx_cci)
        ev_c[s.id] = model.evaluate(*theta_cci[s.id], lam, s.length, im)

    plans = []
    for s in topo.sublinks:
        a, b = ev_no[s.id], ev_c[s.id]
        terms_los, terms_ov = [], []
        for j, sep in s.cochannel:
            m = ev_no[j]
            period_m = m.k / m.lam - c.delta
            terms_los.append(float(model.stats.plos(sep)))
            terms_ov.append(overlap_prob(a.t_exchange, m.t_exchange, m.t_sleep, period_m))
        q = 1.0
        for pl, po in zip(terms_los, terms_ov):
            q *= 1.0 - pl * po
        plans.append(
            SubLinkPlan(
                link=s.link,
                index=s.index,
                d=s.length,
                lam=a.lam,
                theta=(a.tx, a.eta, a.k),
                t_sleep=a.t_sleep,
                t_exchange=a.t_exchange,
                gamma_d=a.gamma_d,
                theta_cci=(b.tx, b.eta, b.k),
                t_sleep_cci=b.t_sleep,
                t_exchange_cci=b.t_exchange,
                gamma_d_cci=b.gamma_d,
                p_cci=min(1.0, max(0.0, 1.0 - q)),
                p_out=a.p_out,
                p_out_cci=b.p_out,
                ber=a.ber,
                ber_cci=b.ber,
                channel=s.channel,
            )
        )

    lat, lat_c = [], []
    for path in topo.paths:
        lat.append(sum(plans[i].theta[2] / topo.links[l].lam - c.delta for l in path for i in topo.links[l].sublinks))
        lat_c.append(sum(plans[i].theta_cci[2] / topo.links[l].lam - c.delta for l in path for i in topo.links[l].sublinks))

    tx0, tx1 = prof.tx_power_range
    m0, m1 = prof.mcs_range
    viol = []
    checks = {
        "sleep": all(ev_no[i].sleep_ok and ev_c[i].sleep_ok for i in ev_no),
        "stability": all(_stable(p.theta[2], p.t_sleep, p.t_exchange, p.lam) and _stable(p.theta_cci[2], p.t_sleep_cci, p.t_exchange_cci, p.lam) for p in plans),
        "outage": all(p.p_out <= prof.p_th_out and p.p_out_cci <= prof.p_th_out for p in plans),
        "latency": max(lat + lat_c) <= c.latency_max,
        "tx_bounds": all(tx0 <= p.theta[0] <= tx1 and tx0 <= p.theta_cci[0] <= tx1 for p in plans),
        "mcs_bounds": all(m0 <= p.theta[1] <= m1 and m0 <= p.theta_cci[1] <= m1 for p in plans),
        "relays": all(l.relays >= l.r_min for l in topo.links),
        "integers": all(float(p.theta[2]).is_integer() and float(p.theta_cci[2]).is_integer() for p in plans),
    }
    for i, p in enumerate(plans):
        if not ev_no[i].sleep_ok:
            viol.append(f"sub-link {i}: sleep below t_sl_min (no CCI)")
        if not ev_c[i].sleep_ok:
            viol.append(f"sub-link {i}: sleep below t_sl_min (CCI)")
        if p.p_out > prof.p_th_out:
            viol.append(f"sub-link {i}: outage {p.p_out:.2e} (no CCI)")
        if p.p_out_cci > prof.p_th_out:
            viol.append(f"sub-link {i}: outage {p.p_out_cci:.2e} (CCI)")
    for k, (a, b) in enumerate(zip(lat, lat_c)):
        if max(a, b) > c.latency_max:
            viol.append(f"path {k}: latency {max(a, b):.3f} s > {c.latency_max} s")

    objective = 0.0
    objective_no = 0.0
    for p in plans:
        p_no, p_c = sublink_power_parts(p, prof.radio, c)
        objective += (1 - p.p_cci) * p_no + p.p_cci * p_c
        objective_no += p_no
    return NetworkPlan(
        topo=topo,
        sublinks=tuple(plans),
        objective=objective,
        objective_no_cci=objective_no,
        scenario=scenario,
        path_latency=tuple(lat),
        path_latency_cci=tuple(lat_c),
        feasibility=checks,
        violations=tuple(viol),
        mitigation=mitigation,
        baseline_power=baseline_power,
        phi_fits=phi_fits,
        profile=prof.name,
    )


def mitigate_cci(plan: NetworkPlan, model: LinkModel, config: MitigationConfig = MitigationConfig()) -> NetworkPlan:
    """Power-then-rate control of dominant co-channel interferers (CCI variant only).

    A sub-link needs help when its CCI variant breaks the outage threshold or
    can no longer sleep for t_sl_min.
    """
    topo = plan.topo
    prof = model.profile
    th = prof.p_th_out
    tx_min = prof.tx_power_range[0]
    eta_min = prof.mcs_range[0]
    tx = {i: p.theta_cci[0] for i, p in enumerate(plan.sublinks)}
    eta = {i: p.theta_cci[1] for i, p in enumerate(plan.sublinks)}
    g_int = prof.budget.interferer_gains

    def ok_at(i, p_tx, mcs):
        # outage and minimum sleep of sub-link i's CCI variant at (p_tx, mcs)
        s = topo.sublinks[i]
        im = _cci_interference(model, topo, i, tx)
        if model.outage(p_tx, mcs, s.length, im) > th:
            return False
        lam = topo.links[s.link].lam
        return model.evaluate(p_tx, mcs, plan.sublinks[i].theta_cci[2], lam, s.length, im).sleep_ok

    def bad(i):
        return not ok_at(i, tx[i], eta[i])

    def can_yield(j):
        # never push an interferer below what it needs at some admissible MCS
        if tx[j] - config.epsilon < tx_min - 1e-12:
            return False
        return any(ok_at(j, tx[j] - config.epsilon, e) for e in range(eta[j], eta_min - 1, -1))

    def dominant(i):
        best = None
        for j, sep in topo.sublinks[i].cochannel:
            if not can_yield(j):
                continue
            m, _ = received_moments(model.stats, tx[j], sep, g_int)
            if not math.isfinite(m):
                continue
            if best is None or (m, -j) > best[0]:
                best = ((m, -j), j)
        return None if best is None else best[1]

    n = len(plan.sublinks)
    initial = [i for i in range(n) if bad(i)]
    omega = list(initial)
    changed: list[int] = []
    it = 0
    partial = False
    queue = list(initial)
    stuck: set[int] = set()
    while queue and not partial:
        l = queue.pop(0)
        while bad(l):
            if it >= config.max_iterations:
                partial = True
                break
            m = dominant(l)
            if m is None:
                stuck.add(l)
                break
            tx[m] -= config.epsilon
            it += 1
            if bad(m):
                # fall back to the fastest MCS that still works
                eta[m] = next((e for e in range(eta[m] - 1, eta_min - 1, -1) if ok_at(m, tx[m], e)), eta_min)
            if m not in changed:
                changed.append(m)
            if m not in omega:
                omega.append(m)
        if not queue:
            # a later step may have broken a sub-link repaired earlier
            queue = [i for i in omega if i not in stuck and bad(i)]
    unresolved = sorted(i for i in range(n) if bad(i))
    if unresolved:
        log.warning("CCI mitigation incomplete: %d iterations, unresolved sub-links %s", it, unresolved)
    report = MitigationReport(tuple(initial), tuple(omega), it, tuple(sorted(changed)), tuple(unresolved), partial or bool(unresolved))
    theta = {i: p.theta for i, p in enumerate(plan.sublinks)}
    theta_c = {i: (tx[i], eta[i], p.theta_cci[2]) for i, p in enumerate(plan.sublinks)}
    return evaluate_network(
        topo, model, theta, theta_c, scenario=plan.scenario, mitigation=report, baseline_power=plan.baseline_power, phi_fits=plan.phi_fits
    )


def sleep_lower_bound(model: LinkModel, tx: float, eta: int, lam: float, d: float, interference=None) -> int | None:
    """Smallest K whose sleep still reaches t_sl_min (exact exchange time)."""
    for k in range(1, model.profile.constants.k_max + 1):
        if model.evaluate(tx, eta, k, lam, d, interference).sleep_ok:
            return k
    return None


def optimize_k_scenario2(
    plan: NetworkPlan,
    model: LinkModel,
    latency_max: float,
    cci: bool = False,
    method: str = "milp",
    fits: dict | None = None,
) -> tuple[dict[int, int], dict]:
    """Re-allocate K under the per-path latency budget with psi held fixed.

    Returns (K per sub-link, fits used keyed by (tx, MCS, lambda, ber)).
    """
    topo = plan.topo
    prof = model.profile
    c = prof.constants
    fits = {} if fits is None else fits
    tx_c = {i: p.theta_cci[0] for i, p in enumerate(plan.sublinks)}
    costs, lbs, weights = [], [], []
    ks_all = np.arange(1, c.k_max + 1)
    for s in topo.sublinks:
        p = plan.sublinks[s.id]
        tx, eta, _ = p.theta_cci if cci else p.theta
        im = _cci_interference(model, topo, s.id, tx_c) if cci else None
        ber = p.ber_cci if cci else p.ber
        key = (tx, eta, p.lam, ber)
        if key not in fits:
            vals = phi_samples(model, tx, eta, p.lam, s.length, ks_all, im)
            fits[key] = fit_phi(ks_all, vals, psi=(tx, eta))
        lb = sleep_lower_bound(model, tx, eta, p.lam, s.length, im)
        if lb is None:
            raise InfeasibleError(f"sub-link {s.id}: no K reaches the minimum sleep", s.link, "sleep")
        k = np.arange(lb, c.k_max + 1)
        cost = (
            2 * prof.radio.gamma_sl
            + 2 * (prof.radio.gamma_idle - prof.radio.gamma_sl) * c.t_sl_min * p.lam / (k - p.lam * c.delta)
            + p.lam * fits[key](k)
        )
        costs.append(cost)
        lbs.append(lb)
        weights.append(1.0 / p.lam)
    paths = [[i for l in path for i in topo.links[l].sublinks] for path in topo.paths]
    budgets = [latency_max + c.delta * len(p) for p in paths]
    prob = AllocationProblem(costs, lbs, weights, paths, budgets)
    if not prob.feasible(lbs):
        raise InfeasibleError("minimum-sleep lower bounds alone exceed the latency budget", constraint="latency")
    ks = solve_allocation(prob, method)
    return {i: int(k) for i, k in enumerate(ks)}, fits


@dataclass(frozen=True)
class SolveConfig:
    seed: int = 0
    r_span: int = 3
    cci: bool = True
    baseline: bool = True
    mitigation: MitigationConfig = MitigationConfig()
    allocation: str = "milp"
    strict: bool = True  # False: overloaded links fall back to their fastest exchange


def classical_baseline(topo: MeshTopology, model: LinkModel, r_span: int = 3) -> float:
    """Always-on, K = 1 network with its own (r, tx, MCS) search."""
    total = 0.0
    for ln in topo.links:
        ch = optimize_link_scenario1(model, ln.length, ln.lam, ln.relays, link_id=ln.id, r_span=r_span, classical=True)
        total += ch.objective
    return total


def solve_network(spec: SurveySpec, stats: ChannelStats, profile: SystemProfile, config: SolveConfig = SolveConfig()) -> NetworkPlan:
    model = LinkModel(profile, stats)
    topo0 = build_topology(spec, stats, seed=config.seed)
    choices = {}
    for ln in topo0.links:
        choices[ln.id] = optimize_link_scenario1(model, ln.length, ln.lam, ln.relays, link_id=ln.id, r_span=config.r_span, fallback=not config.strict)
    topo = with_relays(topo0, {l: ch.relays for l, ch in choices.items()})
    theta = {s.id: (choices[s.link].tx, choices[s.link].eta, choices[s.link].k) for s in topo.sublinks}
    baseline = classical_baseline(topo0, model, config.r_span) if config.baseline else None
    plan = evaluate_network(topo, model, theta, dict(theta), scenario=1, baseline_power=baseline)
    if config.cci:
        plan = mitigate_cci(plan, model, config.mitigation)

    l_max = profile.constants.latency_max
    if plan.max_latency > l_max and plan.feasibility["sleep"]:
        fits: dict = {}
        k_no, fits = optimize_k_scenario2(plan, model, l_max, cci=False, method=config.allocation, fits=fits)
        k_c, fits = optimize_k_scenario2(plan, model, l_max, cci=True, method=config.allocation, fits=fits)
        theta = {i: (p.theta[0], p.theta[1], k_no[i]) for i, p in enumerate(plan.sublinks)}
        theta_c = {i: (p.theta_cci[0], p.theta_cci[1], k_c[i]) for i, p in enumerate(plan.sublinks)}
        plan = evaluate_network(
            topo, model, theta, theta_c, scenario=2, mitigation=plan.mitigation, baseline_power=baseline, phi_fits=tuple(fits.values())
        )
    return plan
