"""Randomised invariants."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmbackhaul.channel import combine_interferers
from mmbackhaul.dutycycle import cci_probability, overlap_prob
from mmbackhaul.framing import analyze_exchange, pack, steady_state
from mmbackhaul.optimizer import AllocationProblem, milp_allocation
from mmbackhaul.profiles import TIMING_80211AD, ieee80211ad
from mmbackhaul.topology import relay_distribution

from oracles import chain_stationary, enumerate_allocation

AD = ieee80211ad()
prob01 = st.floats(0.0, 0.97)


@settings(max_examples=100, deadline=None)
@given(prob01, prob01, prob01, st.integers(1, 6))
def test_kappa_is_stationary(pp, pa, pk, m):
    s = steady_state(pp, pa, pk, m)
    got = np.concatenate([s.payload, s.payload_ba, s.ack, s.ack_ba])
    np.testing.assert_allclose(got, chain_stationary(pp, pa, pk, m), atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 114), st.floats(0, 2e-6))
def test_exchange_not_shorter_than_error_free(k, ber):
    pay, ack = AD.shapes(k)
    t0 = analyze_exchange(pay, 20, AD.timing, AD.table, 0.0, ack_shape=ack).t_exchange
    t1 = analyze_exchange(pay, 20, AD.timing, AD.table, ber, ack_shape=ack).t_exchange
    assert t1 >= t0 * (1 - 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.one_of(st.none(), st.integers(1, 3)))
def test_pack_conserves_msdus(k, per):
    sh = pack(k, 2240, TIMING_80211AD, per)
    assert sum(sh.n_msdu_per) == k
    assert all(n <= (per or 3) for n in sh.n_msdu_per)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1e-2), st.floats(1e-6, 1e-2), st.floats(1e-6, 1.0), st.floats(1e-4, 2.0))
def test_overlap_is_probability(a, b, c, t):
    assert 0.0 <= overlap_prob(a, b, c, t) <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), max_size=2))
def test_cci_probability_bounds(pairs):
    pl = [p for p, _ in pairs]
    po = [o for _, o in pairs]
    v = cci_probability(pl, po)
    assert 0.0 <= v <= 1.0
    assert v >= max([a * b for a, b in pairs], default=0.0) - 1e-15


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, -40), st.floats(0, 8)), min_size=1, max_size=4))
def test_fw_not_below_strongest(terms):
    fw = combine_interferers(terms)
    k = np.log(10) / 10
    lin = [np.exp(k * m + (k * s) ** 2 / 2) for m, s in terms]
    assert np.exp(k * fw.mu_I + (k * fw.sigma_I) ** 2 / 2) == pytest.approx(sum(lin), rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10))
def test_relay_distribution_normalised(q):
    p = relay_distribution(q + [1.0])
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_milp_equals_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    costs, lb = [], []
    for _ in range(n):
        lo = int(rng.integers(1, 5))
        k = np.arange(lo, int(rng.integers(lo + 1, 21)) + 1)
        costs.append(rng.uniform(0.01, 1) / k + rng.uniform(0, 1e-3) * k + rng.uniform(0, 0.1))
        lb.append(lo)
    w = list(rng.uniform(1e-3, 1e-2, n))
    paths = [list(range(n))]
    budget = [sum(wi * l for wi, l in zip(w, lb)) + rng.uniform(0, 0.1)]
    prob = AllocationProblem(costs, lb, w, paths, budget)
    ks = milp_allocation(prob)
    assert prob.feasible(ks)
    assert prob.cost(ks) == pytest.approx(enumerate_allocation(costs, lb, w, paths, budget), rel=1e-12)
