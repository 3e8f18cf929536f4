import math

import numpy as np
import pytest

from mmbackhaul.framing import (
    ChainDivergenceError,
    UnknownMcsError,
    analyze_exchange,
    ampdu_duration,
    frame_error_probs,
    load_mcs_table,
    pack,
    state_durations,
    steady_state,
)
from mmbackhaul.profiles import TIMING_80211AD, ieee80211ad

from oracles import chain_stationary


@pytest.fixture(scope="module")
def ad():
    return ieee80211ad()


def test_tables_load():
    t = load_mcs_table("80211ad")
    assert t.indices[0] <= 13 and t.indices[-1] >= 24
    rates = [t[i].phy_rate for i in t.indices]
    assert rates == sorted(rates)
    with pytest.raises(UnknownMcsError):
        t[99]


def test_pack_fixed_and_greedy():
    sh = pack(10, 2200, TIMING_80211AD, 1)
    assert sh.n_amsdu == 10 and sum(sh.n_msdu_per) == 10
    g = pack(10, 2200, TIMING_80211AD)
    assert sum(g.n_msdu_per) == 10 and g.n_amsdu == math.ceil(10 / 3)
    with pytest.raises(ValueError):
        pack(0, 2200, TIMING_80211AD)


def test_retry_depth_from_cw():
    assert TIMING_80211AD.m_max == 6


def test_error_free_exchange_is_deterministic(ad):
    pay, ack = ad.shapes(20)
    ex = analyze_exchange(pay, 20, ad.timing, ad.table, 0.0, ack_shape=ack)
    t = ad.timing
    tb = t.sifs + t.t_ba(ad.table[20].phy_rate)
    want = 2 * (t.aifs + t.mean_backoff(0) + tb)
    want += ampdu_duration(pay, 20, t, ad.table) + ampdu_duration(ack, 20, t, ad.table)
    assert ex.t_exchange == pytest.approx(want, rel=1e-12)


def test_exchange_time_grows_with_ber(ad):
    pay, ack = ad.shapes(50)
    ts = [analyze_exchange(pay, 18, ad.timing, ad.table, b, ack_shape=ack).t_exchange for b in (0, 1e-7, 1e-6, 3e-6)]
    assert all(a < b for a, b in zip(ts, ts[1:]))


def test_error_probs_bounds(ad):
    pay, ack = ad.shapes(30)
    p = frame_error_probs(pay, 1e-6, ad.timing, ack)
    assert 0 < p.p_payload_amsdu < p.p_payload < 1
    assert 0 < p.p_ba < p.p_ack
    with pytest.raises(ValueError):
        frame_error_probs(pay, 0.7, ad.timing)


@pytest.mark.parametrize("m", [1, 2, 3, 6])
def test_steady_state_matches_chain(m):
    rng = np.random.default_rng(m)
    for _ in range(20):
        pp, pa, pk = rng.uniform(0, 0.95, 3)
        s = steady_state(pp, pa, pk, m)
        got = np.concatenate([s.payload, s.payload_ba, s.ack, s.ack_ba])
        np.testing.assert_allclose(got, chain_stationary(pp, pa, pk, m), atol=1e-12)
        assert s.total() == pytest.approx(1.0, abs=1e-12)


def test_chain_divergence():
    with pytest.raises(ChainDivergenceError):
        steady_state(1.0, 0.1, 0.1, 3)


def test_state_durations_layout(ad):
    pay, ack = ad.shapes(5)
    d = state_durations(pay, 15, ad.timing, ad.table, ack_shape=ack)
    assert d.m_max == ad.timing.m_max
    assert all(b > a for a, b in zip(d.payload, d.payload[1:]))


def test_power_between_idle_and_tx(ad):
    pay, ack = ad.shapes(40)
    ex = analyze_exchange(pay, 19, ad.timing, ad.table, 1e-7, ad.radio, 5.0, ack)
    r = ad.radio
    lo, hi = r.gamma_idle, r.i_tx_max * r.v_s
    assert lo < ex.p_tx < hi and lo < ex.p_rx < hi
    pis = [row.pi for row in ex.state_table]
    assert sum(pis) == pytest.approx(2.0, rel=1e-9)  # each side's pi sums to one
