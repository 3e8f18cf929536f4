import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmbackhaul.dutycycle import (
    SubLinkPlan,
    cci_probability,
    duty_power,
    duty_power_k,
    max_agg_len,
    overlap_prob,
    path_latency,
    sleep_duration,
    sublink_power,
)
from mmbackhaul.profiles import DutyCycleConstants, TIMING_80211AD, ieee80211ad

C = DutyCycleConstants()


def test_kmax_desk_profile():
    # 262143 B cap over (4 delim + 26 hdr + 14 sub + 2240 MSDU + 4 FCS) B per subframe
    assert max_agg_len(2240, TIMING_80211AD, per_amsdu=1) == 262143 // 2288 == 114
    assert ieee80211ad().constants.k_max == 114


def test_sleep_duration_threshold():
    assert sleep_duration(100, 1000.0, 1e-3, C) == pytest.approx(0.1 - 1e-3 - C.delta)
    assert sleep_duration(1, 1000.0, 1e-3, C) is None
    with pytest.raises(ValueError):
        sleep_duration(1, 0.0, 1e-3, C)


def test_path_latency_sum():
    lat = path_latency([(1000.0, [100, 50]), (2000.0, [200])], C)
    assert lat == pytest.approx(0.1 + 0.05 + 0.1 - 3 * C.delta)


@settings(max_examples=200, deadline=None)
@given(k=st.integers(1, 1000), lam=st.floats(10, 1e5), tex=st.floats(1e-6, 1e-2), gd=st.floats(1, 20))
def test_power_forms_agree(k, lam, tex, gd):
    r = ieee80211ad().radio
    t_sl = k / lam - tex - C.delta
    if t_sl < C.t_sl_min:
        return
    a = duty_power(t_sl, tex, gd, r, C)
    b = duty_power_k(k, lam, tex, gd, r, C)
    assert a == pytest.approx(b, rel=1e-9)
    assert 2 * r.gamma_sl <= a <= max(gd, 2 * r.gamma_idle)


def test_overlap_branches():
    assert overlap_prob(1e-3, 2e-3, 0.1, 0.103) == pytest.approx(3e-3 / 0.103)
    assert overlap_prob(1e-3, 2e-3, 1e-4, 2.1e-3) == 1.0  # second branch saturates


def test_cci_probability():
    assert cci_probability([0.5, 0.5], [0.2, 0.1]) == pytest.approx(1 - 0.9 * 0.95)
    with pytest.raises(ValueError):
        cci_probability([0.1] * 3, [0.1] * 3)


def test_sublink_power_mixture():
    r = ieee80211ad().radio
    p = SubLinkPlan(0, 0, 100.0, 1000.0, (5, 20, 100), 0.098, 1e-3, 15.0, (5, 18, 100), 0.0975, 1.5e-3, 15.0, p_cci=0.25)
    p0 = duty_power(0.098, 1e-3, 15.0, r, C)
    p1 = duty_power(0.0975, 1.5e-3, 15.0, r, C)
    assert sublink_power(p, r, C) == pytest.approx(0.75 * p0 + 0.25 * p1)
    assert p.cci_view().theta == (5, 18, 100)
    with pytest.raises(ValueError):
        SubLinkPlan(0, 0, 1.0, 1.0, (5, 20, 0), 1.0, 1.0, 1.0)
