import math

import numpy as np
import pytest

from mmbackhaul import dessim
from mmbackhaul.dutycycle import SubLinkPlan, overlap_prob
from mmbackhaul.framing import analyze_exchange

from oracles import overlap_mc


@pytest.fixture(scope="module")
def short_run(desk_plan, profile, desk_stats):
    return dessim.run(desk_plan, profile, 3.0, seed=5, stats=desk_stats)


def test_deterministic(desk_plan, profile, desk_stats, short_run):
    again = dessim.run(desk_plan, profile, 3.0, seed=5, stats=desk_stats)
    assert again.summary() == short_run.summary()
    assert again.packets == short_run.packets
    other = dessim.run(desk_plan, profile, 3.0, seed=6, stats=desk_stats)
    assert other.packets != short_run.packets


def test_packet_conservation(short_run):
    r = short_run
    assert r.generated == r.delivered + r.in_flight + r.queued
    assert r.delivered > 0 and not r.unstable


def test_every_radio_accounts_for_all_time(short_run):
    for key, sec in short_run.radio_seconds.items():
        total = sum(sec.values())
        assert total >= short_run.duration - 1e-9
        assert total <= short_run.duration + 0.01  # an exchange may straddle the horizon


def test_energy_identity(short_run, profile):
    r = profile.radio
    for key, sec in short_run.radio_seconds.items():
        floor = r.v_s * (sec["rx"] * r.i_rx + sec["idle"] * r.i_idle + sec["sleep"] * r.i_sl)
        assert short_run.radio_joules[key] >= floor - 1e-12
        assert short_run.radio_joules[key] <= floor + r.v_s * sec["tx"] * r.i_tx_max + 1e-12


def test_latency_never_below_first_hop(short_run, desk_plan):
    lat = short_run.latencies
    assert lat.min() > 0
    assert lat.max() <= desk_plan.max_latency * 1.05


def test_mean_backoff_error_free_matches_analysis(desk_plan, profile):
    rep = dessim.run(desk_plan, profile, 2.0, seed=0, cci=False, ber=0.0, backoff="mean")
    for i, p in enumerate(desk_plan.sublinks):
        pay, ack = profile.shapes(p.theta[2])
        want = analyze_exchange(pay, p.theta[1], profile.timing, profile.table, 0.0, ack_shape=ack).t_exchange
        assert rep.exchange_mean[i] == pytest.approx(want, rel=0.01)


def test_queue_cap_flags_instability(desk_plan, profile):
    rep = dessim.run(desk_plan, profile, 2.0, seed=0, queue_cap=5)
    assert rep.unstable and "queue" in rep.reason


def test_csv_output(short_run, tmp_path):
    paths = short_run.write_csv(str(tmp_path))
    lines = open(paths["packets"]).read().splitlines()
    assert len(lines) == len(short_run.packets) + 1


def test_argument_checks(desk_plan, profile):
    with pytest.raises(ValueError):
        dessim.run(desk_plan, profile, 0.0)
    with pytest.raises(ValueError):
        dessim.run(desk_plan, profile, 1.0, phase="weird")


def _pair(t_ld, t_md, t_msl, k, lam, delta=5e-6):
    pl = SubLinkPlan(0, 0, 100.0, lam, (5, 20, k), 0.1, t_ld, 10.0)
    pm = SubLinkPlan(1, 0, 100.0, lam, (5, 20, k), t_msl, t_md, 10.0)
    return pl, pm


@pytest.mark.parametrize(
    "t_ld,t_md,k,lam",
    [(1e-3, 2e-3, 100, 1000.0), (5e-3, 1e-3, 10, 1000.0), (2e-4, 3e-4, 50, 2000.0), (1e-3, 1e-3, 2, 1000.0)],
)
def test_overlap_experiment_vs_formula(t_ld, t_md, k, lam):
    period = k / lam - 5e-6
    t_msl = period - t_md
    pl, pm = _pair(t_ld, t_md, t_msl, k, lam)
    sim = dessim.duty_overlap_experiment((pl, pm), (lam, lam), 200_000, seed=1)
    assert sim == pytest.approx(overlap_prob(t_ld, t_md, t_msl, period), abs=0.01)
    assert sim == pytest.approx(overlap_mc(t_ld, t_md, period, 20_000, np.random.default_rng(2)), abs=0.015)


def test_overlap_zero_phase():
    pl, pm = _pair(1e-3, 1e-3, 0.098, 100, 1000.0)
    assert dessim.duty_overlap_experiment((pl, pm), (1000.0, 1000.0), 10, phase="zero") == 1.0
