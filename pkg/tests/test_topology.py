import math

import numpy as np
import pytest

from mmbackhaul.channel import ChannelStats
from mmbackhaul.topology import (
    ConvergenceError,
    MeshTopology,
    SurveySpec,
    build_topology,
    expected_relays,
    min_relays,
    relay_distribution,
    total_geophones,
    with_relays,
)

from oracles import relay_count_mc

D = np.linspace(10, 3000, 300)


def stats_from(plos):
    return ChannelStats(D, np.full_like(D, 100.0), np.full_like(D, 2.0), plos)


ALWAYS = stats_from(np.ones_like(D))


def test_relay_trivial_cases():
    assert min_relays(ALWAYS, 600.0) == 0
    st = stats_from(np.where(D <= 300, 1.0, 0.0))  # q0 = 0, q1 = 1 at d = 600
    assert expected_relays(st, 600.0) == 1.0
    assert relay_distribution([0.0, 1.0]).tolist() == [0.0, 1.0]


def test_relay_distribution_normalised():
    q = [0.3, 0.6, 0.8, 0.95, 1.0]
    assert relay_distribution(q).sum() == pytest.approx(1.0, abs=1e-15)


def test_relay_convergence_error():
    with pytest.raises(ConvergenceError):
        min_relays(stats_from(np.full_like(D, 0.01)), 2000.0, r_cap=5)


def test_relays_match_monte_carlo():
    rng = np.random.default_rng(11)
    plos = np.where(D <= 120, 1.0, np.exp(-np.clip((D - 120) / 400, 0, None) ** 1.5))
    st = stats_from(plos)
    L = math.sqrt(3) * 400
    mc = relay_count_mc(lambda x: float(st.plos(x)), L, 100_000, rng)
    assert expected_relays(st, L) == pytest.approx(mc.mean(), abs=5 * mc.std() / math.sqrt(mc.size))
    assert min_relays(st, L) == math.ceil(mc.mean())


def test_desk_layout_and_flow():
    spec = SurveySpec(2400, 2400, 400)
    topo = build_topology(spec, ALWAYS)
    assert len(topo.wgns) == 12
    dcc_links = [l for l in topo.links if l.dst == topo.dcc]
    assert len(dcc_links) == 1
    assert dcc_links[0].lam == pytest.approx(spec.wgn_packet_rate * 12)
    bits = spec.geophone_rate * total_geophones(topo)
    assert dcc_links[0].lam == pytest.approx(bits / (8 * spec.packet_bytes))
    for l in topo.links:
        assert l.length == pytest.approx(math.sqrt(3) * 400)
    # one path per WGN, each ending at the DCC
    assert len(topo.paths) == 12
    for p in topo.paths:
        assert topo.links[p[-1]].dst == topo.dcc


def test_single_column_rate():
    spec = SurveySpec(700, 2200, 400)  # 1 column x 3 rows
    topo = build_topology(spec, ALWAYS)
    assert len(topo.wgns) == 3
    last = [l for l in topo.links if l.dst == topo.dcc][0]
    assert last.lam == pytest.approx(3 * spec.wgn_packet_rate)


def test_too_small_survey():
    with pytest.raises(ValueError):
        build_topology(SurveySpec(100, 100, 400), ALWAYS)


def test_obstruction_adds_relay():
    spec = SurveySpec(2400, 2400, 400, p_obs=0.5)
    topo = build_topology(spec, ALWAYS, seed=3)
    assert any(l.obstructed for l in topo.links)
    for l in topo.links:
        assert l.relays >= (1 if l.obstructed else 0)


def test_wgn_count_non_increasing_in_radius():
    counts = [len(build_topology(SurveySpec(6000, 6000, r), ALWAYS).wgns) for r in range(300, 1000, 50)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_cochannel_separation():
    topo = with_relays(build_topology(SurveySpec(2400, 2400, 400), ALWAYS), {i: 3 for i in range(12)})
    sub_len = math.sqrt(3) * 400 / 4
    for s in topo.sublinks:
        for j, sep in s.cochannel:
            assert topo.sublinks[j].channel == s.channel
            # columns are straight, so reuse 4 puts co-channel midpoints 4 sub-links apart
            if topo.sublinks[j].chain == s.chain and s.chain.startswith("col"):
                assert sep >= 4 * sub_len - 1e-6


def test_short_chain_no_reuse():
    topo = build_topology(SurveySpec(700, 1500, 400), ALWAYS)  # 2 sub-links total
    topo = with_relays(topo, {l.id: 0 for l in topo.links})
    assert all(not s.cochannel for s in topo.sublinks)


def test_json_roundtrip(tmp_path):
    topo = build_topology(SurveySpec(2400, 2400, 400), ALWAYS)
    path = tmp_path / "t.json"
    topo.to_json(path)
    assert MeshTopology.from_json(path) == topo
