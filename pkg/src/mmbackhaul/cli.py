"""Command-line entry point: ``mmbackhaul <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 nothing feasible.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import dessim
from .channel import ChannelStats, RayTraceConfig, TerrainGrid, fit_channel_stats, generate_terrain
from .experiment import FIGURES, ConfigError, ScenarioConfig, emit_plot_data, load_results, run_experiment
from .optimizer import InfeasibleError, NetworkPlan, SolveConfig, solve_network
from .profiles import get_profile
from .topology import SurveySpec, build_topology

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 2, 3


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"{what} {path!r} does not exist")
    return path


def _terrain(args) -> TerrainGrid:
    if args.terrain:
        return TerrainGrid.load(_require(args.terrain, "terrain file"))
    return generate_terrain(args.roughness, args.extent_m, args.cell_size_m, args.terrain_seed)


def _profile(args):
    prof = get_profile(args.profile)
    if args.interferer_offset_db is not None:
        prof = replace(prof, budget=replace(prof.budget, interferer_offset_db=args.interferer_offset_db))
    kw = {}
    for flag, key in (("t_sl_min_s", "t_sl_min"), ("delta_s", "delta"), ("latency_max_s", "latency_max"), ("k_max", "k_max")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[key] = v
    if kw:
        prof = prof.with_constants(**kw)
    if args.p_th_out is not None:
        prof = replace(prof, p_th_out=args.p_th_out)
    return prof


def _survey(args) -> SurveySpec:
    return SurveySpec(args.width_m, args.height_m, args.cell_radius_m, geophone_rate=args.geophone_rate_bps, p_obs=args.p_obs, reuse_factor=args.reuse_factor)


def cmd_fit_channel(args) -> int:
    grid = _terrain(args)
    if args.save_terrain:
        grid.save(args.save_terrain)
    prof = get_profile(args.profile)
    cfg = RayTraceConfig(carrier_freq=prof.carrier_hz, atmos_absorption=prof.atmos_db_per_km, n_trials=args.n_trials, rng_seed=args.seed)
    d_max = args.max_distance_m or 0.9 * min(grid.width, grid.height)
    stats = fit_channel_stats(grid, cfg, np.linspace(d_max / args.n_distances, d_max, args.n_distances))
    stats.to_csv(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_build_topo(args) -> int:
    stats = ChannelStats.from_csv(_require(args.stats, "channel stats"))
    topo = build_topology(_survey(args), stats, seed=args.seed)
    topo.to_json(args.out)
    print(f"wrote {args.out}: {len(topo.wgns)} WGNs, {len(topo.links)} links, {len(topo.sublinks)} sub-links")
    return EXIT_OK


def cmd_optimize(args) -> int:
    stats = ChannelStats.from_csv(_require(args.stats, "channel stats"))
    prof = _profile(args)
    try:
        plan = solve_network(_survey(args), stats, prof, SolveConfig(seed=args.seed, allocation=args.allocation, strict=not args.allow_overload))
    except InfeasibleError as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    plan.to_json(args.out)
    print(json.dumps({"objective_w": plan.objective, "baseline_w": plan.baseline_power, "max_latency_s": plan.max_latency, "feasible": plan.feasible}))
    return EXIT_OK if plan.feasible or args.allow_overload else EXIT_INFEASIBLE


def cmd_simulate(args) -> int:
    plan = NetworkPlan.from_json(_require(args.plan, "plan file"))
    prof = _profile(args)
    stats = ChannelStats.from_csv(_require(args.stats, "channel stats")) if args.stats else None
    rep = dessim.run(plan, prof, args.duration_s, seed=args.seed, stats=stats, cci=not args.no_cci, backoff=args.backoff, phase=args.phase, warmup=args.warmup_s)
    rep.write_csv(args.out)
    print(json.dumps(rep.summary()))
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = ScenarioConfig.load(args.config)
    if args.trials is not None or args.seed is not None:
        cfg = replace(cfg, **{k: v for k, v in (("trials", args.trials), ("master_seed", args.seed)) if v is not None})
    res = run_experiment(cfg, args.out)
    print(f"wrote {res['paths']['results']} ({len(res['rows'])} rows)")
    return EXIT_OK if res["any_feasible"] else EXIT_INFEASIBLE


def cmd_plot_data(args) -> int:
    rows = load_results(_require(args.results, "results file")) if args.results else []
    for f in emit_plot_data(rows, args.figure, args.out):
        print(f)
    return EXIT_OK


def _add_survey(p):
    p.add_argument("--width-m", type=float, default=2400.0)
    p.add_argument("--height-m", type=float, default=2400.0)
    p.add_argument("--cell-radius-m", type=float, default=400.0)
    p.add_argument("--geophone-rate-bps", type=float, default=144e3)
    p.add_argument("--p-obs", type=float, default=0.0)
    p.add_argument("--reuse-factor", type=int, default=4)


def _add_constants(p):
    p.add_argument("--profile", default="80211ad", choices=["80211ad", "80211ac"])
    p.add_argument("--t-sl-min-s", type=float)
    p.add_argument("--delta-s", type=float)
    p.add_argument("--latency-max-s", type=float)
    p.add_argument("--k-max", type=int)
    p.add_argument("--p-th-out", type=float)
    p.add_argument("--interferer-offset-db", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmbackhaul", description="Duty-cycled mm-wave backhaul planning and simulation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("fit-channel", help="Monte-Carlo path-loss / LoS statistics over a terrain")
    p.add_argument("--terrain", help="elevation grid file (otherwise synthetic)")
    p.add_argument("--roughness", type=float, default=0.2)
    p.add_argument("--extent-m", type=float, default=6000.0)
    p.add_argument("--cell-size-m", type=float, default=10.0)
    p.add_argument("--terrain-seed", type=int, default=0)
    p.add_argument("--profile", default="80211ad", choices=["80211ad", "80211ac"])
    p.add_argument("--n-trials", type=int, default=2000)
    p.add_argument("--n-distances", type=int, default=40)
    p.add_argument("--max-distance-m", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-terrain", help="also write the elevation grid used")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_channel)

    p = sub.add_parser("build-topo", help="hexagonal WGN layout with relays and channels")
    p.add_argument("--stats", required=True)
    _add_survey(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_topo)

    p = sub.add_parser("optimize", help="minimise network power for one survey")
    p.add_argument("--stats", required=True)
    _add_survey(p)
    _add_constants(p)
    p.add_argument("--allocation", default="milp", choices=["milp", "greedy", "brute"])
    p.add_argument("--allow-overload", action="store_true", help="keep links that cannot sleep instead of failing")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("simulate", help="run the discrete-event simulator on a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--stats", help="channel stats for co-channel LoS draws")
    _add_constants(p)
    p.add_argument("--duration-s", type=float, default=10.0)
    p.add_argument("--warmup-s", type=float, default=0.0)
    p.add_argument("--backoff", default="uniform", choices=["uniform", "mean"])
    p.add_argument("--phase", default="aligned", choices=["aligned", "random"])
    p.add_argument("--no-cci", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="run a YAML scenario sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plot-data", help="write plot-ready .dat files")
    p.add_argument("--results", help="results.csv from 'experiment' (not needed for fig8)")
    p.add_argument("--figure", required=True, help=", ".join(FIGURES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_data)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
