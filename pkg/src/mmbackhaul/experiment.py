"""Scenario configs, sweep execution, result tables and plot-ready data."""
from __future__ import annotations

import csv
import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import yaml
from scipy import stats as sps

from . import dessim
from .channel import ChannelStats, RayTraceConfig, TerrainGrid, fit_channel_stats, generate_terrain
from .optimizer import InfeasibleError, LinkModel, SolveConfig, fit_phi, phi_samples, solve_network
from .profiles import PROFILE_VERSION, SystemProfile, get_profile
from .topology import SurveySpec

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TerrainSpec:
    name: str
    roughness: float | None = None
    import_path: str | None = None
    extent_m: float = 6000.0
    cell_size_m: float = 10.0
    seed: int = 0

    def load(self) -> TerrainGrid:
        if self.import_path:
            return TerrainGrid.load(self.import_path)
        return generate_terrain(self.roughness, self.extent_m, self.cell_size_m, self.seed)


@dataclass(frozen=True)
class ScenarioConfig:
    terrains: tuple[TerrainSpec, ...] = (TerrainSpec("default", roughness=0.2),)
    width_m: float = 2400.0
    height_m: float = 2400.0
    cell_radius_m: tuple[float, ...] = (400.0,)
    geophone_rate_bps: tuple[float, ...] = (144e3,)
    p_obs: tuple[float, ...] = (0.0,)
    reuse_factor: int = 4
    radio_profiles: tuple[str, ...] = ("80211ad",)
    t_sl_min_s: float = 250e-6
    delta_s: float | None = None  # None: one slot time of the profile
    latency_max_s: tuple[float, ...] = (8.0,)
    p_th_out: float = 1e-6
    k_max: int | None = None  # None: largest K that fits the A-MPDU cap
    interferer_offset_db: float | None = None
    channel_trials: int = 500
    channel_distances: int = 30
    channel_max_distance_m: float = 2000.0
    trials: int = 50
    master_seed: int = 0
    des: bool = False
    des_duration_s: float = 5.0
    allocation: str = "milp"
    r_span: int = 3
    workers: int = 1

    def __post_init__(self):
        for name in ("terrains", "cell_radius_m", "geophone_rate_bps", "p_obs", "radio_profiles", "latency_max_s"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"sweep '{name}' must not be empty")
        for t in self.terrains:
            if t.import_path is None and t.roughness is None:
                raise ConfigError(f"terrain {t.name!r} needs roughness or import_path")
            if t.import_path is not None and not os.path.exists(t.import_path):
                raise ConfigError(f"terrain file {t.import_path!r} does not exist")
        if len({t.name for t in self.terrains}) != len(self.terrains):
            raise ConfigError("terrain names must be unique")
        for p in self.radio_profiles:
            try:
                get_profile(p)
            except ValueError as e:
                raise ConfigError(str(e)) from None
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.allocation not in ("milp", "greedy", "brute"):
            raise ConfigError("allocation must be milp, greedy or brute")
        if self.channel_trials < 100:
            raise ConfigError("channel_trials must be >= 100")
        if self.width_m <= 0 or self.height_m <= 0:
            raise ConfigError("survey dimensions must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "terrains" in kw:
            try:
                kw["terrains"] = tuple(TerrainSpec(**t) for t in kw["terrains"])
            except TypeError as e:
                raise ConfigError(f"bad terrain entry: {e}") from None
        for name in ("cell_radius_m", "geophone_rate_bps", "p_obs", "radio_profiles", "latency_max_s"):
            if name in kw:
                v = kw[name]
                kw[name] = tuple(v) if isinstance(v, (list, tuple)) else (v,)
        try:
            return cls(**kw)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file {path!r} does not exist")
        with open(path) as fh:
            try:
                data = yaml.safe_load(fh) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["terrains"] = [asdict(t) for t in self.terrains]
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def profile(self, name: str, latency_max: float) -> SystemProfile:
        prof = get_profile(name)
        kw = {"t_sl_min": self.t_sl_min_s, "latency_max": latency_max}
        if self.delta_s is not None:
            kw["delta"] = self.delta_s
        if self.k_max is not None:
            kw["k_max"] = self.k_max
        prof = replace(prof.with_constants(**kw), p_th_out=self.p_th_out)
        if self.interferer_offset_db is not None:
            prof = replace(prof, budget=replace(prof.budget, interferer_offset_db=self.interferer_offset_db))
        return prof


# ---------------------------------------------------------------- results

ROW_FIELDS = (
    ("terrain", str),
    ("profile", str),
    ("cell_radius_m", float),
    ("geophone_rate_bps", float),
    ("p_obs", float),
    ("latency_max_s", float),
    ("trial", int),
    ("latency_s", float),
    ("power_w", float),
    ("power_no_cci_w", float),
    ("baseline_power_w", float),
    ("des_latency_p99_s", float),
    ("des_power_w", float),
    ("feasible", int),
    ("scenario", int),
    ("n_wgn", int),
    ("n_relays", int),
    ("error", str),
)
SWEEP_KEYS = ("terrain", "profile", "cell_radius_m", "geophone_rate_bps", "p_obs", "latency_max_s")
METRICS = ("latency_s", "power_w", "power_no_cci_w", "baseline_power_w", "des_latency_p99_s", "des_power_w")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f for f, _ in ROW_FIELDS])
        for r in rows:
            w.writerow([_fmt(r[f]) for f, _ in ROW_FIELDS])


def load_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [{f: t(r[f]) for f, t in ROW_FIELDS} for r in rd]


def _ci95(x: np.ndarray) -> float:
    if x.size < 2:
        return 0.0
    return float(sps.t.ppf(0.975, x.size - 1) * x.std(ddof=1) / math.sqrt(x.size))


def summarize(rows) -> list[dict]:
    """Mean and 95% CI of every metric per sweep point (finite values only)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in SWEEP_KEYS), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(v) if isinstance(v, str) else v for v in k)):
        g = groups[key]
        s = dict(zip(SWEEP_KEYS, key))
        s["n"] = len(g)
        s["feasible_fraction"] = sum(r["feasible"] for r in g) / len(g)
        for m in METRICS:
            x = np.array([r[m] for r in g], dtype=float)
            x = x[np.isfinite(x)]
            s[f"{m}_mean"] = float(x.mean()) if x.size else math.nan
            s[f"{m}_ci95"] = _ci95(x) if x.size else math.nan
        out.append(s)
    return out


def write_summary(summary, path) -> None:
    if not summary:
        return
    keys = list(summary[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for s in summary:
            w.writerow([_fmt(s[k]) for k in keys])


# ---------------------------------------------------------------- running


def _trial_seed(master: int, *idx: int) -> int:
    return int(np.random.SeedSequence([master, *idx]).generate_state(1)[0])


def _trial_stats(grid: TerrainGrid, cfg: ScenarioConfig, prof: SystemProfile, seed: int) -> ChannelStats:
    rng = np.random.default_rng(seed)
    w = min(cfg.width_m, grid.width)
    h = min(cfg.height_m, grid.height)
    x = grid.origin[0] + rng.uniform(0, grid.width - w)
    y = grid.origin[1] + rng.uniform(0, grid.height - h)
    window = grid.crop(x, y, w, h)
    d_max = min(cfg.channel_max_distance_m, 0.9 * min(window.width, window.height))
    rt = RayTraceConfig(
        carrier_freq=prof.carrier_hz,
        atmos_absorption=prof.atmos_db_per_km,
        n_trials=cfg.channel_trials,
        rng_seed=seed,
    )
    grid_d = np.linspace(d_max / cfg.channel_distances, d_max, cfg.channel_distances)
    return fit_channel_stats(window, rt, grid_d)


def _run_job(cfg: ScenarioConfig, ti: int, pi: int, trial: int) -> list[dict]:
    terrain = cfg.terrains[ti]
    grid = terrain.load()
    pname = cfg.radio_profiles[pi]
    base_prof = cfg.profile(pname, cfg.latency_max_s[0])
    stats = _trial_stats(grid, cfg, base_prof, _trial_seed(cfg.master_seed, ti, pi, trial, 0))
    topo_seed = _trial_seed(cfg.master_seed, ti, trial, 1)
    rows = []
    for radius, rate, p_obs, l_max in itertools.product(cfg.cell_radius_m, cfg.geophone_rate_bps, cfg.p_obs, cfg.latency_max_s):
        prof = cfg.profile(pname, l_max)
        row = {
            "terrain": terrain.name,
            "profile": pname,
            "cell_radius_m": float(radius),
            "geophone_rate_bps": float(rate),
            "p_obs": float(p_obs),
            "latency_max_s": float(l_max),
            "trial": trial,
            "latency_s": math.nan,
            "power_w": math.nan,
            "power_no_cci_w": math.nan,
            "baseline_power_w": math.nan,
            "des_latency_p99_s": math.nan,
            "des_power_w": math.nan,
            "feasible": 0,
            "scenario": 0,
            "n_wgn": 0,
            "n_relays": 0,
            "error": "",
        }
        try:
            spec = SurveySpec(cfg.width_m, cfg.height_m, radius, geophone_rate=rate, reuse_factor=cfg.reuse_factor, p_obs=p_obs)
            plan = solve_network(
                spec, stats, prof, SolveConfig(seed=topo_seed, r_span=cfg.r_span, allocation=cfg.allocation, strict=False)
            )
            row.update(
                latency_s=float(plan.max_latency),
                power_w=float(plan.objective),
                power_no_cci_w=float(plan.objective_no_cci),
                baseline_power_w=float(plan.baseline_power) if plan.baseline_power is not None else math.nan,
                feasible=int(plan.feasible),
                scenario=plan.scenario,
                n_wgn=len(plan.topo.wgns),
                n_relays=sum(l.relays for l in plan.topo.links),
            )
            if not plan.feasible:
                row["error"] = ";".join(k for k, v in plan.feasibility.items() if not v)
            if cfg.des:
                rep = dessim.run(plan, prof, cfg.des_duration_s, seed=_trial_seed(cfg.master_seed, ti, pi, trial, 2), stats=stats)
                row["des_latency_p99_s"] = rep.latency_percentile(99)
                row["des_power_w"] = rep.total_power
        except (InfeasibleError, ValueError, RuntimeError) as e:
            row["error"] = f"{type(e).__name__}: {e}".replace("\n", " ")
        rows.append(row)
    return rows


def _job_star(args):
    return _run_job(*args)


def run_experiment(cfg: ScenarioConfig, out_dir: str) -> dict:
    """Run every (terrain, profile, trial) job and write results and summary CSVs."""
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(cfg, ti, pi, t) for ti in range(len(cfg.terrains)) for pi in range(len(cfg.radio_profiles)) for t in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            parts = list(ex.map(_job_star, jobs))
    else:
        parts = [_job_star(j) for j in jobs]
    rows = [r for p in parts for r in p]
    rows.sort(key=lambda r: (r["terrain"], r["profile"], r["cell_radius_m"], r["geophone_rate_bps"], r["p_obs"], r["latency_max_s"], r["trial"]))
    paths = {"results": os.path.join(out_dir, "results.csv"), "summary": os.path.join(out_dir, "summary.csv"), "config": os.path.join(out_dir, "config.yaml")}
    write_rows(rows, paths["results"])
    write_summary(summarize(rows), paths["summary"])
    with open(paths["config"], "w") as fh:
        yaml.safe_dump({"profile_version": PROFILE_VERSION, **cfg.to_dict()}, fh, sort_keys=True)
    return {"rows": rows, "paths": paths, "any_feasible": any(r["feasible"] for r in rows)}


# ---------------------------------------------------------------- plot data

FIGURES = ("fig6", "fig8", "fig9", "fig10")


def _write_dat(path, header: str, cols: list[list[float]]) -> str:
    with open(path, "w") as fh:
        fh.write("# " + header + "\n")
        for row in zip(*cols):
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    return path


def _curve(summary, x_key, y_key, **match):
    pts = [s for s in summary if all(s[k] == v for k, v in match.items())]
    pts.sort(key=lambda s: s[x_key])
    return [s[x_key] for s in pts], [s[f"{y_key}_mean"] for s in pts], [s[f"{y_key}_ci95"] for s in pts]


def emit_plot_data(rows, figure_id: str, out_dir: str, *, profile_names=("80211ad", "80211ac"), lam: float | None = None) -> list[str]:
    """Write x / y / CI columns for one figure; returns the file paths."""
    if figure_id not in FIGURES:
        raise ConfigError(f"unknown figure id {figure_id!r}; choose from {', '.join(FIGURES)}")
    os.makedirs(out_dir, exist_ok=True)
    out = []
    if figure_id == "fig8":
        for letter, name in zip("ab", profile_names):
            prof = get_profile(name)
            model = LinkModel(prof, None)
            lam_w = lam if lam is not None else SurveySpec(1, 1, 400).wgn_packet_rate
            ks = np.arange(1, prof.constants.k_max + 1)
            cols, names, rmse = [ks.astype(float)], ["K"], []
            for eta in range(prof.mcs_range[0], prof.mcs_range[1] + 1):
                y = phi_samples(model, 5.0, eta, lam_w, 1.0, ks, ber=0.0)
                fit = fit_phi(ks, y, psi=(5.0, eta))
                cols += [y, fit(ks)]
                names += [f"phi_mcs{eta}", f"fit_mcs{eta}"]
                rmse.append(f"{eta}:{fit.rel_rmse:.4f}")
            out.append(_write_dat(os.path.join(out_dir, f"fig8{letter}.dat"), f"{name} tx=5dBm lambda={lam_w:.2f}/s rel_rmse " + " ".join(rmse) + " | " + " ".join(names), cols))
        return out

    summary = summarize(rows)
    if not summary:
        raise ConfigError("no results to plot")
    terrains = sorted({s["terrain"] for s in summary})
    if figure_id == "fig6":
        letter = iter("abcdefghijklmnop")
        for metric in ("latency_s", "power_w"):
            for t in terrains:
                match = {"terrain": t, "profile": summary[0]["profile"]}
                x, y, ci = _curve(summary, "cell_radius_m", metric, **match)
                cols = [x, y, ci]
                head = f"{t} {metric} vs cell_radius_m: x y ci95"
                if metric == "power_w":
                    _, b, bci = _curve(summary, "cell_radius_m", "baseline_power_w", **match)
                    cols += [b, bci]
                    head += " baseline baseline_ci95"
                out.append(_write_dat(os.path.join(out_dir, f"fig6{next(letter)}.dat"), head, cols))
    elif figure_id == "fig9":
        letter = iter("abcdefghijklmnop")
        for metric in ("latency_s", "power_w"):
            for t in terrains:
                for p_obs in sorted({s["p_obs"] for s in summary}):
                    x, y, ci = _curve(summary, "geophone_rate_bps", metric, terrain=t, p_obs=p_obs)
                    feas = [s["feasible_fraction"] for s in sorted((s for s in summary if s["terrain"] == t and s["p_obs"] == p_obs), key=lambda s: s["geophone_rate_bps"])]
                    out.append(_write_dat(os.path.join(out_dir, f"fig9{next(letter)}.dat"), f"{t} p_obs={p_obs} {metric} vs geophone_rate_bps: x y ci95 feasible_fraction", [x, y, ci, feas]))
    elif figure_id == "fig10":
        letter = iter("abcdefghijklmnop")
        for prof in sorted({s["profile"] for s in summary}):
            pts = sorted((s for s in summary if s["profile"] == prof), key=lambda s: s["latency_max_s"])
            cols = [[s["latency_max_s"] for s in pts], [s["latency_s_mean"] for s in pts], [s["power_w_mean"] for s in pts], [s["power_w_ci95"] for s in pts]]
            out.append(_write_dat(os.path.join(out_dir, f"fig10{next(letter)}.dat"), f"{prof}: latency_max_s latency_s power_w power_ci95", cols))
    return out
