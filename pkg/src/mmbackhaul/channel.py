"""Terrain, ray tracing and the log-normal statistical channel."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .framing import McsTable

C_LIGHT = 299_792_458.0
_DB_TO_NP = math.log(10.0) / 10.0


class BoundsError(ValueError):
    pass


@dataclass(frozen=True)
class TerrainGrid:
    cell_size: float
    elevations: np.ndarray = field(repr=False)  # [iy, ix]
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        z = np.asarray(self.elevations, dtype=float)
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if z.ndim != 2 or z.shape[0] < 2 or z.shape[1] < 2:
            raise ValueError("elevations must be a 2-D grid of at least 2x2")
        if not np.all(np.isfinite(z)):
            raise ValueError("elevations must be finite")
        z.setflags(write=False)
        object.__setattr__(self, "elevations", z)

    @property
    def width(self) -> float:
        return (self.elevations.shape[1] - 1) * self.cell_size

    @property
    def height(self) -> float:
        return (self.elevations.shape[0] - 1) * self.cell_size

    def contains(self, x, y) -> np.ndarray:
        x0, y0 = self.origin
        eps = 1e-9 * self.cell_size
        return (x >= x0 - eps) & (x <= x0 + self.width + eps) & (y >= y0 - eps) & (y <= y0 + self.height + eps)

    def elevation_at(self, x, y):
        """Bilinear interpolation; arrays broadcast."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if not np.all(self.contains(x, y)):
            raise BoundsError("point outside terrain grid")
        ny, nx = self.elevations.shape
        fx = np.clip((x - self.origin[0]) / self.cell_size, 0, nx - 1)
        fy = np.clip((y - self.origin[1]) / self.cell_size, 0, ny - 1)
        ix = np.minimum(fx.astype(int), nx - 2)
        iy = np.minimum(fy.astype(int), ny - 2)
        tx = fx - ix
        ty = fy - iy
        z = self.elevations
        return (
            z[iy, ix] * (1 - tx) * (1 - ty)
            + z[iy, ix + 1] * tx * (1 - ty)
            + z[iy + 1, ix] * (1 - tx) * ty
            + z[iy + 1, ix + 1] * tx * ty
        )

    def crop(self, x: float, y: float, width: float, height: float) -> "TerrainGrid":
        """Sub-grid covering [x, x+width] x [y, y+height], snapped outward to cells."""
        x0, y0 = self.origin
        ny, nx = self.elevations.shape
        i0 = max(0, int(math.floor((x - x0) / self.cell_size + 1e-9)))
        j0 = max(0, int(math.floor((y - y0) / self.cell_size + 1e-9)))
        i1 = min(nx - 1, int(math.ceil((x + width - x0) / self.cell_size - 1e-9)))
        j1 = min(ny - 1, int(math.ceil((y + height - y0) / self.cell_size - 1e-9)))
        if i1 - i0 < 1 or j1 - j0 < 1:
            raise BoundsError("crop window does not overlap the grid")
        z = self.elevations[j0 : j1 + 1, i0 : i1 + 1]
        return TerrainGrid(self.cell_size, z.copy(), (x0 + i0 * self.cell_size, y0 + j0 * self.cell_size))

    def save(self, path) -> None:
        ny, nx = self.elevations.shape
        with open(path, "w") as fh:
            fh.write(f"ncols {nx}\nnrows {ny}\ncellsize {self.cell_size!r}\n")
            fh.write(f"xorigin {self.origin[0]!r}\nyorigin {self.origin[1]!r}\n")
            for row in self.elevations:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path) -> "TerrainGrid":
        header = {}
        with open(path) as fh:
            lines = fh.read().split("\n")
        i = 0
        while i < len(lines):
            parts = lines[i].split()
            if len(parts) == 2 and parts[0].isalpha():
                header[parts[0].lower()] = float(parts[1])
                i += 1
            else:
                break
        for key in ("ncols", "nrows", "cellsize"):
            if key not in header:
                raise ValueError(f"elevation grid header lacks {key}")
        x0 = header.get("xorigin", header.get("xllcorner", 0.0))
        y0 = header.get("yorigin", header.get("yllcorner", 0.0))
        vals = np.array(" ".join(lines[i:]).split(), dtype=float)
        nx, ny = int(header["ncols"]), int(header["nrows"])
        if vals.size != nx * ny:
            raise ValueError(f"expected {nx * ny} elevations, found {vals.size}")
        return cls(header["cellsize"], vals.reshape(ny, nx), (x0, y0))


ROUGHNESS_SCALE_M = 25.0  # elevation std at roughness 1
HURST = 0.8


def _diamond_square(n_pow: int, rng: np.random.Generator, hurst: float) -> np.ndarray:
    n = 2**n_pow + 1
    z = np.zeros((n, n))
    z[0, 0], z[0, -1], z[-1, 0], z[-1, -1] = rng.standard_normal(4)
    step = n - 1
    scale = 1.0
    while step > 1:
        half = step // 2
        # diamond: centres of squares
        c = z[0:-1:step, 0:-1:step] + z[0:-1:step, step::step] + z[step::step, 0:-1:step] + z[step::step, step::step]
        z[half::step, half::step] = c / 4 + scale * rng.standard_normal(c.shape)
        # square: edge midpoints, averaging the available neighbours
        for off in (0, half):
            rows = np.arange(off, n, half * 2 if off == 0 else step)
            cols = np.arange(half if off == 0 else 0, n, step)
            rr, cc = np.meshgrid(rows, cols, indexing="ij")
            acc = np.zeros(rr.shape)
            cnt = np.zeros(rr.shape)
            for dr, dc in ((-half, 0), (half, 0), (0, -half), (0, half)):
                r2, c2 = rr + dr, cc + dc
                ok = (r2 >= 0) & (r2 < n) & (c2 >= 0) & (c2 < n)
                acc[ok] += z[r2[ok], c2[ok]]
                cnt[ok] += 1
            z[rr, cc] = acc / cnt + scale * rng.standard_normal(rr.shape)
        step = half
        scale *= 0.5**hurst
    return z


def generate_terrain(roughness: float, extent: float, cell_size: float, seed: int) -> TerrainGrid:
    """Square fractal terrain; elevation std is ``roughness * 25 m``."""
    if cell_size <= 0 or extent < 2 * cell_size:
        raise ValueError("need cell_size > 0 and extent >= 2 * cell_size")
    if not 0.0 <= roughness <= 1.0:
        raise ValueError("roughness must lie in [0, 1]")
    n = int(math.ceil(extent / cell_size)) + 1
    if roughness == 0.0:
        return TerrainGrid(cell_size, np.zeros((n, n)))
    n_pow = max(1, int(math.ceil(math.log2(n - 1))))
    z = _diamond_square(n_pow, np.random.default_rng(seed), HURST)[:n, :n]
    z = z - z.mean()
    z = z / z.std()
    return TerrainGrid(cell_size, roughness * ROUGHNESS_SCALE_M * z)


@dataclass(frozen=True)
class RayTraceConfig:
    antenna_height: float = 1.0
    atmos_absorption: float = 17.0  # dB/km
    carrier_freq: float = 60.48e9
    ground_permittivity: float = 15.0
    n_trials: int = 10_000
    rng_seed: int = 0

    def __post_init__(self):
        if self.antenna_height <= 0:
            raise ValueError("antenna_height must be positive")
        if self.atmos_absorption < 0:
            raise ValueError("atmos_absorption must be non-negative")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if self.carrier_freq <= 0 or self.ground_permittivity <= 1:
            raise ValueError("invalid carrier frequency or permittivity")


def two_ray_loss_db(d: np.ndarray, h1: np.ndarray, h2: np.ndarray, cfg: RayTraceConfig, sigma_h=0.0) -> np.ndarray:
    """Two-ray loss (dB) over a reflecting plane, plus atmospheric absorption.

    ``d`` is the distance along the plane and ``h1``, ``h2`` are antenna
    heights above it.  Non-positive heights drop the reflected ray.
    """
    d, h1, h2, sigma_h = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (d, h1, h2, sigma_h)))
    k = 2 * math.pi * cfg.carrier_freq / C_LIGHT
    r1 = np.hypot(d, h1 - h2)
    r2 = np.hypot(d, h1 + h2)
    fspl = 20 * np.log10(2 * k * r1)  # 20 log10(4 pi r / lambda)
    sin_psi = (h1 + h2) / r2
    cos2 = 1 - sin_psi**2
    root = np.sqrt(cfg.ground_permittivity - cos2)
    gamma = (sin_psi - root) / (sin_psi + root)
    rho = np.exp(-2 * (k * sigma_h * sin_psi) ** 2)
    refl = (h1 > 0) & (h2 > 0)
    field_ = 1 + np.where(refl, rho * gamma * (r1 / r2), 0.0) * np.exp(-1j * k * (r2 - r1))
    return fspl - 20 * np.log10(np.abs(field_)) + cfg.atmos_absorption * r1 / 1000.0


def _trace_batch(grid: TerrainGrid, cfg: RayTraceConfig, a: np.ndarray, b: np.ndarray):
    """Trace many equal-length paths at once; a, b are (n, 2)."""
    d = float(np.hypot(*(b[0] - a[0])))
    n_s = max(3, int(math.ceil(d / grid.cell_size)) + 1)
    u = np.linspace(0.0, 1.0, n_s)
    px = a[:, :1] + (b[:, :1] - a[:, :1]) * u
    py = a[:, 1:] + (b[:, 1:] - a[:, 1:]) * u
    prof = grid.elevation_at(px, py)
    za = prof[:, 0] + cfg.antenna_height
    zb = prof[:, -1] + cfg.antenna_height
    ray = za[:, None] + (zb - za)[:, None] * u
    los = ~np.any(prof[:, 1:-1] >= ray[:, 1:-1], axis=1)

    # least-squares reflecting plane along the profile
    s = u * d
    s_c = s - s.mean()
    slope = (prof - prof.mean(axis=1, keepdims=True)) @ s_c / (s_c @ s_c)
    icpt = prof.mean(axis=1) - slope * s.mean()
    resid = prof - (icpt[:, None] + slope[:, None] * s)
    sigma_h = resid.std(axis=1)
    cos_t = 1 / np.sqrt(1 + slope**2)
    h1 = (za - icpt) * cos_t
    h2 = (zb - icpt - slope * d) * cos_t
    # tip-to-tip distance is preserved by the rotation into the plane frame
    r1 = np.hypot(d, zb - za)
    dd = np.sqrt(np.maximum(r1**2 - (h1 - h2) ** 2, 0.0))
    loss = two_ray_loss_db(dd, h1, h2, cfg, sigma_h)
    return loss, los


def trace_path_loss(grid: TerrainGrid, cfg: RayTraceConfig, a, b) -> tuple[float, bool]:
    a = np.asarray(a, dtype=float).reshape(1, 2)
    b = np.asarray(b, dtype=float).reshape(1, 2)
    if np.allclose(a, b):
        raise ValueError("end points coincide")
    if not (grid.contains(*a[0]) and grid.contains(*b[0])):
        raise BoundsError("end point outside terrain grid")
    loss, los = _trace_batch(grid, cfg, a, b)
    return float(loss[0]), bool(los[0])


@dataclass(frozen=True)
class ChannelStats:
    """Per-distance LoS-conditioned loss statistics; NaN marks 'no LoS sample'."""

    distances: np.ndarray
    mu_db: np.ndarray
    sigma_db: np.ndarray
    p_los: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(v, dtype=float) for v in (self.distances, self.mu_db, self.sigma_db, self.p_los)]
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 1 or arrs[0].size == 0:
            raise ValueError("channel statistics must be equal-length 1-D lists")
        d, mu, sg, pl = arrs
        if np.any(np.diff(d) <= 0):
            raise ValueError("distances must be strictly increasing")
        if np.any(sg[~np.isnan(sg)] < 0):
            raise ValueError("sigma_db must be non-negative")
        if np.any((pl < 0) | (pl > 1)):
            raise ValueError("p_los must lie in [0, 1]")
        if np.any(np.isnan(mu) != np.isnan(sg)):
            raise ValueError("mu_db and sigma_db must be unavailable together")
        for name, a in zip(("distances", "mu_db", "sigma_db", "p_los"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def _interp(self, d, ys):
        return np.interp(d, self.distances, ys)

    def mu(self, d):
        return self._interp(d, self.mu_db)

    def sigma(self, d):
        return self._interp(d, self.sigma_db)

    def plos(self, d):
        # LoS is certain as the distance shrinks to zero
        if self.distances[0] > 0:
            v = np.interp(d, np.r_[0.0, self.distances], np.r_[1.0, self.p_los])
        else:
            v = self._interp(d, self.p_los)
        return np.clip(v, 0.0, 1.0)

    def available(self, d) -> bool:
        return bool(np.isfinite(self.mu(d)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["d_m", "mu_db", "sigma_db", "p_los"])
            for row in zip(self.distances, self.mu_db, self.sigma_db, self.p_los):
                w.writerow(["" if math.isnan(v) else repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "ChannelStats":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no channel rows")

        def col(k):
            return [float(r[k]) if r[k] not in ("", "nan", "NaN") else math.nan for r in rows]

        return cls(np.array(col("d_m")), np.array(col("mu_db")), np.array(col("sigma_db")), np.array(col("p_los")))


def _trial_endpoints(grid: TerrainGrid, d: float, n: int, rng: np.random.Generator):
    if d >= min(grid.width, grid.height):
        raise ValueError(f"distance {d} m does not fit inside the terrain")
    x0, y0 = grid.origin
    a = np.empty((n, 2))
    b = np.empty((n, 2))
    todo = np.arange(n)
    while todo.size:
        m = todo.size
        pa = np.column_stack([x0 + rng.random(m) * grid.width, y0 + rng.random(m) * grid.height])
        phi = rng.random(m) * 2 * math.pi
        pb = pa + d * np.column_stack([np.cos(phi), np.sin(phi)])
        ok = grid.contains(pb[:, 0], pb[:, 1])
        a[todo[ok]] = pa[ok]
        b[todo[ok]] = pb[ok]
        todo = todo[~ok]
    return a, b


def fit_channel_stats(grid: TerrainGrid, cfg: RayTraceConfig, distance_grid: Sequence[float], chunk: int = 2000) -> ChannelStats:
    """Monte-Carlo mean/std of LoS path loss and LoS probability per distance."""
    if cfg.n_trials < 100:
        raise ValueError("n_trials must be >= 100 for statistical output")
    dist = np.asarray(sorted(distance_grid), dtype=float)
    if dist.size == 0 or np.any(dist <= 0):
        raise ValueError("distance grid must be nonempty and positive")
    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(dist.size)
    mu, sg, pl = [], [], []
    for d, ss in zip(dist, seeds):
        rng = np.random.default_rng(ss)
        a, b = _trial_endpoints(grid, d, cfg.n_trials, rng)
        losses, flags = [], []
        for i in range(0, cfg.n_trials, chunk):
            l_, f_ = _trace_batch(grid, cfg, a[i : i + chunk], b[i : i + chunk])
            losses.append(l_)
            flags.append(f_)
        loss = np.concatenate(losses)
        los = np.concatenate(flags)
        n_los = int(los.sum())
        pl.append(n_los / cfg.n_trials)
        if n_los == 0:
            mu.append(math.nan)
            sg.append(math.nan)
        else:
            mu.append(float(loss[los].mean()))
            sg.append(float(loss[los].std(ddof=1)) if n_los > 1 else 0.0)
    return ChannelStats(dist, np.array(mu), np.array(sg), np.array(pl))


@dataclass(frozen=True)
class InterferenceMoments:
    mu_I: float  # dBm
    sigma_I: float  # dB

    def __post_init__(self):
        if self.sigma_I < 0:
            raise ValueError("sigma_I must be non-negative")


def combine_interferers(per_interferer: Sequence[tuple[float, float]]) -> InterferenceMoments:
    """Fenton-Wilkinson moment match of a sum of log-normal powers (dB in, dB out)."""
    terms = [(float(m), float(s)) for m, s in per_interferer if math.isfinite(m)]
    if not terms:
        return InterferenceMoments(-math.inf, 0.0)
    if len(terms) == 1:
        return InterferenceMoments(*terms[0])
    m = np.array([t[0] for t in terms]) * _DB_TO_NP
    s = np.array([t[1] for t in terms]) * _DB_TO_NP
    # work relative to the largest term to keep exp() in range
    ref = m.max()
    mean = np.exp(m - ref + s**2 / 2)
    var = np.exp(2 * (m - ref) + s**2) * np.expm1(s**2)
    u1 = mean.sum()
    s2 = math.log1p(var.sum() / u1**2)
    mz = math.log(u1) + ref - s2 / 2
    return InterferenceMoments(mz / _DB_TO_NP, math.sqrt(s2) / _DB_TO_NP)


def q_function(x):
    return ndtr(-np.asarray(x, dtype=float)) if np.ndim(x) else float(ndtr(-x))


def sinr_margin_db(stats: ChannelStats, tx_power: float, d: float, gains: tuple[float, float], interference: InterferenceMoments, sinr_min: float) -> float:
    return tx_power + gains[0] + gains[1] - float(stats.mu(d)) - interference.mu_I - sinr_min


def outage_probability(stats: ChannelStats, psi: tuple[float, int], d: float, gains: tuple[float, float], interference: InterferenceMoments, mcs_table: McsTable) -> float:
    """Q(SINR margin / combined shadowing std); 1 where no LoS statistics exist."""
    tx_power, eta = psi
    sinr_min = mcs_table[eta].sinr_min
    mu_d = float(stats.mu(d))
    if not math.isfinite(mu_d):
        return 1.0
    margin = sinr_margin_db(stats, tx_power, d, gains, interference, sinr_min)
    scale = math.sqrt(float(stats.sigma(d)) ** 2 + interference.sigma_I**2)
    if scale == 0.0:
        return 0.0 if margin > 0 else (0.5 if margin == 0 else 1.0)
    return float(q_function(margin / scale))


def received_moments(stats: ChannelStats, tx_power: float, d: float, gains: tuple[float, float]) -> tuple[float, float]:
    """Mean and std (dBm, dB) of power received over distance ``d``."""
    return tx_power + gains[0] + gains[1] - float(stats.mu(d)), float(stats.sigma(d))


def interference_plus_noise(stats: ChannelStats, noise_dbm: float, interferers: Sequence[tuple[float, float, tuple[float, float]]]) -> InterferenceMoments:
    """Combine noise with interferers given as (tx_power, distance, gains).

    Interferers beyond any LoS sample contribute nothing.
    """
    terms = [(noise_dbm, 0.0)]
    for p, d, g in interferers:
        m, s = received_moments(stats, p, d, g)
        if math.isfinite(m):
            terms.append((m, s))
    return combine_interferers(terms)


def default_distance_grid(d_max: float, n: int = 40) -> np.ndarray:
    return np.linspace(d_max / n, d_max, n)
