"""Survey geometry: hexagonal WGN layout, relay placement and channel reuse."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .channel import ChannelStats

SQRT3 = math.sqrt(3.0)
GEOPHONE_SPACING_M = 25.0
RECEIVER_LINE_SPACING_M = 200.0


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SurveySpec:
    width: float
    height: float
    cell_radius: float
    geophone_rate: float = 144e3  # bits/s per geophone
    geophones_per_wgn: int | None = None
    reuse_factor: int = 4
    p_obs: float = 0.0
    packet_bytes: int = 2200
    r_cap: int = 50

    def __post_init__(self):
        if self.cell_radius <= 0:
            raise ValueError("cell_radius must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("survey dimensions must be positive")
        if self.reuse_factor < 1:
            raise ValueError("reuse_factor must be >= 1")
        if not 0.0 <= self.p_obs <= 1.0:
            raise ValueError("p_obs must lie in [0, 1]")
        if self.geophone_rate < 0:
            raise ValueError("geophone_rate must be non-negative")

    @property
    def link_distance(self) -> float:
        return SQRT3 * self.cell_radius

    @property
    def n_geophones(self) -> int:
        if self.geophones_per_wgn is not None:
            return self.geophones_per_wgn
        area = 1.5 * SQRT3 * self.cell_radius**2
        return max(1, round(area / (GEOPHONE_SPACING_M * RECEIVER_LINE_SPACING_M)))

    @property
    def wgn_packet_rate(self) -> float:
        return self.n_geophones * self.geophone_rate / (8 * self.packet_bytes)


@dataclass(frozen=True)
class Node:
    id: int
    kind: str  # "WGN" | "RN" | "DCC"
    x: float
    y: float


@dataclass(frozen=True)
class Link:
    id: int
    src: int
    dst: int
    layer: str  # "L2" | "L3"
    length: float
    relays: int
    lam: float
    obstructed: bool
    r_min: int = 0
    chain: str = ""
    chain_order: int = 0  # 0 = link at the head (far end) of its chain
    sublinks: tuple[int, ...] = ()


@dataclass(frozen=True)
class SubLink:
    id: int
    link: int
    index: int
    a: tuple[float, float]
    b: tuple[float, float]
    length: float
    chain: str
    position: int  # hop count from the head of its chain
    channel: int = -1
    cochannel: tuple[tuple[int, float], ...] = ()  # (sub-link id, separation m)

    @property
    def midpoint(self) -> tuple[float, float]:
        return ((self.a[0] + self.b[0]) / 2, (self.a[1] + self.b[1]) / 2)


@dataclass(frozen=True)
class MeshTopology:
    spec: SurveySpec
    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    sublinks: tuple[SubLink, ...]
    paths: tuple[tuple[int, ...], ...]  # link ids from an origin WGN to the DCC
    wgn_rate: float
    dcc: int
    reuse_factor: int = 4

    @property
    def wgns(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == "WGN"]

    def link_sublinks(self, link_id: int) -> list[SubLink]:
        return [self.sublinks[i] for i in self.links[link_id].sublinks]

    def path_origin(self, path: Sequence[int]) -> int:
        return self.links[path[0]].src

    def to_dict(self) -> dict:
        return {
            "schema": "mmbackhaul.topology/1",
            "spec": asdict(self.spec),
            "wgn_rate_pkt_s": self.wgn_rate,
            "dcc": self.dcc,
            "reuse_factor": self.reuse_factor,
            "nodes": [asdict(n) for n in self.nodes],
            "links": [asdict(l) for l in self.links],
            "sublinks": [asdict(s) for s in self.sublinks],
            "paths": [list(p) for p in self.paths],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "MeshTopology":
        def tup(v):
            return tuple(tup(x) for x in v) if isinstance(v, list) else v

        return cls(
            spec=SurveySpec(**d["spec"]),
            nodes=tuple(Node(**n) for n in d["nodes"]),
            links=tuple(Link(**{k: tup(v) for k, v in l.items()}) for l in d["links"]),
            sublinks=tuple(SubLink(**{k: tup(v) for k, v in s.items()}) for s in d["sublinks"]),
            paths=tuple(tuple(p) for p in d["paths"]),
            wgn_rate=d["wgn_rate_pkt_s"],
            dcc=d["dcc"],
            reuse_factor=d.get("reuse_factor", 4),
        )

    @classmethod
    def from_json(cls, path) -> "MeshTopology":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def relay_distribution(q: Sequence[float]) -> np.ndarray:
    """p_r from the LoS probabilities q_r = p_los(d / (r + 1)).

    R = r when every coarser subdivision had at least one blocked sub-link
    and all r + 1 sub-links of this one are in LoS.
    """
    q = np.asarray(q, dtype=float)
    p = np.empty_like(q)
    surv = 1.0
    for r in range(q.size):
        ok = q[r] ** (r + 1)
        p[r] = ok * surv
        surv *= 1.0 - ok
    return p


def expected_relays(stats: ChannelStats, link_distance: float, r_cap: int = 50, tol: float = 1e-15) -> float:
    if link_distance <= 0:
        raise ValueError("link distance must be positive")
    e = 0.0
    surv = 1.0
    for r in range(r_cap + 1):
        q = float(stats.plos(link_distance / (r + 1)))
        ok = q ** (r + 1)
        e += r * ok * surv
        surv *= 1.0 - ok
        if ok >= 1.0 or surv < tol:
            return e
    raise ConvergenceError(f"relay series did not converge within r_cap={r_cap} at d={link_distance:.1f} m")


def min_relays(stats: ChannelStats, link_distance: float, r_cap: int = 50) -> int:
    """Ceiling of the expected relay count."""
    return int(math.ceil(expected_relays(stats, link_distance, r_cap) - 1e-9))


def hex_centers(width: float, height: float, radius: float) -> list[tuple[int, int, float, float]]:
    """(column, row, x, y) of flat-top hexagons inside the survey, row 0 at the bottom."""
    n_c = int(width // (1.5 * radius))
    n_r = int(height // (SQRT3 * radius))
    if n_c < 1 or n_r < 1:
        raise ValueError("survey area is smaller than one cell")
    x0 = (width - 1.5 * radius * (n_c - 1)) / 2
    y0 = SQRT3 * radius
    out = []
    for c in range(n_c):
        for j in range(n_r):
            out.append((c, j, x0 + 1.5 * radius * c, y0 + SQRT3 * radius * j + (SQRT3 * radius / 2 if c % 2 else 0.0)))
    return out


def build_topology(spec: SurveySpec, stats: ChannelStats, seed: int = 0, reuse_factor: int | None = None) -> MeshTopology:
    """Vertical L2 chains feed an L3 spine along row 0, which drains into the DCC."""
    cells = hex_centers(spec.width, spec.height, spec.cell_radius)
    n_c = max(c for c, _, _, _ in cells) + 1
    n_r = max(j for _, j, _, _ in cells) + 1
    mid = n_c // 2
    nodes: list[Node] = []
    at: dict[tuple[int, int], int] = {}
    for c, j, x, y in cells:
        at[(c, j)] = len(nodes)
        nodes.append(Node(len(nodes), "WGN", x, y))
    spine_mid = nodes[at[(mid, 0)]]
    dcc = len(nodes)
    nodes.append(Node(dcc, "DCC", spine_mid.x, spine_mid.y - spec.link_distance))

    # parent pointers and chain labels
    parent: dict[int, int] = {}
    chain_of: dict[int, str] = {}
    for c in range(n_c):
        for j in range(1, n_r):
            parent[at[(c, j)]] = at[(c, j - 1)]
            chain_of[at[(c, j)]] = f"col{c}"
        if c < mid:
            parent[at[(c, 0)]] = at[(c + 1, 0)]
            chain_of[at[(c, 0)]] = "spineL"
        elif c > mid:
            parent[at[(c, 0)]] = at[(c - 1, 0)]
            chain_of[at[(c, 0)]] = "spineR"
    parent[at[(mid, 0)]] = dcc
    chain_of[at[(mid, 0)]] = "spineR"

    subtree = {n.id: 1 for n in nodes if n.kind == "WGN"}
    # accumulate from the far ends: rows top-down, then spine outside-in
    order = [at[(c, j)] for c in range(n_c) for j in range(n_r - 1, 0, -1)]
    order += [at[(c, 0)] for c in range(0, mid)] + [at[(c, 0)] for c in range(n_c - 1, mid, -1)]
    for u in order:
        subtree[parent[u]] += subtree[u]

    chains: dict[str, list[int]] = {f"col{c}": [at[(c, j)] for j in range(n_r - 1, 0, -1)] for c in range(n_c)}
    chains["spineL"] = [at[(c, 0)] for c in range(0, mid)]
    chains["spineR"] = [at[(c, 0)] for c in range(n_c - 1, mid - 1, -1)]
    order_in_chain = {u: k for members in chains.values() for k, u in enumerate(members)}

    lam_wgn = spec.wgn_packet_rate
    rng = np.random.default_rng(seed)
    r_min = min_relays(stats, spec.link_distance, spec.r_cap)
    links: list[Link] = []
    link_of: dict[int, int] = {}
    sources = sorted(parent)
    obstructed = rng.random(len(sources)) < spec.p_obs
    for k, u in enumerate(sources):
        v = parent[u]
        layer = "L2" if chain_of[u].startswith("col") else "L3"
        r = r_min + (1 if obstructed[k] else 0)
        link_of[u] = len(links)
        length = math.hypot(nodes[v].x - nodes[u].x, nodes[v].y - nodes[u].y)
        links.append(
            Link(len(links), u, v, layer, length, r, subtree[u] * lam_wgn, bool(obstructed[k]), r, chain_of[u], order_in_chain[u])
        )

    paths = []
    for w in sorted(subtree):
        route, u = [], w
        while u != dcc:
            route.append(link_of[u])
            u = parent[u]
        paths.append(tuple(route))

    base = MeshTopology(spec, tuple(nodes), tuple(links), (), tuple(paths), lam_wgn, dcc,
                        spec.reuse_factor if reuse_factor is None else reuse_factor)
    return _materialize(base)


def with_relays(topo: MeshTopology, relays: dict[int, int]) -> MeshTopology:
    """Same survey with the relay count of some links changed."""
    links = tuple(replace(l, relays=relays.get(l.id, l.relays)) for l in topo.links)
    return _materialize(replace(topo, links=links))


def _materialize(topo: MeshTopology) -> MeshTopology:
    """Place RNs uniformly on every link, cut sub-links and assign channels."""
    nodes = [n for n in topo.nodes if n.kind != "RN"]
    # chain positions count sub-link hops from the head of each chain
    depth: dict[int, int] = {}
    for chain in sorted({l.chain for l in topo.links}):
        acc = 0
        for l in sorted((l for l in topo.links if l.chain == chain), key=lambda l: l.chain_order):
            depth[l.id] = acc
            acc += l.relays + 1
    sublinks: list[SubLink] = []
    links_out: list[Link] = []
    for ln in topo.links:
        a, b = nodes[ln.src], nodes[ln.dst]
        ids = []
        prev_pt = (a.x, a.y)
        for i in range(ln.relays + 1):
            t = (i + 1) / (ln.relays + 1)
            pt = (a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t)
            if i < ln.relays:
                nodes.append(Node(len(nodes), "RN", *pt))
            ids.append(len(sublinks))
            sublinks.append(SubLink(len(sublinks), ln.id, i, prev_pt, pt, ln.length / (ln.relays + 1), ln.chain, depth[ln.id] + i))
            prev_pt = pt
        links_out.append(replace(ln, sublinks=tuple(ids)))
    topo = replace(topo, nodes=tuple(nodes), links=tuple(links_out), sublinks=tuple(sublinks))
    return assign_channels(topo, topo.reuse_factor)


def _chain_offset(chain: str, reuse: int) -> int:
    if chain.startswith("col"):
        return (2 * int(chain[3:])) % reuse
    return (1 if chain == "spineL" else 3) % reuse


def assign_channels(topo: MeshTopology, reuse_factor: int, n_channels: int = 4) -> MeshTopology:
    """Periodic reuse along each chain, then the two nearest co-channel sub-links."""
    if reuse_factor < 1 or reuse_factor > n_channels:
        raise ValueError(f"reuse_factor must lie in [1, {n_channels}]")
    subs = list(topo.sublinks)
    chan = [(_chain_offset(s.chain, reuse_factor) + s.position) % reuse_factor for s in subs]

    # sub-links meeting at a node should not share a channel if avoidable
    ends: dict[tuple[int, int], list[int]] = {}
    for s in subs:
        for p in (s.a, s.b):
            ends.setdefault((round(p[0], 6), round(p[1], 6)), []).append(s.id)
    if reuse_factor > 1:
        for group in ends.values():
            for i in group:
                clash = [j for j in group if j != i and chan[j] == chan[i]]
                if not clash or subs[i].chain == subs[clash[0]].chain:
                    continue
                used = {chan[j] for j in group if j != i}
                free = [c for c in range(reuse_factor) if c not in used]
                if free:
                    chan[i] = free[0]

    mids = np.array([s.midpoint for s in subs])
    out = []
    for s in subs:
        same = [j for j in range(len(subs)) if j != s.id and chan[j] == chan[s.id]]
        if same:
            sep = np.hypot(*(mids[same] - mids[s.id]).T)
            order = np.lexsort((np.array(same), sep))[:2]
            co = tuple((same[k], float(sep[k])) for k in order)
        else:
            co = ()
        out.append(replace(s, channel=chan[s.id], cochannel=co))
    return replace(topo, sublinks=tuple(out), reuse_factor=reuse_factor)


def total_geophones(topo: MeshTopology) -> int:
    return len(topo.wgns) * topo.spec.n_geophones
