"""Synthetic cities: a grid, a road network, parcels, TAZs and census tracts that fit together.

Everything is planar metres with the origin at the south-west corner.  The
road network is a Manhattan grid with one extra outbound edge, ``evac_out``,
leaving the east side; the distribution grid covers the western
``grid_coverage`` share of the city.  Feeders are minimum spanning trees over
jittered lattice points, with impedances rescaled per feeder to a target
voltage drop and ratings sized from the resulting base currents.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import adoption, linker, traffic
from .errors import ConfigError
from .grid import (
    PHASES,
    Branch,
    Bus,
    Capacitor,
    DistributionNetwork,
    FeederTree,
    Load,
    Regulator,
    Substation,
    feeder_partition,
    validate_network,
    write_network,
)
from .powerflow import PowerFlowError, run_discrete_controls, solve_feeder

log = logging.getLogger(__name__)

EVAC_EDGE = "evac_out"
EXIT_NODE = "exit"
PRESETS = ("small", "large")

DEFAULT_MIX = {
    "RESIDENTIAL|01-SFR": 0.66,
    "RESIDENTIAL|08-DUPLEX/TRIPLEX": 0.10,
    "APART|07-APT<5 UNITS": 0.10,
    "CONDO|04-CONDO": 0.06,
    "TOWNHOUSE|041-TOWNHOME": 0.05,
    "APART|10-APT COMPLEX": 0.03,
}
# classes outside the estimate table, counted by hand
DEFAULT_MANUAL = {"APART|10-APT COMPLEX": 20}


@dataclass
class CityParams:
    substations: int = 2
    feeders_per_substation: int = 4
    buses_per_feeder: int = 40
    road_grid: tuple[int, int] = (13, 17)  # node rows, cols
    parcel_count: int = 7000
    taz_grid: tuple[int, int] = (3, 4)
    category_mix: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
    seed: int = 0
    block_length: float = 250.0  # m between road nodes
    grid_coverage: float = 1.0  # share of the city width served, from the west
    tract_block: tuple[int, int] = (1, 2)  # TAZ rows, cols per tract
    evacuate_cols: int = 2  # western TAZ columns suggested for evacuation
    exit_lanes: int = 1
    arterial_every: int = 4
    base_kw_per_vehicle: float = 2.0
    base_kvar_per_kw: float = 0.33
    target_drop_pu: float = 0.045
    lateral_threshold: int = 3  # subtree size below which branches go single-phase
    coverage_radius: float = 3000.0
    manual_counts: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_MANUAL))

    def __post_init__(self):
        self.road_grid = tuple(int(v) for v in self.road_grid)
        self.taz_grid = tuple(int(v) for v in self.taz_grid)
        self.tract_block = tuple(int(v) for v in self.tract_block)
        self.validate()

    @property
    def n_feeders(self) -> int:
        return self.substations * self.feeders_per_substation

    @property
    def width(self) -> float:
        return (self.road_grid[1] - 1) * self.block_length

    @property
    def height(self) -> float:
        return (self.road_grid[0] - 1) * self.block_length

    def validate(self):
        counts = (self.substations, self.feeders_per_substation, self.parcel_count, *self.road_grid,
                  *self.taz_grid, *self.tract_block, self.exit_lanes, self.arterial_every)
        if any(c < 1 for c in counts):
            raise ConfigError("all CityParams counts must be at least 1")
        if self.buses_per_feeder < 2:
            raise ConfigError("buses_per_feeder must be at least 2 (source bus plus one load bus)")
        if min(self.road_grid) < 2:
            raise ConfigError("road_grid needs at least 2 x 2 nodes")
        if not self.category_mix or any(w < 0 for w in self.category_mix.values()):
            raise ConfigError("category_mix weights must be nonnegative and nonempty")
        if not math.isclose(sum(self.category_mix.values()), 1.0, abs_tol=1e-9):
            raise ConfigError("category_mix weights must sum to 1")
        if any("|" not in k for k in self.category_mix):
            raise ConfigError("category_mix keys are 'CATEGORY|SUBCATEGORY'")
        if not 0.0 < self.grid_coverage <= 1.0:
            raise ConfigError("grid_coverage must be in (0, 1]")
        if not 0.0 < self.target_drop_pu < 0.2:
            raise ConfigError("target_drop_pu must be in (0, 0.2)")
        if self.block_length <= 0 or self.base_kw_per_vehicle <= 0:
            raise ConfigError("block_length and base_kw_per_vehicle must be positive")
        blocks = (self.road_grid[0] - 1) * (self.road_grid[1] - 1) * self.grid_coverage
        if self.n_feeders > max(1.0, blocks):
            raise ConfigError(f"{self.n_feeders} feeders do not fit in {blocks:.0f} covered road blocks")
        if self.evacuate_cols > self.taz_grid[1]:
            raise ConfigError("evacuate_cols exceeds the TAZ grid width")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("road_grid", "taz_grid", "tract_block"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "CityParams":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown city parameters: {sorted(unknown)}")
        return cls(**doc)


def load_preset(name: str) -> tuple[CityParams, dict]:
    """City parameters and suggested scenario settings for a shipped preset."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    doc = json.loads(resources.files("evtcosim").joinpath(f"data/presets/{name}.json").read_text())
    return CityParams.from_dict(doc["city"]), doc.get("scenario", {})


def load_line_templates() -> dict:
    return json.loads(resources.files("evtcosim").joinpath("data/line_templates.json").read_text())


@dataclass
class CityDataset:
    params: CityParams
    network: DistributionNetwork
    roads: traffic.RoadNetwork
    parcels: list[linker.Parcel]
    tazs: list[linker.TAZ]
    tracts: list[adoption.CensusTract]
    age_table: dict[int, list[tuple[float, float]]]
    market: adoption.MarketHistory
    curves: dict[str, adoption.AdoptionCurve]
    adoption_params: dict
    city_info: dict


# ------------------------------------------------------------------- roads

def _node_id(r: int, c: int) -> str:
    return f"n{r:02d}_{c:02d}"


def make_roads(p: CityParams) -> traffic.RoadNetwork:
    rows, cols = p.road_grid
    L = p.block_length
    nodes = [traffic.RoadNode(_node_id(r, c), c * L, r * L) for r in range(rows) for c in range(cols)]
    edges = []

    def add(a, b, arterial):
        lanes, speed = (2, 17.9) if arterial else (1, 11.2)
        edges.append(traffic.RoadEdge(f"{a}-{b}", a, b, L, speed, lanes))

    for r in range(rows):
        for c in range(cols):
            here = _node_id(r, c)
            if c + 1 < cols:
                art = r % p.arterial_every == 0
                add(here, _node_id(r, c + 1), art)
                add(_node_id(r, c + 1), here, art)
            if r + 1 < rows:
                art = c % p.arterial_every == 0
                add(here, _node_id(r + 1, c), art)
                add(_node_id(r + 1, c), here, art)
    mid = rows // 2
    nodes.append(traffic.RoadNode(EXIT_NODE, (cols - 1) * L + 300.0, mid * L))
    edges.append(traffic.RoadEdge(EVAC_EDGE, _node_id(mid, cols - 1), EXIT_NODE, 300.0, 17.9, p.exit_lanes))
    return traffic.RoadNetwork(tuple(nodes), tuple(edges))


# ------------------------------------------------------------- TAZ, parcels

def make_tazs(p: CityParams) -> list[linker.TAZ]:
    tr, tc = p.taz_grid
    w, h = p.width / tc, p.height / tr
    out = []
    for r in range(tr):
        for c in range(tc):
            x0, y0, x1, y1 = c * w, r * h, (c + 1) * w, (r + 1) * h
            ring = ((x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0))
            out.append(linker.TAZ(f"Z{r:02d}{c:02d}", (ring,), _tract_id(p, r, c)))
    return out


def _tract_id(p: CityParams, r: int, c: int) -> str:
    return f"C{r // p.tract_block[0]:02d}{c // p.tract_block[1]:02d}"


def make_parcels(p: CityParams, rng: np.random.Generator) -> list[linker.Parcel]:
    n = p.parcel_count
    # keep parcels off the exact outer boundary
    xs = rng.uniform(0.0, p.width, n).clip(1e-3, p.width - 1e-3)
    ys = rng.uniform(0.0, p.height, n).clip(1e-3, p.height - 1e-3)
    keys = sorted(p.category_mix)
    weights = np.array([p.category_mix[k] for k in keys])
    picks = rng.choice(len(keys), size=n, p=weights / weights.sum())
    width = len(str(n))
    out = []
    for i in range(n):
        cat, sub = keys[picks[i]].split("|", 1)
        out.append(linker.Parcel(f"P{i + 1:0{width}d}", round(float(xs[i]), 3), round(float(ys[i]), 3), cat, sub))
    return out


# -------------------------------------------------------------------- grid

def _cells(p: CityParams) -> list[tuple[float, float, float, float]]:
    """Feeder service areas tiling the covered part of the city."""
    n = p.n_feeders
    wc, h = p.width * p.grid_coverage, p.height
    best = None
    for fr in range(1, n + 1):
        if n % fr:
            continue
        fc = n // fr
        aspect = max((wc / fc) / (h / fr), (h / fr) / (wc / fc))
        if best is None or aspect < best[0] - 1e-12:
            best = (aspect, fr, fc)
    _, fr, fc = best
    cw, ch = wc / fc, h / fr
    return [(c * cw, r * ch, (c + 1) * cw, (r + 1) * ch) for r in range(fr) for c in range(fc)]


def _lattice(cell, k: int, rng: np.random.Generator) -> np.ndarray:
    x0, y0, x1, y1 = cell
    w, h = x1 - x0, y1 - y0
    nx = max(1, math.ceil(math.sqrt(k * w / h)))
    ny = max(1, math.ceil(k / nx))
    gx, gy = np.meshgrid((np.arange(nx) + 0.5) / nx, (np.arange(ny) + 0.5) / ny)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    pts = pts[np.sort(rng.choice(len(pts), size=k, replace=False))]
    jitter = rng.uniform(-0.3, 0.3, size=pts.shape) / np.array([nx, ny])
    pts = (pts + jitter) * np.array([w, h]) + np.array([x0, y0])
    return np.round(pts, 3)


def _prim(pts: np.ndarray, start: int) -> list[tuple[int, int]]:
    """Euclidean minimum spanning tree as (parent, child) pairs grown from ``start``."""
    n = len(pts)
    in_tree = np.zeros(n, dtype=bool)
    in_tree[start] = True
    dist = np.hypot(*(pts - pts[start]).T)
    parent = np.full(n, start)
    out = []
    for _ in range(n - 1):
        d = np.where(in_tree, np.inf, dist)
        j = int(np.argmin(d))
        out.append((int(parent[j]), j))
        in_tree[j] = True
        nd = np.hypot(*(pts - pts[j]).T)
        closer = nd < dist
        parent[closer] = j
        dist = np.minimum(dist, nd)
    return out


def _line_z(phases: tuple[str, ...], km: float, tmpl: dict) -> np.ndarray:
    z = np.zeros((3, 3), dtype=complex)
    idx = [PHASES.index(ph) for ph in phases]
    if len(idx) == 3:
        t = tmpl["three_phase"]
        z[:, :] = complex(t["r_mutual"], t["x_mutual"])
        np.fill_diagonal(z, complex(t["r_self"], t["x_self"]))
    else:
        t = tmpl["single_phase"]
        for i in idx:
            z[i, i] = complex(t["r_self"], t["x_self"])
    return z * km


def _ztuple(z: np.ndarray) -> tuple[tuple[complex, ...], ...]:
    return tuple(tuple(complex(round(v.real, 12), round(v.imag, 12)) for v in row) for row in z)


@dataclass
class _Feeder:
    fid: str
    buses: list[Bus]
    lines: list[tuple[str, str, str, np.ndarray]]  # id, from, to, raw impedance
    reg_branch: Branch
    loads: list[Load]


def _build_feeder(fid: str, root_xy, cell, k: int, rng, tmpl, p: CityParams, rot: list[int]) -> _Feeder:
    pts = _lattice(cell, k, rng)
    head = int(np.argmin(np.hypot(pts[:, 0] - root_xy[0], pts[:, 1] - root_xy[1])))
    edges = _prim(pts, head)
    children: dict[int, list[int]] = {i: [] for i in range(k)}
    for a, b in edges:
        children[a].append(b)
    # subtree sizes, leaves first
    order = [head]
    for u in order:
        order.extend(sorted(children[u]))
    size = np.ones(k, dtype=int)
    par = {b: a for a, b in edges}
    for u in reversed(order[1:]):
        size[par[u]] += size[u]
    phases: dict[int, tuple[str, ...]] = {head: PHASES}
    for u in order[1:]:
        pp = phases[par[u]]
        if len(pp) == 3 and size[u] >= p.lateral_threshold:
            phases[u] = PHASES
        elif len(pp) == 3:
            phases[u] = (PHASES[rot[0] % 3],)
            rot[0] += 1
        else:
            phases[u] = pp
    vb = tmpl["base_voltage_ln"]
    names = {i: f"{fid}_b{i + 1:03d}" for i in range(k)}
    root = f"{fid}_src"
    buses = [Bus(root, fid, float(root_xy[0]), float(root_xy[1]), PHASES, vb)]
    buses += [Bus(names[i], fid, float(pts[i, 0]), float(pts[i, 1]), phases[i], vb) for i in range(k)]
    lines = []
    for u in order[1:]:
        a = par[u]
        km = float(np.hypot(*(pts[u] - pts[a]))) / 1000.0
        lines.append((f"{fid}_l{u + 1:03d}", names[a], names[u], _line_z(phases[u], max(km, 0.01), tmpl)))
    rz = complex(tmpl["regulator"]["r"], tmpl["regulator"]["x"])
    reg_br = Branch(f"{fid}_reg", root, names[head], "transformer", _ztuple(np.eye(3) * rz), 1.0)
    return _Feeder(fid, buses, lines, reg_br, [])


def _tree(f: _Feeder, scale: float, reg: Regulator, caps: tuple[Capacitor, ...]) -> FeederTree:
    branches = [replace(f.reg_branch, tap_ratio=(reg.ratio,) * 3)]
    branches += [Branch(i, a, b, "line", _ztuple(z * scale), 1.0) for i, a, b, z in f.lines]
    net = DistributionNetwork(tuple(f.buses), tuple(branches), tuple(f.loads), caps, (reg,))
    return feeder_partition(net)[0]


def _min_pu(tree: FeederTree, sol, three_phase_only=False) -> tuple[float, str]:
    best = (np.inf, "")
    for b in tree.order[1:]:
        bus = tree.buses[b]
        if three_phase_only and len(bus.phases) < 3:
            continue
        v = sol.voltage_pu(b)
        m = float(np.mean([v[PHASES.index(ph)] for ph in bus.phases])) if three_phase_only else \
            float(min(v[PHASES.index(ph)] for ph in bus.phases))
        if m < best[0]:
            best = (m, b)
    return best


def _calibrate(f: _Feeder, p: CityParams, rng) -> tuple[list[Branch], Regulator, Capacitor | None]:
    """Rescale line impedances to the drop target, place controls, size ratings."""
    reg = Regulator(f"{f.fid}_rg", f.reg_branch.id, f.buses[1].id, target_pu=0.985, band_pu=0.01)
    scale = 1.0
    if f.loads:
        for _ in range(6):
            sol = solve_feeder(_tree(f, scale, reg, ()))
            if not sol.converged:
                scale *= 0.5
                continue
            drop = 1.0 - _min_pu(_tree(f, scale, reg, ()), sol)[0]
            if drop <= 1e-9:
                break
            scale *= p.target_drop_pu / drop
    tree = _tree(f, scale, reg, ())
    sol = solve_feeder(tree)
    if not sol.converged:
        raise PowerFlowError(f"feeder {f.fid} base case does not converge")
    v_reg, reg_bus = _min_pu(tree, sol, three_phase_only=True)
    reg = replace(reg, regulated_bus=reg_bus or f.buses[1].id)

    cap = None
    three = [b for b in tree.order[1:] if len(tree.buses[b].phases) == 3]
    if f.loads and len(three) > 1:
        # halfway along the path from the head to the regulated bus
        path = [reg.regulated_bus]
        while path[-1] != tree.order[1]:
            path.append(tree.branches[tree.parent_branch[path[-1]]].from_bus)
        site = path[len(path) // 2]
        kvar = sum(sum(ld.phase_kvar) for ld in f.loads) / 3.0
        size = max(50.0, round(0.4 * kvar / 50.0) * 50.0)
        cap = Capacitor(f"{f.fid}_cap", site, size, False, v_on_pu=0.965, v_off_pu=1.04)

    caps = (cap,) if cap else ()
    tree, sol, _ = run_discrete_controls(_tree(f, scale, reg, caps))
    reg = tree.regulators[0]
    cap = tree.capacitors[0] if cap else None
    floor = 1.0  # A, keeps lightly used laterals valid
    out = []
    for br_id, br in sorted(tree.branches.items()):
        amps = float(np.max(np.abs(sol.branch_currents[br_id])))
        rated = max(amps, floor) / rng.uniform(0.6, 0.8)
        out.append(replace(br, i_rated=round(rated, 6)))
    return out, reg, cap


def make_grid(p: CityParams, parcels: list[linker.Parcel], rng: np.random.Generator) -> DistributionNetwork:
    tmpl = load_line_templates()
    cells = _cells(p)
    F = p.feeders_per_substation
    feeders: list[_Feeder] = []
    subs = []
    rot = [0]
    for s in range(p.substations):
        own = cells[s * F:(s + 1) * F]
        cx = float(np.mean([(c[0] + c[2]) / 2 for c in own]))
        cy = float(np.mean([(c[1] + c[3]) / 2 for c in own]))
        sid = f"S{s + 1}"
        fids = []
        for j, cell in enumerate(own):
            fid = f"{sid}F{j + 1}"
            fids.append(fid)
            feeders.append(_build_feeder(fid, (cx, cy), cell, p.buses_per_feeder - 1, rng, tmpl, p, rot))
        subs.append(Substation(sid, round(cx, 3), round(cy, 3), tuple(fids)))

    # base load from the parcels each bus would serve
    load_buses = [b for f in feeders for b in f.buses[1:]]
    ids, dist = linker.nearest_buses([q.x for q in parcels], [q.y for q in parcels], load_buses)
    table = linker.load_vehicle_table()
    manual = _manual_counts(p)
    vehicles: dict[str, int] = {}
    for q, b, d in zip(parcels, ids, dist):
        if d <= p.coverage_radius:
            vehicles[b] = vehicles.get(b, 0) + linker.estimate_vehicles(q.category, q.subcategory, manual, table)
    for f in feeders:
        for b in f.buses[1:]:
            n = vehicles.get(b.id, 0)
            if n == 0:
                continue
            kw = n * p.base_kw_per_vehicle / len(b.phases)
            pkw = tuple(kw if ph in b.phases else 0.0 for ph in PHASES)
            f.loads.append(Load(b.id, pkw, tuple(v * p.base_kvar_per_kw for v in pkw)))

    buses, branches, loads, caps, regs = [], [], [], [], []
    for f in feeders:
        brs, reg, cap = _calibrate(f, p, rng)
        buses += f.buses
        branches += brs
        loads += f.loads
        regs.append(reg)
        if cap:
            caps.append(cap)
    net = DistributionNetwork(tuple(buses), tuple(branches), tuple(loads), tuple(caps), tuple(regs),
                              source_bus=subs[0].id, substations=tuple(subs))
    rep = validate_network(net)
    if not rep.ok:
        raise PowerFlowError(f"generated network is invalid:\n{rep}")
    return net


def _manual_counts(p: CityParams) -> dict[tuple[str, str], int]:
    return {tuple(k.split("|", 1)): int(v) for k, v in p.manual_counts.items()}


# ---------------------------------------------------------------- adoption

START_YEAR = 2019
FLEET_2019 = 280_000_000
CURVE_KNOTS = {
    "medium": {2020: 0.005, 2030: 0.03, 2040: 0.0832, 2050: 0.18},
    "high": {2020: 0.008, 2030: 0.07, 2040: 0.208, 2050: 0.42},
}


def _interp(knots: dict[int, float], years) -> dict[int, float]:
    ks = sorted(knots)
    return {y: round(float(np.interp(y, ks, [knots[k] for k in ks])), 6) for y in years}


def make_adoption_inputs(p: CityParams, tazs, vehicles_by_taz: dict[str, int], rng):
    age_table = {}
    for y in range(START_YEAR, 2051):
        drift = 0.08 * (min(y, 2030) - START_YEAR)
        age_table[y] = [(25_000.0, round(12.5 + drift, 3)), (50_000.0, round(11.0 + drift, 3)),
                        (100_000.0, round(9.8 + drift, 3)), (150_000.0, round(8.9 + drift, 3)),
                        (math.inf, round(8.2 + drift, 3))]
    by_tract: dict[str, list[str]] = {}
    for t in tazs:
        by_tract.setdefault(t.census_tract_id, []).append(t.id)
    tracts = []
    for tid in sorted(by_tract):
        zs = tuple(sorted(by_tract[tid]))
        hh = sum(vehicles_by_taz.get(z, 0) for z in zs)
        median = round(float(np.exp(rng.normal(math.log(60_000), 0.35))), 0)
        mean = round(median * 1.25, 0)
        tracts.append(adoption.CensusTract(tid, hh, median, mean, 1.0, zs, adoption.ages_from_income(age_table, mean)))
    total = sum(t.households for t in tracts)

    shares = {y: 0.0 for y in range(2000, 2011)}
    shares.update({2011: 0.001, 2012: 0.003, 2013: 0.006, 2014: 0.007, 2015: 0.007, 2016: 0.009,
                   2017: 0.012, 2018: 0.021, 2019: 0.019, 2020: 0.022, 2021: 0.032, 2022: 0.058})
    fleet = {y: int(round(FLEET_2019 * 1.005 ** (y - START_YEAR))) for y in range(START_YEAR, 2051)}
    county_share = round(max(total, 1) / FLEET_2019, 12)
    market = adoption.MarketHistory(shares, fleet, county_share)
    curves = {c: adoption.AdoptionCurve(c, _interp(CURVE_KNOTS[c], range(2020, 2051))) for c in ("medium", "high")}
    params = {"county_share": county_share, "seed_evs": int(round(0.004 * total)), "start_year": START_YEAR,
              "base_target_year": 2030}
    return tracts, age_table, market, curves, params


# ------------------------------------------------------------------ driver

def generate_city(params: CityParams) -> CityDataset:
    """Build a complete, self-consistent synthetic city; deterministic per ``params.seed``."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(params.seed).spawn(4)]
    roads = make_roads(params)
    tazs = make_tazs(params)
    parcels = make_parcels(params, streams[0])
    net = make_grid(params, parcels, streams[1])

    zs = linker.assign_tazs([q.x for q in parcels], [q.y for q in parcels], tazs)
    table = linker.load_vehicle_table()
    manual = _manual_counts(params)
    by_taz: dict[str, int] = {}
    for q, z in zip(parcels, zs):
        by_taz[z] = by_taz.get(z, 0) + linker.estimate_vehicles(q.category, q.subcategory, manual, table)
    tracts, ages, market, curves, ap = make_adoption_inputs(params, tazs, by_taz, streams[2])

    evac = sorted(t.id for t in tazs if int(t.id[3:5]) < params.evacuate_cols)
    info = {
        "evac_edge": EVAC_EDGE,
        "tazs_to_evacuate": evac,
        "coverage_radius": params.coverage_radius,
        "vehicles_by_taz": dict(sorted(by_taz.items())),
        "params": params.to_dict(),
    }
    return CityDataset(params, net, roads, parcels, tazs, tracts, ages, market, curves, ap, info)


# file names inside a dataset directory
FILES = {
    "grid": "grid.json",
    "roads": "roads.json",
    "parcels": "parcels.csv",
    "tazs": "tazs.json",
    "tracts": "tracts.csv",
    "ages": "vehicle_age.csv",
    "market": "market.csv",
    "curves": "curves.csv",
    "adoption": "adoption.json",
    "manual": "manual_counts.csv",
    "city": "city.json",
}


def write_city(ds: CityDataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_network(ds.network, d / FILES["grid"])
    traffic.write_road_network(ds.roads, d / FILES["roads"])
    linker.write_parcels_csv(ds.parcels, d / FILES["parcels"], linked=False)
    linker.write_tazs_json(ds.tazs, d / FILES["tazs"])
    adoption.write_tracts_csv(ds.tracts, d / FILES["tracts"])
    adoption.write_age_table_csv(ds.age_table, d / FILES["ages"])
    adoption.write_market_csv(ds.market, d / FILES["market"])
    adoption.write_curves_csv(ds.curves, d / FILES["curves"])
    (d / FILES["adoption"]).write_text(json.dumps(ds.adoption_params, indent=1, sort_keys=True) + "\n")
    with open(d / FILES["manual"], "w") as fh:
        fh.write("category,subcategory,vehicles\n")
        for k, v in sorted(ds.params.manual_counts.items()):
            cat, sub = k.split("|", 1)
            fh.write(f"{cat},{sub},{v}\n")
    (d / FILES["city"]).write_text(json.dumps(ds.city_info, indent=1, sort_keys=True) + "\n")
    return d
