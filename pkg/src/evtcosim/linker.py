"""Spatial and tabular links from parcels to buses, road edges, vehicles and TAZs.

All geometry is planar.  Nearest-neighbour queries are exact linear scans
vectorised with numpy; candidates are sorted by id beforehand so that the
first minimum found is also the smallest id among equally distant ones.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DataError
from .grid import Bus, DistributionNetwork
from .traffic import RoadNetwork

log = logging.getLogger(__name__)

UNASSIGNED = None
_CHUNK = 512


@dataclass(frozen=True)
class Parcel:
    id: str
    x: float
    y: float
    category: str = ""
    subcategory: str = ""
    vehicle_count: int = 0
    bus_id: str | None = None
    edge_id: str | None = None
    taz_id: str | None = None


@dataclass(frozen=True)
class TAZ:
    """Traffic analysis zone.  ``rings`` are one or more closed outer rings."""

    id: str
    rings: tuple[tuple[tuple[float, float], ...], ...]
    census_tract_id: str = ""
    land_area: float | None = None

    def __post_init__(self):
        if not self.rings:
            raise DataError(f"TAZ {self.id!r} has no polygon")
        for ring in self.rings:
            _check_ring(self.id, ring)
        if self.land_area is None:
            object.__setattr__(self, "land_area", sum(abs(_signed_area(r)) for r in self.rings))

    def bounds(self) -> tuple[float, float, float, float]:
        pts = np.array([p for r in self.rings for p in r], dtype=float)
        return (*pts.min(axis=0), *pts.max(axis=0))


@dataclass
class LinkReport:
    unassigned: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _open_ring(ring) -> list[tuple[float, float]]:
    pts = [(float(x), float(y)) for x, y in ring]
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts = pts[:-1]
    return pts


def _signed_area(ring) -> float:
    pts = _open_ring(ring)
    s = 0.0
    for (x1, y1), (x2, y2) in zip(pts, pts[1:] + pts[:1]):
        s += x1 * y2 - x2 * y1
    return s / 2.0


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    o1, o2, o3, o4 = orient(p1, p2, p3), orient(p1, p2, p4), orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    # collinear overlap
    def on(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    return (o1 == 0 and on(p1, p2, p3)) or (o2 == 0 and on(p1, p2, p4)) or \
        (o3 == 0 and on(p3, p4, p1)) or (o4 == 0 and on(p3, p4, p2))


def _check_ring(taz_id, ring):
    pts = _open_ring(ring)
    if len(pts) < 3 or len(set(pts)) != len(pts):
        raise DataError(f"TAZ {taz_id!r} has a degenerate ring")
    if _signed_area(pts) == 0:
        raise DataError(f"TAZ {taz_id!r} has zero area")
    n = len(pts)
    segs = [(pts[i], pts[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue  # neighbours share a vertex
            if _segments_cross(*segs[i], *segs[j]):
                raise DataError(f"TAZ {taz_id!r} ring self-intersects")


# ------------------------------------------------------------ nearest bus

def _sorted_points(items):
    items = sorted(items, key=lambda b: b.id)
    return [b.id for b in items], np.array([b.x for b in items], float), np.array([b.y for b in items], float)


def nearest_buses(xs, ys, buses: list[Bus]) -> tuple[list[str], np.ndarray]:
    """Nearest bus id and distance for each query point."""
    if not buses:
        raise DataError("no buses to link to")
    ids, bx, by = _sorted_points(buses)
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    idx = np.empty(len(xs), dtype=int)
    d2 = np.empty(len(xs))
    for s in range(0, len(xs), _CHUNK):
        dx = xs[s:s + _CHUNK, None] - bx[None, :]
        dy = ys[s:s + _CHUNK, None] - by[None, :]
        dd = dx * dx + dy * dy
        k = np.argmin(dd, axis=1)
        idx[s:s + _CHUNK] = k
        d2[s:s + _CHUNK] = dd[np.arange(len(k)), k]
    return [ids[k] for k in idx], np.sqrt(d2)


def nearest_bus(parcel: Parcel, buses: list[Bus]) -> str:
    return nearest_buses([parcel.x], [parcel.y], buses)[0][0]


def linkable_buses(net: DistributionNetwork) -> list[Bus]:
    """Buses that can host consumer load: every bus fed by a branch (feeder roots excluded)."""
    fed = {br.to_bus for br in net.branches}
    return [b for b in net.buses if b.id in fed]


# ----------------------------------------------------------- nearest edge

def nearest_edges(xs, ys, roads: RoadNetwork) -> tuple[list[str], np.ndarray]:
    """Nearest road edge by point-to-segment distance, edges taken as straight segments."""
    if not roads.edges:
        raise DataError("no road edges to link to")
    nodes = roads.node_map
    edges = sorted(roads.edges, key=lambda e: e.id)
    ids = [e.id for e in edges]
    ax = np.array([nodes[e.from_node].x for e in edges], float)
    ay = np.array([nodes[e.from_node].y for e in edges], float)
    bx = np.array([nodes[e.to_node].x for e in edges], float)
    by = np.array([nodes[e.to_node].y for e in edges], float)
    # orient every segment the same way so a two-way road gives bit-identical distances
    flip = (bx < ax) | ((bx == ax) & (by < ay))
    ax, bx = np.where(flip, bx, ax), np.where(flip, ax, bx)
    ay, by = np.where(flip, by, ay), np.where(flip, ay, by)
    ex, ey = bx - ax, by - ay
    L2 = ex * ex + ey * ey
    safe = np.where(L2 > 0, L2, 1.0)
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    idx = np.empty(len(xs), dtype=int)
    d2 = np.empty(len(xs))
    for s in range(0, len(xs), _CHUNK):
        px, py = xs[s:s + _CHUNK, None], ys[s:s + _CHUNK, None]
        t = np.where(L2 > 0, ((px - ax) * ex + (py - ay) * ey) / safe, 0.0)
        # clamp to the end points exactly so edges sharing a node agree on its distance
        qx = np.where(t <= 0, ax, np.where(t >= 1, bx, ax + t * ex))
        qy = np.where(t <= 0, ay, np.where(t >= 1, by, ay + t * ey))
        dd = (px - qx) ** 2 + (py - qy) ** 2
        k = np.argmin(dd, axis=1)
        idx[s:s + _CHUNK] = k
        d2[s:s + _CHUNK] = dd[np.arange(len(k)), k]
    return [ids[k] for k in idx], np.sqrt(d2)


def nearest_edge(parcel: Parcel, roads: RoadNetwork) -> str:
    return nearest_edges([parcel.x], [parcel.y], roads)[0][0]


# ------------------------------------------------------------ TAZ lookup

def _covers(ring, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Even-odd ray cast, with points on the ring itself counted as inside."""
    pts = _open_ring(ring)
    inside = np.zeros(px.shape, dtype=bool)
    boundary = np.zeros(px.shape, dtype=bool)
    for (x1, y1), (x2, y2) in zip(pts, pts[1:] + pts[:1]):
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        boundary |= (cross == 0) & (np.minimum(x1, x2) <= px) & (px <= np.maximum(x1, x2)) \
            & (np.minimum(y1, y2) <= py) & (py <= np.maximum(y1, y2))
        straddle = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddle & (px < xint)
    return inside | boundary


def assign_tazs(xs, ys, tazs: list[TAZ]) -> list[str | None]:
    """Containing TAZ per point; shared boundaries go to the smallest id, misses to None."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    out: list[str | None] = [UNASSIGNED] * len(xs)
    todo = np.ones(len(xs), dtype=bool)
    for taz in sorted(tazs, key=lambda t: t.id):
        if not todo.any():
            break
        x0, y0, x1, y1 = taz.bounds()
        cand = np.flatnonzero(todo & (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1))
        if cand.size == 0:
            continue
        hit = np.zeros(cand.size, dtype=bool)
        for ring in taz.rings:
            hit |= _covers(ring, xs[cand], ys[cand])
        for k in cand[hit]:
            out[k] = taz.id
        todo[cand[hit]] = False
    return out


def assign_taz(parcel: Parcel, tazs: list[TAZ]) -> str | None:
    return assign_tazs([parcel.x], [parcel.y], tazs)[0]


# -------------------------------------------------------- vehicle counts

def load_vehicle_table(path=None) -> dict[tuple[str, str], int]:
    """(category, subcategory) -> vehicles; defaults to the bundled estimates."""
    if path is None:
        text = resources.files("evtcosim").joinpath("data/vehicle_estimates.csv").read_text()
    else:
        text = Path(path).read_text()
    table = {}
    for row in csv.DictReader(text.splitlines()):
        table[(row["category"].strip(), row["subcategory"].strip())] = int(row["vehicles"])
    return table


def load_manual_counts(path) -> dict[tuple[str, str], int]:
    with open(path, newline="") as fh:
        return {(r["category"].strip(), r["subcategory"].strip()): int(r["vehicles"]) for r in csv.DictReader(fh)}


def estimate_vehicles(category: str, subcategory: str, manual_counts: dict | None = None,
                      table: dict | None = None, scale: float = 1.0,
                      warnings: list | None = None) -> int:
    """Vehicle estimate for a parcel usage class.

    Listed classes use the estimate table.  Other classes fall back to the
    manual count table times ``scale`` (rounded half up), and finally to 0
    with a warning appended to ``warnings``.
    """
    key = (category.strip(), subcategory.strip())
    table = load_vehicle_table() if table is None else table
    if key in table:
        return table[key]
    if manual_counts and key in manual_counts:
        return int(math.floor(manual_counts[key] * scale + 0.5))
    if warnings is not None:
        warnings.append(f"no vehicle estimate for {key[0]!r}/{key[1]!r}")
    return 0


# --------------------------------------------------------------- linking

def link_parcels(parcels: list[Parcel], buses: list[Bus], roads: RoadNetwork, tazs: list[TAZ],
                 manual_counts: dict | None = None, table: dict | None = None,
                 scale: float = 1.0) -> tuple[list[Parcel], LinkReport]:
    rep = LinkReport()
    if not parcels:
        return [], rep
    table = load_vehicle_table() if table is None else table
    xs = [p.x for p in parcels]
    ys = [p.y for p in parcels]
    bus_ids, _ = nearest_buses(xs, ys, buses)
    edge_ids, _ = nearest_edges(xs, ys, roads)
    taz_ids = assign_tazs(xs, ys, tazs)
    out = []
    for p, b, e, z in zip(parcels, bus_ids, edge_ids, taz_ids):
        n = estimate_vehicles(p.category, p.subcategory, manual_counts, table, scale, rep.warnings)
        if z is None:
            rep.unassigned.append(p.id)
        out.append(replace(p, vehicle_count=n, bus_id=b, edge_id=e, taz_id=z))
    if rep.unassigned:
        log.warning("%d parcels fall outside every TAZ", len(rep.unassigned))
    return out, rep


# ------------------------------------------------------------------- I/O

PARCEL_COLUMNS = ["id", "x", "y", "category", "subcategory"]
LINKED_COLUMNS = PARCEL_COLUMNS + ["bus_id", "edge_id", "taz_id", "vehicle_count"]


def read_parcels_csv(path) -> list[Parcel]:
    try:
        with open(path, newline="") as fh:
            out = []
            for r in csv.DictReader(fh):
                kw = dict(id=r["id"], x=float(r["x"]), y=float(r["y"]), category=r["category"],
                          subcategory=r["subcategory"])
                if "vehicle_count" in r:
                    kw.update(vehicle_count=int(r["vehicle_count"]), bus_id=r["bus_id"] or None,
                              edge_id=r["edge_id"] or None, taz_id=r["taz_id"] or None)
                out.append(Parcel(**kw))
            return out
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read parcels {path}: {exc}") from exc


def write_parcels_csv(parcels: list[Parcel], path, linked: bool = True):
    cols = LINKED_COLUMNS if linked else PARCEL_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for p in parcels:
            row = [p.id, repr(p.x), repr(p.y), p.category, p.subcategory]
            if linked:
                row += [p.bus_id or "", p.edge_id or "", p.taz_id or "", p.vehicle_count]
            w.writerow(row)


def write_tazs_json(tazs: list[TAZ], path):
    doc = [{"id": t.id, "census_tract_id": t.census_tract_id, "land_area": t.land_area,
            "rings": [[list(p) for p in r] for r in t.rings]} for t in tazs]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_tazs_json(path) -> list[TAZ]:
    try:
        doc = json.loads(Path(path).read_text())
        return [TAZ(str(d["id"]), tuple(tuple((float(x), float(y)) for x, y in r) for r in d["rings"]),
                    str(d.get("census_tract_id", "")), d.get("land_area")) for d in doc]
    except (OSError, KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read TAZs {path}: {exc}") from exc
