"""Link-queue traffic simulation with free-flow shortest-path routing.

Each road edge is a delayed FIFO queue.  A vehicle entering an edge travels
for the free-flow time ``length / speed`` and then joins the edge's exit
queue.  The exit queue discharges at the edge's saturation rate, and only
into a next edge that still has storage (spillback).  Vehicles are inserted
on their origin edge at their scheduled departure if the edge has room.
"""
from __future__ import annotations

import csv
import heapq
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_SATURATION_FLOW = 0.5  # veh/s/lane
DEFAULT_JAM_DENSITY = 0.145  # veh/m/lane
DEFAULT_MAX_SIM_TIME = 48 * 3600.0


class UnreachableError(DataError):
    pass


@dataclass(frozen=True)
class RoadNode:
    id: str
    x: float
    y: float


@dataclass(frozen=True)
class RoadEdge:
    id: str
    from_node: str
    to_node: str
    length: float  # m
    speed: float  # m/s
    lanes: int = 1
    saturation_flow: float = DEFAULT_SATURATION_FLOW
    jam_density: float = DEFAULT_JAM_DENSITY

    @property
    def free_flow_time(self) -> float:
        return self.length / self.speed

    @property
    def storage(self) -> int:
        return max(1, math.floor(self.length * self.lanes * self.jam_density))

    @property
    def discharge_rate(self) -> float:
        """Vehicles per second the exit queue can release."""
        return self.lanes * self.saturation_flow


@dataclass(frozen=True)
class RoadNetwork:
    nodes: tuple[RoadNode, ...] = ()
    edges: tuple[RoadEdge, ...] = ()

    def __post_init__(self):
        node_ids = [n.id for n in self.nodes]
        if len(set(node_ids)) != len(node_ids):
            raise DataError("duplicate road node id")
        seen = set()
        known = set(node_ids)
        for e in self.edges:
            if e.id in seen:
                raise DataError(f"duplicate road edge id {e.id!r}")
            seen.add(e.id)
            if e.from_node not in known or e.to_node not in known:
                raise DataError(f"edge {e.id!r} references an unknown node")
            if min(e.length, e.speed, e.saturation_flow, e.jam_density) <= 0 or e.lanes < 1:
                raise DataError(f"edge {e.id!r} has a nonpositive attribute")

    @cached_property
    def edge_map(self) -> dict[str, RoadEdge]:
        return {e.id: e for e in self.edges}

    @cached_property
    def node_map(self) -> dict[str, RoadNode]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def successors(self) -> dict[str, tuple[str, ...]]:
        """Edges that can follow each edge, sorted by id."""
        out_of: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            out_of[e.from_node].append(e.id)
        return {e.id: tuple(sorted(out_of[e.to_node])) for e in self.edges}


@dataclass(frozen=True)
class VehicleTrip:
    vehicle_id: str
    origin_edge: str
    dest_edge: str
    scheduled_departure: float
    route: tuple[str, ...] = ()
    is_electric: bool = False


@dataclass
class VehicleRecord:
    vehicle_id: str
    scheduled_departure: float
    insertion_time: float = math.nan
    arrival_time: float = math.nan
    waiting_time: float = 0.0
    route_length: float = 0.0
    free_flow_time: float = 0.0

    @property
    def arrived(self) -> bool:
        return not math.isnan(self.arrival_time)

    @property
    def departure_delay(self) -> float:
        return self.insertion_time - self.scheduled_departure

    @property
    def duration(self) -> float:
        return self.arrival_time - self.insertion_time

    @property
    def time_loss(self) -> float:
        return self.duration - self.free_flow_time


@dataclass
class StepLog:
    """Vehicle counts after each processed step (for the conservation check)."""

    time: list[float] = field(default_factory=list)
    inserted: list[int] = field(default_factory=list)
    arrived: list[int] = field(default_factory=list)
    en_route: list[int] = field(default_factory=list)
    queued: list[int] = field(default_factory=list)


@dataclass
class TrafficResult:
    records: list[VehicleRecord]
    dt: float
    end_time: float
    steps: StepLog = field(default_factory=StepLog)

    def cumulative_curves(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(times, cumulative insertions, cumulative arrivals) at every event time."""
        ins = np.sort([r.insertion_time for r in self.records if not math.isnan(r.insertion_time)])
        arr = np.sort([r.arrival_time for r in self.records if r.arrived])
        t = np.unique(np.concatenate([ins, arr]))
        return (t, np.searchsorted(ins, t, side="right"), np.searchsorted(arr, t, side="right"))


@dataclass(frozen=True)
class MetricsSummary:
    vehicles: int
    arrived: int
    unarrived: int
    complete: bool
    total_time_to_evacuate: float | None
    average_speed: float | None
    average_departure_delay: float | None
    average_duration: float | None
    average_waiting_time: float | None
    average_time_loss: float | None


# ------------------------------------------------------------------ routing

def _path(parent: dict[str, str | None], e: str) -> list[str]:
    out = []
    while e is not None:
        out.append(e)
        e = parent[e]
    return out[::-1]


def shortest_path_tree(net: RoadNetwork, origin: str) -> tuple[dict[str, float], dict[str, str | None]]:
    """Label-setting search over the edge graph from ``origin``.

    Cost of a path is the sum of free-flow times of all its edges including
    the first.  Equal-cost paths are resolved towards the lexicographically
    smaller edge-id sequence.
    """
    edges = net.edge_map
    if origin not in edges:
        raise DataError(f"unknown edge {origin!r}")
    succ = net.successors
    dist = {origin: edges[origin].free_flow_time}
    parent: dict[str, str | None] = {origin: None}
    done = set()
    heap = [(dist[origin], origin)]
    while heap:
        c, e = heapq.heappop(heap)
        if e in done:
            continue
        done.add(e)
        for f in succ[e]:
            if f in done:
                continue
            nc = c + edges[f].free_flow_time
            old = dist.get(f)
            if old is None or nc < old:
                dist[f] = nc
                parent[f] = e
                heapq.heappush(heap, (nc, f))
            elif nc == old and _path(parent, e) < _path(parent, parent[f]):
                parent[f] = e
    return dist, parent


def route_free_flow(net: RoadNetwork, origin_edge: str, dest_edge: str) -> tuple[str, ...]:
    return Router(net).route(origin_edge, dest_edge)


class Router:
    """Caches one shortest-path tree per origin edge."""

    def __init__(self, net: RoadNetwork):
        self.net = net
        self._trees: dict[str, tuple[dict, dict]] = {}

    def route(self, origin_edge: str, dest_edge: str) -> tuple[str, ...]:
        if dest_edge not in self.net.edge_map:
            raise DataError(f"unknown edge {dest_edge!r}")
        if origin_edge not in self._trees:
            self._trees[origin_edge] = shortest_path_tree(self.net, origin_edge)
        dist, parent = self._trees[origin_edge]
        if dest_edge not in dist:
            raise UnreachableError(f"{dest_edge!r} is unreachable from {origin_edge!r}")
        return tuple(_path(parent, dest_edge))


def route_cost(net: RoadNetwork, route) -> float:
    return sum(net.edge_map[e].free_flow_time for e in route)


# --------------------------------------------------------------- simulation

def _check_route(net: RoadNetwork, trip: VehicleTrip):
    r = trip.route
    if not r:
        raise DataError(f"trip {trip.vehicle_id!r} has no route")
    if r[0] != trip.origin_edge or r[-1] != trip.dest_edge:
        raise DataError(f"route of {trip.vehicle_id!r} does not join its origin and destination")
    edges = net.edge_map
    for a, b in zip(r, r[1:]):
        if a not in edges or b not in edges or edges[a].to_node != edges[b].from_node:
            raise DataError(f"route of {trip.vehicle_id!r} is not connected at {a!r}->{b!r}")
    if r[-1] not in edges:
        raise DataError(f"route of {trip.vehicle_id!r} uses unknown edge {r[-1]!r}")


def simulate_traffic(net: RoadNetwork, trips: list[VehicleTrip], dt: float = 1.0,
                     max_sim_time: float = DEFAULT_MAX_SIM_TIME, log_steps: bool = True) -> TrafficResult:
    """Step the link-queue model until every vehicle arrives or time runs out.

    Within a step, exit queues discharge first (edges in id order), then
    waiting vehicles are inserted.  A vehicle discharged at the first step
    at which it is ready leaves at its exact ready time; otherwise it leaves
    at the step time and the difference is counted as waiting time.  The
    same rule applies to insertion.  Discharge capacity accrues as a
    fractional credit of ``lanes * saturation_flow * dt`` per step, capped at
    ``max(1, that rate)``, so rates below one vehicle per step still flow.
    """
    if not dt > 0:
        raise NumericalError("dt must be positive")
    for t in trips:
        _check_route(net, t)

    edges = net.edge_map
    eids = sorted(edges)
    cap = {e: edges[e].storage for e in eids}
    rate = {e: edges[e].discharge_rate * dt for e in eids}
    credit_max = {e: max(1.0, rate[e]) for e in eids}
    credit = dict(credit_max)
    credit_step = {e: 0 for e in eids}
    occ = {e: 0 for e in eids}
    queue: dict[str, deque] = {e: deque() for e in eids}

    order = sorted(range(len(trips)), key=lambda i: (trips[i].scheduled_departure, trips[i].vehicle_id))
    records = [VehicleRecord(t.vehicle_id, t.scheduled_departure,
                             route_length=sum(edges[e].length for e in t.route),
                             free_flow_time=route_cost(net, t.route)) for t in trips]
    pos = [0] * len(trips)  # index into route of the current edge
    ready = [0.0] * len(trips)
    travelling: list[tuple[float, str, int]] = []  # heap of (ready time, vehicle id, index)
    waiting: dict[str, deque] = {}  # origin edge -> vehicles due for insertion
    nonempty_queues: set[str] = set()
    next_dep = 0
    n_inserted = n_arrived = n_queued = 0
    steps = StepLog()

    def first_step(t: float) -> int:
        return math.ceil(t / dt - 1e-9)

    def enter(i: int, e: str, when: float):
        occ[e] += 1
        ready[i] = when + edges[e].free_flow_time
        heapq.heappush(travelling, (ready[i], trips[i].vehicle_id, i))

    k = 0
    k_max = math.floor(max_sim_time / dt + 1e-9)
    while k <= k_max:
        t_now = k * dt
        # vehicles whose free-flow time has elapsed join their exit queue
        while travelling and first_step(travelling[0][0]) <= k:
            _, _, i = heapq.heappop(travelling)
            e = trips[i].route[pos[i]]
            queue[e].append((k, i))
            nonempty_queues.add(e)
            n_queued += 1

        for e in sorted(nonempty_queues):
            q = queue[e]
            credit[e] = min(credit_max[e], credit[e] + (k - credit_step[e]) * rate[e])
            credit_step[e] = k
            while q and credit[e] >= 1.0 - 1e-12:
                _, i = q[0]
                route = trips[i].route
                last = pos[i] == len(route) - 1
                if not last and occ[route[pos[i] + 1]] >= cap[route[pos[i] + 1]]:
                    break
                q.popleft()
                n_queued -= 1
                credit[e] -= 1.0
                occ[e] -= 1
                when = ready[i] if first_step(ready[i]) == k else t_now
                records[i].waiting_time += when - ready[i]
                if last:
                    records[i].arrival_time = when
                    n_arrived += 1
                else:
                    pos[i] += 1
                    enter(i, route[pos[i]], when)
            if not q:
                nonempty_queues.discard(e)

        while next_dep < len(order) and first_step(trips[order[next_dep]].scheduled_departure) <= k:
            i = order[next_dep]
            waiting.setdefault(trips[i].origin_edge, deque()).append(i)
            next_dep += 1
        for e in sorted(waiting):
            w = waiting[e]
            while w and occ[e] < cap[e]:
                i = w.popleft()
                dep = trips[i].scheduled_departure
                when = dep if first_step(dep) == k else t_now
                records[i].insertion_time = when
                n_inserted += 1
                enter(i, e, when)
            if not w:
                del waiting[e]

        if log_steps:
            steps.time.append(t_now)
            steps.inserted.append(n_inserted)
            steps.arrived.append(n_arrived)
            steps.queued.append(n_queued)
            steps.en_route.append(n_inserted - n_arrived - n_queued)

        if n_arrived == len(trips):
            break
        # skip ahead over steps where nothing can happen
        if nonempty_queues or waiting:
            k += 1
        else:
            cand = []
            if travelling:
                cand.append(first_step(travelling[0][0]))
            if next_dep < len(order):
                cand.append(first_step(trips[order[next_dep]].scheduled_departure))
            k = max(k + 1, min(cand)) if cand else k + 1

    unarrived = len(trips) - n_arrived
    if unarrived:
        log.warning("%d vehicles had not arrived at the end of the simulation", unarrived)
    return TrafficResult(records=records, dt=dt, end_time=min(k, k_max) * dt, steps=steps)


def traffic_metrics(result: TrafficResult) -> MetricsSummary:
    recs = result.records
    if not recs:
        raise DataError("traffic result has no vehicles")
    done = [r for r in recs if r.arrived]

    def mean(vals):
        return float(np.mean(vals)) if vals else None

    total = None
    if done:
        total = max(r.arrival_time for r in done) - min(r.scheduled_departure for r in recs)
    return MetricsSummary(
        vehicles=len(recs),
        arrived=len(done),
        unarrived=len(recs) - len(done),
        complete=len(done) == len(recs),
        total_time_to_evacuate=total,
        average_speed=mean([r.route_length / r.duration for r in done]),
        average_departure_delay=mean([r.departure_delay for r in done]),
        average_duration=mean([r.duration for r in done]),
        average_waiting_time=mean([r.waiting_time for r in done]),
        average_time_loss=mean([r.time_loss for r in done]),
    )


# --------------------------------------------------------------------- I/O

def network_to_dict(net: RoadNetwork) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "nodes": [{"id": n.id, "x": n.x, "y": n.y} for n in net.nodes],
        "edges": [{"id": e.id, "from_node": e.from_node, "to_node": e.to_node, "length": e.length,
                   "speed": e.speed, "lanes": e.lanes, "saturation_flow": e.saturation_flow,
                   "jam_density": e.jam_density} for e in net.edges],
    }


def network_from_dict(doc: dict) -> RoadNetwork:
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported road format version {doc.get('format_version')!r}")
    try:
        nodes = tuple(RoadNode(str(n["id"]), float(n["x"]), float(n["y"])) for n in doc["nodes"])
        edges = tuple(RoadEdge(str(e["id"]), str(e["from_node"]), str(e["to_node"]), float(e["length"]),
                               float(e["speed"]), int(e.get("lanes", 1)),
                               float(e.get("saturation_flow", DEFAULT_SATURATION_FLOW)),
                               float(e.get("jam_density", DEFAULT_JAM_DENSITY))) for e in doc["edges"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed road network: {exc}") from exc
    return RoadNetwork(nodes, edges)


def write_road_network(net: RoadNetwork, path):
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")


def read_road_network(path) -> RoadNetwork:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read road network {path}: {exc}") from exc
    return network_from_dict(doc)


RECORD_COLUMNS = ["vehicle_id", "scheduled_departure", "insertion_time", "arrival_time", "departure_delay",
                  "duration", "waiting_time", "time_loss", "route_length"]


def write_records_csv(result: TrafficResult, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in result.records:
            w.writerow([r.vehicle_id] + [_fmt(v) for v in (
                r.scheduled_departure, r.insertion_time, r.arrival_time, r.departure_delay, r.duration,
                r.waiting_time, r.time_loss, r.route_length)])


def write_curves_csv(result: TrafficResult, path):
    t, ins, arr = result.cumulative_curves()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "cumulative_departures", "cumulative_arrivals"])
        for row in zip(t, ins, arr):
            w.writerow([_fmt(row[0]), int(row[1]), int(row[2])])


def write_trips_csv(trips: list[VehicleTrip], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "origin_edge", "dest_edge", "scheduled_departure", "is_electric", "route"])
        for t in trips:
            w.writerow([t.vehicle_id, t.origin_edge, t.dest_edge, repr(t.scheduled_departure),
                        int(t.is_electric), " ".join(t.route)])


def read_trips_csv(path) -> list[VehicleTrip]:
    with open(path, newline="") as fh:
        return [VehicleTrip(r["vehicle_id"], r["origin_edge"], r["dest_edge"], float(r["scheduled_departure"]),
                            tuple(r["route"].split()), r["is_electric"] == "1") for r in csv.DictReader(fh)]


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))
