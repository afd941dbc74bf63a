"""Distribution network data model, validation and charging-load injection.

A network is a set of radial feeders.  Each feeder is a tree of buses whose
root bus is held at a fixed voltage by the transmission interface; branches
are oriented from the root towards the leaves.
"""
from __future__ import annotations

import json
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1
PHASES = ("A", "B", "C")
PHASE_INDEX = {p: i for i, p in enumerate(PHASES)}
BRANCH_KINDS = ("line", "transformer")
LOAD_KINDS = ("base", "ev_charging")


class NetworkValidationError(DataError):
    pass


@dataclass(frozen=True)
class Bus:
    id: str
    feeder_id: str
    x: float
    y: float
    phases: tuple[str, ...] = PHASES
    base_voltage: float = 7200.0  # line-to-neutral volts
    vmin_pu: float = 0.95
    vmax_pu: float = 1.05


@dataclass(frozen=True)
class Branch:
    """Line or transformer.

    ``impedance`` is a 3x3 phase-frame series impedance in ohms.  For
    transformers it is referred to the ``to_bus`` side and the ideal part has
    ratio ``tap_ratio[p] * to_base / from_base`` per phase.
    """

    id: str
    from_bus: str
    to_bus: str
    kind: str
    impedance: tuple[tuple[complex, ...], ...]
    i_rated: float
    tap_ratio: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @cached_property
    def z_matrix(self) -> np.ndarray:
        return np.array(self.impedance, dtype=complex)


@dataclass(frozen=True)
class Load:
    bus_id: str
    phase_kw: tuple[float, float, float]
    phase_kvar: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: str = "base"


@dataclass(frozen=True)
class Capacitor:
    id: str
    bus_id: str
    kvar_per_phase: float
    switched_on: bool = False
    v_on_pu: float = 0.97
    v_off_pu: float = 1.05


@dataclass(frozen=True)
class Regulator:
    id: str
    branch_id: str
    regulated_bus: str
    target_pu: float = 1.0
    band_pu: float = 0.01
    step_count: int = 16
    step_size: float = 0.00625
    tap_position: int = 0

    @property
    def ratio(self) -> float:
        return 1.0 + self.tap_position * self.step_size


@dataclass(frozen=True)
class Substation:
    id: str
    x: float
    y: float
    feeders: tuple[str, ...] = ()


@dataclass(frozen=True)
class DistributionNetwork:
    buses: tuple[Bus, ...] = ()
    branches: tuple[Branch, ...] = ()
    loads: tuple[Load, ...] = ()
    capacitors: tuple[Capacitor, ...] = ()
    regulators: tuple[Regulator, ...] = ()
    source_bus: str = "TX"
    substations: tuple[Substation, ...] = ()

    @cached_property
    def bus_map(self) -> dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def branch_map(self) -> dict[str, Branch]:
        return {br.id: br for br in self.branches}

    def total_load_kw(self, kind: str | None = None) -> float:
        return sum(sum(ld.phase_kw) for ld in self.loads if kind is None or ld.kind == kind)


@dataclass(frozen=True)
class Violation:
    kind: str
    subject: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def add(self, kind: str, subject: str, message: str) -> None:
        self.violations.append(Violation(kind, subject, message))

    def __len__(self) -> int:
        return len(self.violations)

    def __str__(self) -> str:
        return "\n".join(f"[{v.kind}] {v.subject}: {v.message}" for v in self.violations)


@dataclass(frozen=True)
class FeederTree:
    """One radial feeder, buses listed root first in breadth-first order."""

    feeder_id: str
    root: str
    order: tuple[str, ...]
    parent_branch: dict[str, str]
    buses: dict[str, Bus]
    branches: dict[str, Branch]
    loads: tuple[Load, ...] = ()
    capacitors: tuple[Capacitor, ...] = ()
    regulators: tuple[Regulator, ...] = ()

    def __len__(self) -> int:
        return len(self.order)


def _is_symmetric(z: tuple[tuple[complex, ...], ...]) -> bool:
    m = np.array(z, dtype=complex)
    return m.shape == (3, 3) and bool(np.allclose(m, m.T, rtol=1e-12, atol=1e-12))


def validate_network(net: DistributionNetwork) -> ValidationReport:
    """Collect every structural problem in ``net``; an empty report means valid."""
    rep = ValidationReport()

    buses: dict[str, Bus] = {}
    for b in net.buses:
        if b.id in buses:
            rep.add("duplicate-id", b.id, "bus id used more than once")
            continue
        buses[b.id] = b
        if not b.base_voltage > 0:
            rep.add("nonpositive-rating", b.id, f"base_voltage {b.base_voltage} must be > 0")
        if not b.phases or any(p not in PHASE_INDEX for p in b.phases):
            rep.add("bad-phases", b.id, f"phases {b.phases!r} must be a nonempty subset of A,B,C")
        if not (b.vmin_pu < 1.0 < b.vmax_pu):
            rep.add("bad-limits", b.id, "voltage limits must satisfy vmin_pu < 1 < vmax_pu")

    seen_branch: set[str] = set()
    incoming: dict[str, list[str]] = defaultdict(list)
    adjacency: dict[str, list[str]] = defaultdict(list)
    for br in net.branches:
        if br.id in seen_branch:
            rep.add("duplicate-id", br.id, "branch id used more than once")
            continue
        seen_branch.add(br.id)
        if br.kind not in BRANCH_KINDS:
            rep.add("bad-kind", br.id, f"branch kind {br.kind!r}")
        if not br.i_rated > 0:
            rep.add("nonpositive-rating", br.id, f"i_rated {br.i_rated} must be > 0")
        if br.from_bus == br.to_bus:
            rep.add("self-loop", br.id, "from_bus equals to_bus")
            continue
        missing = [x for x in (br.from_bus, br.to_bus) if x not in buses]
        for m in missing:
            rep.add("dangling-reference", br.id, f"references missing bus {m!r}")
        if not _is_symmetric(br.impedance):
            rep.add("bad-impedance", br.id, "impedance must be a symmetric 3x3 matrix")
        if any(not (0.9 <= t <= 1.1) for t in br.tap_ratio):
            rep.add("bad-tap", br.id, f"tap ratio {br.tap_ratio} outside [0.9, 1.1]")
        if missing:
            continue
        fb, tb = buses[br.from_bus], buses[br.to_bus]
        if not set(tb.phases) <= set(fb.phases):
            rep.add("phase-mismatch", br.id, f"{tb.id} phases not a subset of {fb.id} phases")
        if br.kind == "line" and not np.isclose(fb.base_voltage, tb.base_voltage):
            rep.add("voltage-mismatch", br.id, "line joins buses with different base voltages")
        incoming[br.to_bus].append(br.id)
        adjacency[br.from_bus].append(br.to_bus)
        adjacency[br.to_bus].append(br.from_bus)

    for bus_id, brs in incoming.items():
        if len(brs) > 1:
            rep.add("multiple-parents", bus_id, f"fed by {sorted(brs)}")

    # connected components over the undirected branch graph
    component: dict[str, int] = {}
    comps: list[list[str]] = []
    for start in sorted(buses):
        if start in component:
            continue
        idx = len(comps)
        members = [start]
        component[start] = idx
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in adjacency[u]:
                if v not in component:
                    component[v] = idx
                    members.append(v)
                    queue.append(v)
        comps.append(members)

    edge_count = [0] * len(comps)
    for br in net.branches:
        if br.from_bus in component and br.to_bus in component and br.from_bus != br.to_bus:
            edge_count[component[br.from_bus]] += 1
    feeder_components: dict[str, set[int]] = defaultdict(set)
    for idx, members in enumerate(comps):
        if edge_count[idx] >= len(members):
            rep.add("cycle", members[0], f"component of {len(members)} buses has {edge_count[idx]} branches")
        feeders = {buses[m].feeder_id for m in members}
        if len(feeders) > 1:
            rep.add("mixed-feeder", members[0], f"component spans feeders {sorted(feeders)}")
        for f in feeders:
            feeder_components[f].add(idx)
    for f, idxs in sorted(feeder_components.items()):
        if len(idxs) > 1:
            rep.add("disconnected", f, f"feeder split into {len(idxs)} disconnected parts")

    for ld in net.loads:
        if ld.bus_id not in buses:
            rep.add("dangling-reference", ld.bus_id, "load references missing bus")
            continue
        if ld.kind not in LOAD_KINDS:
            rep.add("bad-kind", ld.bus_id, f"load kind {ld.kind!r}")
        if ld.kind == "base" and any(kw < 0 for kw in ld.phase_kw):
            rep.add("negative-load", ld.bus_id, "base load kW must be nonnegative")
        phases = buses[ld.bus_id].phases
        for i, p in enumerate(PHASES):
            if p not in phases and (ld.phase_kw[i] != 0 or ld.phase_kvar[i] != 0):
                rep.add("phase-mismatch", ld.bus_id, f"load on absent phase {p}")

    cap_ids: set[str] = set()
    for cap in net.capacitors:
        if cap.id in cap_ids:
            rep.add("duplicate-id", cap.id, "capacitor id used more than once")
        cap_ids.add(cap.id)
        if cap.bus_id not in buses:
            rep.add("dangling-reference", cap.id, f"references missing bus {cap.bus_id!r}")
        if not cap.v_on_pu < cap.v_off_pu:
            rep.add("bad-limits", cap.id, "v_on_pu must be below v_off_pu")

    branch_map = {br.id: br for br in net.branches}
    reg_ids: set[str] = set()
    for reg in net.regulators:
        if reg.id in reg_ids:
            rep.add("duplicate-id", reg.id, "regulator id used more than once")
        reg_ids.add(reg.id)
        br = branch_map.get(reg.branch_id)
        if br is None:
            rep.add("dangling-reference", reg.id, f"references missing branch {reg.branch_id!r}")
        elif br.kind != "transformer":
            rep.add("bad-kind", reg.id, "regulator must sit on a transformer")
        elif not np.allclose(br.tap_ratio, reg.ratio, rtol=0, atol=1e-12):
            rep.add("bad-tap", reg.id, "branch tap ratio disagrees with regulator position")
        if reg.regulated_bus not in buses:
            rep.add("dangling-reference", reg.id, f"references missing bus {reg.regulated_bus!r}")
        if not reg.band_pu > 0:
            rep.add("bad-limits", reg.id, "band_pu must be > 0")
        if abs(reg.tap_position) > reg.step_count:
            rep.add("bad-tap", reg.id, "tap position beyond step_count")
    return rep


def feeder_partition(net: DistributionNetwork) -> list[FeederTree]:
    """Split a valid network into its radial feeders, sorted by feeder id."""
    rep = validate_network(net)
    if not rep.ok:
        raise NetworkValidationError(f"network failed validation:\n{rep}")
    if not net.buses:
        return []

    children: dict[str, list[tuple[str, str]]] = defaultdict(list)
    parent_branch: dict[str, str] = {}
    for br in net.branches:
        children[br.from_bus].append((br.to_bus, br.id))
        parent_branch[br.to_bus] = br.id
    for kids in children.values():
        kids.sort()

    by_feeder: dict[str, list[Bus]] = defaultdict(list)
    for b in net.buses:
        by_feeder[b.feeder_id].append(b)
    loads_by_bus: dict[str, list[Load]] = defaultdict(list)
    for ld in net.loads:
        loads_by_bus[ld.bus_id].append(ld)

    trees = []
    for fid in sorted(by_feeder):
        members = by_feeder[fid]
        roots = sorted(b.id for b in members if b.id not in parent_branch)
        root = roots[0]
        order = [root]
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v, _ in children[u]:
                order.append(v)
                queue.append(v)
        member_ids = set(order)
        brs = {parent_branch[b]: net.branch_map[parent_branch[b]] for b in order[1:]}
        trees.append(FeederTree(
            feeder_id=fid,
            root=root,
            order=tuple(order),
            parent_branch={b: parent_branch[b] for b in order[1:]},
            buses={b: net.bus_map[b] for b in order},
            branches=brs,
            loads=tuple(ld for b in order for ld in loads_by_bus[b]),
            capacitors=tuple(c for c in net.capacitors if c.bus_id in member_ids),
            regulators=tuple(r for r in net.regulators if r.branch_id in brs),
        ))
    return trees


def charging_load(bus: Bus, kw: float, pf_kvar_ratio: float = 0.0) -> Load:
    """Constant-power EV load split equally over the phases present at ``bus``."""
    share = kw / len(bus.phases)
    pkw = tuple(share if p in bus.phases else 0.0 for p in PHASES)
    pkvar = tuple(v * pf_kvar_ratio for v in pkw)
    return Load(bus_id=bus.id, phase_kw=pkw, phase_kvar=pkvar, kind="ev_charging")


def apply_charging_loads(net: DistributionNetwork, charging: dict[str, float],
                         kvar_per_kw: float = 0.0) -> DistributionNetwork:
    """Return ``net`` with its EV loads replaced by ``charging`` (bus id -> kW).

    Base loads are kept as they are.  Existing ``ev_charging`` loads are
    dropped first, so applying the same map twice equals applying it once.
    """
    unknown = sorted(b for b in charging if b not in net.bus_map)
    if unknown:
        raise DataError(f"charging map references unknown buses: {unknown[:5]}")
    kept = tuple(ld for ld in net.loads if ld.kind != "ev_charging")
    added = tuple(charging_load(net.bus_map[b], kw, kvar_per_kw)
                  for b, kw in sorted(charging.items()) if kw != 0)
    return replace(net, loads=kept + added)


# ---------------------------------------------------------------- interchange

def _cpx_pair(z: complex) -> list[float]:
    return [float(z.real), float(z.imag)]


def network_to_dict(net: DistributionNetwork) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "source_bus": net.source_bus,
        "substations": [
            {"id": s.id, "x": s.x, "y": s.y, "feeders": list(s.feeders)} for s in net.substations
        ],
        "buses": [
            {"id": b.id, "feeder_id": b.feeder_id, "x": b.x, "y": b.y, "phases": list(b.phases),
             "base_voltage": b.base_voltage, "vmin_pu": b.vmin_pu, "vmax_pu": b.vmax_pu}
            for b in net.buses
        ],
        "branches": [
            {"id": br.id, "from_bus": br.from_bus, "to_bus": br.to_bus, "kind": br.kind,
             "impedance": [[_cpx_pair(z) for z in row] for row in br.impedance],
             "i_rated": br.i_rated, "tap_ratio": list(br.tap_ratio)}
            for br in net.branches
        ],
        "loads": [
            {"bus_id": ld.bus_id, "kind": ld.kind, "phase_kw": list(ld.phase_kw),
             "phase_kvar": list(ld.phase_kvar)}
            for ld in net.loads
        ],
        "capacitors": [
            {"id": c.id, "bus_id": c.bus_id, "kvar_per_phase": c.kvar_per_phase,
             "switched_on": c.switched_on, "v_on_pu": c.v_on_pu, "v_off_pu": c.v_off_pu}
            for c in net.capacitors
        ],
        "regulators": [
            {"id": r.id, "branch_id": r.branch_id, "regulated_bus": r.regulated_bus,
             "target_pu": r.target_pu, "band_pu": r.band_pu, "step_count": r.step_count,
             "step_size": r.step_size, "tap_position": r.tap_position}
            for r in net.regulators
        ],
    }


def network_from_dict(doc: dict) -> DistributionNetwork:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported network format_version {version!r}")
    try:
        buses = tuple(
            Bus(id=str(b["id"]), feeder_id=str(b["feeder_id"]), x=float(b["x"]), y=float(b["y"]),
                phases=tuple(b.get("phases", PHASES)), base_voltage=float(b["base_voltage"]),
                vmin_pu=float(b.get("vmin_pu", 0.95)), vmax_pu=float(b.get("vmax_pu", 1.05)))
            for b in doc.get("buses", [])
        )
        branches = tuple(
            Branch(id=str(br["id"]), from_bus=str(br["from_bus"]), to_bus=str(br["to_bus"]),
                   kind=br["kind"],
                   impedance=tuple(tuple(complex(re, im) for re, im in row) for row in br["impedance"]),
                   i_rated=float(br["i_rated"]),
                   tap_ratio=tuple(float(t) for t in br.get("tap_ratio", (1.0, 1.0, 1.0))))
            for br in doc.get("branches", [])
        )
        loads = tuple(
            Load(bus_id=str(ld["bus_id"]), kind=ld.get("kind", "base"),
                 phase_kw=tuple(float(v) for v in ld["phase_kw"]),
                 phase_kvar=tuple(float(v) for v in ld.get("phase_kvar", (0.0, 0.0, 0.0))))
            for ld in doc.get("loads", [])
        )
        caps = tuple(
            Capacitor(id=str(c["id"]), bus_id=str(c["bus_id"]), kvar_per_phase=float(c["kvar_per_phase"]),
                      switched_on=bool(c.get("switched_on", False)), v_on_pu=float(c["v_on_pu"]),
                      v_off_pu=float(c["v_off_pu"]))
            for c in doc.get("capacitors", [])
        )
        regs = tuple(
            Regulator(id=str(r["id"]), branch_id=str(r["branch_id"]), regulated_bus=str(r["regulated_bus"]),
                      target_pu=float(r["target_pu"]), band_pu=float(r["band_pu"]),
                      step_count=int(r["step_count"]), step_size=float(r["step_size"]),
                      tap_position=int(r.get("tap_position", 0)))
            for r in doc.get("regulators", [])
        )
        subs = tuple(
            Substation(id=str(s["id"]), x=float(s["x"]), y=float(s["y"]), feeders=tuple(s.get("feeders", ())))
            for s in doc.get("substations", [])
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed network document: {exc}") from exc
    return DistributionNetwork(buses=buses, branches=branches, loads=loads, capacitors=caps,
                               regulators=regs, source_bus=str(doc.get("source_bus", "TX")),
                               substations=subs)


def write_network(net: DistributionNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n", encoding="utf-8")


def read_network(path: str | Path) -> DistributionNetwork:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"network file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"network file is not valid JSON: {path}: {exc}") from exc
    return network_from_dict(doc)
