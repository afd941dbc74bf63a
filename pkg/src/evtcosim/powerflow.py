"""Unbalanced three-phase power flow for radial feeders.

The solver is a forward-backward sweep.  Each iteration computes load currents
from the present voltage estimate, accumulates branch currents from the leaves
to the root (backward), then recomputes voltages from the root down (forward).
Loads are constant power; switched capacitors are constant admittance.

Transformers are ideal per-phase ratios followed by a series impedance on the
secondary side.  Regulators and capacitors are adjusted one discrete step at a
time by :func:`run_discrete_controls`.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import NumericalError
from .grid import (
    PHASES,
    Branch,
    DistributionNetwork,
    FeederTree,
    NetworkValidationError,
)

log = logging.getLogger(__name__)

S_BASE_VA = 1.0e6  # per-phase power base for per-unit currents
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
DEFAULT_MAX_ROUNDS = 30
DEFAULT_UNDERVOLTAGE_PU = 0.95

_ROT = np.exp(-2j * np.pi / 3 * np.arange(3))
BUCKETS = ("0-10%", "10-50%", "50-100%", ">100%")


class PowerFlowError(NumericalError):
    pass


@dataclass
class PowerFlowSolution:
    bus_voltages: dict[str, np.ndarray]
    branch_currents: dict[str, np.ndarray]
    converged: bool
    iterations: int
    max_mismatch: float
    base_voltages: dict[str, float] = field(default_factory=dict)

    def voltage_pu(self, bus_id: str) -> np.ndarray:
        return np.abs(self.bus_voltages[bus_id]) / self.base_voltages[bus_id]


class Overload(NamedTuple):
    branch_id: str
    severity: float
    bucket: str
    phase: str = ""


class Undervoltage(NamedTuple):
    bus_id: str
    phase: str
    v_pu: float


@dataclass
class ViolationReport:
    overloads: list[Overload] = field(default_factory=list)
    undervoltages: list[Undervoltage] = field(default_factory=list)
    interval_index: int = 0

    def bucket_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(BUCKETS, 0)
        for ov in self.overloads:
            counts[ov.bucket] += 1
        return counts


class ControlAction(NamedTuple):
    round: int
    device: str
    device_id: str
    action: str
    value: int
    monitored_pu: float


@dataclass
class ControlLog:
    actions: list[ControlAction] = field(default_factory=list)
    rounds: int = 0
    cap_hit: bool = False


# ------------------------------------------------------------------ compile

@dataclass
class _Compiled:
    ids: list[str]
    branch_ids: list[str | None]
    parent: np.ndarray
    levels: list[np.ndarray]
    z: np.ndarray       # (n, 3, 3) ohms
    ratio: np.ndarray   # (n, 3) ideal ratio from parent, 0 on absent phases
    mask: np.ndarray    # (n, 3) bool
    vbase: np.ndarray   # (n,)
    s_load: np.ndarray  # (n, 3) VA, constant power
    y_shunt: np.ndarray  # (n, 3) siemens, constant admittance


def _compile(feeder: FeederTree) -> _Compiled:
    ids = list(feeder.order)
    if not ids:
        raise NetworkValidationError(f"feeder {feeder.feeder_id} has no buses")
    index = {b: i for i, b in enumerate(ids)}
    if len(index) != len(ids) or ids[0] != feeder.root:
        raise NetworkValidationError(f"feeder {feeder.feeder_id}: bad bus ordering")
    n = len(ids)
    parent = np.full(n, -1, dtype=int)
    depth = np.zeros(n, dtype=int)
    z = np.zeros((n, 3, 3), dtype=complex)
    ratio = np.zeros((n, 3))
    mask = np.zeros((n, 3), dtype=bool)
    vbase = np.empty(n)
    branch_ids: list[str | None] = [None] * n

    for i, b in enumerate(ids):
        bus = feeder.buses[b]
        vbase[i] = bus.base_voltage
        for p in bus.phases:
            mask[i, PHASES.index(p)] = True
        if i == 0:
            if b in feeder.parent_branch:
                raise NetworkValidationError(f"feeder {feeder.feeder_id}: root {b} has a parent")
            continue
        br_id = feeder.parent_branch.get(b)
        br = feeder.branches.get(br_id) if br_id is not None else None
        if br is None or br.to_bus != b:
            raise NetworkValidationError(f"feeder {feeder.feeder_id}: bus {b} has no feeding branch")
        j = index.get(br.from_bus)
        if j is None or j >= i:
            raise NetworkValidationError(
                f"feeder {feeder.feeder_id}: branch {br.id} is not radial from the root")
        parent[i] = j
        depth[i] = depth[j] + 1
        branch_ids[i] = br.id
        zm = br.z_matrix * np.outer(mask[i], mask[i])
        z[i] = zm
        if br.kind == "transformer":
            sub = zm[np.ix_(mask[i], mask[i])]
            if abs(np.linalg.det(sub)) < 1e-18:
                raise PowerFlowError(f"transformer {br.id} has a singular series impedance")
            nominal = bus.base_voltage / feeder.buses[br.from_bus].base_voltage
            ratio[i] = np.asarray(br.tap_ratio) * nominal
        else:
            ratio[i] = 1.0
        ratio[i] *= mask[i]

    s_load = np.zeros((n, 3), dtype=complex)
    for ld in feeder.loads:
        i = index[ld.bus_id]
        s_load[i] += (np.asarray(ld.phase_kw) + 1j * np.asarray(ld.phase_kvar)) * 1e3
    y_shunt = np.zeros((n, 3), dtype=complex)
    for cap in feeder.capacitors:
        if cap.switched_on:
            i = index[cap.bus_id]
            y_shunt[i] += 1j * cap.kvar_per_phase * 1e3 / vbase[i] ** 2 * mask[i]

    levels = [np.flatnonzero(depth == d) for d in range(1, int(depth.max()) + 1)]
    return _Compiled(ids, branch_ids, parent, levels, z, ratio, mask, vbase, s_load, y_shunt)


def _load_currents(c: _Compiled, v: np.ndarray) -> np.ndarray:
    cur = np.zeros_like(v)
    m = c.mask
    cur[m] = np.conj(c.s_load[m] / v[m])
    return cur + c.y_shunt * v


def _backward(c: _Compiled, i_load: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Branch (secondary-side) currents into every bus, and the root outflow."""
    acc = np.zeros_like(i_load)
    i_br = np.zeros_like(i_load)
    for lvl in reversed(c.levels):
        i_br[lvl] = i_load[lvl] + acc[lvl]
        np.add.at(acc, c.parent[lvl], c.ratio[lvl] * i_br[lvl])
    return i_br, acc[0]


def _forward(c: _Compiled, v_root: np.ndarray, i_br: np.ndarray) -> np.ndarray:
    v = np.zeros_like(i_br)
    v[0] = v_root
    for lvl in c.levels:
        v[lvl] = c.ratio[lvl] * v[c.parent[lvl]] - np.einsum("nij,nj->ni", c.z[lvl], i_br[lvl])
    return v


def _root_voltage(c: _Compiled, source_voltage_pu: float) -> np.ndarray:
    return source_voltage_pu * c.vbase[0] * _ROT * c.mask[0]


def solve_feeder(feeder: FeederTree, source_voltage_pu: float = 1.0, *,
                 tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> PowerFlowSolution:
    """Solve one radial feeder with its root held at ``source_voltage_pu``.

    Convergence is declared when the largest per-unit change of any phase
    voltage between two sweeps is at most ``tol``.  A feeder that has not
    converged after ``max_iter`` sweeps is returned with ``converged=False``.
    """
    c = _compile(feeder)
    v_root = _root_voltage(c, source_voltage_pu)
    # flat start through the ideal ratios
    v = np.zeros((len(c.ids), 3), dtype=complex)
    v[0] = v_root
    for lvl in c.levels:
        v[lvl] = c.ratio[lvl] * v[c.parent[lvl]]

    converged = False
    mismatch = np.inf
    it = 0
    i_br = np.zeros_like(v)
    with np.errstate(all="ignore"):
        for it in range(1, max_iter + 1):
            i_br, _ = _backward(c, _load_currents(c, v))
            v_new = _forward(c, v_root, i_br)
            mismatch = float(np.max(np.abs(v_new - v) / c.vbase[:, None]))
            v = v_new
            if not np.isfinite(mismatch):
                break
            if mismatch <= tol:
                converged = True
                break
        if converged:
            # currents consistent with the final voltages
            i_br, _ = _backward(c, _load_currents(c, v))

    base = {b: float(c.vbase[i]) for i, b in enumerate(c.ids)}
    volts = {b: v[i].copy() for i, b in enumerate(c.ids)}
    amps = {c.branch_ids[i]: i_br[i].copy() for i in range(1, len(c.ids))}
    return PowerFlowSolution(volts, amps, converged, it, mismatch, base)


def _solution_arrays(c: _Compiled, sol: PowerFlowSolution) -> tuple[np.ndarray, np.ndarray]:
    v = np.array([sol.bus_voltages[b] for b in c.ids])
    i_br = np.zeros_like(v)
    for i in range(1, len(c.ids)):
        i_br[i] = sol.branch_currents[c.branch_ids[i]]
    return v, i_br


def kcl_residual_pu(feeder: FeederTree, sol: PowerFlowSolution) -> float:
    """Largest per-unit current imbalance over all buses and phases."""
    c = _compile(feeder)
    v, i_br = _solution_arrays(c, sol)
    i_load = _load_currents(c, v)
    outflow = np.zeros_like(v)
    np.add.at(outflow, c.parent[1:], c.ratio[1:] * i_br[1:])
    resid = i_br - i_load - outflow
    resid[0] = 0.0  # the root is the slack
    i_base = S_BASE_VA / c.vbase
    return float(np.max(np.abs(resid) / i_base[:, None]))


def power_balance(feeder: FeederTree, sol: PowerFlowSolution) -> dict[str, complex]:
    """Complex power (VA) injected at the source, consumed by loads and lost in branches."""
    c = _compile(feeder)
    v, i_br = _solution_arrays(c, sol)
    outflow = np.zeros_like(v)
    np.add.at(outflow, c.parent[1:], c.ratio[1:] * i_br[1:])
    source = complex(np.sum(v[0] * np.conj(outflow[0])))
    load = complex(np.sum(v * np.conj(_load_currents(c, v))))
    drop = np.einsum("nij,nj->ni", c.z, i_br)
    losses = complex(np.sum(drop * np.conj(i_br)))
    return {"source": source, "load": load, "losses": losses}


# ----------------------------------------------------------------- controls

def _mean_pu(sol: PowerFlowSolution, bus_id: str, feeder: FeederTree) -> float:
    bus = feeder.buses[bus_id]
    v = sol.voltage_pu(bus_id)
    return float(np.mean([v[PHASES.index(p)] for p in bus.phases]))


def set_regulator_tap(feeder: FeederTree, reg_id: str, position: int) -> FeederTree:
    regs = []
    target = None
    for r in feeder.regulators:
        if r.id == reg_id:
            target = replace(r, tap_position=position)
            regs.append(target)
        else:
            regs.append(r)
    if target is None:
        raise KeyError(reg_id)
    br: Branch = feeder.branches[target.branch_id]
    branches = dict(feeder.branches)
    branches[br.id] = replace(br, tap_ratio=(target.ratio,) * 3)
    return replace(feeder, regulators=tuple(regs), branches=branches)


def run_discrete_controls(feeder: FeederTree, source_voltage_pu: float = 1.0, *,
                          max_rounds: int = DEFAULT_MAX_ROUNDS, tol: float = DEFAULT_TOL,
                          max_iter: int = DEFAULT_MAX_ITER,
                          ) -> tuple[FeederTree, PowerFlowSolution, ControlLog]:
    """Alternate power-flow solves with single-step device adjustments.

    In each round every regulator whose monitored voltage (mean of the
    regulated bus phases) lies outside ``target +/- band`` moves one tap step
    toward the band, then every capacitor crossing its on/off threshold
    toggles.  Regulators act in id order, then capacitors in id order.  The
    loop stops when no device asks for a change or after ``max_rounds``.
    """
    clog = ControlLog()
    sol = solve_feeder(feeder, source_voltage_pu, tol=tol, max_iter=max_iter)
    for rnd in range(1, max_rounds + 1):
        if not sol.converged:
            raise PowerFlowError(
                f"feeder {feeder.feeder_id} did not converge during control round {rnd}")
        clog.rounds = rnd
        actions: list[ControlAction] = []
        for reg in sorted(feeder.regulators, key=lambda r: r.id):
            vm = _mean_pu(sol, reg.regulated_bus, feeder)
            pos = reg.tap_position
            if vm < reg.target_pu - reg.band_pu and pos < reg.step_count:
                actions.append(ControlAction(rnd, "regulator", reg.id, "tap_up", pos + 1, vm))
            elif vm > reg.target_pu + reg.band_pu and pos > -reg.step_count:
                actions.append(ControlAction(rnd, "regulator", reg.id, "tap_down", pos - 1, vm))
        for cap in sorted(feeder.capacitors, key=lambda k: k.id):
            vm = _mean_pu(sol, cap.bus_id, feeder)
            if not cap.switched_on and vm < cap.v_on_pu:
                actions.append(ControlAction(rnd, "capacitor", cap.id, "cap_on", 1, vm))
            elif cap.switched_on and vm > cap.v_off_pu:
                actions.append(ControlAction(rnd, "capacitor", cap.id, "cap_off", 0, vm))
        if not actions:
            return feeder, sol, clog
        for act in actions:
            if act.device == "regulator":
                feeder = set_regulator_tap(feeder, act.device_id, act.value)
            else:
                feeder = replace(feeder, capacitors=tuple(
                    replace(k, switched_on=bool(act.value)) if k.id == act.device_id else k
                    for k in feeder.capacitors))
        clog.actions.extend(actions)
        sol = solve_feeder(feeder, source_voltage_pu, tol=tol, max_iter=max_iter)
    clog.cap_hit = True
    log.warning("feeder %s: control round cap (%d) reached", feeder.feeder_id, max_rounds)
    return feeder, sol, clog


# --------------------------------------------------------------- violations

def severity_bucket(severity: float) -> str:
    """Bucket an overload severity; upper edges are inclusive."""
    if not severity > 0:
        raise ValueError(f"overload severity must be positive, got {severity}")
    if severity <= 0.10:
        return BUCKETS[0]
    if severity <= 0.50:
        return BUCKETS[1]
    if severity <= 1.00:
        return BUCKETS[2]
    return BUCKETS[3]


def detect_violations(solution: PowerFlowSolution, net: DistributionNetwork | FeederTree,
                      v_threshold_pu: float | None = DEFAULT_UNDERVOLTAGE_PU,
                      interval_index: int = 0) -> ViolationReport:
    """List overloaded branches and undervoltage bus phases in ``solution``.

    A branch is overloaded when its largest phase current strictly exceeds
    ``i_rated``.  With ``v_threshold_pu=None`` each bus's own ``vmin_pu`` is
    used as the undervoltage threshold.
    """
    if not solution.converged:
        raise PowerFlowError("cannot detect violations on an unconverged solution")
    if isinstance(net, FeederTree):
        buses, branches = net.buses, net.branches
    else:
        buses, branches = net.bus_map, net.branch_map

    report = ViolationReport(interval_index=interval_index)
    for br_id in sorted(solution.branch_currents):
        amps = np.abs(solution.branch_currents[br_id])
        k = int(np.argmax(amps))
        rated = branches[br_id].i_rated
        if amps[k] > rated:
            sev = float((amps[k] - rated) / rated)
            report.overloads.append(Overload(br_id, sev, severity_bucket(sev), PHASES[k]))
    for bus_id in sorted(solution.bus_voltages):
        bus = buses[bus_id]
        thr = bus.vmin_pu if v_threshold_pu is None else v_threshold_pu
        vpu = solution.voltage_pu(bus_id)
        for p in bus.phases:
            val = float(vpu[PHASES.index(p)])
            if val < thr:
                report.undervoltages.append(Undervoltage(bus_id, p, val))
    return report


def merge_reports(reports: list[ViolationReport], interval_index: int) -> ViolationReport:
    out = ViolationReport(interval_index=interval_index)
    for r in reports:
        out.overloads.extend(r.overloads)
        out.undervoltages.extend(r.undervoltages)
    out.overloads.sort()
    out.undervoltages.sort()
    return out


VIOLATION_COLUMNS = ("interval", "component_id", "kind", "phase", "severity_or_vpu", "bucket")


def write_violations_csv(reports: list[ViolationReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VIOLATION_COLUMNS)
        for rep in reports:
            for ov in rep.overloads:
                w.writerow([rep.interval_index, ov.branch_id, "overload", ov.phase, repr(ov.severity), ov.bucket])
            for uv in rep.undervoltages:
                w.writerow([rep.interval_index, uv.bus_id, "undervoltage", uv.phase, repr(uv.v_pu), ""])


def read_violations_csv(path, intervals: list[int] | None = None) -> list[ViolationReport]:
    by_interval: dict[int, ViolationReport] = {}
    if intervals is not None:
        for k in intervals:
            by_interval[k] = ViolationReport(interval_index=k)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            k = int(row["interval"])
            rep = by_interval.setdefault(k, ViolationReport(interval_index=k))
            if row["kind"] == "overload":
                rep.overloads.append(Overload(row["component_id"], float(row["severity_or_vpu"]),
                                              row["bucket"], row["phase"]))
            else:
                rep.undervoltages.append(Undervoltage(row["component_id"], row["phase"],
                                                      float(row["severity_or_vpu"])))
    return [by_interval[k] for k in sorted(by_interval)]
