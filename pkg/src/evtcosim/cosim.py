"""Workflow stages: link, predict, scenario, simulate, report, compare.

Every stage reads its inputs from files and writes its outputs to files, so
any stage can be re-run on its own once its inputs exist.  Dataset-level
stages (link, predict) write into the dataset directory; run-level stages
write into ``working_dir/scenario_name``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import adoption, linker, traffic
from .errors import DataError, StageOrderError
from .grid import DistributionNetwork, FeederTree, charging_load, feeder_partition, read_network
from .powerflow import (
    BUCKETS,
    PowerFlowError,
    ViolationReport,
    detect_violations,
    merge_reports,
    read_violations_csv,
    run_discrete_controls,
    solve_feeder,
    write_violations_csv,
)
from .scenario import (
    ChargingSeries,
    ScenarioConfig,
    assign_schedules,
    build_charging_series,
    generate_vehicles,
    read_series_csv,
    write_config,
    write_series_csv,
    write_vehicles_csv,
)
from .synth import FILES

log = logging.getLogger(__name__)

NO_TAZ = "__none__"

# dataset-level outputs
LINKED = "parcels_linked.csv"
LINK_REPORT = "link_report.json"
PROFILES = {"base": "profiles_base.csv", "medium": "profiles_medium.csv", "high": "profiles_high.csv"}

# run-level outputs
RUN_FILES = {
    "config": "scenario.json",
    "vehicles": "vehicles.csv",
    "trips": "trips.csv",
    "series": "charging_series.csv",
    "scenario_report": "scenario_report.json",
    "records": "traffic_records.csv",
    "curves": "traffic_curves.csv",
    "metrics": "traffic_metrics.json",
    "violations": "violations.csv",
    "intervals": "power_intervals.csv",
    "histogram": "severity_histogram.csv",
    "controls": "control_actions.csv",
    "run_report": "run_report.json",
    "taz_map": "taz_overloads.csv",
    "summary": "summary.json",
}


def _dump(doc, path: Path):
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _load(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageOrderError(f"{path.name} not found in {path.parent}; run the {stage} stage first")
    return path


def _need_data(path: Path) -> Path:
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    return path


# -------------------------------------------------------------------- link

def run_link(data_dir) -> linker.LinkReport:
    d = Path(data_dir)
    net = read_network(_need_data(d / FILES["grid"]))
    roads = traffic.read_road_network(_need_data(d / FILES["roads"]))
    parcels = linker.read_parcels_csv(_need_data(d / FILES["parcels"]))
    tazs = linker.read_tazs_json(_need_data(d / FILES["tazs"]))
    manual = linker.load_manual_counts(d / FILES["manual"]) if (d / FILES["manual"]).exists() else None
    linked, rep = linker.link_parcels(parcels, linker.linkable_buses(net), roads, tazs, manual)
    linker.write_parcels_csv(linked, d / LINKED)
    _dump({"parcels": len(linked), "vehicles": sum(p.vehicle_count for p in linked),
           "unassigned": rep.unassigned, "warnings": rep.warnings}, d / LINK_REPORT)
    return rep


# ----------------------------------------------------------------- predict

def run_predict(data_dir) -> dict[str, list[adoption.TazEvProfile]]:
    d = Path(data_dir)
    params = _load(_need_data(d / FILES["adoption"]))
    ages = adoption.read_age_table_csv(_need_data(d / FILES["ages"]))
    tracts = adoption.read_tracts_csv(_need_data(d / FILES["tracts"]), ages)
    market = adoption.read_market_csv(_need_data(d / FILES["market"]), float(params["county_share"]))
    curves = adoption.read_curves_csv(_need_data(d / FILES["curves"]))
    out = {"base": adoption.base_case_fractions(tracts, market, int(params["start_year"]),
                                                int(params["base_target_year"]), int(params["seed_evs"]))}
    for case in ("medium", "high"):
        out[case] = [p for y in sorted(curves[case].penetration_by_year)
                     for p in adoption.curve_case_fractions(tracts, curves[case], market, y)]
    for case, prof in out.items():
        adoption.write_profiles_csv(prof, d / PROFILES[case])
    return out


# ---------------------------------------------------------------- scenario

def covered_parcels(parcels: list[linker.Parcel], net: DistributionNetwork, radius: float) -> set[str]:
    """Parcels whose linked bus lies within ``radius`` metres."""
    bm = net.bus_map
    out = set()
    for p in parcels:
        b = bm.get(p.bus_id) if p.bus_id else None
        if b is not None and math.hypot(p.x - b.x, p.y - b.y) <= radius:
            out.add(p.id)
    return out


def profiles_for(config: ScenarioConfig) -> list[adoption.TazEvProfile] | None:
    if config.fixed_rate:
        return None
    case = "high" if config.prediction_level == "extreme" else config.prediction_level
    return adoption.read_profiles_csv(_need(config.data_dir / PROFILES[case], "predict"))


def run_scenario_stage(config: ScenarioConfig) -> dict:
    """Vehicles, routes and the charging series for one scenario."""
    d = config.data_dir
    run = config.run_dir
    run.mkdir(parents=True, exist_ok=True)
    parcels = linker.read_parcels_csv(_need(d / LINKED, "link"))
    net = read_network(_need_data(d / FILES["grid"]))
    roads = traffic.read_road_network(_need_data(d / FILES["roads"]))
    if config.tazs_to_evacuate and config.evac_edge not in roads.edge_map:
        raise DataError(f"evac_edge {config.evac_edge!r} is not in the road network")

    covered = covered_parcels(parcels, net, config.coverage_radius)
    vehicles = assign_schedules(generate_vehicles(config, parcels, profiles_for(config), covered), config)
    router = traffic.Router(roads)
    trips, unreachable = [], []
    for v in vehicles:
        try:
            route = router.route(v.origin_edge, config.evac_edge)
        except traffic.UnreachableError:
            unreachable.append(v.vehicle_id)
            continue
        trips.append(traffic.VehicleTrip(v.vehicle_id, v.origin_edge, config.evac_edge, v.scheduled_departure,
                                         route, v.is_electric))
    series = build_charging_series(vehicles, config)

    write_config(config, run / RUN_FILES["config"])
    write_vehicles_csv(vehicles, run / RUN_FILES["vehicles"])
    traffic.write_trips_csv(trips, run / RUN_FILES["trips"])
    write_series_csv(series, run / RUN_FILES["series"])
    evs = [v for v in vehicles if v.is_electric]
    report = {
        "vehicles": len(vehicles),
        "evs": len(evs),
        "evs_connected": sum(v.bus_id is not None for v in evs),
        "n_intervals": series.n_intervals,
        "unreachable_vehicles": unreachable,
    }
    _dump(report, run / RUN_FILES["scenario_report"])
    if unreachable:
        log.warning("%d vehicles cannot reach %s", len(unreachable), config.evac_edge)
    return report


# ----------------------------------------------------------------- power

@dataclass
class IntervalResult:
    index: int
    report: ViolationReport
    unconverged: list[str] = field(default_factory=list)
    actions: list[tuple] = field(default_factory=list)
    cap_hits: list[str] = field(default_factory=list)


def with_charging(tree: FeederTree, kw_by_bus: dict[str, float]) -> FeederTree:
    """Base feeder plus constant-power EV loads; skips re-validating the network."""
    if not kw_by_bus:
        return tree
    extra = tuple(charging_load(tree.buses[b], kw) for b, kw in sorted(kw_by_bus.items()) if kw)
    return replace(tree, loads=tree.loads + extra)


def solve_interval_feeder(tree: FeederTree, kw_by_bus: dict[str, float], controls: bool, index: int):
    """(violations or None when unconverged, control actions, cap hit)."""
    ft = with_charging(tree, kw_by_bus)
    try:
        if controls:
            ft, sol, clog = run_discrete_controls(ft)
            actions, cap_hit = clog.actions, clog.cap_hit
        else:
            sol = solve_feeder(ft)
            actions, cap_hit = [], False
    except PowerFlowError:
        return None, [], False
    if not sol.converged:
        return None, [], False
    return detect_violations(sol, ft, interval_index=index), actions, cap_hit


class _PowerJob:
    """Picklable per-process worker holding the feeders and the series."""

    def __init__(self, trees: list[FeederTree], series: ChargingSeries, controls: bool):
        self.trees = trees
        self.series = series
        self.controls = controls
        self.owner = {b: t.feeder_id for t in trees for b in t.buses}
        # identical EV maps recur across intervals (plateaus, idle feeders)
        self.cache: dict[tuple, tuple] = {}

    def __call__(self, j: int) -> IntervalResult:
        by_feeder: dict[str, dict[str, float]] = {}
        for b, kw in self.series.kw(j).items():
            try:
                by_feeder.setdefault(self.owner[b], {})[b] = kw
            except KeyError:
                raise DataError(f"charging series references unknown bus {b!r}") from None
        parts, res = [], IntervalResult(j, ViolationReport(interval_index=j))
        for t in self.trees:
            kw = by_feeder.get(t.feeder_id, {})
            key = (t.feeder_id, tuple(sorted(kw.items())))
            if key not in self.cache:
                self.cache[key] = solve_interval_feeder(t, kw, self.controls, j)
            rep, actions, cap_hit = self.cache[key]
            if rep is None:
                res.unconverged.append(t.feeder_id)
                continue
            parts.append(rep)
            res.actions += [(j, t.feeder_id, *a) for a in actions]
            if cap_hit:
                res.cap_hits.append(t.feeder_id)
        res.report = merge_reports(parts, j)
        return res


def run_power(net: DistributionNetwork, series: ChargingSeries, controls: bool, jobs: int = 1) -> list[IntervalResult]:
    """Solve every interval of ``series``; results come back in interval order whatever ``jobs`` is."""
    job = _PowerJob(feeder_partition(net), series, controls)
    idx = list(range(series.n_intervals))
    if jobs <= 1 or len(idx) < 2:
        return [job(j) for j in idx]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(job, idx, chunksize=max(1, len(idx) // (4 * jobs))))


# --------------------------------------------------------------- simulate

def run_simulate(config: ScenarioConfig, jobs: int = 1) -> dict:
    run = config.run_dir
    d = config.data_dir
    _need(run / RUN_FILES["series"], "scenario")
    roads = traffic.read_road_network(_need_data(d / FILES["roads"]))
    net = read_network(_need_data(d / FILES["grid"]))
    trips = traffic.read_trips_csv(_need(run / RUN_FILES["trips"], "scenario"))
    n = _load(run / RUN_FILES["scenario_report"])["n_intervals"]
    series = read_series_csv(run / RUN_FILES["series"], config, n)

    # traffic
    result = traffic.simulate_traffic(roads, trips, dt=config.traffic_dt, max_sim_time=config.max_sim_time,
                                      log_steps=False)
    traffic.write_records_csv(result, run / RUN_FILES["records"])
    traffic.write_curves_csv(result, run / RUN_FILES["curves"])
    metrics = asdict(traffic.traffic_metrics(result)) if trips else None
    _dump(metrics, run / RUN_FILES["metrics"])

    # power
    results = run_power(net, series, config.controls, jobs)
    reports = [r.report for r in results]
    write_violations_csv(reports, run / RUN_FILES["violations"])
    write_severity_histogram(reports, run / RUN_FILES["histogram"])
    with open(run / RUN_FILES["intervals"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval", "start_s", "ev_kw", "overloads", "undervoltages", "unconverged_feeders"])
        for r in results:
            w.writerow([r.index, repr(series.start(r.index)), repr(series.total_kw(r.index)),
                        len(r.report.overloads), len(r.report.undervoltages), ";".join(r.unconverged)])
    with open(run / RUN_FILES["controls"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval", "feeder", "round", "device", "device_id", "action", "value", "monitored_pu"])
        for r in results:
            for a in r.actions:
                w.writerow([*a[:-1], repr(float(a[-1]))])

    scen = _load(run / RUN_FILES["scenario_report"])
    run_report = {
        "scenario_name": config.scenario_name,
        "controls": config.controls,
        "vehicles": scen["vehicles"],
        "evs": scen["evs"],
        "evs_connected": scen["evs_connected"],
        "unreachable_vehicles": scen["unreachable_vehicles"],
        "n_intervals": series.n_intervals,
        "interval_length": series.interval_length,
        "origin_s": series.origin,
        "unconverged": [{"interval": r.index, "feeder": f} for r in results for f in r.unconverged],
        "control_cap_hits": [{"interval": r.index, "feeder": f} for r in results for f in r.cap_hits],
        "warnings": [],
    }
    if metrics and not metrics["complete"]:
        run_report["warnings"].append(f"{metrics['unarrived']} vehicles did not arrive by max_sim_time")
    if run_report["unconverged"]:
        run_report["warnings"].append(f"{len(run_report['unconverged'])} feeder solves did not converge")
    _dump(run_report, run / RUN_FILES["run_report"])
    return run_report


def write_severity_histogram(reports: list[ViolationReport], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval", *BUCKETS, "total"])
        for r in reports:
            c = r.bucket_counts()
            w.writerow([r.interval_index, *(c[b] for b in BUCKETS), len(r.overloads)])


# ------------------------------------------------------------------ bundle

@dataclass
class ResultBundle:
    run_dir: Path
    metrics: traffic.MetricsSummary | None
    power: list[ViolationReport]
    severity_histogram: list[dict[str, int]]
    run_report: dict
    interval_length: float
    origin: float
    taz_overload_counts: dict[str, int] = field(default_factory=dict)

    def start(self, j: int) -> float:
        return self.origin + j * self.interval_length

    @property
    def overload_counts(self) -> list[int]:
        return [len(r.overloads) for r in self.power]

    @property
    def undervoltage_counts(self) -> list[int]:
        return [len(r.undervoltages) for r in self.power]


def load_bundle(run_dir) -> ResultBundle:
    run = Path(run_dir)
    report = _load(_need(run / RUN_FILES["run_report"], "simulate"))
    n = report["n_intervals"]
    power = read_violations_csv(run / RUN_FILES["violations"], list(range(n)))
    m = _load(run / RUN_FILES["metrics"])
    metrics = traffic.MetricsSummary(**m) if m else None
    return ResultBundle(run, metrics, power, [r.bucket_counts() for r in power], report,
                        float(report["interval_length"]), float(report["origin_s"]))


def branch_taz_index(net: DistributionNetwork, parcels: list[linker.Parcel]) -> dict[str, str]:
    """Branch id -> TAZ of the parcel nearest the branch's downstream bus."""
    ps = sorted(parcels, key=lambda p: p.id)
    if not ps:
        return {br.id: NO_TAZ for br in net.branches}
    px = np.array([p.x for p in ps])
    py = np.array([p.y for p in ps])
    out = {}
    bm = net.bus_map
    for br in net.branches:
        b = bm[br.to_bus]
        k = int(np.argmin((px - b.x) ** 2 + (py - b.y) ** 2))
        out[br.id] = ps[k].taz_id or NO_TAZ
    return out


def taz_overload_map(bundle: ResultBundle, parcels: list[linker.Parcel], net: DistributionNetwork,
                     interval: int, index: dict[str, str] | None = None) -> dict[str, int]:
    if not 0 <= interval < len(bundle.power):
        raise DataError(f"interval {interval} outside 0..{len(bundle.power) - 1}")
    index = branch_taz_index(net, parcels) if index is None else index
    out: dict[str, int] = {}
    for ov in bundle.power[interval].overloads:
        z = index.get(ov.branch_id, NO_TAZ)
        out[z] = out.get(z, 0) + 1
    return dict(sorted(out.items()))


def run_report_stage(config: ScenarioConfig) -> dict:
    """Per-TAZ overload counts per interval and a summary of the run."""
    run = config.run_dir
    bundle = load_bundle(run)
    parcels = linker.read_parcels_csv(_need(config.data_dir / LINKED, "link"))
    net = read_network(_need_data(config.data_dir / FILES["grid"]))
    index = branch_taz_index(net, parcels)
    totals: dict[str, int] = {}
    with open(run / RUN_FILES["taz_map"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval", "taz_id", "overloads"])
        for j in range(len(bundle.power)):
            for z, c in taz_overload_map(bundle, parcels, net, j, index).items():
                w.writerow([j, z, c])
                totals[z] = max(totals.get(z, 0), c)
    ov, uv = bundle.overload_counts, bundle.undervoltage_counts
    summary = {
        "scenario_name": config.scenario_name,
        "traffic": asdict(bundle.metrics) if bundle.metrics else None,
        "evs": bundle.run_report["evs"],
        "evs_connected": bundle.run_report["evs_connected"],
        "peak_overloads": max(ov, default=0),
        "peak_undervoltages": max(uv, default=0),
        "total_overloads": sum(ov),
        "total_undervoltages": sum(uv),
        "bucket_totals": {b: sum(h[b] for h in bundle.severity_histogram) for b in BUCKETS},
        "taz_peak_overloads": dict(sorted(totals.items())),
    }
    _dump(summary, run / RUN_FILES["summary"])
    return summary


# ----------------------------------------------------------------- compare

@dataclass
class ComparisonReport:
    rows: list[dict]
    evac_time_a: float | None
    evac_time_b: float | None

    @property
    def evac_delta(self) -> float | None:
        if self.evac_time_a is None or self.evac_time_b is None:
            return None
        return self.evac_time_b - self.evac_time_a

    @property
    def evac_delta_pct(self) -> float | None:
        d = self.evac_delta
        return None if d is None or not self.evac_time_a else 100.0 * d / self.evac_time_a


COMPARE_COLUMNS = ["start_s", "overloads_a", "overloads_b", "overload_delta", "undervoltages_a",
                   "undervoltages_b", "undervoltage_delta"] + [f"delta_{b}" for b in BUCKETS]


def compare_runs(a: ResultBundle, b: ResultBundle) -> ComparisonReport:
    """Per-interval deltas (b minus a) on a shared absolute time axis.

    Runs may cover different spans but must share the interval length and
    have aligned interval edges.  Where only one run has an interval the
    other side is left empty.
    """
    if not math.isclose(a.interval_length, b.interval_length):
        raise DataError("runs use different interval lengths")
    shift = (b.origin - a.origin) / a.interval_length
    if not math.isclose(shift, round(shift), abs_tol=1e-9):
        raise DataError("run interval grids are not aligned")
    ta = {a.start(j): j for j in range(len(a.power))}
    tb = {b.start(j): j for j in range(len(b.power))}
    rows = []
    for t in sorted(set(ta) | set(tb)):
        ra = a.power[ta[t]] if t in ta else None
        rb = b.power[tb[t]] if t in tb else None
        row = {"start_s": t,
               "overloads_a": len(ra.overloads) if ra else None,
               "overloads_b": len(rb.overloads) if rb else None,
               "undervoltages_a": len(ra.undervoltages) if ra else None,
               "undervoltages_b": len(rb.undervoltages) if rb else None}
        both = ra is not None and rb is not None
        row["overload_delta"] = row["overloads_b"] - row["overloads_a"] if both else None
        row["undervoltage_delta"] = row["undervoltages_b"] - row["undervoltages_a"] if both else None
        ca, cb = (ra.bucket_counts() if ra else None), (rb.bucket_counts() if rb else None)
        for k in BUCKETS:
            row[f"delta_{k}"] = cb[k] - ca[k] if both else None
        rows.append(row)
    ev_a = a.metrics.total_time_to_evacuate if a.metrics else None
    ev_b = b.metrics.total_time_to_evacuate if b.metrics else None
    return ComparisonReport(rows, ev_a, ev_b)


def write_comparison(rep: ComparisonReport, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_COLUMNS)
        for r in rep.rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in COMPARE_COLUMNS])
    _dump({"evac_time_a": rep.evac_time_a, "evac_time_b": rep.evac_time_b, "evac_delta_s": rep.evac_delta,
           "evac_delta_pct": rep.evac_delta_pct}, d / "comparison.json")


# ------------------------------------------------------------------ driver

def run_all(config: ScenarioConfig, jobs: int = 1, relink: bool = False) -> ResultBundle:
    """Scenario, simulate and report, preparing link and predict outputs when missing."""
    d = config.data_dir
    if relink or not (d / LINKED).exists():
        run_link(d)
    if not config.fixed_rate and (relink or not all((d / f).exists() for f in PROFILES.values())):
        run_predict(d)
    run_scenario_stage(config)
    run_simulate(config, jobs)
    run_report_stage(config)
    return load_bundle(config.run_dir)

