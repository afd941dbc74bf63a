"""Scenario configuration and its materialisation into vehicles and charging loads.

Random draws are keyed by ``(seed, purpose, vehicle_id)`` through a hash, so
a vehicle's draw does not depend on how many other vehicles exist or in
which order they are generated.  Because a vehicle is electric when its draw
falls below the EV fraction, raising the fraction only ever adds EVs.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adoption import CASES, TazEvProfile, extend_to_extreme
from .errors import ConfigError, DataError
from .linker import Parcel

FIXED_RATE_SENTINEL = -1


@dataclass
class ScenarioConfig:
    scenario_name: str
    working_dir: str = "."
    ev_penetration_rate: float = FIXED_RATE_SENTINEL
    year_prediction: int | None = None
    prediction_level: str | None = None
    load_per_charging_ev: float = 7.2  # kW
    charging_time: float = 8 * 3600.0  # s before departure
    departure_window: float = 2 * 3600.0  # s
    tazs_to_evacuate: list[str] = field(default_factory=list)
    evac_edge: str = ""
    rng_seed: int = 0
    interval_length: float = 900.0  # s
    extreme_rate: float = 0.8
    controls: bool = True
    coverage_radius: float = 3000.0  # m
    traffic_dt: float = 1.0
    max_sim_time: float = 48 * 3600.0
    dataset_dir: str = "city"  # relative to working_dir

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.scenario_name or any(c in self.scenario_name for c in "/\\"):
            raise ConfigError("scenario_name must be a plain non-empty name")
        r = self.ev_penetration_rate
        if r == FIXED_RATE_SENTINEL:
            if self.prediction_level not in CASES:
                raise ConfigError(f"prediction_level must be one of {CASES} when ev_penetration_rate is -1")
            if self.year_prediction is None:
                raise ConfigError("year_prediction is required with a prediction_level")
        elif 0.0 <= r <= 1.0:
            if self.prediction_level:
                raise ConfigError("set either a fixed ev_penetration_rate or a prediction_level, not both")
        else:
            raise ConfigError("ev_penetration_rate must be in [0, 1] or -1")
        if self.load_per_charging_ev <= 0:
            raise ConfigError("load_per_charging_ev must be positive")
        if self.charging_time < 0 or self.departure_window < 0:
            raise ConfigError("charging_time and departure_window must be nonnegative")
        if self.interval_length <= 0 or self.traffic_dt <= 0 or self.max_sim_time <= 0:
            raise ConfigError("interval_length, traffic_dt and max_sim_time must be positive")
        if not 0.0 <= self.extreme_rate <= 1.0:
            raise ConfigError("extreme_rate must be in [0, 1]")
        if self.coverage_radius < 0:
            raise ConfigError("coverage_radius must be nonnegative")

    @property
    def fixed_rate(self) -> bool:
        return self.ev_penetration_rate != FIXED_RATE_SENTINEL

    @property
    def run_dir(self) -> Path:
        return Path(self.working_dir) / self.scenario_name

    @property
    def data_dir(self) -> Path:
        return Path(self.working_dir) / self.dataset_dir

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def read_config(path) -> ScenarioConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return ScenarioConfig.from_dict(doc)


def write_config(cfg: ScenarioConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


@dataclass(frozen=True)
class SimVehicle:
    vehicle_id: str
    parcel_id: str
    taz_id: str
    bus_id: str | None  # None when the parcel is outside grid coverage
    origin_edge: str
    is_electric: bool
    scheduled_departure: float = 0.0
    charge_start: float | None = None
    charge_end: float | None = None


def keyed_uniform(seed: int, purpose: str, key: str) -> float:
    """Deterministic U[0, 1) draw for one (seed, purpose, key) triple."""
    h = hashlib.blake2b(f"{seed}|{purpose}|{key}".encode(), digest_size=8).digest()
    return (int.from_bytes(h, "big") >> 11) / float(1 << 53)


def generate_vehicles(config: ScenarioConfig, parcels: list[Parcel], profiles: list[TazEvProfile] | None = None,
                      covered: set[str] | None = None) -> list[SimVehicle]:
    """Vehicles of every parcel in an evacuated TAZ, each flagged electric or not.

    With a prediction level, ``profiles`` holds that level's fractions (the
    high-case fractions for the extreme level).  ``covered`` limits which
    parcels are attached to the grid; None means all of them.
    """
    evac = set(config.tazs_to_evacuate)
    frac: dict[str, float] = {}
    if not config.fixed_rate:
        for p in profiles or []:
            if p.year == config.year_prediction:
                frac[p.taz_id] = p.ev_fraction
        missing = sorted(z for z in evac if z not in frac)
        if missing:
            raise DataError(f"no {config.prediction_level} profile for {config.year_prediction} in TAZs {missing}")
    out = []
    for p in sorted(parcels, key=lambda p: p.id):
        if p.taz_id not in evac:
            continue
        f = config.ev_penetration_rate if config.fixed_rate else frac[p.taz_id]
        bus = p.bus_id if covered is None or p.id in covered else None
        for k in range(p.vehicle_count):
            vid = f"{p.id}-{k}"
            ev = keyed_uniform(config.rng_seed, "electric", vid) < f
            out.append(SimVehicle(vid, p.id, p.taz_id, bus, p.edge_id, ev))
    if config.prediction_level == "extreme" and out:
        flags = extend_to_extreme([v.vehicle_id for v in out], [v.is_electric for v in out],
                                  config.extreme_rate, config.rng_seed)
        out = [SimVehicle(v.vehicle_id, v.parcel_id, v.taz_id, v.bus_id, v.origin_edge, f)
               for v, f in zip(out, flags)]
    return out


def assign_schedules(vehicles: list[SimVehicle], config: ScenarioConfig) -> list[SimVehicle]:
    """Uniform departures over the window; EVs charge for ``charging_time`` up to departure."""
    out = []
    w = config.departure_window
    for v in vehicles:
        dep = w * keyed_uniform(config.rng_seed, "departure", v.vehicle_id) if w > 0 else 0.0
        if v.is_electric:
            out.append(SimVehicle(v.vehicle_id, v.parcel_id, v.taz_id, v.bus_id, v.origin_edge, True,
                                  dep, dep - config.charging_time, dep))
        else:
            out.append(SimVehicle(v.vehicle_id, v.parcel_id, v.taz_id, v.bus_id, v.origin_edge, False, dep))
    return out


@dataclass
class ChargingSeries:
    """Per-interval EV counts by bus on a grid fixed by the configuration.

    Interval ``j`` covers ``[origin + j * L, origin + (j + 1) * L)``.  The
    origin is ``-charging_time``, the earliest a charge can start, so runs
    that share a configuration share the same interval grid whatever their
    random draws.
    """

    origin: float
    interval_length: float
    n_intervals: int
    load_per_ev: float
    counts: dict[int, dict[str, int]] = field(default_factory=dict)

    def kw(self, interval: int) -> dict[str, float]:
        return {b: n * self.load_per_ev for b, n in sorted(self.counts.get(interval, {}).items())}

    def total_kw(self, interval: int) -> float:
        return sum(self.counts.get(interval, {}).values()) * self.load_per_ev

    def start(self, interval: int) -> float:
        return self.origin + interval * self.interval_length


def series_grid(config: ScenarioConfig) -> tuple[float, int]:
    span = config.charging_time + config.departure_window
    n = max(1, math.ceil(span / config.interval_length - 1e-9))
    return -config.charging_time, n


def build_charging_series(vehicles: list[SimVehicle], config: ScenarioConfig) -> ChargingSeries:
    origin, n = series_grid(config)
    L = config.interval_length
    if not vehicles:
        return ChargingSeries(origin, L, 0, config.load_per_charging_ev)
    s = ChargingSeries(origin, L, n, config.load_per_charging_ev)
    for v in vehicles:
        if not v.is_electric or v.bus_id is None or config.charging_time <= 0:
            continue
        # offsets from the origin: the window is [dep, dep + charging_time) there
        a = v.scheduled_departure
        b = v.scheduled_departure + config.charging_time
        first = math.floor(a / L)
        last = math.ceil(b / L) - 1
        for j in range(max(first, 0), min(last, n - 1) + 1):
            bucket = s.counts.setdefault(j, {})
            bucket[v.bus_id] = bucket.get(v.bus_id, 0) + 1
    return s


# -------------------------------------------------------------------- I/O

VEHICLE_COLUMNS = ["vehicle_id", "parcel_id", "taz_id", "bus_id", "origin_edge", "is_electric",
                   "scheduled_departure", "charge_start", "charge_end"]


def write_vehicles_csv(vehicles: list[SimVehicle], path):
    def f(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VEHICLE_COLUMNS)
        for v in vehicles:
            w.writerow([v.vehicle_id, v.parcel_id, v.taz_id, v.bus_id or "", v.origin_edge, int(v.is_electric),
                        f(v.scheduled_departure), f(v.charge_start), f(v.charge_end)])


def read_vehicles_csv(path) -> list[SimVehicle]:
    def f(s):
        return float(s) if s else None

    try:
        with open(path, newline="") as fh:
            return [SimVehicle(r["vehicle_id"], r["parcel_id"], r["taz_id"], r["bus_id"] or None, r["origin_edge"],
                               r["is_electric"] == "1", float(r["scheduled_departure"]), f(r["charge_start"]),
                               f(r["charge_end"])) for r in csv.DictReader(fh)]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read vehicles {path}: {exc}") from exc


def write_series_csv(series: ChargingSeries, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval", "start_s", "bus_id", "ev_count", "kw"])
        for j in range(series.n_intervals):
            for bus, n in sorted(series.counts.get(j, {}).items()):
                w.writerow([j, repr(series.start(j)), bus, n, repr(n * series.load_per_ev)])


def read_series_csv(path, config: ScenarioConfig, n_intervals: int | None = None) -> ChargingSeries:
    origin, n = series_grid(config)
    s = ChargingSeries(origin, config.interval_length, n if n_intervals is None else n_intervals,
                       config.load_per_charging_ev)
    try:
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                s.counts.setdefault(int(r["interval"]), {})[r["bus_id"]] = int(r["ev_count"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read charging series {path}: {exc}") from exc
    return s
