"""EV adoption projections per traffic analysis zone.

Counts are kept as integers wherever they are split between areas: tract
totals are allocated with the largest-remainder rule, then scaled by the
share of the tract inside the study area and split equally between the
tract's TAZs.  A TAZ fraction is its EV count over its fleet size.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DataError

CASES = ("base", "medium", "high", "extreme")


@dataclass(frozen=True)
class CensusTract:
    id: str
    households: int
    median_income: float
    mean_income: float
    land_area_in_study: float
    taz_ids: tuple[str, ...]
    avg_vehicle_age_by_year: dict[int, float] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.households < 0 or self.median_income <= 0 or self.mean_income <= 0:
            raise DataError(f"tract {self.id!r} has invalid households or incomes")
        if not 0.0 <= self.land_area_in_study <= 1.0:
            raise DataError(f"tract {self.id!r} land area fraction outside [0, 1]")
        if not self.taz_ids:
            raise DataError(f"tract {self.id!r} lists no TAZs")


@dataclass(frozen=True)
class MarketHistory:
    ev_share_by_year: dict[int, float]
    fleet_total_by_year: dict[int, int]
    county_share: float

    def __post_init__(self):
        if any(not 0.0 <= v <= 1.0 for v in self.ev_share_by_year.values()):
            raise DataError("EV sales share outside [0, 1]")
        if any(v <= 0 for v in self.fleet_total_by_year.values()):
            raise DataError("fleet totals must be positive")

    def share(self, year: int) -> float:
        try:
            return self.ev_share_by_year[year]
        except KeyError:
            raise DataError(f"no EV sales share for {year}") from None

    def county_fleet(self, year: int) -> int:
        try:
            return math.floor(self.fleet_total_by_year[year] * self.county_share + 0.5)
        except KeyError:
            raise DataError(f"no fleet projection for {year}") from None


@dataclass(frozen=True)
class AdoptionCurve:
    case: str
    penetration_by_year: dict[int, float]

    def __post_init__(self):
        years = sorted(self.penetration_by_year)
        vals = [self.penetration_by_year[y] for y in years]
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise DataError(f"{self.case} curve has values outside [0, 1]")
        if any(b < a for a, b in zip(vals, vals[1:])):
            raise DataError(f"{self.case} curve decreases")

    def at(self, year: int) -> float:
        try:
            return self.penetration_by_year[year]
        except KeyError:
            raise DataError(f"{self.case} curve does not cover {year}") from None


@dataclass(frozen=True)
class TazEvProfile:
    taz_id: str
    year: int
    total_vehicles: int
    ev_fraction: float


# ------------------------------------------------------------- arithmetic

def allocate_proportional(total: int, weights) -> list[int]:
    """Split ``total`` into integers proportional to ``weights`` (largest remainder).

    Remainders are compared exactly; equal remainders favour the lower index.
    """
    ws = [Fraction(w) for w in weights]
    if any(w < 0 for w in ws):
        raise DataError("negative allocation weight")
    if total < 0:
        raise DataError("negative allocation total")
    W = sum(ws)
    if total == 0:
        return [0] * len(ws)
    if W == 0:
        raise DataError("cannot allocate a positive total over zero weight")
    quotas = [total * w / W for w in ws]
    out = [math.floor(q) for q in quotas]
    short = total - sum(out)
    order = sorted(range(len(ws)), key=lambda i: (-(quotas[i] - out[i]), i))
    for i in order[:short]:
        out[i] += 1
    return out


def tract_weight(t: CensusTract) -> float:
    """Share of EVs a tract attracts: more households and higher income mean more EVs."""
    return t.households * t.median_income


def tract_to_taz(ev_by_tract: dict[str, int], tracts: list[CensusTract]) -> dict[str, int]:
    out: dict[str, int] = {}
    for t in tracts:
        if not t.taz_ids:
            raise DataError(f"tract {t.id!r} lists no TAZs")
        n = ev_by_tract.get(t.id, 0)
        scaled = math.floor(n * t.land_area_in_study + 0.5)
        for taz, k in zip(t.taz_ids, allocate_proportional(scaled, [1] * len(t.taz_ids))):
            out[taz] = out.get(taz, 0) + k
    return out


def _taz_fleet(tracts: list[CensusTract], county_fleet: int) -> dict[str, int]:
    split = allocate_proportional(county_fleet, [t.households for t in tracts])
    return tract_to_taz({t.id: n for t, n in zip(tracts, split)}, tracts)


def _profiles(year: int, ev_taz: dict[str, int], fleet_taz: dict[str, int]) -> list[TazEvProfile]:
    out = []
    for taz in sorted(fleet_taz):
        fleet = fleet_taz[taz]
        frac = min(1.0, ev_taz.get(taz, 0) / fleet) if fleet > 0 else 0.0
        out.append(TazEvProfile(taz, year, fleet, frac))
    return out


# ------------------------------------------------------------------ cases

def vehicle_age(t: CensusTract, year: int) -> float:
    try:
        return t.avg_vehicle_age_by_year[year]
    except KeyError:
        raise DataError(f"tract {t.id!r} has no average vehicle age for {year}") from None


def base_case_fractions(tracts: list[CensusTract], history: MarketHistory, start_year: int,
                        target_year: int, seed_evs: int) -> list[TazEvProfile]:
    """Base-case projection for every year from ``start_year`` to ``target_year``.

    ``seed_evs`` registered EVs in ``start_year`` are spread over tracts by
    weight.  Each later year a tract replaces ``fleet / avg_age`` vehicles,
    and the EV share of those equals the sales share ``avg_age`` years back.
    """
    if target_year < start_year:
        raise DataError("target year precedes start year")
    tracts = list(tracts)
    ev = [float(n) for n in allocate_proportional(seed_evs, [tract_weight(t) for t in tracts])]
    out = []
    for year in range(start_year, target_year + 1):
        county = history.county_fleet(year)
        fleet = allocate_proportional(county, [t.households for t in tracts])
        if year > start_year:
            for i, t in enumerate(tracts):
                age = vehicle_age(t, year)
                if age <= 0:
                    raise DataError(f"tract {t.id!r} has nonpositive vehicle age")
                ev[i] += fleet[i] / age * history.share(year - int(math.floor(age + 0.5)))
        ev_tract = {t.id: math.floor(min(e, f) + 0.5) for t, e, f in zip(tracts, ev, fleet)}
        out += _profiles(year, tract_to_taz(ev_tract, tracts),
                         tract_to_taz({t.id: f for t, f in zip(tracts, fleet)}, tracts))
    return out


def curve_case_fractions(tracts: list[CensusTract], curve: AdoptionCurve, history: MarketHistory,
                         year: int) -> list[TazEvProfile]:
    tracts = list(tracts)
    county = history.county_fleet(year)
    total_ev = math.floor(curve.at(year) * county + 0.5)
    ev = allocate_proportional(total_ev, [tract_weight(t) for t in tracts])
    return _profiles(year, tract_to_taz({t.id: n for t, n in zip(tracts, ev)}, tracts),
                     _taz_fleet(tracts, county))


def extend_to_extreme(vehicle_ids, is_electric, target_rate: float, seed: int) -> list[bool]:
    """Flip the fewest randomly chosen non-EVs needed to reach ``target_rate``.

    The choice depends only on the set of ids and the seed, not on input order.
    """
    ids = list(vehicle_ids)
    flags = [bool(f) for f in is_electric]
    if len(ids) != len(flags):
        raise DataError("vehicle ids and flags differ in length")
    n = len(ids)
    current = sum(flags)
    if n == 0:
        return []
    needed = math.ceil(target_rate * n - 1e-9) - current
    if needed < 0:
        raise DataError(f"target rate {target_rate} is below the current rate {current / n:.4f}")
    pool = sorted((vid, i) for i, (vid, f) in enumerate(zip(ids, flags)) if not f)
    needed = min(needed, len(pool))
    rng = np.random.default_rng(seed)
    for k in rng.choice(len(pool), size=needed, replace=False):
        flags[pool[int(k)][1]] = True
    return flags


# -------------------------------------------------------------- age table

def ages_from_income(age_table: dict[int, list[tuple[float, float]]], income: float) -> dict[int, float]:
    """Average vehicle age per year for a household income.

    ``age_table[year]`` lists (income upper bound, average age) brackets in
    increasing bound order; the last bracket catches everything above.
    """
    out = {}
    for year, brackets in age_table.items():
        age = brackets[-1][1]
        for bound, a in brackets:
            if income <= bound:
                age = a
                break
        out[year] = age
    return out


# -------------------------------------------------------------------- I/O

def read_tracts_csv(path, age_table=None) -> list[CensusTract]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        tracts = []
        for r in rows:
            mean_income = float(r["mean_income"])
            ages = ages_from_income(age_table, mean_income) if age_table else {}
            tracts.append(CensusTract(r["id"], int(r["households"]), float(r["median_income"]), mean_income,
                                      float(r["land_area_in_study"]), tuple(r["taz_ids"].split(";")), ages))
        return tracts
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read tracts {path}: {exc}") from exc


def write_tracts_csv(tracts: list[CensusTract], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "households", "median_income", "mean_income", "land_area_in_study", "taz_ids"])
        for t in tracts:
            w.writerow([t.id, t.households, repr(t.median_income), repr(t.mean_income),
                        repr(t.land_area_in_study), ";".join(t.taz_ids)])


def read_age_table_csv(path) -> dict[int, list[tuple[float, float]]]:
    """Rows of (year, income_upper, avg_age); an empty bound means no upper limit."""
    table: dict[int, list[tuple[float, float]]] = {}
    try:
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                bound = float(r["income_upper"]) if r["income_upper"] else math.inf
                table.setdefault(int(r["year"]), []).append((bound, float(r["avg_age"])))
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read age table {path}: {exc}") from exc
    return {y: sorted(b) for y, b in table.items()}


def write_age_table_csv(table, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "income_upper", "avg_age"])
        for y in sorted(table):
            for bound, age in table[y]:
                w.writerow([y, "" if math.isinf(bound) else repr(bound), repr(age)])


def read_market_csv(path, county_share: float) -> MarketHistory:
    """Rows of (year, ev_share, fleet_total); either value may be blank."""
    share, fleet = {}, {}
    try:
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                y = int(r["year"])
                if r["ev_share"]:
                    share[y] = float(r["ev_share"])
                if r["fleet_total"]:
                    fleet[y] = int(r["fleet_total"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read market history {path}: {exc}") from exc
    return MarketHistory(share, fleet, county_share)


def write_market_csv(history: MarketHistory, path):
    years = sorted(set(history.ev_share_by_year) | set(history.fleet_total_by_year))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "ev_share", "fleet_total"])
        for y in years:
            s = history.ev_share_by_year.get(y)
            f = history.fleet_total_by_year.get(y)
            w.writerow([y, "" if s is None else repr(s), "" if f is None else f])


def read_curves_csv(path) -> dict[str, AdoptionCurve]:
    """Columns year, medium, high."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return {c: AdoptionCurve(c, {int(r["year"]): float(r[c]) for r in rows}) for c in ("medium", "high")}
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read adoption curves {path}: {exc}") from exc


def write_curves_csv(curves: dict[str, AdoptionCurve], path):
    years = sorted(curves["medium"].penetration_by_year)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "medium", "high"])
        for y in years:
            w.writerow([y, repr(curves["medium"].at(y)), repr(curves["high"].at(y))])


def write_profiles_csv(profiles: list[TazEvProfile], path):
    taz_index = {t: i + 1 for i, t in enumerate(sorted({p.taz_id for p in profiles}))}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "taz_index", "taz_id", "total_vehicles", "ev_fraction"])
        for p in sorted(profiles, key=lambda p: (p.year, p.taz_id)):
            w.writerow([p.year, taz_index[p.taz_id], p.taz_id, p.total_vehicles, repr(p.ev_fraction)])


def read_profiles_csv(path) -> list[TazEvProfile]:
    try:
        with open(path, newline="") as fh:
            return [TazEvProfile(r["taz_id"], int(r["year"]), int(r["total_vehicles"]), float(r["ev_fraction"]))
                    for r in csv.DictReader(fh)]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read profiles {path}: {exc}") from exc
