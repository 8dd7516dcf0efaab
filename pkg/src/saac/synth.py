"""Synthetic closed world with known hourly population, and its observed tables.

Residents live in CBGs. Commuters spend weekday working hours in another
CBG; students spend school hours at a school located in some CBG of their
county. A fixed panel of residents carries devices, and a device that is
present somewhere emits an event in each hour with probability
``observation_rate``. The observed tables mirror the vendor inputs of the
pipeline; the ground truth is what the pipeline tries to recover.
"""

from __future__ import annotations

import calendar
from dataclasses import dataclass, field, fields, replace
from datetime import date, timedelta
from typing import Any

import numpy as np
import pandas as pd


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_cbgs: int = 50
    n_counties: int = 5
    n_states: int = 1
    residents_range: tuple[int, int] = (600, 2500)
    penetration_range: tuple[float, float] = (0.05, 0.15)
    observation_rate: float = 0.4
    n_schools: int = 10
    school_size_range: tuple[int, int] = (300, 800)
    commuter_fraction: float = 0.3
    # lognormal sigma of destination attractiveness
    destination_spread: float = 1.0
    # [start, end) local hours away from home
    commute_hours: tuple[int, int] = (8, 17)
    school_hours: tuple[int, int] = (7, 17)
    jitter_hours: int = 1
    gathering_prob: float = 0.0
    gathering_fraction: float = 0.3
    after_school_until: int = 21
    weekend_gathering_hours: tuple[int, int] = (10, 14)
    holidays: tuple[date, ...] = ()
    start: date = date(2022, 3, 28)
    days: int = 35
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.observation_rate <= 1:
            raise ConfigError("observation_rate must be in (0, 1]")
        lo, hi = self.penetration_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError("penetration_range must satisfy 0 < lo <= hi <= 1")
        if not 0 <= self.commuter_fraction <= 1:
            raise ConfigError("commuter_fraction must be in [0, 1]")
        if not (0 <= self.gathering_prob <= 1 and 0 <= self.gathering_fraction <= 1):
            raise ConfigError("gathering probabilities must be in [0, 1]")
        if self.n_cbgs < 1 or not 1 <= self.n_counties <= self.n_cbgs:
            raise ConfigError("need 1 <= n_counties <= n_cbgs")
        if not 1 <= self.n_states <= self.n_counties:
            raise ConfigError("need 1 <= n_states <= n_counties")
        if self.residents_range[0] < 0 or self.residents_range[0] > self.residents_range[1]:
            raise ConfigError("bad residents_range")
        if self.school_size_range[0] < 0 or self.school_size_range[0] > self.school_size_range[1]:
            raise ConfigError("bad school_size_range")
        for name in ("commute_hours", "school_hours", "weekend_gathering_hours"):
            a, b = getattr(self, name)
            if not 0 <= a < b <= 24:
                raise ConfigError(f"{name} must satisfy 0 <= start < end <= 24")
        if self.jitter_hours < 0 or self.days < 1:
            raise ConfigError("jitter_hours must be >= 0 and days >= 1")

    @classmethod
    def for_month(cls, year: int, month: int, **kw: Any) -> "WorldConfig":
        """Cover the calendar month plus every full week starting in it."""
        first = date(year, month, 1)
        last = date(year, month, calendar.monthrange(year, month)[1])
        start = first - timedelta(days=first.weekday())
        last_monday = last - timedelta(days=last.weekday())
        end = last_monday + timedelta(days=6)
        return cls(start=start, days=(end - start).days + 1, **kw)

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> "WorldConfig":
        data = dict(data)
        month = data.pop("month", None)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown world keys: {sorted(unknown)}")
        for key, value in list(data.items()):
            if isinstance(value, list):
                data[key] = tuple(value)
        if "start" in data and isinstance(data["start"], str):
            data["start"] = date.fromisoformat(data["start"])
        if "holidays" in data:
            data["holidays"] = tuple(date.fromisoformat(d) if isinstance(d, str) else d
                                     for d in data["holidays"])
        if month is not None:
            y, m = map(int, str(month).split("-"))
            return cls.for_month(y, m, **data)
        return cls(**data)

    def with_seed(self, seed: int) -> "WorldConfig":
        return replace(self, seed=int(seed))

    @property
    def dates(self) -> list[date]:
        return [self.start + timedelta(days=d) for d in range(self.days)]

    def full_months(self) -> list[tuple[int, int]]:
        end = self.start + timedelta(days=self.days - 1)
        out = []
        y, m = self.start.year, self.start.month
        while (y, m) <= (end.year, end.month):
            first = date(y, m, 1)
            last = date(y, m, calendar.monthrange(y, m)[1])
            if first >= self.start and last <= end:
                out.append((y, m))
            y, m = (y + 1, 1) if m == 12 else (y, m + 1)
        return out

    def full_weeks(self) -> list[date]:
        """Mondays whose Monday-Sunday week lies inside the simulated range."""
        first = self.start + timedelta(days=(-self.start.weekday()) % 7)
        out = []
        while first + timedelta(days=6) <= self.start + timedelta(days=self.days - 1):
            out.append(first)
            first += timedelta(days=7)
        return out


@dataclass
class DaySchedule:
    active: np.ndarray
    depart: np.ndarray
    ret: np.ndarray


@dataclass
class World:
    """Static population plus the hourly ground truth over the simulated range."""

    config: WorldConfig
    cbg_ids: np.ndarray
    county_ids: np.ndarray
    state_ids: np.ndarray
    cbg_county: np.ndarray
    county_state: np.ndarray
    residents: np.ndarray
    penetration: np.ndarray
    tracked_devices: np.ndarray
    school_ids: np.ndarray
    school_cbg: np.ndarray
    school_size: np.ndarray
    # movers: students and commuters
    home: np.ndarray
    dest: np.ndarray
    device: np.ndarray
    school: np.ndarray
    base_depart: np.ndarray
    base_return: np.ndarray
    # (n_cbgs, hours) ground truth
    away: np.ndarray = field(repr=False, default=None)
    visiting: np.ndarray = field(repr=False, default=None)
    attendance: pd.DataFrame = field(repr=False, default=None)

    @property
    def hours(self) -> int:
        return self.config.days * 24

    @property
    def population(self) -> np.ndarray:
        return self.residents[:, None] - self.away + self.visiting

    def day_schedule(self, day: int) -> DaySchedule:
        """Who is away from home on ``day`` and when; replayable from the seed."""
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 1, day])
        d = cfg.start + timedelta(days=day)
        m = self.home.size
        is_student = self.school >= 0
        weekday = d.weekday() < 5
        active = np.zeros(m, dtype=bool)
        if weekday:
            active[~is_student] = True
            if d not in cfg.holidays:
                active[is_student] = True
        j = cfg.jitter_hours
        if j:
            dep = self.base_depart + rng.integers(-j, j + 1, m, dtype=np.int16)
            ret = self.base_return + rng.integers(-j, j + 1, m, dtype=np.int16)
        else:
            dep = self.base_depart.astype(np.int16)
            ret = self.base_return.astype(np.int16)
        if cfg.gathering_prob > 0 and self.school_ids.size:
            hosting = np.flatnonzero(rng.random(self.school_ids.size) < cfg.gathering_prob)
            if hosting.size and (weekday and d not in cfg.holidays or not weekday):
                joins = is_student & np.isin(self.school, hosting) & (rng.random(m) < cfg.gathering_fraction)
                if weekday:
                    ret = np.where(joins, np.maximum(ret, cfg.after_school_until), ret)
                else:
                    a, b = cfg.weekend_gathering_hours
                    dep = np.where(joins, a, dep)
                    ret = np.where(joins, b, ret)
                    active |= joins
        dep = np.clip(dep, 0, 23).astype(np.int16)
        ret = np.clip(ret, dep + 1, 24).astype(np.int16)
        return DaySchedule(active, dep, ret)


def _hour_counts(keys: np.ndarray, dep: np.ndarray, ret: np.ndarray, n: int) -> np.ndarray:
    """(n, 24) number of entries with key k present at each hour [dep, ret)."""
    diff = np.bincount(keys * 25 + dep, minlength=n * 25) - np.bincount(keys * 25 + ret, minlength=n * 25)
    return np.cumsum(diff.reshape(n, 25), axis=1)[:, :24]


def generate_world(config: WorldConfig) -> World:
    cfg = config
    rng = np.random.default_rng([cfg.seed, 0])
    n = cfg.n_cbgs
    cbg_county = np.arange(n) * cfg.n_counties // n
    county_state = np.arange(cfg.n_counties) * cfg.n_states // cfg.n_counties
    cbg_ids = np.array([f"cbg{i:06d}" for i in range(n)])
    county_ids = np.array([f"cty{i:04d}" for i in range(cfg.n_counties)])
    state_ids = np.array([f"st{i:02d}" for i in range(cfg.n_states)])

    residents = rng.integers(cfg.residents_range[0], cfg.residents_range[1] + 1, n)
    lo, hi = cfg.penetration_range
    penetration = rng.uniform(lo, hi, n) if hi > lo else np.full(n, lo)
    person_home = np.repeat(np.arange(n), residents)
    person_device = rng.random(person_home.size) < penetration[person_home]
    tracked = np.bincount(person_home[person_device], minlength=n)
    taken = np.zeros(person_home.size, dtype=bool)

    # schools spread round-robin over counties
    school_county = np.arange(cfg.n_schools) % cfg.n_counties
    school_cbg = np.empty(cfg.n_schools, dtype=int)
    school_size = rng.integers(cfg.school_size_range[0], cfg.school_size_range[1] + 1, cfg.n_schools)
    student_of = np.full(person_home.size, -1)
    person_county = cbg_county[person_home]
    for s in range(cfg.n_schools):
        cbgs_here = np.flatnonzero(cbg_county == school_county[s])
        school_cbg[s] = rng.choice(cbgs_here)
        pool = np.flatnonzero((person_county == school_county[s]) & ~taken)
        if school_size[s] > pool.size:
            raise ConfigError(
                f"school {s} needs {school_size[s]} students but county {school_county[s]} "
                f"has {pool.size} unassigned residents"
            )
        chosen = rng.choice(pool, school_size[s], replace=False)
        taken[chosen] = True
        student_of[chosen] = s

    free = np.flatnonzero(~taken)
    commuters = free[rng.random(free.size) < cfg.commuter_fraction]
    attract = rng.lognormal(0.0, cfg.destination_spread, n)
    p = attract / attract.sum()
    commute_dest = rng.choice(n, commuters.size, p=p) if n > 1 else np.zeros(commuters.size, int)
    if n > 1:
        for _ in range(20):
            clash = commute_dest == person_home[commuters]
            if not clash.any():
                break
            commute_dest[clash] = rng.choice(n, int(clash.sum()), p=p)
        clash = commute_dest == person_home[commuters]
        commute_dest[clash] = (commute_dest[clash] + 1) % n

    students = np.flatnonzero(student_of >= 0)
    movers = np.concatenate([students, commuters])
    school = np.concatenate([student_of[students], np.full(commuters.size, -1)])
    dest = np.concatenate([school_cbg[student_of[students]], commute_dest])
    base_dep = np.where(school >= 0, cfg.school_hours[0], cfg.commute_hours[0]).astype(np.int16)
    base_ret = np.where(school >= 0, cfg.school_hours[1], cfg.commute_hours[1]).astype(np.int16)

    world = World(
        config=cfg, cbg_ids=cbg_ids, county_ids=county_ids, state_ids=state_ids,
        cbg_county=cbg_county, county_state=county_state, residents=residents,
        penetration=penetration, tracked_devices=tracked,
        school_ids=np.array([f"school{s:05d}" for s in range(cfg.n_schools)]),
        school_cbg=school_cbg, school_size=school_size,
        home=person_home[movers], dest=dest, device=person_device[movers], school=school,
        base_depart=base_dep, base_return=base_ret,
    )
    _fill_truth(world)
    return world


def _fill_truth(world: World) -> None:
    cfg = world.config
    n = cfg.n_cbgs
    away = np.zeros((n, world.hours), dtype=np.int32)
    visiting = np.zeros((n, world.hours), dtype=np.int32)
    visitor = world.home != world.dest
    student_idx = np.flatnonzero(world.school >= 0)
    week_of = {monday: i for i, monday in enumerate(cfg.full_weeks())}
    attended = np.zeros((len(week_of), student_idx.size), dtype=bool)
    for day, d in enumerate(cfg.dates):
        sch = world.day_schedule(day)
        go = sch.active & visitor
        cols = slice(day * 24, day * 24 + 24)
        away[:, cols] = _hour_counts(world.home[go], sch.depart[go], sch.ret[go], n)
        visiting[:, cols] = _hour_counts(world.dest[go], sch.depart[go], sch.ret[go], n)
        monday = d - timedelta(days=d.weekday())
        if monday in week_of:
            attended[week_of[monday]] |= sch.active[student_idx]
    world.away = away
    world.visiting = visiting

    rows = []
    dev = world.device[student_idx]
    sch_of = world.school[student_idx]
    for monday, w in week_of.items():
        students = np.bincount(sch_of[attended[w]], minlength=world.school_ids.size)
        devices = np.bincount(sch_of[attended[w] & dev], minlength=world.school_ids.size)
        for s in range(world.school_ids.size):
            rows.append((world.school_ids[s], monday.isoformat(), int(students[s]), int(devices[s])))
    world.attendance = pd.DataFrame(rows, columns=["poi_id", "week_start", "students", "student_devices"])


@dataclass
class Observation:
    """Raw observed arrays; ``tables()`` renders the pipeline input files."""

    world: World
    stops: np.ndarray
    visits: np.ndarray
    weekly_devices: dict[date, np.ndarray]
    origin_devices: dict[tuple[int, int], pd.DataFrame]

    def tables(self) -> dict[str, pd.DataFrame]:
        w = self.world
        cfg = w.config
        out: dict[str, pd.DataFrame] = {}

        school_county = w.county_ids[w.cbg_county[w.school_cbg]]
        vis_rows, dev_rows = [], []
        for monday, devices in self.weekly_devices.items():
            day0 = (monday - cfg.start).days
            block = self.visits[:, day0 * 24: day0 * 24 + 168]
            ns = w.school_ids.size
            vis_rows.append(pd.DataFrame({
                "poi_id": np.repeat(w.school_ids, 168),
                "county": np.repeat(school_county, 168),
                "week_start": monday.isoformat(),
                "hour_index": np.tile(np.arange(168), ns),
                "visits": block.ravel(),
            }))
            dev_rows.append(pd.DataFrame({
                "poi_id": w.school_ids, "county": school_county,
                "week_start": monday.isoformat(), "distinct_devices": devices,
            }))
        out["weekly_visits"] = _concat(vis_rows, ["poi_id", "county", "week_start", "hour_index", "visits"])
        out["weekly_devices"] = _concat(dev_rows, ["poi_id", "county", "week_start", "distinct_devices"])

        stop_rows, origin_rows, panel_rows = [], [], []
        cbg_county = w.county_ids[w.cbg_county]
        for (y, m) in cfg.full_months():
            label = f"{y:04d}-{m:02d}"
            day0 = (date(y, m, 1) - cfg.start).days
            tau = calendar.monthrange(y, m)[1] * 24
            block = self.stops[:, day0 * 24: day0 * 24 + tau]
            stop_rows.append(pd.DataFrame({
                "cbg": np.repeat(w.cbg_ids, tau),
                "county": np.repeat(cbg_county, tau),
                "month": label,
                "hour_index": np.tile(np.arange(tau), w.cbg_ids.size),
                "stops": block.ravel(),
            }))
            od = self.origin_devices[(y, m)]
            origin_rows.append(pd.DataFrame({
                "dest_cbg": w.cbg_ids[od["dest"].to_numpy()],
                "origin_cbg": w.cbg_ids[od["origin"].to_numpy()],
                "month": label,
                "devices": od["devices"].to_numpy(),
            }))
            panel_rows.append(pd.DataFrame({
                "cbg": w.cbg_ids, "month": label, "tracked_devices": w.tracked_devices}))
        out["neighborhood_stops"] = _concat(stop_rows, ["cbg", "county", "month", "hour_index", "stops"])
        out["origin_distribution"] = _concat(origin_rows, ["dest_cbg", "origin_cbg", "month", "devices"])
        out["panel"] = _concat(panel_rows, ["cbg", "month", "tracked_devices"])
        out["residents"] = pd.DataFrame({"cbg": w.cbg_ids, "population": w.residents})
        out["geo"] = pd.DataFrame({"cbg": w.cbg_ids, "county": cbg_county,
                                   "state": w.state_ids[w.county_state[w.cbg_county]]})
        return out


def _concat(frames: list[pd.DataFrame], columns: list[str]) -> pd.DataFrame:
    if not frames:
        return pd.DataFrame({c: [] for c in columns})
    return pd.concat(frames, ignore_index=True)[columns]


def observe(world: World) -> Observation:
    """Apply the panel and per-hour event draws to the world's movements."""
    cfg = world.config
    rng = np.random.default_rng([cfg.seed, 2])
    n = cfg.n_cbgs
    ns = world.school_ids.size
    rho = cfg.observation_rate
    stops = np.zeros((n, world.hours), dtype=np.int32)
    visits = np.zeros((ns, world.hours), dtype=np.int32)
    visitor = world.home != world.dest
    is_student = world.school >= 0

    weeks = set(cfg.full_weeks())
    months = {ym: None for ym in cfg.full_months()}
    seen_week = np.zeros(world.home.size, dtype=bool)
    seen_month = np.zeros(world.home.size, dtype=bool)
    weekly_devices: dict[date, np.ndarray] = {}
    origin_devices: dict[tuple[int, int], pd.DataFrame] = {}

    for day, d in enumerate(cfg.dates):
        if d.weekday() == 0:
            seen_week[:] = False
        if d.day == 1:
            seen_month[:] = False
        sch = world.day_schedule(day)
        idx = np.flatnonzero(sch.active & world.device)
        if idx.size:
            dep = sch.depart[idx].astype(np.int64)
            length = (sch.ret[idx] - sch.depart[idx]).astype(np.int64)
            width = int(length.max())
            hit = rng.random((idx.size, width)) < rho
            hit &= np.arange(width)[None, :] < length[:, None]
            r, c = np.nonzero(hit)
            hour = dep[r] + c
            who = idx[r]
            vis = visitor[who]
            stops[:, day * 24:(day + 1) * 24] += np.bincount(
                world.dest[who[vis]] * 24 + hour[vis], minlength=n * 24).reshape(n, 24).astype(np.int32)
            stu = is_student[who]
            visits[:, day * 24:(day + 1) * 24] += np.bincount(
                world.school[who[stu]] * 24 + hour[stu], minlength=ns * 24).reshape(ns, 24).astype(np.int32)
            seen = np.unique(who)
            seen_week[seen] = True
            seen_month[seen] = True

        if d.weekday() == 6:
            monday = d - timedelta(days=6)
            if monday in weeks:
                weekly_devices[monday] = np.bincount(
                    world.school[seen_week & is_student], minlength=ns)
        next_day = d + timedelta(days=1)
        if next_day.day == 1 and (d.year, d.month) in months:
            sel = seen_month & visitor
            od = pd.DataFrame({"dest": world.dest[sel], "origin": world.home[sel]})
            counts = od.groupby(["dest", "origin"]).size().rename("devices").reset_index()
            origin_devices[(d.year, d.month)] = counts.sort_values(["dest", "origin"], ignore_index=True)

    return Observation(world, stops, visits, weekly_devices, origin_devices)


def truth_tables(world: World, noon_hour: int = 12, midnight_hour: int = 0) -> dict[str, pd.DataFrame]:
    """Ground-truth population per month, weekly attendance and a noon/midnight reference."""
    cfg = world.config
    pop_rows, ref_rows = [], []
    population = world.population
    for (y, m) in cfg.full_months():
        label = f"{y:04d}-{m:02d}"
        day0 = (date(y, m, 1) - cfg.start).days
        ndays = calendar.monthrange(y, m)[1]
        tau = ndays * 24
        cols = slice(day0 * 24, day0 * 24 + tau)
        pop_rows.append(pd.DataFrame({
            "cbg": np.repeat(world.cbg_ids, tau),
            "month": label,
            "hour_index": np.tile(np.arange(tau), world.cbg_ids.size),
            "population": population[:, cols].ravel(),
            "inbound": world.visiting[:, cols].ravel(),
            "outbound": world.away[:, cols].ravel(),
        }))
        weekdays = [i for i in range(ndays) if date(y, m, i + 1).weekday() < 5]
        noon = population[:, [day0 * 24 + i * 24 + noon_hour for i in weekdays]].mean(axis=1)
        night = population[:, [day0 * 24 + i * 24 + midnight_hour for i in range(ndays)]].mean(axis=1)
        ref_rows.append(pd.DataFrame({"cbg": world.cbg_ids, "month": label,
                                      "daytime_ref": noon, "nighttime_ref": night}))
    return {
        "truth_population": _concat(pop_rows, ["cbg", "month", "hour_index", "population", "inbound", "outbound"]),
        "truth_attendance": world.attendance,
        "truth_reference": _concat(ref_rows, ["cbg", "month", "daytime_ref", "nighttime_ref"]),
    }


def simulate(config: WorldConfig) -> tuple[World, Observation]:
    world = generate_world(config)
    return world, observe(world)
