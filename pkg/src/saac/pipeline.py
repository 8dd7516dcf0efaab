"""Stage graph: simulate, calibrate, inbound, outbound, assemble, evaluate.

Every stage reads declared files from the input or output directory, writes
its artifacts atomically, and appends one entry to ``manifest.json`` with the
config snapshot, input and output digests, timing and a stage report.
"""

from __future__ import annotations

import calendar
import json
import logging
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from datetime import date
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from .anchors import NoBaselineError, SchoolWeekRecord, process_school
from .assembly import FLAG_CLAMPED, GridMismatchError, align, assemble, evaluate_reference
from .calibration import UnresolvedCountyError, calibrate
from .config import PipelineConfig, threshold_overrides
from .inbound import estimate_month, origin_expansion_table
from .outbound import build_col_marginals, build_row_marginals, extract_outbound, ipf, reconcile, uniform_seed
from .synth import WorldConfig, simulate, truth_tables
from .tables import SchemaError, month_label, parse_month, path_for, read_table, sha256, write_table

log = logging.getLogger(__name__)

STAGES = ("simulate", "calibrate", "inbound", "outbound", "assemble", "evaluate")
MANIFEST = "manifest.json"
FLAG_STOPS_MISSING = "stops_missing"
# cells with fewer true people are left out of the percentage error
MAPE_MIN_POPULATION = 50.0

INPUT_TABLES = ("weekly_visits", "weekly_devices", "neighborhood_stops", "origin_distribution",
                "panel", "residents", "geo")
TRUTH_TABLES = ("truth_population", "truth_attendance", "truth_reference")


class StageContext:
    """Resolves paths and records which files a stage touched."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.inputs: dict[str, Path] = {}
        self.outputs: dict[str, Path] = {}

    def input(self, name: str) -> Path:
        path = path_for(self.config.input_dir, name)
        self.inputs[name] = path
        return path

    def artifact(self, name: str) -> Path:
        """Path of an earlier stage's output, read as an input here."""
        path = path_for(self.config.out_dir, name)
        self.inputs[name] = path
        return path

    def read(self, name: str, schema: str | None = None, artifact: bool = False) -> pd.DataFrame:
        path = self.artifact(name) if artifact else self.input(name)
        return read_table(path, schema or name)

    def write(self, name: str, frame: pd.DataFrame, directory: Path | None = None) -> Path:
        path = write_table(frame, path_for(directory or self.config.out_dir, name))
        self.outputs[name] = path
        return path


# --------------------------------------------------------------------------
# simulate


def stage_simulate(ctx: StageContext) -> dict:
    cfg = ctx.config
    world_cfg = WorldConfig.from_mapping(cfg.world).with_seed(cfg.seed)
    world, obs = simulate(world_cfg)
    tables = obs.tables()
    tables.update(truth_tables(world, cfg.noon_hour, cfg.midnight_hour))
    for name in INPUT_TABLES + TRUTH_TABLES:
        ctx.write(name, tables[name], cfg.input_dir)
    return {
        "world_seed": world_cfg.seed,
        "months": [month_label(y, m) for y, m in world_cfg.full_months()],
        "weeks": len(world_cfg.full_weeks()),
        "n_cbgs": world_cfg.n_cbgs,
        "residents": int(world.residents.sum()),
        "tracked_devices": int(world.tracked_devices.sum()),
    }


# --------------------------------------------------------------------------
# calibrate


def school_records(visits: pd.DataFrame, devices: pd.DataFrame, visits_path, devices_path
                   ) -> list[SchoolWeekRecord]:
    """One record per (poi, week); checks that every week is complete."""
    visits = visits.sort_values(["poi_id", "week_start", "hour_index"], kind="stable", ignore_index=True)
    keys = visits[["poi_id", "week_start"]]
    sizes = keys.groupby(["poi_id", "week_start"], sort=False).size()
    problems = [f"{visits_path}: poi {p} week {w}: {n} hourly rows, expected 168"
                for (p, w), n in sizes.items() if n != 168]
    if problems:
        raise SchemaError(problems)
    hours = visits["hour_index"].to_numpy().reshape(-1, 168)
    bad = np.flatnonzero((hours != np.arange(168)).any(axis=1))
    if bad.size:
        raise SchemaError([f"{visits_path}: poi {sizes.index[i][0]} week {sizes.index[i][1]}: "
                           "hour_index must cover 0..167 once each" for i in bad[:20]])
    counties = visits.groupby("poi_id", sort=False)["county"].nunique()
    if (counties > 1).any():
        raise SchemaError([f"{visits_path}: poi {p} appears in more than one county"
                           for p in counties.index[counties > 1][:20]])

    dev = devices.drop_duplicates(["poi_id", "week_start"], keep=False).set_index(["poi_id", "week_start"])
    if len(dev) != len(devices):
        raise SchemaError([f"{devices_path}: duplicate (poi_id, week_start) rows"])
    dev = dev["distinct_devices"].reindex(sizes.index)
    if dev.isna().any():
        p, w = dev.index[dev.isna().to_numpy()][0]
        raise SchemaError([f"{devices_path}: no row for poi {p} week {w}"])

    values = visits["visits"].to_numpy().reshape(-1, 168)
    county = visits["county"].to_numpy()[::168]
    out = []
    for i, ((poi, week), n_dev) in enumerate(dev.items()):
        start = date.fromisoformat(week)
        if start.weekday() != 0:
            raise SchemaError([f"{visits_path}: poi {poi} week_start {week} is not a Monday"])
        out.append(SchoolWeekRecord(poi, county[i], start, values[i], int(n_dev)))
    return out


ANCHOR_COLUMNS = ["poi_id", "county", "week_start", "school_days", "school_hour_events", "gathering_events",
                  "gathering_peak_sum", "typical_hourly_count", "weekly_distinct_devices", "week_osf",
                  "accepted", "rejection_reasons"]


def _summary_row(s) -> dict:
    return {
        "poi_id": s.poi_id,
        "county": s.county,
        "week_start": s.week_start.isoformat(),
        "school_days": s.n_school_days,
        "school_hour_events": s.school_hour_events,
        "gathering_events": s.gathering_events,
        "gathering_peak_sum": s.gathering_peak_sum,
        "typical_hourly_count": s.typical_hourly_count,
        "weekly_distinct_devices": s.weekly_distinct_devices,
        "week_osf": s.week_osf if s.typical_hourly_count > 0 else np.nan,
        "accepted": s.accepted,
        "rejection_reasons": "|".join(r.value for r in s.rejection_reasons),
    }


def required_months(ctx: StageContext, weeks: list[SchoolWeekRecord]) -> list[tuple[int, int]]:
    path = ctx.input("neighborhood_stops")
    if path.exists():
        labels = pd.read_csv(path, usecols=["month"], dtype=str)["month"].unique()
        try:
            return sorted(parse_month(m) for m in labels)
        except ValueError as exc:
            raise SchemaError([f"{path}: {exc}"]) from exc
    return sorted({(r.week_start.year, r.week_start.month) for r in weeks})


def stage_calibrate(ctx: StageContext) -> dict:
    cfg = ctx.config
    th = cfg.anchors
    visits = ctx.read("weekly_visits")
    devices = ctx.read("weekly_devices")
    geo = _read_geo(ctx)
    records = school_records(visits, devices, ctx.inputs["weekly_visits"], ctx.inputs["weekly_devices"])
    county_state = dict(zip(geo["county"], geo["state"]))
    unknown = sorted({r.county for r in records} - set(county_state))
    if unknown:
        raise SchemaError([f"{ctx.inputs['weekly_visits']}: county {c} not in geo table" for c in unknown])

    by_school: dict[str, list[SchoolWeekRecord]] = defaultdict(list)
    for r in records:
        by_school[r.poi_id].append(r)
    schools = sorted(by_school)

    def run(poi):
        try:
            return process_school(by_school[poi], th)
        except NoBaselineError as exc:
            log.info("school %s excluded: %s", poi, exc)
            return None

    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        results = list(pool.map(run, schools))
    excluded = [p for p, res in zip(schools, results) if res is None]
    summaries = [s for res in results if res for s in res]

    months = required_months(ctx, records)
    factors = {}
    for year in sorted({y for y, _ in months}):
        in_year = [s for s in summaries if s.week_start.year == year]
        wanted = [m for y, m in months if y == year]
        factors.update({(c, year, m): v for (c, m), v in calibrate(in_year, county_state, wanted).items()})

    anchor = pd.DataFrame([_summary_row(s) for s in summaries], columns=ANCHOR_COLUMNS)
    ctx.write("anchor_weeks", anchor)
    osf = pd.DataFrame([
        {"county": c, "month": month_label(y, m), "k": v.k, "provenance": v.provenance.value,
         "n_samples": v.n_samples}
        for (c, y, m), v in sorted(factors.items())
    ], columns=["county", "month", "k", "provenance", "n_samples"])
    ctx.write("osf", osf)
    return {
        "schools": len(schools),
        "schools_without_baseline": excluded,
        "weeks": len(summaries),
        "weeks_accepted": int(sum(s.accepted for s in summaries)),
        "rejections": _count([r.value for s in summaries for r in s.rejection_reasons]),
        "provenance": _count(osf["provenance"].tolist()),
        "threshold_overrides": threshold_overrides(th),
    }


# --------------------------------------------------------------------------
# inbound


def _read_geo(ctx: StageContext) -> pd.DataFrame:
    geo = ctx.read("geo")
    dup = geo["cbg"].duplicated()
    if dup.any():
        raise SchemaError([f"{ctx.inputs['geo']}:{i + 2}: duplicate cbg {geo['cbg'][i]!r}"
                           for i in np.flatnonzero(dup)[:20]])
    states = geo.groupby("county")["state"].nunique()
    if (states > 1).any():
        raise SchemaError([f"{ctx.inputs['geo']}: county {c} assigned to several states"
                           for c in states.index[states > 1]])
    return geo.sort_values("cbg", ignore_index=True)


def _residents(ctx: StageContext, cbgs: np.ndarray) -> np.ndarray:
    res = ctx.read("residents")
    if res["cbg"].duplicated().any():
        raise SchemaError([f"{ctx.inputs['residents']}: duplicate cbg rows"])
    aligned = res.set_index("cbg")["population"].reindex(cbgs)
    extra = sorted(set(res["cbg"]) - set(cbgs))
    if aligned.isna().any() or extra:
        missing = list(aligned.index[aligned.isna()][:3])
        raise GridMismatchError(f"residents and geo disagree: missing {missing}, extra {extra[:3]}")
    return aligned.to_numpy(float)


def _hours(label: str) -> int:
    y, m = parse_month(label)
    return 24 * calendar.monthrange(y, m)[1]


def _long(cbgs: np.ndarray, label: str, columns: dict[str, np.ndarray]) -> pd.DataFrame:
    tau = next(iter(columns.values())).shape[1]
    frame = {"cbg": np.repeat(cbgs, tau), "month": label, "hour_index": np.tile(np.arange(tau), cbgs.size)}
    frame.update({k: v.ravel() for k, v in columns.items()})
    return pd.DataFrame(frame)


def stage_inbound(ctx: StageContext) -> dict:
    geo = _read_geo(ctx)
    cbgs = geo["cbg"].to_numpy()
    county = geo["county"].to_numpy()
    residents = pd.DataFrame({"cbg": cbgs, "population": _residents(ctx, cbgs)})
    stops = ctx.read("neighborhood_stops")
    origins = ctx.read("origin_distribution")
    panel = ctx.read("panel")
    osf = ctx.read("osf", artifact=True)
    k_lookup = dict(zip(zip(osf["county"], osf["month"]), osf["k"]))

    surfaces, audits, weights = [], [], []
    flags: dict[str, int] = defaultdict(int)
    months = sorted(stops["month"].unique())
    if not months:
        raise SchemaError([f"{ctx.inputs['neighborhood_stops']}: no rows"])
    for label in months:
        tau = _hours(label)
        dense, absent = align(stops[stops["month"] == label], cbgs, tau, "stops", allow_absent=True)
        missing = sorted({(c, parse_month(label)[1]) for c in county if (c, label) not in k_lookup})
        if missing:
            raise UnresolvedCountyError(missing)
        k = np.array([k_lookup[(c, label)] for c in county])
        expansion = origin_expansion_table(residents, panel[panel["month"] == label])
        est = estimate_month(cbgs, dense, k, origins[origins["month"] == label], expansion)
        audit = est.audit.assign(month=label, county=county)
        audit.loc[absent, "flags"] = [_join(f, FLAG_STOPS_MISSING) for f in audit.loc[absent, "flags"]]
        for f in audit["flags"]:
            for part in filter(None, f.split("|")):
                flags[part] += 1
        surfaces.append(_long(cbgs, label, {"stops": dense, "devices": est.devices, "inbound": est.inbound}))
        audits.append(audit[["cbg", "month", "county", "k", "expansion", "excluded_origins", "flags"]])
        weights.append(est.origin_weights.assign(month=label)[["dest_cbg", "origin_cbg", "month", "weight"]])

    ctx.write("inbound", pd.concat(surfaces, ignore_index=True))
    ctx.write("inbound_audit", pd.concat(audits, ignore_index=True))
    ctx.write("origin_weights", pd.concat(weights, ignore_index=True))
    return {"months": months, "flag_counts": dict(sorted(flags.items()))}


def _join(a: str, b: str) -> str:
    return f"{a}|{b}" if a else b


# --------------------------------------------------------------------------
# outbound


def stage_outbound(ctx: StageContext) -> dict:
    cfg = ctx.config
    cbgs = _read_geo(ctx)["cbg"].to_numpy()
    inbound = ctx.read("inbound", artifact=True)
    weights = ctx.read("origin_weights", artifact=True)
    frames, reports = [], []
    for label in sorted(inbound["month"].unique()):
        tau = _hours(label)
        dense, _ = align(inbound[inbound["month"] == label], cbgs, tau, "inbound")
        totals = pd.Series(dense.sum(axis=1), index=cbgs)
        cols = build_col_marginals(weights[weights["month"] == label], totals)
        spec = reconcile(build_row_marginals(dense), cols.to_numpy(), cols.index.to_numpy(),
                         cfg.rescale_warn_bounds)
        X, rep = ipf(uniform_seed(spec), spec, cfg.ipf_tol, cfg.ipf_max_iter)
        frames.append(_long(cbgs, label, {"outbound": extract_outbound(X, spec.origins, cbgs)}))
        reports.append({"month": label, "iterations": rep.iterations, "max_deviation": rep.max_deviation,
                        "converged": bool(rep.converged), "rescale": float(spec.rescale),
                        "origins": int(spec.n_origins)})
    ctx.write("outbound", pd.concat(frames, ignore_index=True))
    ctx.write("convergence", pd.DataFrame(reports))
    return {"convergence": reports}


# --------------------------------------------------------------------------
# assemble


def stage_assemble(ctx: StageContext) -> dict:
    cbgs = _read_geo(ctx)["cbg"].to_numpy()
    residents = _residents(ctx, cbgs)
    inbound = ctx.read("inbound", artifact=True)
    outbound = ctx.read("outbound", artifact=True)
    audit = pd.read_csv(ctx.artifact("inbound_audit"), dtype={"cbg": str, "month": str, "flags": str},
                        keep_default_na=False)
    frames, clamps, months = [], [], []
    cells = clamped = 0
    worst_drift = 0.0
    for label in sorted(inbound["month"].unique()):
        tau = _hours(label)
        inb, _ = align(inbound[inbound["month"] == label], cbgs, tau, "inbound")
        out, _ = align(outbound[outbound["month"] == label], cbgs, tau, "outbound")
        surface = assemble(cbgs, residents, inb, out)
        cbg_flags = audit[audit["month"] == label].set_index("cbg")["flags"].reindex(cbgs).fillna("")
        cbg_flags = np.repeat(cbg_flags.to_numpy(dtype=object)[:, None], tau, axis=1)
        with_clamp = np.where(cbg_flags == "", FLAG_CLAMPED, cbg_flags + "|" + FLAG_CLAMPED)
        cell_flags = np.where(surface.clamped, with_clamp, cbg_flags)
        frame = _long(cbgs, label, {"population": surface.population, "inbound": inb, "outbound": out})
        frame["flags"] = cell_flags.ravel()
        frames.append(frame)
        clamps.append(surface.clamp_audit().assign(month=label)[["cbg", "month", "hour_index", "pre_clamp"]])
        national = surface.raw.sum(axis=0)
        drift = float(np.max(np.abs(national - residents.sum())) / max(residents.sum(), 1.0))
        worst_drift = max(worst_drift, drift)
        cells += surface.raw.size
        clamped += int(surface.clamped.sum())
        months.append({"month": label, "clamped_cells": int(surface.clamped.sum()),
                       "clamp_deficit": surface.clamp_deficit, "national_total_drift": drift})
    ctx.write("population", pd.concat(frames, ignore_index=True))
    ctx.write("clamp_audit", pd.concat(clamps, ignore_index=True))
    return {"cells": cells, "flag_counts": {FLAG_CLAMPED: clamped}, "months": months,
            "max_national_total_drift": worst_drift}


# --------------------------------------------------------------------------
# evaluate


def stage_evaluate(ctx: StageContext, reference: Path | None = None) -> dict:
    cfg = ctx.config
    cbgs = _read_geo(ctx)["cbg"].to_numpy()
    population = ctx.read("population", artifact=True)
    if reference is None:
        reference = path_for(cfg.input_dir, "truth_reference")
    ctx.inputs["reference"] = Path(reference)
    ref = read_table(reference, "reference")
    if "month" not in ref.columns:
        ref = ref.assign(month=None)
    ref["month"] = ref["month"].astype(object)
    tables, summaries = [], []
    for label in sorted(population["month"].unique()):
        y, m = parse_month(label)
        tau = _hours(label)
        pop, _ = align(population[population["month"] == label], cbgs, tau, "population")
        sub = ref[ref["month"].isna() | (ref["month"] == label)]
        surface = assemble(cbgs, np.zeros(cbgs.size), pop, np.zeros_like(pop))
        table, summary = evaluate_reference(surface, sub, y, m, cfg.noon_hour, cfg.midnight_hour)
        tables.append(table.assign(month=label))
        summaries.append({"month": label, **summary, **_truth_error(ctx, cbgs, label, pop)})
    evaluation = pd.concat(tables, ignore_index=True)
    ctx.write("evaluation", evaluation[["cbg", "month"] + [c for c in evaluation.columns
                                                          if c not in ("cbg", "month")]])
    return {"months": summaries}


def _truth_error(ctx: StageContext, cbgs: np.ndarray, label: str, estimate: np.ndarray) -> dict:
    path = path_for(ctx.config.input_dir, "truth_population")
    if not path.exists():
        return {}
    ctx.inputs["truth_population"] = path
    truth = read_table(path, "truth_population")
    true, _ = align(truth[truth["month"] == label], cbgs, estimate.shape[1], "population")
    return population_error(estimate, true)


def population_error(estimate: np.ndarray, truth: np.ndarray,
                     min_population: float = MAPE_MIN_POPULATION) -> dict:
    """Mean absolute percentage error over cells with enough true population."""
    keep = truth >= min_population
    ape = np.abs(estimate[keep] - truth[keep]) / truth[keep]
    return {
        "truth_cells": int(keep.sum()),
        "truth_mape": float(ape.mean()) if ape.size else None,
        "truth_max_abs_error": float(np.max(np.abs(estimate - truth))) if truth.size else None,
    }


# --------------------------------------------------------------------------
# orchestration


STAGE_FUNCS: dict[str, Callable[..., dict]] = {
    "simulate": stage_simulate,
    "calibrate": stage_calibrate,
    "inbound": stage_inbound,
    "outbound": stage_outbound,
    "assemble": stage_assemble,
    "evaluate": stage_evaluate,
}


def _count(items) -> dict[str, int]:
    out: dict[str, int] = defaultdict(int)
    for item in items:
        out[str(item)] += 1
    return dict(sorted(out.items()))


def _digests(paths: dict[str, Path]) -> dict[str, str | None]:
    return {name: sha256(p) if p.exists() else None for name, p in sorted(paths.items())}


def append_manifest(out_dir: Path, entry: dict) -> Path:
    path = Path(out_dir) / MANIFEST
    manifest = {"runs": []}
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    manifest["runs"].append(entry)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return str(obj)


def run_stage(name: str, config: PipelineConfig, **kw) -> dict:
    """Run one stage and record it in the manifest; returns the manifest entry."""
    ctx = StageContext(config)
    t0 = time.perf_counter()
    report = STAGE_FUNCS[name](ctx, **kw)
    entry = {
        "stage": name,
        "config": config.snapshot(),
        "threshold_overrides": threshold_overrides(config.anchors),
        "inputs": _digests(ctx.inputs),
        "outputs": _digests(ctx.outputs),
        "seconds": round(time.perf_counter() - t0, 3),
        "report": report,
    }
    append_manifest(config.out_dir, entry)
    log.info("%s done in %.2fs", name, entry["seconds"])
    return entry


def run(subcommand: str, config: PipelineConfig, simulate_inputs: bool = True, **kw) -> list[dict]:
    """Run a subcommand; ``all`` chains every stage in order."""
    if subcommand == "all":
        stages = STAGES if simulate_inputs else STAGES[1:]
        return [run_stage(s, config, **(kw if s == "evaluate" else {})) for s in stages]
    if subcommand not in STAGE_FUNCS:
        raise ValueError(f"unknown subcommand {subcommand!r}")
    return [run_stage(subcommand, config, **kw)]
