"""Run configuration and the anchor-screening constants.

Every published threshold lives in :class:`AnchorThresholds`; stage code takes
an instance rather than repeating numbers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any


@dataclass(frozen=True)
class AnchorThresholds:
    # smoothing
    savgol_window: int = 13
    savgol_order: int = 3
    # daytime attendance peaks
    peak_min_height: float = 15.0
    peak_min_prominence: float = 8.0
    peak_min_distance: int = 12
    peak_min_width: float = 3.0
    school_day_baseline_fraction: float = 0.5
    min_baseline_peaks: int = 3
    spring_months: tuple[int, ...] = (2, 3, 4, 5)
    fall_months: tuple[int, ...] = (9, 10, 11)
    fall_start_month: int = 7
    # [start, end) local hours
    school_hours: tuple[int, int] = (7, 17)
    after_school_hours: tuple[int, int] = (17, 22)
    weekend_daytime_hours: tuple[int, int] = (7, 17)
    # gatherings
    after_school_median_multiplier: float = 2.0
    after_school_min_hourly: float = 10.0
    weekend_median_multiplier: float = 2.0
    weekend_min_hourly: float = 20.0
    # week acceptance
    min_school_days: int = 4
    max_gathering_ratio: float = 0.2
    max_week_osf: float = 7.0
    typical_percentile: float = 80.0
    typical_hour: int = 11


@dataclass(frozen=True)
class PipelineConfig:
    input_dir: Path = Path(".")
    out_dir: Path = Path(".")
    ipf_tol: float = 1e-8
    ipf_max_iter: int = 100
    threads: int = 1
    seed: int = 0
    anchors: AnchorThresholds = field(default_factory=AnchorThresholds)
    # hour used for the daytime reference comparison
    noon_hour: int = 12
    midnight_hour: int = 0
    # warn when grand totals need a larger correction than this
    rescale_warn_bounds: tuple[float, float] = (0.5, 2.0)
    world: dict[str, Any] = field(default_factory=dict)

    def snapshot(self) -> dict[str, Any]:
        out = asdict(self)
        out["input_dir"] = str(self.input_dir)
        out["out_dir"] = str(self.out_dir)
        return _jsonable(out)

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> "PipelineConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "anchors" in data:
            data["anchors"] = thresholds_from_mapping(data["anchors"])
        for key in ("input_dir", "out_dir"):
            if key in data:
                data[key] = Path(data[key])
        if "rescale_warn_bounds" in data:
            data["rescale_warn_bounds"] = tuple(data["rescale_warn_bounds"])
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(json.load(fh))

    def with_overrides(self, **kw: Any) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def thresholds_from_mapping(data: dict[str, Any]) -> AnchorThresholds:
    known = {f.name: f for f in fields(AnchorThresholds)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown anchor threshold keys: {sorted(unknown)}")
    clean = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return replace(AnchorThresholds(), **clean)


def threshold_overrides(thresholds: AnchorThresholds) -> dict[str, Any]:
    """Fields that differ from the published defaults."""
    base = AnchorThresholds()
    return {
        f.name: _jsonable(getattr(thresholds, f.name))
        for f in fields(AnchorThresholds)
        if getattr(thresholds, f.name) != getattr(base, f.name)
    }


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "isoformat"):
        return obj.isoformat()
    return obj
