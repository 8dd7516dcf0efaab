"""School-day detection, gathering flags and anchor-week screening.

All hour windows are half-open ``[start, end)`` local hours. A week is the
168 hourly visit counts of one school starting Monday 00:00.
"""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import AnchorThresholds
from .signal import HourlySeries, find_peaks, percentile, savgol_smooth

DEFAULT_THRESHOLDS = AnchorThresholds()
HOURS_PER_WEEK = 168


class NoBaselineError(ValueError):
    """Neither semester has enough attendance peaks to form a baseline."""


class Semester(str, enum.Enum):
    SPRING = "spring"
    FALL = "fall"


class GatheringKind(str, enum.Enum):
    AFTER_SCHOOL = "after_school"
    WEEKEND_DAYTIME = "weekend_daytime"


class RejectionReason(str, enum.Enum):
    TOO_FEW_SCHOOL_DAYS = "TOO_FEW_SCHOOL_DAYS"
    GATHERING_PEAKS_EXCEED_TYPICAL = "GATHERING_PEAKS_EXCEED_TYPICAL"
    GATHERING_RATIO_EXCEEDED = "GATHERING_RATIO_EXCEEDED"
    OSF_CAP_EXCEEDED = "OSF_CAP_EXCEEDED"
    ZERO_TYPICAL_COUNT = "ZERO_TYPICAL_COUNT"


@dataclass(frozen=True)
class SchoolWeekRecord:
    poi_id: str
    county: str
    week_start: date
    hourly_visits: HourlySeries
    weekly_distinct_devices: int

    def __post_init__(self):
        if self.week_start.weekday() != 0:
            raise ValueError(f"week_start {self.week_start} is not a Monday")
        visits = self.hourly_visits
        if not isinstance(visits, HourlySeries):
            visits = HourlySeries(datetime.combine(self.week_start, datetime.min.time()), visits)
            object.__setattr__(self, "hourly_visits", visits)
        if len(visits) != HOURS_PER_WEEK:
            raise ValueError(f"expected {HOURS_PER_WEEK} hourly values, got {len(visits)}")
        if visits.start != datetime.combine(self.week_start, datetime.min.time()):
            raise ValueError("hourly_visits must start at week_start 00:00")
        if self.weekly_distinct_devices < 0:
            raise ValueError("weekly_distinct_devices must be >= 0")

    @property
    def days(self) -> np.ndarray:
        """Visits reshaped to (7 days, 24 hours), Monday first."""
        return self.hourly_visits.values.reshape(7, 24)

    def date_of(self, day: int) -> date:
        return self.week_start + timedelta(days=day)


@dataclass(frozen=True)
class SchoolDayLabel:
    date: date
    is_school_day: bool
    peak_height: float
    semester: Semester

    def __post_init__(self):
        if self.is_school_day and self.date.weekday() >= 5:
            raise ValueError("weekend dates cannot be school days")


@dataclass(frozen=True)
class GatheringEvent:
    date: date
    kind: GatheringKind
    total_events: float
    peak_hour: int
    peak_events: float


@dataclass(frozen=True)
class AnchorWeekSummary:
    poi_id: str
    county: str
    week_start: date
    month: int
    n_school_days: int
    school_hour_events: float
    gathering_events: float
    typical_hourly_count: float
    weekly_distinct_devices: int
    accepted: bool
    rejection_reasons: tuple[RejectionReason, ...] = ()
    gathering_peak_sum: float = 0.0

    @property
    def week_osf(self) -> float:
        if self.typical_hourly_count <= 0:
            return float("nan")
        return self.weekly_distinct_devices / self.typical_hourly_count


@dataclass(frozen=True)
class Baselines:
    spring: float | None
    fall: float | None

    def for_date(self, d: date, thresholds: AnchorThresholds = DEFAULT_THRESHOLDS) -> float | None:
        # an absent semester borrows the other semester's baseline
        if semester_of(d, thresholds) is Semester.SPRING:
            return self.spring if self.spring is not None else self.fall
        return self.fall if self.fall is not None else self.spring


@dataclass(frozen=True)
class GatheringMedians:
    after_school: Mapping[Semester, float] = field(default_factory=dict)
    weekend: Mapping[Semester, float] = field(default_factory=dict)


def semester_of(d: date, thresholds: AnchorThresholds = DEFAULT_THRESHOLDS) -> Semester:
    return Semester.SPRING if d.month < thresholds.fall_start_month else Semester.FALL


def _in_window(hour: int, window: tuple[int, int]) -> bool:
    return window[0] <= hour < window[1]


def daytime_peaks(record: SchoolWeekRecord, thresholds: AnchorThresholds = DEFAULT_THRESHOLDS
                  ) -> dict[date, list[float]]:
    """Smoothed attendance peaks inside the school-hour window, grouped by weekday date."""
    th = thresholds
    smooth = savgol_smooth(record.hourly_visits, th.savgol_window, th.savgol_order)
    peaks = find_peaks(smooth, th.peak_min_height, th.peak_min_prominence,
                       th.peak_min_distance, th.peak_min_width)
    by_date: dict[date, list[float]] = defaultdict(list)
    for p in peaks:
        day, hour = divmod(p.index, 24)
        if day < 5 and _in_window(hour, th.school_hours):
            by_date[record.date_of(day)].append(p.height)
    return dict(by_date)


def semester_baselines(peaks_by_date: Mapping[date, Sequence[float]],
                       thresholds: AnchorThresholds = DEFAULT_THRESHOLDS) -> Baselines:
    """Median weekday daytime peak height per semester window.

    A semester with fewer than ``min_baseline_peaks`` peaks has no baseline.
    Raises :class:`NoBaselineError` when both are missing.
    """
    spring: list[float] = []
    fall: list[float] = []
    for d, heights in peaks_by_date.items():
        if d.weekday() >= 5:
            continue
        if d.month in thresholds.spring_months:
            spring.extend(heights)
        elif d.month in thresholds.fall_months:
            fall.extend(heights)
    need = thresholds.min_baseline_peaks
    out = Baselines(
        spring=float(np.median(spring)) if len(spring) >= need else None,
        fall=float(np.median(fall)) if len(fall) >= need else None,
    )
    if out.spring is None and out.fall is None:
        raise NoBaselineError(
            f"too few attendance peaks for a baseline (spring={len(spring)}, fall={len(fall)})"
        )
    return out


def identify_school_days(record: SchoolWeekRecord, baselines: Baselines,
                         thresholds: AnchorThresholds = DEFAULT_THRESHOLDS,
                         peaks: Mapping[date, Sequence[float]] | None = None
                         ) -> list[SchoolDayLabel]:
    """One label per date of the week; weekends are never school days."""
    if peaks is None:
        peaks = daytime_peaks(record, thresholds)
    labels = []
    for day in range(7):
        d = record.date_of(day)
        heights = peaks.get(d, ())
        top = max(heights) if heights else 0.0
        base = baselines.for_date(d, thresholds)
        is_school = (
            day < 5
            and base is not None
            and any(h > base * thresholds.school_day_baseline_fraction for h in heights)
        )
        labels.append(SchoolDayLabel(d, bool(is_school), float(top), semester_of(d, thresholds)))
    return labels


def _window_slice(window: tuple[int, int]) -> slice:
    return slice(window[0], window[1])


def gathering_medians(weeks: Iterable[tuple[SchoolWeekRecord, Sequence[SchoolDayLabel]]],
                      thresholds: AnchorThresholds = DEFAULT_THRESHOLDS) -> GatheringMedians:
    """Semester medians of after-school totals (school days) and weekend-daytime totals."""
    after: dict[Semester, list[float]] = defaultdict(list)
    weekend: dict[Semester, list[float]] = defaultdict(list)
    after_win = _window_slice(thresholds.after_school_hours)
    weekend_win = _window_slice(thresholds.weekend_daytime_hours)
    for record, labels in weeks:
        days = record.days
        for day, label in enumerate(labels):
            if day >= 5:
                weekend[label.semester].append(float(days[day, weekend_win].sum()))
            elif label.is_school_day:
                after[label.semester].append(float(days[day, after_win].sum()))
    return GatheringMedians(
        after_school={s: float(np.median(v)) for s, v in after.items()},
        weekend={s: float(np.median(v)) for s, v in weekend.items()},
    )


def detect_gatherings(record: SchoolWeekRecord, labels: Sequence[SchoolDayLabel],
                      medians: GatheringMedians,
                      thresholds: AnchorThresholds = DEFAULT_THRESHOLDS) -> list[GatheringEvent]:
    th = thresholds
    days = record.days
    events = []
    for day, label in enumerate(labels):
        if day < 5:
            if not label.is_school_day:
                continue
            window = th.after_school_hours
            median = medians.after_school.get(label.semester, 0.0)
            mult, kind = th.after_school_median_multiplier, GatheringKind.AFTER_SCHOOL
        else:
            window = th.weekend_daytime_hours
            median = medians.weekend.get(label.semester, 0.0)
            mult, kind = th.weekend_median_multiplier, GatheringKind.WEEKEND_DAYTIME
        counts = days[day, _window_slice(window)]
        total = float(counts.sum())
        peak_offset = int(np.argmax(counts))
        peak = float(counts[peak_offset])
        if not total > mult * median:
            continue
        if kind is GatheringKind.AFTER_SCHOOL and peak < th.after_school_min_hourly:
            continue
        if kind is GatheringKind.WEEKEND_DAYTIME and not peak > th.weekend_min_hourly:
            continue
        events.append(GatheringEvent(label.date, kind, total, window[0] + peak_offset, peak))
    return events


def summarize_week(record: SchoolWeekRecord, labels: Sequence[SchoolDayLabel],
                   gatherings: Sequence[GatheringEvent],
                   thresholds: AnchorThresholds = DEFAULT_THRESHOLDS) -> AnchorWeekSummary:
    th = thresholds
    days = record.days
    school_idx = [i for i, lab in enumerate(labels) if lab.is_school_day]
    school_hour_events = float(days[school_idx, _window_slice(th.school_hours)].sum())
    after = float(days[:5, _window_slice(th.after_school_hours)].sum())
    weekend = float(days[5:, _window_slice(th.weekend_daytime_hours)].sum())
    gathering_events = after + weekend
    typical = percentile(days[:5, th.typical_hour], th.typical_percentile)
    top_two = sorted((g.peak_events for g in gatherings), reverse=True)[:2]
    peak_sum = float(sum(top_two))
    devices = int(record.weekly_distinct_devices)

    reasons = []
    if len(school_idx) < th.min_school_days:
        reasons.append(RejectionReason.TOO_FEW_SCHOOL_DAYS)
    if peak_sum > typical:
        reasons.append(RejectionReason.GATHERING_PEAKS_EXCEED_TYPICAL)
    if gathering_events > th.max_gathering_ratio * school_hour_events:
        reasons.append(RejectionReason.GATHERING_RATIO_EXCEEDED)
    if typical <= 0:
        reasons.append(RejectionReason.ZERO_TYPICAL_COUNT)
    elif devices / typical > th.max_week_osf:
        reasons.append(RejectionReason.OSF_CAP_EXCEEDED)

    return AnchorWeekSummary(
        poi_id=record.poi_id,
        county=record.county,
        week_start=record.week_start,
        month=record.week_start.month,
        n_school_days=len(school_idx),
        school_hour_events=school_hour_events,
        gathering_events=gathering_events,
        typical_hourly_count=typical,
        weekly_distinct_devices=devices,
        accepted=not reasons,
        rejection_reasons=tuple(reasons),
        gathering_peak_sum=peak_sum,
    )


def process_school(records: Sequence[SchoolWeekRecord],
                   thresholds: AnchorThresholds = DEFAULT_THRESHOLDS) -> list[AnchorWeekSummary]:
    """Run the full screening chain over every week of one school.

    Baselines and gathering medians are pooled over all supplied weeks.
    Raises :class:`NoBaselineError` if the school cannot be calibrated.
    """
    records = sorted(records, key=lambda r: r.week_start)
    peaks = [daytime_peaks(r, thresholds) for r in records]
    pooled: dict[date, list[float]] = {}
    for p in peaks:
        pooled.update(p)
    baselines = semester_baselines(pooled, thresholds)
    labels = [identify_school_days(r, baselines, thresholds, p) for r, p in zip(records, peaks)]
    medians = gathering_medians(zip(records, labels), thresholds)
    out = []
    for record, lab in zip(records, labels):
        gatherings = detect_gatherings(record, lab, medians, thresholds)
        out.append(summarize_week(record, lab, gatherings, thresholds))
    return out
