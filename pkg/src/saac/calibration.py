"""County-month observation scaling factors from accepted anchor weeks."""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .anchors import AnchorWeekSummary


class Provenance(str, enum.Enum):
    DIRECT = "direct"
    TEMPORAL_COMPLETION = "temporal_completion"
    STATE_FALLBACK = "state_fallback"


class UnresolvedCountyError(RuntimeError):
    def __init__(self, missing: Sequence[tuple[str, int]]):
        self.missing = sorted(missing)
        counties = sorted({c for c, _ in self.missing})
        super().__init__(
            f"no scaling factor available for {len(self.missing)} county-months "
            f"in counties {counties}"
        )


@dataclass(frozen=True)
class WeekOsfSample:
    county: str
    month: int
    weekly_distinct_devices: int
    typical_hourly_count: float

    def __post_init__(self):
        if not self.typical_hourly_count > 0:
            raise ValueError("typical_hourly_count must be > 0")

    @property
    def week_osf(self) -> float:
        return self.weekly_distinct_devices / self.typical_hourly_count

    @classmethod
    def from_summary(cls, s: AnchorWeekSummary) -> "WeekOsfSample":
        return cls(s.county, s.month, s.weekly_distinct_devices, s.typical_hourly_count)


@dataclass(frozen=True)
class CountyMonthOsf:
    county: str
    month: int
    k: float
    provenance: Provenance = Provenance.DIRECT
    n_samples: int = 0


def samples_from_summaries(summaries: Iterable[AnchorWeekSummary]) -> list[WeekOsfSample]:
    return [WeekOsfSample.from_summary(s) for s in summaries if s.accepted]


def _ratio_of_totals(samples: Sequence[WeekOsfSample]) -> float | None:
    devices = sum(s.weekly_distinct_devices for s in samples)
    events = sum(s.typical_hourly_count for s in samples)
    if events <= 0 or devices <= 0:
        return None
    return devices / events


def aggregate_county_month(samples: Sequence[WeekOsfSample]) -> CountyMonthOsf | None:
    """Pool weeks as total devices over total typical counts; ``None`` when empty."""
    if not samples:
        return None
    keys = {(s.county, s.month) for s in samples}
    if len(keys) != 1:
        raise ValueError(f"samples span several county-months: {sorted(keys)}")
    k = _ratio_of_totals(samples)
    if k is None:
        return None
    county, month = keys.pop()
    return CountyMonthOsf(county, month, k, Provenance.DIRECT, len(samples))


# month to fill -> donor months (mean when more than one)
COMPLETION_RULES: dict[int, tuple[int, ...]] = {1: (2,), 6: (5,), 8: (9,), 7: (5, 9)}


def temporal_complete(series: Mapping[int, float | None]) -> dict[int, tuple[float, Provenance]]:
    """Fill school-break months from directly observed neighbours.

    Donors must be direct values; months that cannot be filled stay absent.
    """
    direct = {m: k for m, k in series.items() if k is not None}
    out = {m: (k, Provenance.DIRECT) for m, k in direct.items()}
    for month, donors in COMPLETION_RULES.items():
        if month in direct or not all(d in direct for d in donors):
            continue
        out[month] = (sum(direct[d] for d in donors) / len(donors), Provenance.TEMPORAL_COMPLETION)
    return dict(sorted(out.items()))


def state_fallback(
    table: Mapping[tuple[str, int], CountyMonthOsf],
    samples: Sequence[WeekOsfSample],
    county_state: Mapping[str, str],
    required: Iterable[tuple[str, int]],
) -> dict[tuple[str, int], CountyMonthOsf]:
    """Give every required county-month a factor, borrowing from its own state only.

    State factors pool all samples of the state's counties per month and get
    the same break-month completion as counties. Raises
    :class:`UnresolvedCountyError` when a state has nothing to offer.
    """
    by_state_month: dict[tuple[str, int], list[WeekOsfSample]] = defaultdict(list)
    for s in samples:
        by_state_month[(county_state[s.county], s.month)].append(s)
    state_series: dict[str, dict[int, float | None]] = defaultdict(dict)
    for (state, month), group in by_state_month.items():
        state_series[state][month] = _ratio_of_totals(group)
    state_k = {st: temporal_complete(series) for st, series in state_series.items()}

    out = dict(table)
    missing = []
    for county, month in required:
        if (county, month) in out:
            continue
        filled = state_k.get(county_state.get(county), {}).get(month)
        if filled is None:
            missing.append((county, month))
            continue
        out[(county, month)] = CountyMonthOsf(county, month, filled[0], Provenance.STATE_FALLBACK)
    if missing:
        raise UnresolvedCountyError(missing)
    return dict(sorted(out.items()))


def calibrate(
    summaries: Iterable[AnchorWeekSummary],
    county_state: Mapping[str, str],
    months: Iterable[int],
) -> dict[tuple[str, int], CountyMonthOsf]:
    """Direct aggregation, temporal completion, then state fallback.

    Returns a factor for every county in ``county_state`` and every month in
    ``months``.
    """
    samples = samples_from_summaries(summaries)
    grouped: dict[tuple[str, int], list[WeekOsfSample]] = defaultdict(list)
    for s in samples:
        grouped[(s.county, s.month)].append(s)

    per_county: dict[str, dict[int, float | None]] = defaultdict(dict)
    counts: dict[tuple[str, int], int] = {}
    for key, group in grouped.items():
        agg = aggregate_county_month(group)
        if agg is not None:
            per_county[key[0]][key[1]] = agg.k
            counts[key] = agg.n_samples

    table: dict[tuple[str, int], CountyMonthOsf] = {}
    for county, series in per_county.items():
        for month, (k, prov) in temporal_complete(series).items():
            table[(county, month)] = CountyMonthOsf(county, month, k, prov, counts.get((county, month), 0))

    months = sorted(set(months))
    required = [(c, m) for c in sorted(county_state) for m in months]
    return state_fallback(table, samples, county_state, required)
