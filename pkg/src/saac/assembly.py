"""Population balance, clamping and comparison against reference counts."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np
import pandas as pd

FLAG_CLAMPED = "clamped"


class GridMismatchError(ValueError):
    pass


@dataclass
class PopulationSurface:
    """(n_cbgs, hours) population for one month.

    ``raw`` keeps the unclamped balance; ``population`` is floored at zero.
    """

    cbgs: np.ndarray
    residents: np.ndarray
    inbound: np.ndarray
    outbound: np.ndarray
    raw: np.ndarray
    population: np.ndarray

    @property
    def clamped(self) -> np.ndarray:
        return self.raw < 0

    @property
    def clamp_deficit(self) -> float:
        return float(-self.raw[self.clamped].sum())

    def clamp_audit(self) -> pd.DataFrame:
        rows, hours = np.nonzero(self.clamped)
        return pd.DataFrame({
            "cbg": self.cbgs[rows],
            "hour_index": hours,
            "pre_clamp": self.raw[rows, hours],
        })


def assemble(cbgs, residents, inbound, outbound) -> PopulationSurface:
    """Residents plus inbound minus outbound, negatives clamped to zero."""
    cbgs = np.asarray(cbgs)
    residents = np.asarray(residents, dtype=float)
    inbound = np.asarray(inbound, dtype=float)
    outbound = np.asarray(outbound, dtype=float)
    if residents.shape != (cbgs.size,):
        raise GridMismatchError(f"residents shape {residents.shape} != ({cbgs.size},)")
    if inbound.shape != outbound.shape or inbound.shape[0] != cbgs.size:
        raise GridMismatchError(f"inbound {inbound.shape} and outbound {outbound.shape} "
                                f"must both be ({cbgs.size}, hours)")
    raw = residents[:, None] + inbound - outbound
    return PopulationSurface(cbgs, residents, inbound, outbound, raw, np.maximum(raw, 0.0))


def align(frame: pd.DataFrame, cbgs, hours: int, column: str, allow_absent: bool = False
          ) -> tuple[np.ndarray, np.ndarray]:
    """Dense (n_cbgs, hours) view of a long ``cbg, hour_index`` table.

    Every present CBG needs each hour exactly once. With ``allow_absent``,
    CBGs with no rows at all are zero-filled; the second return value marks
    them.
    """
    cbgs = pd.Index(cbgs)
    codes = cbgs.get_indexer(frame["cbg"])
    hour = frame["hour_index"].to_numpy()
    if np.any(codes < 0):
        unknown = pd.unique(frame["cbg"][codes < 0])[:3].tolist()
        raise GridMismatchError(f"{column}: unknown cbg ids, e.g. {unknown}")
    if np.any((hour < 0) | (hour >= hours)):
        raise GridMismatchError(f"{column}: hour_index outside [0, {hours})")
    key = codes.astype(np.int64) * hours + hour
    count = np.bincount(key, minlength=cbgs.size * hours).reshape(cbgs.size, hours)
    if count.max(initial=0) > 1:
        c, h = np.argwhere(count > 1)[0]
        raise GridMismatchError(f"{column}: duplicate row for cbg {cbgs[c]} hour {h}")
    per_cbg = count.sum(axis=1)
    absent = per_cbg == 0
    partial = (per_cbg > 0) & (per_cbg < hours)
    if partial.any() or (absent.any() and not allow_absent):
        bad = np.flatnonzero(partial | absent)
        missing = [(cbgs[c], int(np.flatnonzero(count[c] == 0)[0])) for c in bad[:3]]
        raise GridMismatchError(f"{column}: {len(bad)} cbgs with missing hours, e.g. {missing}")
    out = np.zeros(cbgs.size * hours)
    out[key] = frame[column].to_numpy(float)
    return out.reshape(cbgs.size, hours), absent


def hour_mask(year: int, month: int, hours: int, hour_of_day: int, weekdays_only: bool) -> np.ndarray:
    first = date(year, month, 1)
    mask = np.zeros(hours, dtype=bool)
    for day in range(hours // 24):
        d = first + timedelta(days=day)
        if weekdays_only and d.weekday() >= 5:
            continue
        mask[day * 24 + hour_of_day] = True
    return mask


def mean_at_hours(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return values[:, mask].mean(axis=1)


def relative_difference(estimate, reference) -> np.ndarray:
    """(estimate - reference) / reference; NaN where the reference is not positive."""
    estimate = np.asarray(estimate, dtype=float)
    reference = np.asarray(reference, dtype=float)
    out = np.full(estimate.shape, np.nan)
    ok = reference > 0
    out[ok] = (estimate[ok] - reference[ok]) / reference[ok]
    return out


def evaluate_reference(surface: PopulationSurface, reference: pd.DataFrame, year: int, month: int,
                       noon_hour: int = 12, midnight_hour: int = 0) -> tuple[pd.DataFrame, dict]:
    """Weekday-noon and midnight means against daytime / nighttime references.

    ``reference`` has columns ``cbg, daytime_ref, nighttime_ref``.
    """
    hours = surface.population.shape[1]
    noon = mean_at_hours(surface.population, hour_mask(year, month, hours, noon_hour, True))
    night = mean_at_hours(surface.population, hour_mask(year, month, hours, midnight_hour, False))
    ref = reference.set_index("cbg").reindex(surface.cbgs)
    day_ref = ref["daytime_ref"].to_numpy(float)
    night_ref = ref["nighttime_ref"].to_numpy(float)
    table = pd.DataFrame({
        "cbg": surface.cbgs,
        "mean_noon": noon,
        "midnight": night,
        "daytime_ref": day_ref,
        "nighttime_ref": night_ref,
        "noon_rel_diff": relative_difference(noon, day_ref),
        "midnight_rel_diff": relative_difference(night, night_ref),
    })
    summary = {
        "n_cbgs": int(surface.cbgs.size),
        "noon_excluded": int(np.sum(~(np.nan_to_num(day_ref, nan=0.0) > 0))),
        "midnight_excluded": int(np.sum(~(np.nan_to_num(night_ref, nan=0.0) > 0))),
        "noon_mean_abs_rel_diff": _nanmean_abs(table["noon_rel_diff"]),
        "midnight_mean_abs_rel_diff": _nanmean_abs(table["midnight_rel_diff"]),
    }
    return table, summary


def _nanmean_abs(s: pd.Series) -> float | None:
    v = np.abs(s.to_numpy(float))
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else None
