"""Smoothing, peak detection and percentile helpers for hourly count series."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class HourlySeries:
    """Non-negative counts at consecutive local-time hours starting at ``start``."""

    start: datetime
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size < 1:
            raise ValueError("HourlySeries needs a 1-D sequence with at least one value")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("HourlySeries values must be finite and >= 0")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def timestamp(self, index: int) -> datetime:
        return self.start + timedelta(hours=int(index))


@dataclass(frozen=True)
class Peak:
    index: int
    height: float
    prominence: float
    width: float
    left_base: int
    right_base: int


def _as_array(series) -> np.ndarray:
    if isinstance(series, HourlySeries):
        return series.values
    return np.asarray(series, dtype=float)


@lru_cache(maxsize=32)
def _savgol_projection(window: int, poly_order: int) -> np.ndarray:
    """Hat matrix of a degree-``poly_order`` least-squares fit over ``window`` points.

    Row ``i`` gives the weights that evaluate the fitted polynomial at
    window position ``i``.
    """
    x = np.arange(window, dtype=float) - window // 2
    vander = np.vander(x, poly_order + 1, increasing=True)
    hat = vander @ np.linalg.pinv(vander)
    hat.setflags(write=False)
    return hat


def savgol_smooth(series, window: int = 13, poly_order: int = 3):
    """Savitzky-Golay smoothing with polynomial edge fits, clamped at zero.

    Interior points take the centered least-squares fit; the first and last
    ``window // 2`` points are read off the fits over the first and last full
    windows. Returns the same type that was passed in (``HourlySeries`` or
    array).
    """
    values = _as_array(series)
    if window <= 0 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if poly_order < 0 or poly_order >= window:
        raise ValueError(f"poly_order must be in [0, window), got {poly_order}")
    if values.size < window:
        raise ValueError(f"series of length {values.size} is shorter than window {window}")

    hat = _savgol_projection(window, poly_order)
    half = window // 2
    center = hat[half]
    out = np.empty_like(values)
    windows = np.lib.stride_tricks.sliding_window_view(values, window)
    # weights sum to one, so fit deviations from the evaluated point; keeps constants exact
    mid = values[half:values.size - half]
    out[half:values.size - half] = mid + (windows - mid[:, None]) @ center
    head, tail = values[:window], values[-window:]
    out[:half] = head[:half] + np.einsum("ij,ij->i", hat[:half], head[None, :] - head[:half, None])
    out[values.size - half:] = tail[half + 1:] + np.einsum(
        "ij,ij->i", hat[half + 1:], tail[None, :] - tail[half + 1:, None]
    )
    np.maximum(out, 0.0, out=out)

    if isinstance(series, HourlySeries):
        return HourlySeries(series.start, out)
    return out


def _local_maxima(x: np.ndarray) -> np.ndarray:
    """Indices of strict local maxima; flat tops report their (lower) middle index."""
    peaks = []
    i, n = 1, x.size
    while i < n - 1:
        if x[i - 1] < x[i]:
            ahead = i + 1
            while ahead < n - 1 and x[ahead] == x[i]:
                ahead += 1
            if x[ahead] < x[i]:
                peaks.append((i + ahead - 1) // 2)
                i = ahead
        i += 1
    return np.asarray(peaks, dtype=int)


def _prominence(x: np.ndarray, peak: int) -> tuple[float, int, int]:
    height = x[peak]
    left_min, left_base = height, peak
    i = peak
    while i >= 0 and x[i] <= height:
        if x[i] < left_min:
            left_min, left_base = x[i], i
        i -= 1
    right_min, right_base = height, peak
    i = peak
    while i < x.size and x[i] <= height:
        if x[i] < right_min:
            right_min, right_base = x[i], i
        i += 1
    return height - max(left_min, right_min), left_base, right_base


def _width(x: np.ndarray, peak: int, prominence: float, left_base: int, right_base: int) -> float:
    level = x[peak] - 0.5 * prominence
    i = peak
    while left_base < i and level < x[i]:
        i -= 1
    left_ip = float(i)
    if x[i] < level:
        left_ip += (level - x[i]) / (x[i + 1] - x[i])
    i = peak
    while i < right_base and level < x[i]:
        i += 1
    right_ip = float(i)
    if x[i] < level:
        right_ip -= (level - x[i]) / (x[i - 1] - x[i])
    return right_ip - left_ip


def _distance_keep(x: np.ndarray, candidates: np.ndarray, distance: int) -> np.ndarray:
    if distance <= 1 or candidates.size < 2:
        return candidates
    # highest first, lower index wins ties
    order = sorted(range(candidates.size), key=lambda k: (-x[candidates[k]], candidates[k]))
    keep = np.ones(candidates.size, dtype=bool)
    for k in order:
        if not keep[k]:
            continue
        pos = candidates[k]
        for other in range(candidates.size):
            if other != k and keep[other] and abs(candidates[other] - pos) < distance:
                if (x[candidates[other]], -candidates[other]) < (x[pos], -pos):
                    keep[other] = False
    return candidates[keep]


def find_peaks(
    series,
    min_height: float = 0.0,
    min_prominence: float = 0.0,
    min_distance: int = 1,
    min_width: float = 0.0,
) -> list[Peak]:
    """Local maxima that pass height, distance, prominence and width filters.

    Filters run in that order; the distance filter only sees peaks that
    already passed the height filter, so relaxing any filter never removes a
    peak. Width is measured at half prominence.
    """
    x = _as_array(series)
    if x.size == 0:
        raise ValueError("find_peaks needs a non-empty series")
    if min(min_height, min_prominence, min_distance, min_width) < 0:
        raise ValueError("peak thresholds must be >= 0")

    candidates = _local_maxima(x)
    candidates = candidates[x[candidates] >= min_height] if candidates.size else candidates
    candidates = _distance_keep(x, candidates, int(min_distance))

    peaks = []
    for idx in candidates:
        prom, lb, rb = _prominence(x, int(idx))
        if prom < min_prominence:
            continue
        width = _width(x, int(idx), prom, lb, rb)
        if width < min_width:
            continue
        peaks.append(Peak(int(idx), float(x[idx]), float(prom), float(width), int(lb), int(rb)))
    return peaks


def percentile(values, q: float) -> float:
    """Linear-interpolation percentile with rank ``q / 100 * (n - 1)``."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("percentile of an empty sequence")
    if not 0 <= q <= 100:
        raise ValueError(f"q must be in [0, 100], got {q}")
    rank = q / 100.0 * (v.size - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (rank - lo) * (v[hi] - v[lo]))
