"""Inbound population from destination stop counts.

Stops become devices through the county-month scaling factor ``k`` and
devices become people through a destination expansion factor: the
origin-device-weighted mean of origin residents per tracked device.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

FLAG_ALL_ORIGINS_EXCLUDED = "all_origins_excluded"
FLAG_INBOUND_MISSING = "inbound_missing"


def expansion_factor(population: float, devices: float) -> float | None:
    """Residents per tracked device, or ``None`` when nobody is tracked."""
    if population < 0 or devices < 0:
        raise ValueError("population and devices must be >= 0")
    if devices == 0:
        return None
    return population / devices


@dataclass(frozen=True)
class DestinationExpansion:
    value: float
    excluded_origins: tuple = ()
    flags: tuple[str, ...] = ()


def destination_expansion(origin_devices: Mapping, expansion: Mapping) -> DestinationExpansion:
    """Weighted mean of origin expansion factors, weights = observed device shares.

    Origins without a factor (no tracked devices or unknown) are dropped and
    the shares renormalised over the rest.
    """
    total = sum(origin_devices.values())
    if total <= 0:
        raise ValueError("destination has no observed origin devices")
    kept = {j: n for j, n in origin_devices.items() if n > 0 and expansion.get(j) is not None}
    excluded = tuple(sorted(j for j, n in origin_devices.items() if n > 0 and j not in kept))
    if not kept:
        return DestinationExpansion(0.0, excluded, (FLAG_ALL_ORIGINS_EXCLUDED,))
    kept_total = sum(kept.values())
    value = sum(n * expansion[j] for j, n in kept.items()) / kept_total
    return DestinationExpansion(value, excluded)


@dataclass
class InboundSurface:
    """Hourly inbound people for one destination-month, with the audit terms."""

    stops: np.ndarray
    k: float
    expansion: float
    devices: np.ndarray = field(init=False)
    inbound: np.ndarray = field(init=False)

    def __post_init__(self):
        self.stops = np.asarray(self.stops, dtype=float)
        self.devices = self.k * self.stops
        self.inbound = self.devices * self.expansion


def inbound_surface(hourly_stops, k: float, expansion: float) -> InboundSurface:
    if not k > 0:
        raise ValueError(f"scaling factor must be > 0, got {k}")
    if expansion < 0:
        raise ValueError(f"expansion factor must be >= 0, got {expansion}")
    return InboundSurface(hourly_stops, k, expansion)


@dataclass
class MonthInbound:
    """Vectorised inbound for every CBG of one month.

    ``inbound`` and ``devices`` are (n_cbgs, hours) arrays in ``cbgs`` order.
    ``origin_weights`` has one row per (dest_cbg, origin_cbg) with the
    person-equivalent weight ``devices * P_origin`` used to split inbound
    totals across origins.
    """

    cbgs: np.ndarray
    inbound: np.ndarray
    devices: np.ndarray
    audit: pd.DataFrame
    origin_weights: pd.DataFrame


def origin_expansion_table(residents: pd.DataFrame, panel: pd.DataFrame) -> pd.Series:
    """Per-origin expansion factor for one month; NaN where undefined."""
    merged = panel[["cbg", "tracked_devices"]].merge(residents[["cbg", "population"]], on="cbg", how="outer")
    devices = merged["tracked_devices"].fillna(0).to_numpy(float)
    pop = merged["population"].to_numpy(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(devices > 0, pop / devices, np.nan)
    return pd.Series(factor, index=merged["cbg"].to_numpy(), name="expansion")


def estimate_month(
    cbgs: np.ndarray,
    stops: np.ndarray,
    k_by_cbg: np.ndarray,
    origins: pd.DataFrame,
    expansion: pd.Series,
) -> MonthInbound:
    """Inbound for all destinations of a month.

    Parameters
    ----------
    cbgs : array of destination ids, row order of ``stops``
    stops : (n, hours) observed stop counts
    k_by_cbg : county-month scaling factor for each row
    origins : columns ``dest_cbg, origin_cbg, devices`` for this month
    expansion : origin id -> residents per tracked device (NaN if undefined)
    """
    cbgs = np.asarray(cbgs)
    o = origins[origins["devices"] > 0][["dest_cbg", "origin_cbg", "devices"]].copy()
    o["expansion"] = o["origin_cbg"].map(expansion)
    o["included"] = o["expansion"].notna()
    o["weight"] = np.where(o["included"], o["devices"] * o["expansion"].fillna(0.0), 0.0)
    o["kept_devices"] = np.where(o["included"], o["devices"], 0)
    o["excluded"] = (~o["included"]).astype(int)
    per_dest = o.groupby("dest_cbg")[["weight", "kept_devices", "excluded"]].sum()
    kept = per_dest["kept_devices"].to_numpy(float)
    per_dest["expansion"] = np.divide(per_dest["weight"].to_numpy(float), kept,
                                      out=np.zeros_like(kept), where=kept > 0)

    idx = pd.Index(cbgs)
    dest_exp = per_dest["expansion"].reindex(idx)
    excluded = per_dest["excluded"].reindex(idx).fillna(0).astype(int).to_numpy()
    has_origin = dest_exp.notna().to_numpy()
    p_c = dest_exp.fillna(0.0).to_numpy(float)

    flags = np.full(cbgs.size, "", dtype=object)
    all_excl = has_origin & (per_dest["kept_devices"].reindex(idx).fillna(0).to_numpy() == 0)
    flags[all_excl] = FLAG_ALL_ORIGINS_EXCLUDED
    flags[~has_origin] = FLAG_INBOUND_MISSING
    if np.any(~has_origin):
        log.info("%d destinations without origin data get zero inbound", int((~has_origin).sum()))

    stops = np.asarray(stops, dtype=float)
    devices = stops * np.asarray(k_by_cbg, dtype=float)[:, None]
    inbound = devices * p_c[:, None]

    audit = pd.DataFrame({
        "cbg": cbgs,
        "k": np.asarray(k_by_cbg, dtype=float),
        "expansion": p_c,
        "excluded_origins": excluded,
        "flags": flags,
    })
    weights = o.loc[o["included"], ["dest_cbg", "origin_cbg", "weight"]].reset_index(drop=True)
    return MonthInbound(cbgs, inbound, devices, audit, weights)
