"""Hourly outbound people per origin by iterative proportional fitting.

Only the hours x origins matrix is held in memory; the origin x destination
x hour flows are never formed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)


class EmptyMonthError(ValueError):
    """Row or column marginals sum to zero."""


class StructuralInfeasibilityError(ValueError):
    """A positive marginal has no positive seed cell to carry it."""


@dataclass(frozen=True)
class MarginalSpec:
    rows: np.ndarray
    cols: np.ndarray
    origins: np.ndarray
    rescale: float = 1.0

    @property
    def hours(self) -> int:
        return self.rows.size

    @property
    def n_origins(self) -> int:
        return self.cols.size


@dataclass(frozen=True)
class IpfReport:
    iterations: int
    max_deviation: float
    converged: bool


def build_row_marginals(inbound: np.ndarray) -> np.ndarray:
    """Total inbound people over all destinations, per hour."""
    return np.asarray(inbound, dtype=float).sum(axis=0)


def build_col_marginals(origin_weights: pd.DataFrame, inbound_totals: pd.Series) -> pd.Series:
    """Monthly outbound person-hours per origin.

    Each destination's monthly inbound total is split across its origins in
    proportion to ``weight`` (observed devices times origin expansion).
    """
    w = origin_weights[["dest_cbg", "origin_cbg", "weight"]]
    share = w["weight"] / w.groupby("dest_cbg")["weight"].transform("sum")
    flow = share * w["dest_cbg"].map(inbound_totals).fillna(0.0).to_numpy()
    return flow.groupby(w["origin_cbg"].to_numpy()).sum().sort_index()


def reconcile(rows, cols, origins=None, warn_bounds=(0.5, 2.0)) -> MarginalSpec:
    """Rescale column marginals so both sides share the row grand total.

    Rows are left untouched.
    """
    rows = np.asarray(rows, dtype=float)
    cols = np.asarray(cols, dtype=float)
    if np.any(rows < 0) or np.any(cols < 0):
        raise ValueError("marginals must be >= 0")
    total_rows, total_cols = rows.sum(), cols.sum()
    if total_rows <= 0 or total_cols <= 0:
        raise EmptyMonthError(f"empty month: row total {total_rows}, column total {total_cols}")
    factor = total_rows / total_cols
    lo, hi = warn_bounds
    if not lo <= factor <= hi:
        log.warning("column marginals rescaled by %.4f (outside [%s, %s])", factor, lo, hi)
    else:
        log.info("column marginals rescaled by %.6f", factor)
    if origins is None:
        origins = np.arange(cols.size)
    return MarginalSpec(rows, cols * factor, np.asarray(origins), factor)


def uniform_seed(spec: MarginalSpec) -> np.ndarray:
    """Ones wherever both the row and the column marginal are positive."""
    seed = np.zeros((spec.hours, spec.n_origins), order="F")
    seed[np.ix_(spec.rows > 0, spec.cols > 0)] = 1.0
    return seed


def _check_support(seed: np.ndarray, spec: MarginalSpec) -> None:
    row_ok = (seed > 0).any(axis=1)
    bad = np.flatnonzero((spec.rows > 0) & ~row_ok)
    if bad.size:
        raise StructuralInfeasibilityError(
            f"row (hour) {int(bad[0])} has marginal {spec.rows[bad[0]]:g} but an all-zero seed line"
        )
    col_ok = (seed > 0).any(axis=0)
    bad = np.flatnonzero((spec.cols > 0) & ~col_ok)
    if bad.size:
        raise StructuralInfeasibilityError(
            f"column (origin {spec.origins[bad[0]]}) has marginal {spec.cols[bad[0]]:g} "
            "but an all-zero seed line"
        )


def _deviation(sums: np.ndarray, target: np.ndarray) -> float:
    if sums.size == 0:
        return 0.0
    return float(np.max(np.abs(sums - target) / np.maximum(target, 1.0)))


def _safe_ratio(target: np.ndarray, sums: np.ndarray) -> np.ndarray:
    return np.divide(target, sums, out=np.zeros_like(target), where=sums > 0)


def ipf(seed, spec: MarginalSpec, tol: float = 1e-8, max_iter: int = 100
        ) -> tuple[np.ndarray, IpfReport]:
    """Alternate row and column scaling of ``seed`` toward ``spec``.

    Deviation is ``|line sum - target| / max(target, 1)`` over all lines.
    Hitting ``max_iter`` returns the last iterate with ``converged=False``.
    """
    X = np.array(seed, dtype=float, order="F", copy=True)
    if X.shape != (spec.hours, spec.n_origins):
        raise ValueError(f"seed shape {X.shape} does not match marginals {(spec.hours, spec.n_origins)}")
    if np.any(X < 0):
        raise ValueError("seed must be non-negative")
    _check_support(X, spec)

    def deviation() -> float:
        return max(_deviation(X.sum(axis=1), spec.rows), _deviation(X.sum(axis=0), spec.cols))

    dev = deviation()
    it = 0
    while dev > tol and it < max_iter:
        X *= _safe_ratio(spec.rows, X.sum(axis=1))[:, None]
        X *= _safe_ratio(spec.cols, X.sum(axis=0))[None, :]
        it += 1
        dev = deviation()
    report = IpfReport(it, dev, dev <= tol)
    if not report.converged:
        log.warning("IPF stopped after %d iterations at deviation %.3g", it, dev)
    return X, report


def extract_outbound(X: np.ndarray, origins, cbgs) -> np.ndarray:
    """(n_cbgs, hours) outbound people; CBGs that are not origins get zeros."""
    X = np.asarray(X)
    pos = pd.Index(origins).get_indexer(pd.Index(cbgs))
    out = np.zeros((len(cbgs), X.shape[0]))
    hit = pos >= 0
    out[hit] = X[:, pos[hit]].T
    return out
