"""CSV file layouts, validation with row diagnostics, and atomic writes."""

from __future__ import annotations

import hashlib
import os
import re
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

ID, DATE, MONTH, COUNT, REAL = "id", "date", "month", "count", "real"

SCHEMAS: dict[str, dict[str, str]] = {
    "weekly_visits": {"poi_id": ID, "county": ID, "week_start": DATE, "hour_index": COUNT, "visits": COUNT},
    "weekly_devices": {"poi_id": ID, "county": ID, "week_start": DATE, "distinct_devices": COUNT},
    "neighborhood_stops": {"cbg": ID, "county": ID, "month": MONTH, "hour_index": COUNT, "stops": COUNT},
    "origin_distribution": {"dest_cbg": ID, "origin_cbg": ID, "month": MONTH, "devices": COUNT},
    "panel": {"cbg": ID, "month": MONTH, "tracked_devices": COUNT},
    "residents": {"cbg": ID, "population": COUNT},
    "geo": {"cbg": ID, "county": ID, "state": ID},
    "reference": {"cbg": ID, "daytime_ref": REAL, "nighttime_ref": REAL},
    # pipeline intermediates
    "osf": {"county": ID, "month": MONTH, "k": REAL, "provenance": ID},
    "inbound": {"cbg": ID, "month": MONTH, "hour_index": COUNT, "stops": REAL, "devices": REAL,
                "inbound": REAL},
    "inbound_audit": {"cbg": ID, "month": MONTH, "county": ID, "k": REAL, "expansion": REAL,
                      "excluded_origins": COUNT},
    "origin_weights": {"dest_cbg": ID, "origin_cbg": ID, "month": MONTH, "weight": REAL},
    "outbound": {"cbg": ID, "month": MONTH, "hour_index": COUNT, "outbound": REAL},
    "population": {"cbg": ID, "month": MONTH, "hour_index": COUNT, "population": REAL,
                   "inbound": REAL, "outbound": REAL},
    "truth_population": {"cbg": ID, "month": MONTH, "hour_index": COUNT, "population": REAL},
}

MAX_DIAGNOSTICS = 50
FLOAT_FORMAT = "%.10g"
_MONTH_RE = r"^\d{4}-(0[1-9]|1[0-2])$"
_DATE_RE = r"^\d{4}-\d{2}-\d{2}$"


class SchemaError(ValueError):
    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        shown = diagnostics[:MAX_DIAGNOSTICS]
        more = len(diagnostics) - len(shown)
        text = "\n".join(shown) + (f"\n... and {more} more" if more > 0 else "")
        super().__init__(text)


def path_for(directory: Path, name: str) -> Path:
    return Path(directory) / f"{name}.csv"


def _line(row: int) -> int:
    # header is line 1
    return row + 2


def _check_column(frame: pd.DataFrame, path: Path, column: str, kind: str) -> list[str]:
    s = frame[column]
    problems: list[str] = []

    def report(mask, what):
        for row in np.flatnonzero(np.asarray(mask))[:MAX_DIAGNOSTICS]:
            value = s.iloc[row]
            value = value.item() if isinstance(value, np.generic) else value
            problems.append(f"{path}:{_line(row)}: column '{column}': {what} ({value!r})")

    if kind == ID:
        report(s.isna() | (s.astype(str).str.len() == 0), "missing identifier")
    elif kind in (DATE, MONTH):
        pattern = _DATE_RE if kind == DATE else _MONTH_RE
        report(~s.astype(str).str.match(pattern), f"expected {'YYYY-MM-DD' if kind == DATE else 'YYYY-MM'}")
        if kind == DATE and not problems:
            parsed = pd.to_datetime(s.astype(str), format="%Y-%m-%d", errors="coerce")
            report(parsed.isna(), "invalid calendar date")
    else:
        if pd.api.types.is_integer_dtype(s) or (kind == REAL and pd.api.types.is_float_dtype(s)):
            values = s
            bad = pd.Series(False, index=s.index)
        else:
            values = pd.to_numeric(s, errors="coerce")
            bad = values.isna()
            report(bad, "not a number")
        if kind == COUNT:
            frac = ~bad & (values != np.floor(values.fillna(0)))
            report(frac, "not an integer")
        elif kind == REAL:
            report(~bad & ~np.isfinite(values.fillna(0).astype(float)), "not finite")
        report(~bad & (values.fillna(0) < 0), "negative value")
    return problems


def read_table(path: str | Path, schema: str) -> pd.DataFrame:
    """Read and validate one input file; raises :class:`SchemaError` listing bad rows."""
    path = Path(path)
    columns = SCHEMAS[schema]
    if not path.exists():
        raise SchemaError([f"{path}: file not found"])
    dtypes = {c: "category" if kind == ID else str for c, kind in columns.items() if kind in (ID, DATE, MONTH)}
    try:
        frame = pd.read_csv(path, dtype=dtypes, keep_default_na=False, na_values=[""], low_memory=False)
    except pd.errors.EmptyDataError as exc:
        raise SchemaError([f"{path}:1: empty file"]) from exc
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise SchemaError([f"{path}: unreadable CSV: {exc}"]) from exc
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise SchemaError([f"{path}:1: missing columns {missing}"])
    problems: list[str] = []
    for column, kind in columns.items():
        problems.extend(_check_column(frame, path, column, kind))
    if problems:
        raise SchemaError(problems)
    for column, kind in columns.items():
        if kind == COUNT:
            frame[column] = frame[column].astype(np.int64)
        elif kind == REAL:
            frame[column] = frame[column].astype(float)
        elif kind == ID:
            frame[column] = frame[column].astype(str)
    return frame


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_table(frame: pd.DataFrame, path: str | Path) -> Path:
    """Write CSV via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            frame.to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def month_label(year: int, month: int) -> str:
    return f"{year:04d}-{month:02d}"


def parse_month(label: str) -> tuple[int, int]:
    if not re.match(_MONTH_RE, label):
        raise ValueError(f"bad month label {label!r}")
    y, m = label.split("-")
    return int(y), int(m)
