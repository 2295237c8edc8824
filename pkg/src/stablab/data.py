"""Dataset ingestion, validation, and tabular result serialization.

Stability data are long-format (lot, month, value) observations for a single
attribute, with the lower specification limit supplied out-of-band as
analysis metadata.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Raised when input data violate the dataset contract."""


def _format_cell(x) -> str:
    if isinstance(x, bool):
        return str(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        # 17 significant digits: decimal text round-trips to the same float
        return format(float(x), ".17g")
    return str(x)


@dataclass(frozen=True)
class StabilityDataset:
    """Validated long-format stability observations for one attribute.

    Rows are normalized to (lot, month) ascending with lots ordered
    lexicographically, which fixes design-matrix column order downstream.
    """

    lots: tuple[str, ...]
    months: np.ndarray
    values: np.ndarray
    attribute_name: str = "attribute"
    lsl: float = math.nan

    def __post_init__(self):
        months = np.asarray(self.months, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if not (len(self.lots) == months.shape[0] == values.shape[0]):
            raise DataError("lots, months, and values must have equal length")
        if months.ndim != 1:
            raise DataError("months must be one-dimensional")
        if not np.all(np.isfinite(months)) or np.any(months < 0):
            raise DataError("months must be finite and nonnegative")
        if not np.all(np.isfinite(values)):
            raise DataError("values must be finite")
        object.__setattr__(self, "months", months)
        object.__setattr__(self, "values", values)
        keys = list(zip(self.lots, months.tolist()))
        if len(set(keys)) != len(keys):
            dup = _first_duplicate(keys)
            raise DataError(f"duplicate (lot, month) row: {dup}")
        order = sorted(range(len(keys)), key=lambda i: keys[i])
        if order != list(range(len(keys))):
            object.__setattr__(self, "lots", tuple(self.lots[i] for i in order))
            object.__setattr__(self, "months", months[order])
            object.__setattr__(self, "values", values[order])
        if len(self.lot_levels) < 2:
            raise DataError("fewer than 2 lots")
        if len(set(self.months.tolist())) < 3:
            raise DataError("fewer than 3 distinct months")

    @property
    def n(self) -> int:
        return self.months.shape[0]

    @property
    def lot_levels(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.lots)))

    def lot_index(self) -> np.ndarray:
        """Integer lot index per row, following lexicographic lot order."""
        levels = {lot: k for k, lot in enumerate(self.lot_levels)}
        return np.array([levels[lot] for lot in self.lots], dtype=int)

    def scheduled_months(self) -> tuple[float, ...]:
        return tuple(sorted(set(self.months.tolist())))

    def __eq__(self, other) -> bool:
        if not isinstance(other, StabilityDataset):
            return NotImplemented
        return (
            self.lots == other.lots
            and np.array_equal(self.months, other.months)
            and np.array_equal(self.values, other.values)
            and self.attribute_name == other.attribute_name
            and (self.lsl == other.lsl or (math.isnan(self.lsl) and math.isnan(other.lsl)))
        )


def _first_duplicate(keys):
    seen = set()
    for k in keys:
        if k in seen:
            return k
        seen.add(k)
    return None


def parse_dataset(text, lsl: float = math.nan, attribute_name: str = "attribute") -> StabilityDataset:
    """Parse CSV stability data with header ``lot,month,value``.

    ``text`` may be a string or a readable text stream. Row order in the
    input is irrelevant; the result is normalized to (lot, month) ascending.
    """
    if isinstance(text, str):
        stream = io.StringIO(text)
    else:
        stream = text
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty input") from None
    header = [h.strip().lstrip("﻿").lower() for h in header]
    if header != ["lot", "month", "value"]:
        raise DataError(f"expected header lot,month,value; got {','.join(header)}")
    lots: list[str] = []
    months: list[float] = []
    values: list[float] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and row[0].strip() == ""):
            continue
        if len(row) != 3:
            raise DataError(f"line {lineno}: expected 3 fields, got {len(row)}")
        lot = row[0].strip()
        if not lot:
            raise DataError(f"line {lineno}: empty lot label")
        try:
            month = float(row[1])
            value = float(row[2])
        except ValueError as exc:
            raise DataError(f"line {lineno}: malformed numeric field ({exc})") from None
        lots.append(lot)
        months.append(month)
        values.append(value)
    return StabilityDataset(tuple(lots), np.array(months), np.array(values),
                            attribute_name=attribute_name, lsl=float(lsl))


def dataset_to_csv(ds: StabilityDataset) -> str:
    """Serialize a dataset back to its CSV layout (17-digit numerics)."""
    rows = [{"lot": lot, "month": m, "value": v}
            for lot, m, v in zip(ds.lots, ds.months, ds.values)]
    buf = io.StringIO()
    write_table(rows, buf)
    return buf.getvalue()


def write_table(rows: Sequence[Mapping], destination, fields: Sequence[str] | None = None) -> None:
    """Write named-field records as CSV with a stable column order.

    Column order follows ``fields`` when given, else the first record's field
    order. Floats are written with 17 significant digits so a write/parse
    round trip is bit-faithful. ``destination`` is a path or a writable text
    stream. An empty ``rows`` with explicit ``fields`` yields a header-only
    file.
    """
    rows = list(rows)
    if fields is None:
        fields = list(rows[0].keys()) if rows else []
    else:
        fields = list(fields)
    for r in rows:
        if set(r.keys()) != set(fields):
            raise DataError("heterogeneous field sets in table rows")

    def _emit(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for r in rows:
            writer.writerow([_format_cell(r[f]) for f in fields])

    if hasattr(destination, "write"):
        _emit(destination)
    else:
        with open(destination, "w", encoding="utf-8", newline="") as fh:
            _emit(fh)


def read_table(source) -> list[dict]:
    """Read a CSV table written by :func:`write_table`.

    Numeric-looking cells come back as floats, everything else as strings.
    """
    if isinstance(source, str) and "\n" not in source:
        with open(source, "r", encoding="utf-8", newline="") as fh:
            content = fh.read()
    elif isinstance(source, str):
        content = source
    else:
        content = source.read()
    reader = csv.reader(io.StringIO(content))
    try:
        fields = next(reader)
    except StopIteration:
        return []
    out = []
    for row in reader:
        rec = {}
        for f, cell in zip(fields, row):
            try:
                rec[f] = float(cell)
            except ValueError:
                rec[f] = cell
        out.append(rec)
    return out
