"""CSV readers and writers for unit, area, and population files.

Unit file columns: area_id, y, x1..xp, optional k. Area file columns:
area_id, N, Xbar1..Xbarp, optional h. Population files look like unit files
(area_id, y, x1..xp); their area summaries are derived from the data.
Floats are written with 17 significant digits so a read round-trips exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .model import AreaInfo, Dataset, UnitRecord, validate


class ParseError(ValueError):
    """Malformed input file; message carries the file and line number."""


class ValidationError(ValueError):
    """Structurally parsable input that violates dataset invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("dataset validation failed:\n  " + "\n  ".join(self.violations))


def _float(value: str, path, line_no: int, col: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ParseError(f"{path}:{line_no}: column {col!r} has non-numeric value "
                         f"{value!r}") from None


def _xcols(header, prefix: str):
    cols = [c for c in header if c.startswith(prefix) and c[len(prefix):].isdigit()]
    return sorted(cols, key=lambda c: int(c[len(prefix):]))


def read_unit_csv(units_path, areas_path=None) -> Dataset:
    """Parse unit (and optional area) files into a validated Dataset.

    Without an area file, population sizes default to the sample counts and
    area covariate means to the sample means. Raises ParseError with the
    offending line, or ValidationError listing every broken invariant.
    """
    units_path = Path(units_path)
    units: list[UnitRecord] = []
    with open(units_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "area_id" not in reader.fieldnames:
            raise ParseError(f"{units_path}:1: expected a header with 'area_id'")
        if "y" not in reader.fieldnames:
            raise ParseError(f"{units_path}:1: expected a 'y' column")
        xcols = _xcols(reader.fieldnames, "x")
        if not xcols:
            raise ParseError(f"{units_path}:1: expected covariate columns x1..xp")
        has_k = "k" in reader.fieldnames
        for row in reader:
            ln = reader.line_num
            y = _float(row["y"], units_path, ln, "y")
            x = tuple(_float(row[c], units_path, ln, c) for c in xcols)
            k = _float(row["k"], units_path, ln, "k") if has_k else 1.0
            units.append(UnitRecord(row["area_id"], y, x, k))
    if not units:
        raise ParseError(f"{units_path}: no unit records")
    p = len(units[0].x)

    if areas_path is not None:
        areas_path = Path(areas_path)
        areas: list[AreaInfo] = []
        counts: dict = {}
        for u in units:
            counts[u.area_id] = counts.get(u.area_id, 0) + 1
        with open(areas_path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "area_id" not in reader.fieldnames:
                raise ParseError(f"{areas_path}:1: expected a header with 'area_id'")
            if "N" not in reader.fieldnames:
                raise ParseError(f"{areas_path}:1: expected an 'N' column")
            xbcols = _xcols(reader.fieldnames, "Xbar")
            if len(xbcols) != p:
                raise ParseError(f"{areas_path}:1: expected {p} Xbar columns to match "
                                 f"the unit file, found {len(xbcols)}")
            has_h = "h" in reader.fieldnames
            for row in reader:
                ln = reader.line_num
                aid = row["area_id"]
                areas.append(AreaInfo(
                    area_id=aid,
                    N=int(_float(row["N"], areas_path, ln, "N")),
                    n=counts.get(aid, 0),
                    Xbar=tuple(_float(row[c], areas_path, ln, c) for c in xbcols),
                    h=_float(row["h"], areas_path, ln, "h") if has_h else 1.0,
                ))
        ds = Dataset.from_units(units, areas)
    else:
        ds = Dataset.from_arrays([u.area_id for u in units],
                                 [u.y for u in units],
                                 [u.x for u in units],
                                 k=[u.k for u in units])
    problems = validate(ds)
    if problems:
        raise ValidationError(problems)
    return ds


def read_population_csv(path) -> Dataset:
    """Parse a population file; summaries (N, Xbar) derive from the records."""
    return read_unit_csv(path, areas_path=None)


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_table(path, header, rows) -> None:
    """Write a tidy CSV with full float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_manifest(path, payload: dict) -> None:
    """Dump the run configuration next to its outputs for replay."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")
