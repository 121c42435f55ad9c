"""Panel ingest: average annual covariates into a cross-section and standardise.

Covariates are averaged over the requested year range; the outcome is taken
at its own reference year (it is never averaged). Every non-dummy column and
the outcome are then z-scored with the n - 1 standard deviation.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError

PANEL_HEADER = ["unit_id", "year", "variable", "value"]


@dataclass(frozen=True)
class VariableSpec:
    name: str
    role: str  # "outcome" or "covariate"
    group: str = ""
    dummy: bool | None = None  # None: detect from values
    year: int | None = None  # outcome reference year

    def __post_init__(self):
        if self.role not in ("outcome", "covariate"):
            raise ConfigurationError(f"{self.name}: role must be outcome or covariate, got {self.role!r}")


@dataclass(frozen=True)
class PanelRecord:
    unit_id: str
    year: int
    variable: str
    value: float


@dataclass(frozen=True)
class CrossSection:
    unit_ids: tuple[str, ...]
    variables: tuple[str, ...]
    values: np.ndarray  # units x variables
    counts: np.ndarray  # contributing years per cell

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.variables.index(name)]


@dataclass(frozen=True)
class Dataset:
    unit_ids: tuple[str, ...]
    outcome_name: str
    y: np.ndarray
    covariate_names: tuple[str, ...]
    X: np.ndarray
    dummy: tuple[bool, ...]
    # variable -> (mean, sd) actually used; dummies map to (0.0, 1.0)
    standardization: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    groups: Mapping[str, str] = field(default_factory=dict)
    points: tuple = ()  # GeoPoints aligned with unit_ids, when known

    @property
    def n(self) -> int:
        return len(self.unit_ids)

    def destandardize(self) -> tuple[np.ndarray, np.ndarray]:
        """Outcome and covariates on their original scales."""
        m, s = self.standardization[self.outcome_name]
        y = self.y * s + m
        X = self.X.copy()
        for j, name in enumerate(self.covariate_names):
            m, s = self.standardization[name]
            X[:, j] = X[:, j] * s + m
        return y, X

    def as_cross_section(self) -> CrossSection:
        names = (self.outcome_name,) + self.covariate_names
        values = np.column_stack([self.y, self.X])
        return CrossSection(self.unit_ids, names, values, np.ones(values.shape, dtype=int))

    def reorder(self, unit_ids: Sequence[str]) -> "Dataset":
        """Rows rearranged to ``unit_ids`` (e.g. the coordinates file order)."""
        pos = {u: i for i, u in enumerate(self.unit_ids)}
        missing = [u for u in unit_ids if u not in pos]
        extra = sorted(set(self.unit_ids) - set(unit_ids))
        if missing or extra:
            raise ConfigurationError(
                "dataset and coordinates disagree on units: " + ", ".join(missing + extra))
        idx = [pos[u] for u in unit_ids]
        points = tuple(self.points[i] for i in idx) if self.points else ()
        return Dataset(tuple(unit_ids), self.outcome_name, self.y[idx], self.covariate_names,
                       self.X[idx], self.dummy, self.standardization, self.groups, points)

    def with_points(self, points: Sequence) -> "Dataset":
        """Attach coordinates, reordering rows to the coordinate order."""
        ds = self.reorder([p.unit_id for p in points])
        return replace(ds, points=tuple(points))


# ---------------------------------------------------------------------------
# readers


def read_manifest(path_or_mapping) -> dict[str, VariableSpec]:
    """Variable manifest: name -> {role, group, dummy, year}."""
    if isinstance(path_or_mapping, Mapping):
        raw = path_or_mapping
    else:
        with open(path_or_mapping) as fh:
            raw = json.load(fh)
    specs = {}
    for name, d in raw.items():
        if not isinstance(d, Mapping) or "role" not in d:
            raise ConfigurationError(f"variable {name!r} needs a role")
        specs[name] = VariableSpec(name, d["role"], d.get("group", ""), d.get("dummy"), d.get("year"))
    outcomes = [s.name for s in specs.values() if s.role == "outcome"]
    if len(outcomes) != 1:
        raise ConfigurationError(f"manifest must name exactly one outcome, found {outcomes}")
    return specs


def read_panel(path) -> list[PanelRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PANEL_HEADER:
            raise ParseError(f"{path}: expected header {','.join(PANEL_HEADER)}", 1)
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4:
                raise ParseError(f"{path}: expected 4 fields", lineno)
            try:
                value = float(rec[3])
                year = int(rec[1])
            except ValueError:
                raise ParseError(f"{path}: bad year or value", lineno) from None
            if not math.isfinite(value):
                raise ParseError(f"{path}: non-finite value", lineno)
            rows.append(PanelRecord(rec[0], year, rec[2], value))
    return rows


def read_cross_section(path) -> CrossSection:
    """Wide CSV ``unit_id,<var1>,<var2>,...`` with one row per unit."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "unit_id" or len(header) < 2:
            raise ParseError(f"{path}: expected header unit_id,<variables...>", 1)
        ids, vals = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}: expected {len(header)} fields", lineno)
            try:
                row = [float(v) for v in rec[1:]]
            except ValueError:
                raise ParseError(f"{path}: missing or non-numeric value", lineno) from None
            if not all(math.isfinite(v) for v in row):
                raise ParseError(f"{path}: non-finite value", lineno)
            ids.append(rec[0])
            vals.append(row)
    values = np.array(vals, dtype=float).reshape(len(ids), len(header) - 1)
    return CrossSection(tuple(ids), tuple(header[1:]), values, np.ones(values.shape, dtype=int))


# ---------------------------------------------------------------------------
# transformations


def average_panel(rows: Iterable[PanelRecord], year_range: tuple[int, int] | None = None,
                  variables: Sequence[str] | None = None) -> CrossSection:
    """Per-unit mean of each variable over the years available in range.

    Units and variables keep first-appearance order; a unit lacking any
    observation of a requested variable is an error.
    """
    if year_range is not None:
        lo, hi = year_range
        if lo > hi:
            raise ConfigurationError(f"empty year range {year_range}")
    sums: dict[tuple[str, str], list[float]] = defaultdict(list)
    units: dict[str, None] = {}
    seen_vars: dict[str, None] = {}
    for r in rows:
        units.setdefault(r.unit_id)
        seen_vars.setdefault(r.variable)
        if year_range is not None and not lo <= r.year <= hi:
            continue
        sums[(r.unit_id, r.variable)].append(r.value)
    var_list = tuple(variables) if variables is not None else tuple(seen_vars)
    unit_list = tuple(units)
    missing = [(u, v) for u in unit_list for v in var_list if not sums.get((u, v))]
    if missing:
        shown = ", ".join(f"({u}, {v})" for u, v in missing[:20])
        more = f" and {len(missing) - 20} more" if len(missing) > 20 else ""
        raise ConfigurationError(f"no observations for {shown}{more}")
    values = np.empty((len(unit_list), len(var_list)))
    counts = np.empty(values.shape, dtype=int)
    for i, u in enumerate(unit_list):
        for j, v in enumerate(var_list):
            obs = sums[(u, v)]
            values[i, j] = math.fsum(obs) / len(obs)
            counts[i, j] = len(obs)
    return CrossSection(unit_list, var_list, values, counts)


def detect_dummies(cross: CrossSection, overrides: Mapping[str, bool | None] | None = None) -> dict[str, bool]:
    """A column is a dummy iff all its values are 0 or 1; explicit overrides win."""
    flags = {}
    for j, name in enumerate(cross.variables):
        col = cross.values[:, j]
        flags[name] = bool(np.all((col == 0.0) | (col == 1.0)))
        if overrides and overrides.get(name) is not None:
            flags[name] = bool(overrides[name])
    return flags


def _zscore(col: np.ndarray, name: str) -> tuple[np.ndarray, float, float]:
    mean = math.fsum(col) / col.size
    centred = col - mean
    sd = math.sqrt(math.fsum(centred * centred) / (col.size - 1))
    if not sd > 0:
        raise ConfigurationError(f"variable {name!r} has zero variance")
    z = centred / sd
    # second pass removes rounding residue so mean/sd hold to ~1e-15
    z = z - math.fsum(z) / z.size
    z = z / math.sqrt(math.fsum(z * z) / (z.size - 1))
    return z, mean, sd


def standardize(cross: CrossSection, outcome: str, dummies: Mapping[str, bool] | None = None,
                covariates: Sequence[str] | None = None,
                groups: Mapping[str, str] | None = None) -> Dataset:
    if outcome not in cross.variables:
        raise ConfigurationError(f"outcome {outcome!r} not in cross-section")
    if cross.values.shape[0] < 3:
        raise ConfigurationError("need at least 3 units")
    if not np.all(np.isfinite(cross.values)):
        raise ConfigurationError("cross-section contains missing or non-finite values")
    dummies = dict(detect_dummies(cross)) | dict(dummies or {})
    covs = tuple(covariates) if covariates is not None else tuple(v for v in cross.variables if v != outcome)
    record: dict[str, tuple[float, float]] = {}

    y, m, s = _zscore(cross.column(outcome), outcome)
    record[outcome] = (m, s)
    cols = []
    for name in covs:
        col = cross.column(name)
        if dummies.get(name, False):
            if not np.all((col == 0.0) | (col == 1.0)):
                raise ConfigurationError(f"dummy {name!r} has values other than 0/1")
            cols.append(col.copy())
            record[name] = (0.0, 1.0)
        else:
            z, m, s = _zscore(col, name)
            cols.append(z)
            record[name] = (m, s)
    X = np.column_stack(cols) if cols else np.empty((len(cross.unit_ids), 0))
    return Dataset(cross.unit_ids, outcome, y, covs, X,
                   tuple(bool(dummies.get(c, False)) for c in covs), record, dict(groups or {}))


def load_dataset(path, manifest: Mapping[str, VariableSpec], year_range: tuple[int, int] | None = None) -> Dataset:
    """Read a long panel or wide cross-section CSV and standardise it per ``manifest``."""
    path = Path(path)
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    outcome = next(s for s in manifest.values() if s.role == "outcome")
    covs = [s.name for s in manifest.values() if s.role == "covariate"]
    if header == PANEL_HEADER:
        rows = read_panel(path)
        cov_cross = average_panel(rows, year_range, covs)
        out_rows = [r for r in rows if r.variable == outcome.name
                    and (outcome.year is None or r.year == outcome.year)]
        by_unit: dict[str, list[float]] = defaultdict(list)
        for r in out_rows:
            by_unit[r.unit_id].append(r.value)
        multi = [u for u, v in by_unit.items() if len(v) > 1]
        if multi:
            raise ConfigurationError(
                f"outcome {outcome.name!r} has several years for {', '.join(multi[:5])}; "
                "set its reference year in the manifest")
        missing = [u for u in cov_cross.unit_ids if u not in by_unit]
        if missing:
            raise ConfigurationError(f"no outcome value for {', '.join(missing)}")
        yvals = np.array([by_unit[u][0] for u in cov_cross.unit_ids])
        cross = CrossSection(cov_cross.unit_ids, (outcome.name,) + cov_cross.variables,
                             np.column_stack([yvals, cov_cross.values]),
                             np.column_stack([np.ones(len(yvals), dtype=int), cov_cross.counts]))
    else:
        cross = read_cross_section(path)
        absent = [v for v in [outcome.name, *covs] if v not in cross.variables]
        if absent:
            raise ConfigurationError(f"{path}: missing columns {', '.join(absent)}")
    overrides = {s.name: s.dummy for s in manifest.values()}
    dummies = detect_dummies(cross, overrides)
    groups = {s.name: s.group for s in manifest.values()}
    return standardize(cross, outcome.name, dummies, covs, groups)
