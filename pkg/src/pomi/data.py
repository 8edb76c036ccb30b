"""Tabular data with explicit missingness.

Every column is a float64 array with NaN in missing cells plus a boolean
``missing`` array (the missing-data indicator matrix, one column at a time).
Binary and categorical columns hold integer-valued floats.
"""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

Y0 = "y0"
Y1 = "y1"


class SchemaError(ValueError):
    """Raised when a table violates its declared column roles."""


class ColumnRole(str, enum.Enum):
    COVARIATE_CONT = "covariate_cont"
    COVARIATE_CAT = "covariate_cat"
    EXPOSURE = "exposure"
    OUTCOME = "outcome"
    POST_EXPOSURE = "post_exposure"
    POTENTIAL_OUTCOME0 = "potential_outcome0"
    POTENTIAL_OUTCOME1 = "potential_outcome1"
    AUXILIARY = "auxiliary"

    @property
    def is_covariate(self) -> bool:
        return self in (ColumnRole.COVARIATE_CONT, ColumnRole.COVARIATE_CAT, ColumnRole.AUXILIARY)

    @property
    def is_discrete(self) -> bool:
        return self not in (ColumnRole.COVARIATE_CONT, ColumnRole.AUXILIARY)


R_LEVELS = (1, 2, 3)
_RAW_FORBIDDEN = (ColumnRole.POTENTIAL_OUTCOME0, ColumnRole.POTENTIAL_OUTCOME1)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ObservedDataset:
    """Immutable table of named columns with a per-cell missing flag.

    ``values[name]`` holds NaN wherever ``missing[name]`` is True.
    """

    names: tuple[str, ...]
    roles: Mapping[str, ColumnRole]
    values: Mapping[str, np.ndarray]
    missing: Mapping[str, np.ndarray]

    def __post_init__(self):
        n = None
        for name in self.names:
            v = self.values[name]
            if n is None:
                n = len(v)
            if len(v) != n or len(self.missing[name]) != n:
                raise SchemaError(f"column {name!r} has inconsistent length")
        object.__setattr__(self, "roles", dict(self.roles))
        object.__setattr__(self, "values", {k: _frozen(self.values[k]) for k in self.names})
        object.__setattr__(self, "missing", {k: _frozen(self.missing[k].astype(bool)) for k in self.names})

    @classmethod
    def from_arrays(cls, columns: Mapping[str, np.ndarray], roles: Mapping[str, ColumnRole | str]) -> "ObservedDataset":
        """Build a dataset from arrays where NaN marks a missing cell."""
        roles = {k: ColumnRole(v) for k, v in roles.items()}
        values = {k: np.asarray(columns[k], dtype=float) for k in roles}
        missing = {k: np.isnan(v) for k, v in values.items()}
        d = cls(tuple(roles), roles, values, missing)
        validate(d)
        return d

    @property
    def n_rows(self) -> int:
        return len(self.values[self.names[0]]) if self.names else 0

    def role_columns(self, role: ColumnRole) -> list[str]:
        return [k for k in self.names if self.roles[k] is role]

    def _single(self, role: ColumnRole) -> str | None:
        cols = self.role_columns(role)
        return cols[0] if cols else None

    @property
    def exposure(self) -> str:
        return self._single(ColumnRole.EXPOSURE)

    @property
    def outcome(self) -> str:
        return self._single(ColumnRole.OUTCOME)

    @property
    def post_exposure(self) -> str | None:
        return self._single(ColumnRole.POST_EXPOSURE)

    @property
    def covariates(self) -> list[str]:
        return [k for k in self.names if self.roles[k].is_covariate]

    @property
    def has_potential_outcomes(self) -> bool:
        return Y0 in self.values and Y1 in self.values

    @property
    def mask(self) -> np.ndarray:
        """n_rows x n_columns boolean matrix, True where missing."""
        return np.column_stack([self.missing[k] for k in self.names])

    def with_columns(self, columns: Mapping[str, np.ndarray], roles: Mapping[str, ColumnRole]) -> "ObservedDataset":
        names = list(self.names) + [k for k in columns if k not in self.values]
        all_roles = {**self.roles, **roles}
        values = {**self.values, **{k: np.asarray(v, dtype=float) for k, v in columns.items()}}
        missing = {**self.missing, **{k: np.isnan(values[k]) for k in columns}}
        return ObservedDataset(tuple(names), all_roles, values, missing)

    def drop(self, *names: str) -> "ObservedDataset":
        keep = tuple(k for k in self.names if k not in names)
        return ObservedDataset(keep, {k: self.roles[k] for k in keep},
                               {k: self.values[k] for k in keep}, {k: self.missing[k] for k in keep})

    def take(self, rows: np.ndarray) -> "ObservedDataset":
        return ObservedDataset(self.names, self.roles,
                               {k: self.values[k][rows] for k in self.names},
                               {k: self.missing[k][rows] for k in self.names})


@dataclass(frozen=True)
class Provenance:
    imputation: int
    cycles: int
    seed: int | None
    variant: str


@dataclass(frozen=True)
class CompletedDataset:
    """One imputation's filled table.

    ``values`` has no NaN in any modeled column. ``source`` is the observed
    dataset it was completed from, so originally-missing cells stay
    identifiable through ``source.missing``.
    """

    values: Mapping[str, np.ndarray]
    source: ObservedDataset
    provenance: Provenance

    @property
    def n_rows(self) -> int:
        return self.source.n_rows

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    @property
    def y0(self) -> np.ndarray:
        return self.values[Y0]

    @property
    def y1(self) -> np.ndarray:
        return self.values[Y1]


@dataclass
class MissingnessSummary:
    n_rows: int
    fractions: dict[str, float]
    patterns: dict[tuple[str, ...], int] = field(default_factory=dict)


def validate(d: ObservedDataset) -> None:
    """Check the structural rules every engine input must satisfy."""
    exposures = d.role_columns(ColumnRole.EXPOSURE)
    outcomes = d.role_columns(ColumnRole.OUTCOME)
    if len(exposures) != 1 or len(outcomes) != 1:
        raise SchemaError("exactly one exposure and one outcome column are required")
    if len(d.role_columns(ColumnRole.POST_EXPOSURE)) > 1:
        raise SchemaError("at most one post-exposure column is allowed")
    z = d.exposure
    if d.missing[z].any():
        rows = np.flatnonzero(d.missing[z])[:5].tolist()
        raise SchemaError(f"exposure {z!r} is missing in rows {rows}")
    for name in d.names:
        role = d.roles[name]
        obs = d.values[name][~d.missing[name]]
        if role in (ColumnRole.EXPOSURE, ColumnRole.OUTCOME, ColumnRole.POTENTIAL_OUTCOME0,
                    ColumnRole.POTENTIAL_OUTCOME1):
            if not np.isin(obs, (0.0, 1.0)).all():
                raise SchemaError(f"non-binary value in {name!r}")
        elif role is ColumnRole.POST_EXPOSURE:
            if not np.isin(obs, R_LEVELS).all():
                raise SchemaError(f"{name!r} has a value outside {{1,2,3}}")
        elif role is ColumnRole.COVARIATE_CAT:
            if not np.all(obs == np.round(obs)):
                raise SchemaError(f"categorical covariate {name!r} has non-integer codes")
    r = d.post_exposure
    if r is not None:
        untested = d.values[z] == 0
        bad = untested & ~d.missing[r]
        if bad.any():
            rows = np.flatnonzero(bad)[:5].tolist()
            raise SchemaError(f"post-exposure observed for non-tester (rows {rows})")


def _parse_cell(token: str, na_token: str) -> float:
    token = token.strip()
    if token == na_token or token == "":
        return np.nan
    return float(token)


def load_schema(path: str | Path) -> tuple[dict[str, ColumnRole], str]:
    """Read a ``{"columns": {...}, "na_token": ...}`` JSON schema."""
    with open(path) as fh:
        raw = json.load(fh)
    try:
        cols = {k: ColumnRole(v) for k, v in raw["columns"].items()}
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc
    return cols, raw.get("na_token", "NA")


def load_csv(path: str | Path, schema: Mapping[str, ColumnRole | str], na_token: str = "NA") -> ObservedDataset:
    schema = {k: ColumnRole(v) for k, v in schema.items()}
    for role in _RAW_FORBIDDEN:
        if role in schema.values():
            raise SchemaError("potential-outcome columns cannot appear in raw input")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [r for r in reader if r]
    unknown = [h for h in header if h not in schema]
    if unknown:
        raise SchemaError(f"unknown column(s) {unknown}")
    absent = [k for k in schema if k not in header]
    if absent:
        raise SchemaError(f"schema column(s) {absent} not in file")
    cols: dict[str, list[float]] = {h: [] for h in header}
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise SchemaError(f"line {i}: expected {len(header)} fields, got {len(row)}")
        for h, tok in zip(header, row):
            try:
                cols[h].append(_parse_cell(tok, na_token))
            except ValueError:
                raise SchemaError(f"line {i}: cannot parse {tok!r} in column {h!r}") from None
    roles = {h: schema[h] for h in header}
    return ObservedDataset.from_arrays({h: np.array(v, dtype=float) for h, v in cols.items()}, roles)


def format_cell(value: float, role: ColumnRole, na_token: str = "NA") -> str:
    if np.isnan(value):
        return na_token
    if role.is_discrete:
        return str(int(value))
    text = repr(float(value))
    return text[:-2] if text.endswith(".0") else text


def write_csv(d: ObservedDataset, path: str | Path, na_token: str = "NA") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(d.names)
        for i in range(d.n_rows):
            w.writerow([format_cell(d.values[k][i], d.roles[k], na_token) for k in d.names])


def split_potential_outcomes(d: ObservedDataset) -> ObservedDataset:
    """Add ``y0``/``y1``: the observed outcome goes to the arm actually taken,
    the other arm is a missing cell."""
    if d.outcome is None:
        raise SchemaError("dataset has no outcome column")
    if Y0 in d.values or Y1 in d.values:
        raise SchemaError("dataset already has potential-outcome columns")
    z = d.values[d.exposure]
    y = d.values[d.outcome]
    y1 = np.where(z == 1, y, np.nan)
    y0 = np.where(z == 0, y, np.nan)
    return d.with_columns({Y0: y0, Y1: y1},
                          {Y0: ColumnRole.POTENTIAL_OUTCOME0, Y1: ColumnRole.POTENTIAL_OUTCOME1})


def merge_outcome(z: np.ndarray, y0: np.ndarray, y1: np.ndarray) -> np.ndarray:
    """Observed outcome implied by the exposure: ``z*y1 + (1-z)*y0``."""
    return np.where(z == 1, y1, y0)


def summarize_missingness(d: ObservedDataset) -> MissingnessSummary:
    n = d.n_rows
    fractions = {k: float(d.missing[k].mean()) if n else 0.0 for k in d.names}
    patterns = {}
    if n:
        uniq, counts = np.unique(d.mask, axis=0, return_counts=True)
        for row, c in zip(uniq, counts):
            patterns[tuple(k for k, m in zip(d.names, row) if m)] = int(c)
    return MissingnessSummary(n, fractions, patterns)
