"""Typed covariate tables, reference-level dummy encoding and complete-case filtering."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

INTERCEPT = "(intercept)"
EXPOSURE = "(exposure)"

CONTINUOUS = "continuous"
BINARY = "binary"
CATEGORICAL = "categorical"
KINDS = (CONTINUOUS, BINARY, CATEGORICAL)


class SchemaError(ValueError):
    """Raised for malformed schemas, data files or variable references."""


class EmptyDatasetError(ValueError):
    """Raised when filtering leaves no rows to analyse."""


@dataclass(frozen=True)
class Variable:
    """One covariate: its name, kind and (for categoricals) level labels.

    ``reference`` is the index of the reference level; dummies are built
    for every other level, in declaration order.
    """

    name: str
    kind: str
    levels: tuple[str, ...] = ()
    reference: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if len(self.levels) < 3:
                raise SchemaError(f"{self.name}: a categorical needs at least 3 levels")
            if len(set(self.levels)) != len(self.levels):
                raise SchemaError(f"{self.name}: duplicate level labels")
            if not 0 <= self.reference < len(self.levels):
                raise SchemaError(f"{self.name}: reference level out of range")
        elif self.levels:
            raise SchemaError(f"{self.name}: only categoricals carry levels")

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @property
    def width(self) -> int:
        """Number of design columns this variable contributes."""
        return self.level_count - 1 if self.kind == CATEGORICAL else 1

    @property
    def dummy_levels(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.level_count) if i != self.reference)


def categorical(name: str, levels: Sequence[str] | int, reference: int = 0) -> Variable:
    if isinstance(levels, int):
        levels = [str(i + 1) for i in range(levels)]
    return Variable(name, CATEGORICAL, tuple(str(v) for v in levels), reference)


@dataclass(frozen=True)
class CovariateSchema:
    variables: tuple[Variable, ...]

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise SchemaError("variable names must be unique")

    @cached_property
    def by_name(self) -> dict[str, Variable]:
        return {v.name: v for v in self.variables}

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def __getitem__(self, name: str) -> Variable:
        try:
            return self.by_name[name]
        except KeyError:
            raise SchemaError(f"unknown variable {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.by_name

    def __len__(self) -> int:
        return len(self.variables)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Exposure, outcome and covariate columns sharing one row count.

    Categorical columns hold integer level indices. ``missing`` maps a
    column name (covariate, ``exposure`` or ``outcome``) to a boolean mask;
    columns without an entry are fully observed.
    """

    schema: CovariateSchema
    exposure: np.ndarray
    outcome: np.ndarray
    covariates: Mapping[str, np.ndarray]
    missing: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.exposure)
        if len(self.outcome) != n:
            raise SchemaError("exposure and outcome lengths differ")
        for name, var in self.schema.by_name.items():
            if name not in self.covariates:
                raise SchemaError(f"column {name!r} missing from dataset")
            col = self.covariates[name]
            if len(col) != n:
                raise SchemaError(f"column {name!r} has length {len(col)}, expected {n}")
            if var.kind == CATEGORICAL:
                observed = col[~self.missing_mask(name)]
                if observed.size and (observed.min() < 0 or observed.max() >= var.level_count):
                    raise SchemaError(f"column {name!r} holds invalid level indices")
            elif var.kind == BINARY:
                if not np.isin(col[~self.missing_mask(name)], (0, 1)).all():
                    raise SchemaError(f"binary column {name!r} holds values other than 0/1")
        for name in ("exposure", "outcome"):
            values = getattr(self, name)[~self.missing_mask(name)]
            if not np.isin(values, (0, 1)).all():
                raise SchemaError(f"{name} must be binary 0/1")

    @property
    def n(self) -> int:
        return len(self.exposure)

    def missing_mask(self, name: str) -> np.ndarray:
        mask = self.missing.get(name)
        if mask is None:
            return np.zeros(self.n, dtype=bool)
        return mask

    @cached_property
    def has_missing(self) -> bool:
        return any(m.any() for m in self.missing.values())

    def take(self, rows: np.ndarray) -> "Dataset":
        return Dataset(
            self.schema,
            self.exposure[rows],
            self.outcome[rows],
            {k: v[rows] for k, v in self.covariates.items()},
            {k: v[rows] for k, v in self.missing.items()},
        )

    def counts(self) -> tuple[int, int, int, int]:
        """2x2 cell counts (events exposed, non-events exposed, events unexposed, non-events unexposed)."""
        a = self.exposure.astype(bool)
        y = self.outcome.astype(bool)
        return (int(np.sum(a & y)), int(np.sum(a & ~y)), int(np.sum(~a & y)), int(np.sum(~a & ~y)))

    @cached_property
    def _blocks(self) -> dict[str, np.ndarray]:
        # Per-variable design blocks on all rows; reused by every encode call.
        blocks = {}
        for var in self.schema.variables:
            col = self.covariates[var.name]
            if var.kind == CATEGORICAL:
                codes = np.asarray(col, dtype=np.int64)
                blocks[var.name] = (codes[:, None] == np.array(var.dummy_levels)[None, :]).astype(float)
            else:
                blocks[var.name] = np.asarray(col, dtype=float)[:, None]
        return blocks


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Dense design with column groups (one per source variable).

    ``groups`` maps a group name to a tuple of column indices, in column
    order; the intercept and exposure are groups of their own.
    """

    columns: np.ndarray
    groups: Mapping[str, tuple[int, ...]]
    includes_intercept: bool = True
    dropped: tuple[str, ...] = ()
    rows: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.columns.shape

    @property
    def exposure_index(self) -> int | None:
        cols = self.groups.get(EXPOSURE)
        return cols[0] if cols else None

    @property
    def variables(self) -> list[str]:
        return [g for g in self.groups if g not in (INTERCEPT, EXPOSURE)]

    @cached_property
    def binary_columns(self) -> np.ndarray:
        """Indices of non-intercept columns whose values are all 0/1."""
        x = self.columns
        is_bin = np.all((x == 0) | (x == 1), axis=0)
        if self.includes_intercept:
            is_bin[self.groups[INTERCEPT][0]] = False
        return np.flatnonzero(is_bin)

    def group_of(self, column: int) -> str:
        for name, cols in self.groups.items():
            if column in cols:
                return name
        raise IndexError(column)


def complete_case(dataset: Dataset, variables: Iterable[str]) -> Dataset:
    """Rows with no missing value in ``variables``, exposure or outcome."""
    names = list(variables)
    for name in names:
        if name not in dataset.schema and name not in ("exposure", "outcome"):
            raise SchemaError(f"unknown variable {name!r}")
    if not dataset.has_missing:
        if dataset.n == 0:
            raise EmptyDatasetError("dataset has no rows")
        return dataset
    bad = np.zeros(dataset.n, dtype=bool)
    for name in set(names) | {"exposure", "outcome"}:
        bad |= dataset.missing_mask(name)
    if bad.all():
        raise EmptyDatasetError(f"no complete rows for {names}")
    if not bad.any():
        return dataset
    logger.debug("complete-case filter kept %d of %d rows", int((~bad).sum()), dataset.n)
    return dataset.take(np.flatnonzero(~bad))


def encode(
    dataset: Dataset,
    variables: Sequence[str],
    include_exposure: bool = True,
    *,
    drop_constant: bool = True,
) -> DesignMatrix:
    """Build an intercept-first design for ``variables``.

    Rows with a missing value in any selected variable (or in exposure and
    outcome) are removed first; the retained row indices are kept on the
    returned design. Continuous and binary variables give one column each,
    a categorical with L levels gives L-1 reference-coded dummies. Dummies
    for levels absent after filtering are removed, and a variable left with
    no varying column is dropped with a warning (listed in ``dropped``).
    """
    for name in variables:
        if name not in dataset.schema:
            raise SchemaError(f"unknown variable {name!r}")
    rows = None
    source = dataset
    if dataset.has_missing:
        bad = np.zeros(dataset.n, dtype=bool)
        for name in set(variables) | {"exposure", "outcome"}:
            bad |= dataset.missing_mask(name)
        if bad.all():
            raise EmptyDatasetError(f"no complete rows for {list(variables)}")
        if bad.any():
            rows = np.flatnonzero(~bad)
            source = dataset.take(rows)

    n = source.n
    parts = [np.ones((n, 1))]
    groups: dict[str, tuple[int, ...]] = {INTERCEPT: (0,)}
    k = 1
    if include_exposure:
        parts.append(np.asarray(source.exposure, dtype=float)[:, None])
        groups[EXPOSURE] = (1,)
        k = 2
    dropped = []
    for name in variables:
        block = source._blocks[name]
        if drop_constant:
            keep = _varying_columns(block, source.schema[name].kind == CATEGORICAL)
            if not keep.all():
                if not keep.any():
                    logger.warning("dropping constant variable %r", name)
                    dropped.append(name)
                    continue
                block = block[:, keep]
        parts.append(block)
        groups[name] = tuple(range(k, k + block.shape[1]))
        k += block.shape[1]
    return DesignMatrix(np.hstack(parts), groups, True, tuple(dropped), rows)


def _varying_columns(block: np.ndarray, is_categorical: bool) -> np.ndarray:
    if is_categorical:
        present = block.any(axis=0)
        # a single non-reference level that covers every row is as degenerate as none
        if present.sum() == 1 and block[:, present].all():
            return np.zeros(block.shape[1], dtype=bool)
        return present
    col = block[:, 0]
    return np.array([col.size > 0 and col.min() != col.max()])


def decode_levels(design: DesignMatrix, variable: Variable) -> np.ndarray:
    """Recover level indices from a categorical's dummy block (no dropped dummies)."""
    block = design.columns[:, list(design.groups[variable.name])]
    levels = np.full(block.shape[0], variable.reference)
    for j, level in enumerate(variable.dummy_levels):
        levels[block[:, j] == 1] = level
    return levels


# --- ingestion -------------------------------------------------------------

def load_schema_spec(path: str | Path) -> dict:
    """Read a schema spec document.

    Keys: ``exposure``, ``outcome`` (column names), ``delimiter`` (default
    ``,``), ``missing_token`` (default ``NA``) and ``variables``: a list of
    objects with ``name``, ``kind`` and, for categoricals, ``levels`` and an
    optional ``reference`` (label or index; default the first level).
    """
    with open(path) as fh:
        spec = json.load(fh)
    allowed = {"exposure", "outcome", "delimiter", "missing_token", "variables"}
    unknown = set(spec) - allowed
    if unknown:
        raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
    if "variables" not in spec:
        raise SchemaError("schema spec needs a 'variables' list")
    return spec


def schema_from_spec(spec: Mapping) -> CovariateSchema:
    variables = []
    for entry in spec["variables"]:
        extra = set(entry) - {"name", "kind", "levels", "reference", "missing_token"}
        if extra:
            raise SchemaError(f"unknown keys for variable {entry.get('name')!r}: {sorted(extra)}")
        kind = entry["kind"]
        if kind == CATEGORICAL:
            levels = [str(v) for v in entry["levels"]]
            ref = entry.get("reference", 0)
            if isinstance(ref, str):
                if ref not in levels:
                    raise SchemaError(f"{entry['name']}: reference {ref!r} is not a level")
                ref = levels.index(ref)
            variables.append(Variable(entry["name"], kind, tuple(levels), int(ref)))
        else:
            variables.append(Variable(entry["name"], kind))
    return CovariateSchema(tuple(variables))


def read_dataset(path: str | Path, schema_spec: str | Path | Mapping) -> Dataset:
    """Parse a delimited text file with a header row against a schema spec."""
    spec = load_schema_spec(schema_spec) if not isinstance(schema_spec, Mapping) else schema_spec
    schema = schema_from_spec(spec)
    exposure_col = spec.get("exposure", "exposure")
    outcome_col = spec.get("outcome", "outcome")
    delimiter = spec.get("delimiter", ",")
    default_token = spec.get("missing_token", "NA")
    tokens = {e["name"]: e.get("missing_token", default_token) for e in spec["variables"]}
    tokens[exposure_col] = default_token
    tokens[outcome_col] = default_token

    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    expected = {exposure_col, outcome_col, *schema.names}
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column names in header")
    if set(header) != expected:
        raise SchemaError(
            f"header/schema mismatch: missing {sorted(expected - set(header))}, "
            f"unexpected {sorted(set(header) - expected)}"
        )
    index = {h: i for i, h in enumerate(header)}
    for lineno, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise SchemaError(f"line {lineno}: expected {len(header)} fields, got {len(r)}")

    def column(name):
        return [r[index[name]].strip() for r in rows]

    missing = {}

    def parse_binary(name, cells, target):
        values = np.zeros(len(cells), dtype=np.int8)
        mask = np.zeros(len(cells), dtype=bool)
        for i, cell in enumerate(cells):
            if cell == tokens[name]:
                mask[i] = True
            elif cell in ("0", "1"):
                values[i] = int(cell)
            else:
                raise SchemaError(f"{target} column {name!r}: non-binary value {cell!r} on row {i + 1}")
        return values, mask

    exposure, m = parse_binary(exposure_col, column(exposure_col), "exposure")
    if m.any():
        missing["exposure"] = m
    outcome, m = parse_binary(outcome_col, column(outcome_col), "outcome")
    if m.any():
        missing["outcome"] = m

    covariates = {}
    for var in schema.variables:
        cells = column(var.name)
        token = tokens[var.name]
        mask = np.zeros(len(cells), dtype=bool)
        if var.kind == CATEGORICAL:
            lookup = {lab: i for i, lab in enumerate(var.levels)}
            values = np.zeros(len(cells), dtype=np.int64)
            for i, cell in enumerate(cells):
                if cell == token:
                    mask[i] = True
                elif cell in lookup:
                    values[i] = lookup[cell]
                else:
                    raise SchemaError(f"{var.name}: invalid level label {cell!r} on row {i + 1}")
        elif var.kind == BINARY:
            values, mask = parse_binary(var.name, cells, "binary")
            values = values.astype(float)
        else:
            values = np.zeros(len(cells))
            for i, cell in enumerate(cells):
                if cell == token:
                    mask[i] = True
                    continue
                try:
                    values[i] = float(cell)
                except ValueError:
                    mask[i] = True
        covariates[var.name] = values
        if mask.any():
            missing[var.name] = mask
    return Dataset(schema, exposure, outcome, covariates, missing)


def write_dataset(dataset: Dataset, path: str | Path, *, delimiter: str = ",", missing_token: str = "NA"):
    """Write a dataset in the layout ``read_dataset`` accepts (columns exposure, outcome, covariates)."""
    names = dataset.schema.names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(["exposure", "outcome", *names])
        for i in range(dataset.n):
            row = [
                missing_token if dataset.missing_mask("exposure")[i] else str(int(dataset.exposure[i])),
                missing_token if dataset.missing_mask("outcome")[i] else str(int(dataset.outcome[i])),
            ]
            for name in names:
                var = dataset.schema[name]
                if dataset.missing_mask(name)[i]:
                    row.append(missing_token)
                elif var.kind == CATEGORICAL:
                    row.append(var.levels[int(dataset.covariates[name][i])])
                elif var.kind == BINARY:
                    row.append(str(int(dataset.covariates[name][i])))
                else:
                    row.append(repr(float(dataset.covariates[name][i])))
            w.writerow(row)


def schema_to_spec(schema: CovariateSchema, *, missing_token: str = "NA") -> dict:
    entries = []
    for v in schema.variables:
        entry = {"name": v.name, "kind": v.kind}
        if v.kind == CATEGORICAL:
            entry["levels"] = list(v.levels)
            entry["reference"] = v.levels[v.reference]
        entries.append(entry)
    return {"exposure": "exposure", "outcome": "outcome", "delimiter": ",",
            "missing_token": missing_token, "variables": entries}
