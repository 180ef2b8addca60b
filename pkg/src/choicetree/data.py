"""Choice datasets, feature schemas, and binning of tree features into requirements.

A dataset holds one row per decision maker.  Person-level columns are 1-D
arrays; alternative-level columns are ``(n_obs, n_alts)`` arrays with NaN
wherever the alternative is unavailable.  Tree features are always
person-level: the rule list partitions decision makers, not alternatives.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

LEVELS = ("person", "alternative")
ROLES = ("utility", "tree", "both")
KEY_COLUMNS = ("obs_id", "alt_id", "chosen", "available")


class DataError(ValueError):
    """Base class for dataset problems.  ``obs_id`` names the offending observation."""

    def __init__(self, message: str, obs_id=None, line: int | None = None):
        where = []
        if obs_id is not None:
            where.append(f"obs_id={obs_id}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.obs_id = obs_id
        self.line = line


class DataParseError(DataError):
    """A row could not be parsed."""


class DataValidationError(DataError):
    """Parsed values violate the dataset contract."""


class SchemaError(ValueError):
    """Inconsistent schema, bin, or utility declaration."""


@dataclass(frozen=True)
class Alternative:
    id: int
    name: str
    always_available: bool = False


@dataclass(frozen=True)
class Column:
    name: str
    level: str = "person"
    role: str = "utility"
    unit: str = ""

    def __post_init__(self):
        if self.level not in LEVELS:
            raise SchemaError(f"column {self.name!r}: level must be one of {LEVELS}")
        if self.role not in ROLES:
            raise SchemaError(f"column {self.name!r}: role must be one of {ROLES}")
        if self.name in KEY_COLUMNS:
            raise SchemaError(f"column name {self.name!r} is reserved")

    @property
    def is_tree_feature(self) -> bool:
        return self.role in ("tree", "both")

    @property
    def is_utility_covariate(self) -> bool:
        return self.role in ("utility", "both")


@dataclass(frozen=True)
class FeatureSchema:
    """Alternatives plus named attribute columns.

    ``gated`` names the alternative whose consideration is decided by the
    tree.  ``subsample`` optionally names a person-level 0/1 column selecting
    the rows used to estimate the tree (e.g. bicycle owners).
    """

    alternatives: tuple[Alternative, ...]
    columns: tuple[Column, ...]
    gated: str | None = None
    subsample: str | None = None

    def __post_init__(self):
        ids = [a.id for a in self.alternatives]
        if ids != list(range(len(ids))):
            raise SchemaError(f"alternative ids must be contiguous from 0, got {ids}")
        names = [a.name for a in self.alternatives]
        if len(set(names)) != len(names):
            raise SchemaError("alternative names must be unique")
        cols = [c.name for c in self.columns]
        if len(set(cols)) != len(cols):
            raise SchemaError("column names must be unique")
        if self.gated is not None and self.gated not in names:
            raise SchemaError(f"gated alternative {self.gated!r} is not declared")
        for c in self.columns:
            if c.is_tree_feature and c.level != "person":
                raise SchemaError(f"tree feature {c.name!r} must be person-level")
        if self.subsample is not None:
            col = self.column(self.subsample)
            if col.level != "person":
                raise SchemaError("subsample column must be person-level")

    @property
    def n_alts(self) -> int:
        return len(self.alternatives)

    @property
    def alt_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.alternatives)

    def alt_index(self, name: str) -> int:
        for a in self.alternatives:
            if a.name == name:
                return a.id
        raise SchemaError(f"unknown alternative {name!r}")

    @property
    def gated_index(self) -> int | None:
        return None if self.gated is None else self.alt_index(self.gated)

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaError(f"unknown column {name!r}")

    def has_column(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    @property
    def tree_features(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns if c.is_tree_feature)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ChoiceDataset:
    schema: FeatureSchema
    obs_ids: np.ndarray
    chosen: np.ndarray
    available: np.ndarray
    values: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "obs_ids", _frozen(np.asarray(self.obs_ids, dtype=np.int64)))
        object.__setattr__(self, "chosen", _frozen(np.asarray(self.chosen, dtype=np.int64)))
        object.__setattr__(self, "available", _frozen(np.asarray(self.available, dtype=bool)))
        n, j = len(self.obs_ids), self.schema.n_alts
        if self.available.shape != (n, j) or self.chosen.shape != (n,):
            raise DataValidationError("array shapes do not match the number of observations")
        vals = {}
        for col in self.schema.columns:
            if col.name not in self.values:
                raise DataValidationError(f"missing column {col.name!r}")
            v = np.asarray(self.values[col.name], dtype=float)
            want = (n,) if col.level == "person" else (n, j)
            if v.shape != want:
                raise DataValidationError(f"column {col.name!r} has shape {v.shape}, expected {want}")
            vals[col.name] = _frozen(v)
        object.__setattr__(self, "values", vals)
        self._validate()

    def _validate(self):
        j = self.schema.n_alts
        if len(np.unique(self.obs_ids)) != len(self.obs_ids):
            raise DataValidationError("duplicate obs_id")
        for i, oid in enumerate(self.obs_ids):
            c = self.chosen[i]
            if not 0 <= c < j:
                raise DataValidationError(f"chosen alternative {c} is unknown", obs_id=int(oid))
            if not self.available[i].any():
                raise DataValidationError("no alternative available", obs_id=int(oid))
            if not self.available[i, c]:
                raise DataValidationError("chosen alternative is unavailable", obs_id=int(oid))
        for col in self.schema.columns:
            v = self.values[col.name]
            bad = np.isnan(v) if col.level == "person" else (np.isnan(v) & self.available)
            if bad.any():
                i = int(np.argwhere(bad)[0][0])
                raise DataValidationError(f"missing value for {col.name!r}", obs_id=int(self.obs_ids[i]))

    @property
    def n_obs(self) -> int:
        return len(self.obs_ids)

    @property
    def n_alts(self) -> int:
        return self.schema.n_alts

    def __len__(self) -> int:
        return self.n_obs

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[name]
        except KeyError:
            raise SchemaError(f"unknown column {name!r}") from None

    def subset(self, rows) -> "ChoiceDataset":
        rows = np.asarray(rows)
        return ChoiceDataset(
            self.schema,
            self.obs_ids[rows],
            self.chosen[rows],
            self.available[rows],
            {k: v[rows] for k, v in self.values.items()},
        )

    def with_values(self, name: str, new: np.ndarray) -> "ChoiceDataset":
        """Copy with one column replaced (used for counterfactual sweeps)."""
        self.column(name)
        vals = dict(self.values)
        vals[name] = np.asarray(new, dtype=float)
        return ChoiceDataset(self.schema, self.obs_ids, self.chosen, self.available, vals)

    def estimation_mask(self) -> np.ndarray:
        """Rows used to estimate the tree: the subsample column if declared, else all."""
        if self.schema.subsample is None:
            return np.ones(self.n_obs, dtype=bool)
        return self.values[self.schema.subsample] != 0

    def gated_chosen(self) -> np.ndarray:
        g = self.schema.gated_index
        if g is None:
            raise SchemaError("schema declares no gated alternative")
        return self.chosen == g


def _fmt(x: float) -> str:
    if math.isnan(x):
        return ""
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def _parse_float(s: str, name: str, oid, line: int) -> float:
    s = s.strip()
    if s == "":
        return math.nan
    try:
        return float(s)
    except ValueError:
        raise DataParseError(f"cannot parse {name}={s!r} as a number", obs_id=oid, line=line) from None


def _parse_flag(s: str, name: str, oid, line: int) -> bool:
    s = s.strip()
    if s not in ("0", "1"):
        raise DataParseError(f"{name} must be 0 or 1, got {s!r}", obs_id=oid, line=line)
    return s == "1"


def load_dataset(path, schema: FeatureSchema) -> ChoiceDataset:
    """Read the long format: one row per (observation, alternative).

    Lines starting with ``#`` before the header are provenance comments and
    are skipped.  Person attributes must repeat identically across an
    observation's rows.
    """
    path = Path(path)
    j = schema.n_alts
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh]
    start = 0
    while start < len(lines) and lines[start].startswith("#"):
        start += 1
    reader = csv.DictReader(lines[start:])
    header = reader.fieldnames or []
    missing = [c for c in (*KEY_COLUMNS, *(c.name for c in schema.columns)) if c not in header]
    if missing:
        raise DataParseError(f"{path}: missing header columns {missing}")

    order: list[int] = []
    rows: dict[int, dict[int, tuple[int, dict]]] = {}
    for k, rec in enumerate(reader):
        line = start + k + 2
        if None in rec or any(v is None for v in rec.values()):
            raise DataParseError("wrong number of fields", line=line)
        try:
            oid = int(rec["obs_id"])
        except ValueError:
            raise DataParseError(f"bad obs_id {rec['obs_id']!r}", line=line) from None
        try:
            alt = int(rec["alt_id"])
        except ValueError:
            raise DataParseError(f"bad alt_id {rec['alt_id']!r}", obs_id=oid, line=line) from None
        if not 0 <= alt < j:
            raise DataValidationError(f"unknown alternative id {alt}", obs_id=oid, line=line)
        if oid not in rows:
            rows[oid] = {}
            order.append(oid)
        if alt in rows[oid]:
            raise DataValidationError(f"duplicate row for alternative {alt}", obs_id=oid, line=line)
        rows[oid][alt] = (line, rec)

    n = len(order)
    chosen = np.full(n, -1, dtype=np.int64)
    avail = np.zeros((n, j), dtype=bool)
    vals = {
        c.name: np.full(n if c.level == "person" else (n, j), np.nan) for c in schema.columns
    }
    for i, oid in enumerate(order):
        alts = rows[oid]
        if len(alts) != j:
            raise DataValidationError(f"expected {j} rows, found {len(alts)}", obs_id=oid)
        n_chosen = 0
        for a in range(j):
            line, rec = alts[a]
            is_chosen = _parse_flag(rec["chosen"], "chosen", oid, line)
            avail[i, a] = _parse_flag(rec["available"], "available", oid, line)
            if is_chosen:
                if not avail[i, a]:
                    raise DataValidationError("chosen alternative is unavailable", obs_id=oid, line=line)
                chosen[i] = a
                n_chosen += 1
            for c in schema.columns:
                x = _parse_float(rec[c.name], c.name, oid, line)
                if c.level == "person":
                    prev = vals[c.name][i]
                    if a > 0 and not (prev == x or (math.isnan(prev) and math.isnan(x))):
                        raise DataValidationError(
                            f"person attribute {c.name!r} differs across rows", obs_id=oid, line=line
                        )
                    vals[c.name][i] = x
                else:
                    vals[c.name][i, a] = x
        if n_chosen != 1:
            raise DataValidationError(f"expected exactly one chosen row, found {n_chosen}", obs_id=oid)
    return ChoiceDataset(schema, np.array(order, dtype=np.int64), chosen, avail, vals)


def write_dataset(dataset: ChoiceDataset, path, comments: Sequence[str] = ()) -> None:
    """Write the long format read by :func:`load_dataset`."""
    schema = dataset.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*KEY_COLUMNS, *(c.name for c in schema.columns)])
        for i in range(dataset.n_obs):
            for a in range(schema.n_alts):
                row = [
                    str(int(dataset.obs_ids[i])),
                    str(a),
                    "1" if dataset.chosen[i] == a else "0",
                    "1" if dataset.available[i, a] else "0",
                ]
                for c in schema.columns:
                    v = dataset.values[c.name]
                    row.append(_fmt(float(v[i] if c.level == "person" else v[i, a])))
                w.writerow(row)


# ---------------------------------------------------------------------------
# Requirements and binning


def _num(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return _fmt(float(x))


@dataclass(frozen=True)
class Requirement:
    """One primitive test on one feature: an interval or a category set.

    Intervals are closed on the right; the first interval of a feature is
    closed on both sides.
    """

    feature: str
    index: int
    lo: float = -math.inf
    hi: float = math.inf
    closed_left: bool = False
    values: frozenset | None = None

    @property
    def label(self) -> str:
        if self.values is not None:
            inner = ",".join(_num(v) for v in sorted(self.values))
            return f"{self.feature}:{{{inner}}}"
        left = "[" if self.closed_left and not math.isinf(self.lo) else "("
        right = ")" if math.isinf(self.hi) else "]"
        return f"{self.feature}:{left}{_num(self.lo)},{_num(self.hi)}{right}"

    def contains(self, x: float) -> bool:
        if self.values is not None:
            return x in self.values
        if self.closed_left and x == self.lo:
            return True
        return self.lo < x <= self.hi

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True)
class Bins:
    """Bin specification for one feature: increasing ``edges`` or disjoint ``categories``."""

    feature: str
    edges: tuple[float, ...] | None = None
    categories: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if (self.edges is None) == (self.categories is None):
            raise SchemaError(f"bins for {self.feature!r}: give exactly one of edges or categories")
        if self.edges is not None:
            e = tuple(float(x) for x in self.edges)
            if len(e) < 2:
                raise SchemaError(f"bins for {self.feature!r}: need at least two edges")
            if any(b <= a for a, b in zip(e, e[1:])):
                raise SchemaError(f"bins for {self.feature!r}: edges must be strictly increasing")
            object.__setattr__(self, "edges", e)
        else:
            cats = tuple(tuple(float(v) for v in c) for c in self.categories)
            seen: set = set()
            for c in cats:
                if not c:
                    raise SchemaError(f"bins for {self.feature!r}: empty category")
                if seen.intersection(c):
                    raise SchemaError(f"bins for {self.feature!r}: categories must be disjoint")
                seen.update(c)
            object.__setattr__(self, "categories", cats)

    @classmethod
    def coerce(cls, feature: str, spec) -> "Bins":
        if isinstance(spec, Bins):
            return spec
        spec = list(spec)
        if spec and all(isinstance(s, (list, tuple, set, frozenset)) for s in spec):
            return cls(feature, categories=tuple(tuple(s) for s in spec))
        return cls(feature, edges=tuple(spec))

    def __len__(self) -> int:
        return len(self.edges) - 1 if self.edges is not None else len(self.categories)

    def requirements(self, offset: int = 0) -> tuple[Requirement, ...]:
        if self.edges is not None:
            e = self.edges
            return tuple(
                Requirement(self.feature, offset + k, e[k], e[k + 1], closed_left=(k == 0))
                for k in range(len(e) - 1)
            )
        return tuple(
            Requirement(self.feature, offset + k, values=frozenset(c))
            for k, c in enumerate(self.categories)
        )

    def assign(self, x: np.ndarray) -> np.ndarray:
        """Bin index per value; -1 where no bin contains the value."""
        x = np.asarray(x, dtype=float)
        if self.edges is not None:
            e = np.asarray(self.edges)
            k = np.searchsorted(e, x, side="left") - 1
            k[x == e[0]] = 0
            k[(x < e[0]) | (x > e[-1]) | np.isnan(x)] = -1
            return k
        out = np.full(x.shape, -1, dtype=np.int64)
        for k, c in enumerate(self.categories):
            out[np.isin(x, c)] = k
        return out


def coerce_bins(bins) -> tuple[Bins, ...]:
    if isinstance(bins, Mapping):
        return tuple(Bins.coerce(f, s) for f, s in bins.items())
    return tuple(bins)


def build_requirements(bins) -> tuple[Requirement, ...]:
    out: list[Requirement] = []
    for b in coerce_bins(bins):
        out.extend(b.requirements(offset=len(out)))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class BinnedMatrix:
    """Boolean requirement matrix (rows x requirements) plus gated-choice labels.

    ``rows`` maps each matrix row back to its dataset row.
    """

    X: np.ndarray
    labels: np.ndarray
    requirements: tuple[Requirement, ...]
    groups: tuple[tuple[str, int, int], ...]
    rows: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_requirements(self) -> int:
        return len(self.requirements)

    def feature_of(self) -> np.ndarray:
        """Group number of every requirement."""
        out = np.empty(self.n_requirements, dtype=np.int64)
        for g, (_, a, b) in enumerate(self.groups):
            out[a:b] = g
        return out

    def label_index(self) -> dict[str, int]:
        return {r.label: r.index for r in self.requirements}

    def subset(self, mask) -> "BinnedMatrix":
        mask = np.asarray(mask)
        return BinnedMatrix(self.X[mask], self.labels[mask], self.requirements, self.groups, self.rows[mask])


def binarize(dataset: ChoiceDataset, bins) -> np.ndarray:
    """Requirement matrix for every dataset row (no label, no subsampling)."""
    return _binarize(dataset, coerce_bins(bins))[0]


def _binarize(dataset: ChoiceDataset, bins: tuple[Bins, ...]):
    reqs = build_requirements(bins)
    X = np.zeros((dataset.n_obs, len(reqs)), dtype=bool)
    groups = []
    offset = 0
    for b in bins:
        col = dataset.schema.column(b.feature)
        if col.level != "person":
            raise SchemaError(f"tree feature {b.feature!r} must be person-level")
        x = dataset.column(b.feature)
        k = b.assign(x)
        bad = np.flatnonzero(k < 0)
        if bad.size:
            i = int(bad[0])
            raise DataValidationError(
                f"{b.feature}={x[i]!r} lies outside every bin", obs_id=int(dataset.obs_ids[i])
            )
        X[np.arange(dataset.n_obs), offset + k] = True
        groups.append((b.feature, offset, offset + len(b)))
        offset += len(b)
    X.setflags(write=False)
    return X, reqs, tuple(groups)


def discretize(dataset: ChoiceDataset, bins, restrict: bool = True) -> BinnedMatrix:
    """Map tree features onto requirement indicators.

    Exactly one requirement per feature is active in each row.  With
    ``restrict`` the matrix keeps only the tree-estimation subsample.
    """
    X, reqs, groups = _binarize(dataset, coerce_bins(bins))
    labels = dataset.gated_chosen()
    rows = np.arange(dataset.n_obs)
    if restrict:
        m = dataset.estimation_mask()
        X, labels, rows = X[m], labels[m], rows[m]
    return BinnedMatrix(X, labels, reqs, groups, rows)


def default_bins(dataset: ChoiceDataset, feature: str, k: int) -> Bins:
    """Quantile bins with open outer edges; tied quantiles merge."""
    if k < 1:
        raise ValueError("k must be at least 1")
    x = dataset.column(feature)
    if x.ndim != 1:
        raise SchemaError(f"{feature!r} is not a person-level feature")
    inner: Iterable[float] = ()
    if k > 1 and x.size:
        q = np.quantile(x, np.arange(1, k) / k)
        inner = [v for v in np.unique(q) if v < x.max()]
        if not inner:
            warnings.warn(f"{feature!r} is constant; using a single bin", stacklevel=2)
    return Bins(feature, edges=(-math.inf, *[float(v) for v in inner], math.inf))
