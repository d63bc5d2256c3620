"""Hierarchical assessment data: CSV ingestion, model specs and covariate transforms.

A dataset is a long table with one row per student.  Id columns are fixed
(``student_id, class_id, school_id, province_id``); scores are stored as
``<outcome>_pv<l>`` for ``l = 1..m``.  A JSON schema tags every covariate
with the hierarchical level it is measured at.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd

from .errors import DataFormatError, EmptyAnalysisError, StructureError, ValidationError

logger = logging.getLogger(__name__)

ID_COLUMNS = ("student_id", "class_id", "school_id", "province_id")
LEVELS = ("student", "teacher", "class", "school", "province")
GRAND_MEAN = "grand_mean"
MISSING_TOKENS = ("", "NA")

# level -> id column whose units must carry a constant value
_UNIT_OF_LEVEL = {
    "teacher": "class_id",
    "class": "class_id",
    "school": "school_id",
    "province": "province_id",
}


def pv_column(outcome: str, pv: int) -> str:
    return f"{outcome}_pv{pv}"


@dataclass(frozen=True)
class Schema:
    """Column roles of a dataset file.

    ``levels`` maps covariate name to level; ``teacher_outcome`` records the
    outcome a teacher-level column refers to (a class may have a different
    teacher per subject).  ``labels`` are string columns such as a
    geographical area, constant within the named level.
    """

    outcomes: tuple[str, ...]
    n_pv: int
    levels: Mapping[str, str] = field(default_factory=dict)
    teacher_outcome: Mapping[str, str] = field(default_factory=dict)
    labels: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.outcomes:
            raise ValidationError("schema lists no outcomes")
        if self.n_pv < 1:
            raise ValidationError("n_pv must be >= 1")
        for col, level in {**self.levels, **self.labels}.items():
            if level not in LEVELS:
                raise ValidationError(f"column {col!r}: unknown level {level!r}")
        for col, outcome in self.teacher_outcome.items():
            if outcome not in self.outcomes:
                raise ValidationError(f"teacher column {col!r} refers to unknown outcome {outcome!r}")

    @property
    def covariates(self) -> list[str]:
        return list(self.levels)

    def pv_columns(self) -> list[str]:
        return [pv_column(o, l) for l in range(1, self.n_pv + 1) for o in self.outcomes]

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Schema":
        unknown = set(raw) - {"outcomes", "n_pv", "covariates", "labels"}
        if unknown:
            raise ValidationError(f"unknown schema keys {sorted(unknown)}")
        levels, teacher = {}, {}
        for col, spec in raw.get("covariates", {}).items():
            if isinstance(spec, str):
                levels[col] = spec
            else:
                levels[col] = spec["level"]
                if "outcome" in spec:
                    teacher[col] = spec["outcome"]
        return cls(
            outcomes=tuple(raw["outcomes"]),
            n_pv=int(raw.get("n_pv", 1)),
            levels=levels,
            teacher_outcome=teacher,
            labels=dict(raw.get("labels", {})),
        )

    def to_dict(self) -> dict:
        covs = {}
        for col, level in self.levels.items():
            if col in self.teacher_outcome:
                covs[col] = {"level": level, "outcome": self.teacher_outcome[col]}
            else:
                covs[col] = level
        return {
            "outcomes": list(self.outcomes),
            "n_pv": self.n_pv,
            "covariates": covs,
            "labels": dict(self.labels),
        }

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Dataset:
    """Students (rows) nested in classes, schools and provinces."""

    frame: pd.DataFrame
    schema: Schema
    notes: tuple[str, ...] = ()

    @property
    def outcomes(self) -> tuple[str, ...]:
        return self.schema.outcomes

    @property
    def n_pv(self) -> int:
        return self.schema.n_pv

    @property
    def n_students(self) -> int:
        return len(self.frame)

    @property
    def n_classes(self) -> int:
        return int(self.frame["class_id"].nunique())

    def class_sizes(self) -> pd.Series:
        return self.frame.groupby("class_id", sort=True).size()

    def scores(self, pv: int) -> np.ndarray:
        """(N, M) score matrix for plausible value ``pv`` (1-based)."""
        if not 1 <= pv <= self.n_pv:
            raise ValidationError(f"pv index {pv} outside [1, {self.n_pv}]")
        cols = [pv_column(o, pv) for o in self.outcomes]
        return self.frame[cols].to_numpy(dtype=float)

    def with_frame(self, frame: pd.DataFrame, notes=()) -> "Dataset":
        return Dataset(frame.reset_index(drop=True), self.schema, self.notes + tuple(notes))

    def class_to_school(self) -> dict[str, str]:
        pairs = self.frame[["class_id", "school_id"]].drop_duplicates()
        return dict(zip(pairs["class_id"], pairs["school_id"]))

    def class_label(self, column: str) -> dict[str, Any]:
        pairs = self.frame[["class_id", column]].drop_duplicates("class_id")
        return dict(zip(pairs["class_id"], pairs[column]))


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class Term:
    """A fixed-effect term.

    ``columns`` maps each outcome the term enters to the data column used in
    that outcome's rows; outcome-specific (teacher) covariates map different
    columns.  A ``constrained`` term has one coefficient shared by all its
    outcomes.
    """

    name: str
    columns: Mapping[str, str]
    constrained: bool = False


@dataclass(frozen=True)
class Spline:
    column: str
    knot: float
    constrain_upper: bool = True

    def __post_init__(self):
        if not math.isfinite(self.knot):
            raise ValidationError(f"spline knot for {self.column!r} must be finite")

    @property
    def below_name(self) -> str:
        return f"{self.column}_below{self.knot:g}"

    @property
    def above_name(self) -> str:
        return f"{self.column}_above{self.knot:g}"


@dataclass(frozen=True)
class TransformSpec:
    center: tuple[tuple[str, Any], ...] = ()
    splines: tuple[Spline, ...] = ()
    class_means: tuple[str, ...] = ()

    def __post_init__(self):
        cols = [c for c, _ in self.center]
        dup = {c for c in cols if cols.count(c) > 1}
        if dup:
            raise ValidationError(f"column(s) centered more than once: {sorted(dup)}")
        for col, value in self.center:
            if value != GRAND_MEAN and not math.isfinite(float(value)):
                raise ValidationError(f"center for {col!r} must be finite or {GRAND_MEAN!r}")

    def derived_sources(self) -> dict[str, str]:
        out = {class_mean_name(c): c for c in self.class_means}
        for s in self.splines:
            out[s.below_name] = s.column
            out[s.above_name] = s.column
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "TransformSpec":
        center = []
        items = raw.get("center", [])
        if isinstance(items, Mapping):
            items = list(items.items())
        for item in items:
            if isinstance(item, str):
                center.append((item, GRAND_MEAN))
            else:
                col, value = item
                center.append((col, value if value == GRAND_MEAN else float(value)))
        splines = tuple(
            Spline(s["column"], float(s["knot"]), bool(s.get("constrain_upper", True)))
            for s in raw.get("splines", [])
        )
        return cls(tuple(center), splines, tuple(raw.get("class_means", [])))

    def to_dict(self) -> dict:
        return {
            "center": [[c, v] for c, v in self.center],
            "splines": [
                {"column": s.column, "knot": s.knot, "constrain_upper": s.constrain_upper}
                for s in self.splines
            ],
            "class_means": list(self.class_means),
        }


@dataclass(frozen=True)
class ModelSpec:
    outcomes: tuple[str, ...]
    terms: tuple[Term, ...] = ()
    transforms: TransformSpec = TransformSpec()
    class_means_before_deletion: bool = True

    def __post_init__(self):
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate term names in model")
        for t in self.terms:
            bad = set(t.columns) - set(self.outcomes)
            if bad:
                raise ValidationError(f"term {t.name!r} refers to unknown outcomes {sorted(bad)}")

    def columns(self) -> list[str]:
        seen = []
        for t in self.terms:
            for o in self.outcomes:
                c = t.columns.get(o)
                if c is not None and c not in seen:
                    seen.append(c)
        return seen

    def term(self, name: str) -> Term:
        for t in self.terms:
            if t.name == name:
                return t
        raise ValidationError(f"model has no term {name!r}")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ModelSpec":
        outcomes = tuple(raw["outcomes"])
        terms = []
        for item in raw.get("terms", []):
            if isinstance(item, str):
                item = {"name": item}
            name = item["name"]
            if "columns" in item:
                columns = dict(item["columns"])
            else:
                column = item.get("column", name)
                columns = {o: column for o in item.get("outcomes", outcomes)}
            terms.append(Term(name, columns, bool(item.get("constrained", False))))
        return cls(
            outcomes,
            tuple(terms),
            TransformSpec.from_dict(raw.get("transforms", {})),
            bool(raw.get("class_means_before_deletion", True)),
        )

    def to_dict(self) -> dict:
        return {
            "outcomes": list(self.outcomes),
            "terms": [
                {"name": t.name, "columns": dict(t.columns), "constrained": t.constrained}
                for t in self.terms
            ],
            "transforms": self.transforms.to_dict(),
            "class_means_before_deletion": self.class_means_before_deletion,
        }

    @classmethod
    def load(cls, path) -> "ModelSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# CSV I/O


def _parse_number(token: str, column: str, line: int) -> float:
    if token in MISSING_TOKENS:
        return math.nan
    try:
        return float(token)
    except ValueError:
        raise DataFormatError(f"column {column!r}: cannot parse {token!r} as a number", line) from None


def _format_number(x: float) -> str:
    if math.isnan(x):
        return "NA"
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def load_dataset(path, schema: Schema | Mapping[str, Any]) -> Dataset:
    """Read a long-format CSV and validate its nesting structure."""
    if not isinstance(schema, Schema):
        schema = Schema.from_dict(schema)
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"no such file: {path}")
    numeric = set(schema.pv_columns()) | set(schema.levels)
    required = list(ID_COLUMNS) + schema.pv_columns() + schema.covariates + list(schema.labels)
    outcome_cols = set(schema.pv_columns())
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file", 1) from None
        missing = [c for c in required if c not in header]
        if missing:
            raise DataFormatError(f"header lacks required columns {missing}", 1)
        if len(set(header)) != len(header):
            raise DataFormatError("duplicate column names in header", 1)
        values: dict[str, list] = {c: [] for c in header}
        for row in reader:
            if not row:
                continue
            line = reader.line_num
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, found {len(row)}", line)
            for col, token in zip(header, row):
                if col in numeric:
                    x = _parse_number(token, col, line)
                    if col in outcome_cols and math.isnan(x):
                        raise DataFormatError(f"missing outcome value in {col!r}", line)
                    values[col].append(x)
                else:
                    if col in ID_COLUMNS and token in MISSING_TOKENS:
                        raise DataFormatError(f"missing id in {col!r}", line)
                    values[col].append(token)
    frame = pd.DataFrame({c: np.asarray(v, dtype=float) if c in numeric else np.asarray(v, dtype=object)
                          for c, v in values.items()}, columns=header)
    validate_structure(frame, schema)
    return Dataset(frame, schema)


def emit_dataset(d: Dataset, path) -> None:
    """Write ``d`` in the CSV format read by :func:`load_dataset`."""
    numeric = set(d.schema.pv_columns()) | set(d.schema.levels)
    cols = list(d.frame.columns)
    arrays = [d.frame[c].to_numpy() for c in cols]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for i in range(len(d.frame)):
            writer.writerow(
                _format_number(float(a[i])) if c in numeric else str(a[i]) for c, a in zip(cols, arrays)
            )


def validate_structure(frame: pd.DataFrame, schema: Schema) -> None:
    if len(frame) == 0:
        raise EmptyAnalysisError("dataset has no students")
    if frame["student_id"].duplicated().any():
        dup = frame.loc[frame["student_id"].duplicated(), "student_id"].iloc[0]
        raise StructureError(f"student {dup!r} appears more than once")
    for child, parent in (("class_id", "school_id"), ("school_id", "province_id")):
        counts = frame.groupby(child, sort=True)[parent].nunique()
        bad = counts[counts > 1]
        if len(bad):
            unit = bad.index[0]
            parents = sorted(frame.loc[frame[child] == unit, parent].unique())
            raise StructureError(f"{child.split('_')[0]} {unit!r} appears under {parent.split('_')[0]}s {parents}")
    if frame["class_id"].nunique() < 2:
        raise StructureError("at least two classes are required")
    for col, level in {**schema.levels, **schema.labels}.items():
        unit = _UNIT_OF_LEVEL.get(level)
        if unit is None:
            continue
        counts = frame.groupby(unit, sort=True)[col].nunique(dropna=False)
        bad = counts[counts > 1]
        if len(bad):
            raise StructureError(f"{level}-level column {col!r} varies within {unit.split('_')[0]} {bad.index[0]!r}")


# ---------------------------------------------------------------------------
# exclusion and transforms


@dataclass(frozen=True)
class ExclusionReport:
    n_students_dropped: int
    n_classes_dropped: int
    missing_by_column: Mapping[str, int]
    n_students_input: int = 0
    n_classes_input: int = 0

    def to_dict(self) -> dict:
        return {
            "n_students_input": self.n_students_input,
            "n_classes_input": self.n_classes_input,
            "n_students_dropped": self.n_students_dropped,
            "n_classes_dropped": self.n_classes_dropped,
            "missing_by_column": dict(self.missing_by_column),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _resolve_columns(d: Dataset, spec: ModelSpec) -> list[str]:
    sources = spec.transforms.derived_sources()
    out = []
    for col in spec.columns():
        if col in d.frame.columns:
            resolved = col
        elif col in sources and sources[col] in d.frame.columns:
            resolved = sources[col]
        else:
            raise ValidationError(f"model references unknown column {col!r}")
        if resolved not in out:
            out.append(resolved)
    return out


def listwise_filter(d: Dataset, spec: ModelSpec) -> tuple[Dataset, ExclusionReport]:
    """Drop students with a missing value in any covariate the model uses."""
    cols = _resolve_columns(d, spec)
    frame = d.frame
    miss = frame[cols].isna() if cols else pd.DataFrame(index=frame.index)
    drop = miss.any(axis=1).to_numpy() if cols else np.zeros(len(frame), bool)
    kept = frame.loc[~drop]
    if len(kept) == 0:
        raise EmptyAnalysisError("every student has a missing model covariate")
    n_cls_in = frame["class_id"].nunique()
    report = ExclusionReport(
        n_students_dropped=int(drop.sum()),
        n_classes_dropped=int(n_cls_in - kept["class_id"].nunique()),
        missing_by_column={c: int(miss[c].sum()) for c in cols},
        n_students_input=len(frame),
        n_classes_input=int(n_cls_in),
    )
    return d.with_frame(kept), report


def spline_below_knot(x, knot):
    """Lower branch of a one-knot linear spline, ``min(x - knot, 0)``."""
    return np.minimum(np.asarray(x, dtype=float) - knot, 0.0) if np.ndim(x) else min(x - knot, 0.0)


def spline_above_knot(x, knot):
    return np.maximum(np.asarray(x, dtype=float) - knot, 0.0) if np.ndim(x) else max(x - knot, 0.0)


def class_mean_name(column: str) -> str:
    return f"{column}_cmean"


def _is_binary(values: np.ndarray) -> bool:
    v = values[~np.isnan(values)]
    return v.size > 0 and bool(np.all((v == 0) | (v == 1)))


def _with_derived(d: Dataset, new_cols: dict[str, tuple[np.ndarray, str]], notes=()) -> Dataset:
    frame = d.frame.copy()
    levels = dict(d.schema.levels)
    for name, (values, level) in new_cols.items():
        frame[name] = values
        levels[name] = level
    schema = replace(d.schema, levels=levels)
    return Dataset(frame.reset_index(drop=True), schema, d.notes + tuple(notes))


def add_class_means(d: Dataset, columns) -> Dataset:
    new = {}
    for col in columns:
        if col not in d.frame.columns:
            raise ValidationError(f"class mean of unknown column {col!r}")
        # mean over students with an observed value
        means = d.frame.groupby("class_id", sort=False)[col].transform("mean")
        new[class_mean_name(col)] = (means.to_numpy(dtype=float), "class")
    return _with_derived(d, new)


def add_splines(d: Dataset, splines) -> Dataset:
    new = {}
    for s in splines:
        if s.column not in d.frame.columns:
            raise ValidationError(f"spline of unknown column {s.column!r}")
        x = d.frame[s.column].to_numpy(dtype=float)
        level = d.schema.levels.get(s.column, "student")
        new[s.below_name] = (spline_below_knot(x, s.knot), level)
        if not s.constrain_upper:
            new[s.above_name] = (spline_above_knot(x, s.knot), level)
    return _with_derived(d, new)


def center_columns(d: Dataset, center) -> Dataset:
    frame = d.frame.copy()
    notes = []
    for col, value in center:
        if col not in frame.columns:
            raise ValidationError(f"cannot center unknown column {col!r}")
        x = frame[col].to_numpy(dtype=float)
        if _is_binary(x):
            msg = f"centering binary indicator {col!r}"
            logger.warning(msg)
            notes.append(msg)
        c = float(np.nanmean(x)) if value == GRAND_MEAN else float(value)
        y = x - c
        if value == GRAND_MEAN:
            # second pass removes the rounding residue of the first
            y = y - np.nanmean(y)
        frame[col] = y
    return d.with_frame(frame, notes)


def apply_transforms(d: Dataset, t: TransformSpec) -> Dataset:
    """Class means, then splines (on raw values), then centering."""
    if t.class_means:
        d = add_class_means(d, t.class_means)
    if t.splines:
        d = add_splines(d, t.splines)
    if t.center:
        d = center_columns(d, t.center)
    return d


def prepare(d: Dataset, spec: ModelSpec) -> tuple[Dataset, ExclusionReport]:
    """Full preprocessing for a model: class means, listwise deletion, transforms.

    Class means are taken on the pre-deletion sample unless the spec says
    otherwise; grand-mean centering always uses the estimation sample.
    """
    t = spec.transforms
    early = spec.class_means_before_deletion and bool(t.class_means)
    if early:
        d = add_class_means(d, t.class_means)
    d, report = listwise_filter(d, spec)
    rest = TransformSpec(t.center, t.splines, () if early else t.class_means)
    return apply_transforms(d, rest), report
