"""Participant data: schema, loading, validation, scaling, weights, CV folds.

The three user groups and the two binary outcomes are fixed: group A is
never at risk for the second outcome (cud) and group C never for the first
(aud); those two group/outcome cells are structural zeros and every
accepted dataset must satisfy them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .rng import substream

GROUPS = ("A", "B", "C")
OUTCOMES = ("aud", "cud")
#: (group, outcome) pairs that are impossible by definition.
STRUCTURAL_ZEROS = frozenset({("A", "cud"), ("C", "aud")})

RESERVED_COLUMNS = ("id", "group", "cluster_id", "weight", "aud", "cud")


class DataError(ValueError):
    """Invalid data file or schema; carries per-row error messages."""

    def __init__(self, message: str, row_errors: Sequence[str] = ()):
        self.row_errors = list(row_errors)
        if self.row_errors:
            message = message + "\n" + "\n".join(self.row_errors)
        super().__init__(message)


def is_structural_zero(group: str, outcome: str) -> bool:
    return (group, outcome) in STRUCTURAL_ZEROS


@dataclass(frozen=True)
class PredictorSpec:
    """Declaration of one predictor column."""

    name: str
    kind: str  # "continuous" | "binary" | "categorical"
    scaling_max: float | None = None  # M used for [0,1] scaling (continuous)
    shift: float = 0.0  # added before dividing by M (continuous)
    levels: tuple[str, ...] = ()  # categorical levels; first is the reference

    def __post_init__(self):
        if self.kind not in ("continuous", "binary", "categorical"):
            raise DataError(f"predictor {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and len(self.levels) < 2:
            raise DataError(f"predictor {self.name!r}: categorical needs >= 2 levels")

    def expanded_columns(self) -> list[str]:
        if self.kind == "categorical":
            return [f"{self.name}={lvl}" for lvl in self.levels[1:]]
        return [self.name]


@dataclass(frozen=True)
class Schema:
    """Ordered predictor declarations plus their scaling constants."""

    predictors: tuple[PredictorSpec, ...]

    def __post_init__(self):
        names = [p.name for p in self.predictors]
        if len(set(names)) != len(names):
            raise DataError("duplicate predictor names in schema")
        for name in names:
            if name in RESERVED_COLUMNS:
                raise DataError(f"predictor name {name!r} collides with a reserved column")

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.predictors]

    def spec(self, name: str) -> PredictorSpec:
        for p in self.predictors:
            if p.name == name:
                return p
        raise DataError(f"unknown predictor {name!r}")

    def expanded_names(self) -> list[str]:
        out: list[str] = []
        for p in self.predictors:
            out.extend(p.expanded_columns())
        return out

    def scaling_max_of(self, expanded_name: str) -> float:
        """M for OR back-transformation; indicators and binaries use 1."""
        base = expanded_name.split("=", 1)[0]
        p = self.spec(base)
        if p.kind == "continuous":
            if p.scaling_max is None:
                raise DataError(f"predictor {base!r} has no scaling_max")
            return float(p.scaling_max)
        return 1.0

    def to_dict(self) -> dict:
        return {
            "predictors": [
                {
                    "name": p.name,
                    "kind": p.kind,
                    "scaling_max": p.scaling_max,
                    "shift": p.shift,
                    "levels": list(p.levels),
                }
                for p in self.predictors
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        preds = []
        for item in d["predictors"]:
            preds.append(
                PredictorSpec(
                    name=item["name"],
                    kind=item["kind"],
                    scaling_max=item.get("scaling_max"),
                    shift=item.get("shift", 0.0),
                    levels=tuple(item.get("levels") or ()),
                )
            )
        return cls(predictors=tuple(preds))

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True)
class Participant:
    """Row-level view of one participant."""

    id: str
    group: str
    cluster_id: str
    weight: float
    predictors: dict
    outcomes: dict


@dataclass(frozen=True)
class Dataset:
    """Immutable columnar container for participants.

    ``raw`` holds per-schema values (labels for categoricals); ``x`` is the
    expanded design matrix whose columns are ``schema.expanded_names()``.
    """

    schema: Schema
    ids: tuple[str, ...]
    groups: np.ndarray  # unicode 'A'/'B'/'C'
    cluster_ids: tuple[str, ...]
    weights: np.ndarray
    y: np.ndarray  # (n, 2) float, columns aud/cud
    raw: dict = field(repr=False)
    scaled: bool = True
    has_outcomes: bool = True
    x: np.ndarray = field(default=None, repr=False)
    x_names: tuple[str, ...] = ()
    cluster_labels: tuple[str, ...] = ()
    cluster_index: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.cluster_ids) == len(self.weights) == len(self.groups) == n):
            raise DataError("column length mismatch")
        if self.y.shape != (n, 2):
            raise DataError("outcome matrix must be (n, 2)")
        errors = []
        for i in range(n):
            g = self.groups[i]
            if g == "A" and self.y[i, 1] != 0:
                errors.append(f"participant {self.ids[i]}: group A with cud=1 (structural zero)")
            if g == "C" and self.y[i, 0] != 0:
                errors.append(f"participant {self.ids[i]}: group C with aud=1 (structural zero)")
            if self.weights[i] < 0:
                errors.append(f"participant {self.ids[i]}: negative weight")
        if errors:
            raise DataError("invalid dataset", errors)
        if self.x is None:
            x, x_names = _expand_design(self.schema, self.raw, n, self.scaled)
            object.__setattr__(self, "x", x)
            object.__setattr__(self, "x_names", tuple(x_names))
        labels = sorted(set(self.cluster_ids))
        index = {c: k for k, c in enumerate(labels)}
        object.__setattr__(self, "cluster_labels", tuple(labels))
        object.__setattr__(
            self, "cluster_index", np.array([index[c] for c in self.cluster_ids], dtype=np.intp)
        )
        for arr in (self.weights, self.y, self.x, self.cluster_index):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    @property
    def group_sizes(self) -> dict:
        return {g: int(np.sum(self.groups == g)) for g in GROUPS}

    def group_rows(self, group: str) -> np.ndarray:
        return np.flatnonzero(self.groups == group)

    def outcome_column(self, outcome: str) -> np.ndarray:
        return self.y[:, OUTCOMES.index(outcome)]

    def design_columns(self, names: Iterable[str]) -> np.ndarray:
        idx = [self.x_names.index(nm) for nm in names]
        return self.x[:, idx] if idx else np.empty((self.n, 0))

    def participant(self, i: int) -> Participant:
        preds = {name: self.raw[name][i] for name in self.schema.names}
        for j, nm in enumerate(self.x_names):
            preds.setdefault(nm, self.x[i, j])
        return Participant(
            id=self.ids[i],
            group=str(self.groups[i]),
            cluster_id=self.cluster_ids[i],
            weight=float(self.weights[i]),
            predictors=preds,
            outcomes={"aud": int(self.y[i, 0]), "cud": int(self.y[i, 1])},
        )

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(
            schema=self.schema,
            ids=tuple(self.ids[i] for i in indices),
            groups=self.groups[indices].copy(),
            cluster_ids=tuple(self.cluster_ids[i] for i in indices),
            weights=self.weights[indices].copy(),
            y=self.y[indices].copy(),
            raw={k: v[indices].copy() for k, v in self.raw.items()},
            scaled=self.scaled,
            has_outcomes=self.has_outcomes,
        )

    def with_weights(self, weights: np.ndarray) -> "Dataset":
        return replace(self, weights=np.asarray(weights, dtype=float).copy(),
                       x=self.x, x_names=self.x_names)


def _expand_design(schema: Schema, raw: dict, n: int, scaled: bool):
    cols: list[np.ndarray] = []
    names: list[str] = []
    errors: list[str] = []
    for p in schema.predictors:
        values = raw[p.name]
        if p.kind == "categorical":
            known = set(p.levels)
            for i, v in enumerate(values):
                if v not in known:
                    errors.append(f"row {i}: predictor {p.name!r} has unknown level {v!r}")
            for lvl in p.levels[1:]:
                cols.append((values == lvl).astype(float))
                names.append(f"{p.name}={lvl}")
        else:
            arr = np.asarray(values, dtype=float)
            if p.kind == "binary":
                bad = ~np.isin(arr, (0.0, 1.0))
                for i in np.flatnonzero(bad):
                    errors.append(f"row {i}: predictor {p.name!r} must be 0/1, got {arr[i]}")
            elif scaled:
                bad = (arr < 0.0) | (arr > 1.0)
                for i in np.flatnonzero(bad):
                    errors.append(
                        f"row {i}: predictor {p.name!r} out of declared range [0, 1]: {arr[i]}"
                    )
            cols.append(arr)
            names.append(p.name)
    if errors:
        raise DataError("invalid predictor values", errors)
    x = np.column_stack(cols) if cols else np.empty((n, 0))
    return x, names


def load_dataset(path, schema: Schema, *, scaled: bool = True,
                 require_outcomes: bool = True) -> Dataset:
    """Read a delimited-text dataset and validate it against ``schema``.

    Required columns: id, group, cluster_id, weight (empty allowed, defaults
    to 1), aud, cud, then one column per schema predictor.  Outcome columns
    may be omitted entirely when ``require_outcomes`` is false (prediction
    inputs).  All offending rows are reported together.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)

    header = [h.strip() for h in header]
    expected = set(RESERVED_COLUMNS) | set(schema.names)
    unknown = [h for h in header if h not in expected]
    if unknown:
        raise DataError(f"{path}: unknown column(s): {', '.join(unknown)}")
    outcome_cols_present = all(c in header for c in ("aud", "cud"))
    required = ["id", "group", "cluster_id", "weight"] + list(schema.names)
    if require_outcomes:
        required += ["aud", "cud"]
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s): {', '.join(missing)}")

    pos = {h: j for j, h in enumerate(header)}
    n = len(rows)
    ids, groups, clusters = [], [], []
    weights = np.ones(n)
    y = np.zeros((n, 2))
    raw: dict = {
        p.name: (np.empty(n, dtype=object) if p.kind == "categorical" else np.empty(n))
        for p in schema.predictors
    }
    errors: list[str] = []

    for i, row in enumerate(rows):
        rowno = i + 2  # 1-based with header
        if len(row) != len(header):
            errors.append(f"row {rowno}: expected {len(header)} fields, got {len(row)}")
            continue
        ids.append(row[pos["id"]].strip())
        g = row[pos["group"]].strip()
        if g not in GROUPS:
            errors.append(f"row {rowno}: unknown group label {g!r}")
            g = "A"
        groups.append(g)
        clusters.append(row[pos["cluster_id"]].strip())
        wtext = row[pos["weight"]].strip()
        if wtext:
            try:
                weights[i] = float(wtext)
            except ValueError:
                errors.append(f"row {rowno}: malformed weight {wtext!r}")
        if outcome_cols_present:
            for k, oc in enumerate(OUTCOMES):
                text = row[pos[oc]].strip()
                if text == "" and not require_outcomes:
                    continue
                if text not in ("0", "1"):
                    errors.append(f"row {rowno}: outcome {oc} must be 0/1, got {text!r}")
                else:
                    y[i, k] = float(text)
        for p in schema.predictors:
            text = row[pos[p.name]].strip()
            if p.kind == "categorical":
                raw[p.name][i] = text
            else:
                try:
                    raw[p.name][i] = float(text)
                except ValueError:
                    errors.append(f"row {rowno}: malformed value {text!r} for {p.name!r}")
                    raw[p.name][i] = 0.0

    if errors:
        raise DataError(f"{path}: rejected rows", errors)

    try:
        return Dataset(
            schema=schema,
            ids=tuple(ids),
            groups=np.array(groups),
            cluster_ids=tuple(clusters),
            weights=weights,
            y=y,
            raw=raw,
            scaled=scaled,
            has_outcomes=outcome_cols_present,
        )
    except DataError as e:
        raise DataError(f"{path}: rejected rows", e.row_errors) from None


def _format_number(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_dataset(d: Dataset, path) -> None:
    """Write in the same delimited format; numeric columns round-trip exactly."""
    header = list(RESERVED_COLUMNS) + d.schema.names
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(d.n):
            row = [
                d.ids[i],
                str(d.groups[i]),
                d.cluster_ids[i],
                _format_number(float(d.weights[i])),
                str(int(d.y[i, 0])),
                str(int(d.y[i, 1])),
            ]
            for p in d.schema.predictors:
                v = d.raw[p.name][i]
                row.append(str(v) if p.kind == "categorical" else _format_number(float(v)))
            writer.writerow(row)


def scale_predictors(raw: Dataset) -> Dataset:
    """Map continuous predictors onto [0, 1] by shift-then-divide.

    Negative-valued predictors are first shifted to a zero minimum; each is
    then divided by its declared or observed post-shift maximum M.  The
    (shift, M) pair is stored in the schema for OR back-transformation.
    """
    new_specs = []
    new_raw = dict(raw.raw)
    for p in raw.schema.predictors:
        if p.kind != "continuous":
            new_specs.append(p)
            continue
        values = np.asarray(raw.raw[p.name], dtype=float)
        lo = float(values.min()) if len(values) else 0.0
        shift = -lo if lo < 0 else 0.0
        shifted = values + shift
        m = p.scaling_max if p.scaling_max is not None else (float(shifted.max()) if len(shifted) else 0.0)
        if m <= 0:
            raise DataError(f"predictor {p.name!r} is constant after shift (M = {m}); cannot scale")
        new_raw[p.name] = shifted / m
        new_specs.append(replace(p, scaling_max=float(m), shift=shift))
    return Dataset(
        schema=Schema(predictors=tuple(new_specs)),
        ids=raw.ids,
        groups=raw.groups.copy(),
        cluster_ids=raw.cluster_ids,
        weights=raw.weights.copy(),
        y=raw.y.copy(),
        raw=new_raw,
        scaled=True,
        has_outcomes=raw.has_outcomes,
    )


def normalize_weights(d: Dataset) -> Dataset:
    """Rescale survey weights so they sum to the participant count."""
    total = float(d.weights.sum())
    if total <= 0:
        raise DataError("cannot normalize: all weights are zero")
    return d.with_weights(d.weights * (d.n / total))


def stratified_folds(d: Dataset, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Partition rows into K folds stratified by (group, aud, cud).

    Strata smaller than K are pooled into the largest stratum of the same
    group.  Deterministic for a given seed.
    """
    if k < 2:
        raise DataError("K must be >= 2")
    if k > d.n:
        raise DataError(f"K = {k} exceeds dataset size n = {d.n}")
    keys = [(str(d.groups[i]), int(d.y[i, 0]), int(d.y[i, 1])) for i in range(d.n)]
    strata: dict = {}
    for i, key in enumerate(keys):
        strata.setdefault(key, []).append(i)

    # Pool undersized strata into the largest same-group stratum.
    for key in sorted(strata, key=lambda s: (s, )):
        members = strata[key]
        if len(members) >= k or len(strata) == 1:
            continue
        candidates = [s for s in strata if s != key and s[0] == key[0]]
        if not candidates:
            candidates = [s for s in strata if s != key]
        target = max(candidates, key=lambda s: (len(strata[s]), s))
        strata[target] = strata[target] + members
        del strata[key]

    rng = substream(seed, "folds")
    assignment = np.empty(d.n, dtype=np.intp)
    offset = 0
    for key in sorted(strata):
        members = np.array(strata[key], dtype=np.intp)
        rng.shuffle(members)
        for j, idx in enumerate(members):
            assignment[idx] = (j + offset) % k
        offset += len(members)

    folds = []
    for fold in range(k):
        test = np.flatnonzero(assignment == fold)
        train = np.flatnonzero(assignment != fold)
        folds.append((train, test))
    return folds
