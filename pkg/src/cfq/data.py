"""Tabular datasets, actionability schemas and recourse cost weights.

A schema is declared in a JSON sidecar next to the CSV. Raw columns are
encoded as follows: continuous and ordinal columns map to a single coordinate,
categorical columns expand into a one-hot group. Standardization is a separate
step (:class:`Standardizer`) fitted on the training split; it rescales the
continuous/ordinal coordinates together with their bounds and ordinal domains,
so downstream modules see bounds in standardized units.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

DEFAULT_EPS = 1e-8

CONTINUOUS = "continuous"
ORDINAL = "ordinal"
CATEGORICAL = "categorical"
ONEHOT = "onehot"


class SchemaError(ValueError):
    """Raised when data does not conform to its declared schema."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    lower: float = -math.inf
    upper: float = math.inf
    values: tuple[float, ...] = ()
    categories: tuple[str, ...] = ()

    @property
    def width(self) -> int:
        return len(self.categories) if self.kind == CATEGORICAL else 1


@dataclass(frozen=True)
class DatasetSchema:
    """Encoded feature layout plus the actionability constraints.

    ``lower``/``upper`` and ``ordinal_values`` live in the same units as the
    encoded rows. Both are raw units right after :func:`load_dataset` and
    standardized units after :meth:`Standardizer.transform_schema`.
    """

    columns: tuple[ColumnSpec, ...]
    immutable_columns: tuple[str, ...] = ()
    sparsity_k: int | None = None
    favorable_mode: str = "fixed"
    favorable_class: int | None = 1
    label: str = "label"
    classes: tuple[str, ...] = ()
    subgroup: str | None = None
    lower: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    upper: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    ordinal_values: dict[int, np.ndarray] = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names")
        for name in self.immutable_columns:
            if name not in names:
                raise SchemaError(f"immutable column {name!r} is not a feature")
        if self.favorable_mode not in ("fixed", "opposite"):
            raise SchemaError(f"unknown favorable mode {self.favorable_mode!r}")
        if self.favorable_mode == "fixed" and self.favorable_class is None:
            raise SchemaError("fixed favorable mode needs a class")
        if self.lower is None:
            lo, hi, ordv = [], [], {}
            for col in self.columns:
                if col.kind == CATEGORICAL:
                    lo += [0.0] * col.width
                    hi += [1.0] * col.width
                else:
                    if col.kind == ORDINAL:
                        if not col.values:
                            raise SchemaError(f"ordinal column {col.name!r} needs values")
                        ordv[len(lo)] = np.array(sorted(col.values), dtype=np.float64)
                    lo.append(col.lower)
                    hi.append(col.upper)
            object.__setattr__(self, "lower", np.array(lo, dtype=np.float64))
            object.__setattr__(self, "upper", np.array(hi, dtype=np.float64))
            object.__setattr__(self, "ordinal_values", ordv)
        if np.any(self.lower > self.upper):
            raise SchemaError("lower bound exceeds upper bound")
        k = self.sparsity_k
        if k is not None and not 0 <= k <= len(self.actionable_units):
            raise SchemaError(f"sparsity budget {k} exceeds the number of actionable features")

    # -- encoded layout -------------------------------------------------
    @property
    def dim(self) -> int:
        return sum(c.width for c in self.columns)

    def column_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for col in self.columns:
            out[col.name] = slice(start, start + col.width)
            start += col.width
        return out

    @property
    def feature_names(self) -> list[str]:
        names = []
        for col in self.columns:
            if col.kind == CATEGORICAL:
                names += [f"{col.name}={c}" for c in col.categories]
            else:
                names.append(col.name)
        return names

    @property
    def feature_kinds(self) -> list[str]:
        kinds = []
        for col in self.columns:
            kinds += [ONEHOT] * col.width if col.kind == CATEGORICAL else [col.kind]
        return kinds

    @property
    def onehot_groups(self) -> list[list[int]]:
        slices = self.column_slices()
        return [list(range(slices[c.name].start, slices[c.name].stop))
                for c in self.columns if c.kind == CATEGORICAL]

    @property
    def immutable_indices(self) -> list[int]:
        slices = self.column_slices()
        idx = []
        for name in self.immutable_columns:
            s = slices[name]
            idx += list(range(s.start, s.stop))
        return sorted(idx)

    @property
    def actionable_units(self) -> list[list[int]]:
        """Actionable decision units: single coordinates or whole one-hot groups."""
        imm = set(self.immutable_indices)
        slices = self.column_slices()
        units = []
        for col in self.columns:
            idx = list(range(slices[col.name].start, slices[col.name].stop))
            if not imm.intersection(idx):
                units.append(idx)
        return units

    def target_for(self, predicted: np.ndarray) -> np.ndarray:
        """Target label per example given current predictions (-1 means skip)."""
        predicted = np.asarray(predicted)
        if self.favorable_mode == "fixed":
            return np.where(predicted == self.favorable_class, -1, self.favorable_class)
        if len(self.classes) > 2:
            raise SchemaError("opposite-of-prediction targets need a binary task")
        return 1 - predicted

    def with_bounds(self, lower, upper, ordinal_values=None) -> "DatasetSchema":
        return replace(self, lower=np.asarray(lower, dtype=np.float64),
                       upper=np.asarray(upper, dtype=np.float64),
                       ordinal_values=dict(self.ordinal_values if ordinal_values is None
                                           else ordinal_values))

    # -- JSON -----------------------------------------------------------
    @classmethod
    def from_dict(cls, spec: dict[str, Any]) -> "DatasetSchema":
        cols = []
        for f in spec["features"]:
            kind = f.get("kind", CONTINUOUS)
            if kind not in (CONTINUOUS, ORDINAL, CATEGORICAL):
                raise SchemaError(f"unknown feature kind {kind!r}")
            cols.append(ColumnSpec(
                name=f["name"], kind=kind,
                lower=float(f.get("lower", -math.inf)), upper=float(f.get("upper", math.inf)),
                values=tuple(float(v) for v in f.get("values", ())),
                categories=tuple(str(c) for c in f.get("categories", ())),
            ))
        fav = spec.get("favorable", {"mode": "fixed", "class": 1})
        mode = {"fixed-class": "fixed", "opposite-of-prediction": "opposite"}.get(fav["mode"], fav["mode"])
        return cls(columns=tuple(cols),
                   immutable_columns=tuple(spec.get("immutable", ())),
                   sparsity_k=spec.get("sparsity_k"),
                   favorable_mode=mode,
                   favorable_class=fav.get("class"),
                   label=spec.get("label", "label"),
                   classes=tuple(str(c) for c in spec.get("classes", ())),
                   subgroup=spec.get("subgroup"))

    @classmethod
    def from_json(cls, path: str | Path) -> "DatasetSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        feats = []
        for c in self.columns:
            f: dict[str, Any] = {"name": c.name, "kind": c.kind}
            if math.isfinite(c.lower):
                f["lower"] = c.lower
            if math.isfinite(c.upper):
                f["upper"] = c.upper
            if c.values:
                f["values"] = list(c.values)
            if c.categories:
                f["categories"] = list(c.categories)
            feats.append(f)
        out: dict[str, Any] = {
            "features": feats,
            "immutable": list(self.immutable_columns),
            "sparsity_k": self.sparsity_k,
            "favorable": {"mode": self.favorable_mode, "class": self.favorable_class},
            "label": self.label,
        }
        if self.classes:
            out["classes"] = list(self.classes)
        if self.subgroup:
            out["subgroup"] = self.subgroup
        return out


@dataclass
class Dataset:
    rows: np.ndarray
    labels: np.ndarray
    groups: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2 or len(self.rows) != len(self.labels):
            raise SchemaError("rows and labels disagree in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.rows[idx], self.labels[idx],
                       None if self.groups is None else self.groups[idx],
                       split or self.split)


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray
    mad: np.ndarray
    eps: float = DEFAULT_EPS


@dataclass(frozen=True)
class CostSpec:
    weights: np.ndarray
    p: int = 1
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if np.any(w <= 0):
            raise ValueError("cost weights must be strictly positive")
        if self.p not in (1, 2):
            raise ValueError("cost norm must be 1 or 2")

    @classmethod
    def uniform(cls, d: int, p: int = 1) -> "CostSpec":
        return cls(np.ones(d), p)


# ---------------------------------------------------------------------------
# loading

def _parse_float(value: str, row: int, name: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise SchemaError(f"row {row}: feature {name!r} has non-numeric value {value!r}") from None


def encode_records(records: Sequence[dict[str, str]], schema: DatasetSchema) -> np.ndarray:
    rows = np.zeros((len(records), schema.dim))
    slices = schema.column_slices()
    for i, rec in enumerate(records):
        for col in schema.columns:
            if col.name not in rec:
                raise SchemaError(f"row {i}: missing column {col.name!r}")
            raw = rec[col.name].strip()
            s = slices[col.name]
            if col.kind == CATEGORICAL:
                if raw not in col.categories:
                    raise SchemaError(f"row {i}: unknown category {raw!r} for feature {col.name!r}")
                rows[i, s.start + col.categories.index(raw)] = 1.0
                continue
            v = _parse_float(raw, i, col.name)
            if col.kind == ORDINAL and v not in col.values:
                raise SchemaError(f"row {i}: value {v} outside the domain of feature {col.name!r}")
            if not col.lower <= v <= col.upper:
                raise SchemaError(
                    f"row {i}: feature {col.name!r} value {v} violates bounds [{col.lower}, {col.upper}]")
            rows[i, s.start] = v
    return rows


def decode_rows(rows: np.ndarray, schema: DatasetSchema) -> list[dict[str, str]]:
    """Inverse of :func:`encode_records` for rows in raw (unstandardized) units."""
    out = []
    slices = schema.column_slices()
    for r in np.asarray(rows):
        rec = {}
        for col in schema.columns:
            s = slices[col.name]
            if col.kind == CATEGORICAL:
                rec[col.name] = col.categories[int(np.argmax(r[s]))]
            else:
                rec[col.name] = repr(float(r[s.start]))
        out.append(rec)
    return out


def load_dataset(path: str | Path, schema: DatasetSchema, split: str = "train") -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        records = list(reader)
    missing = [c.name for c in schema.columns if c.name not in header]
    if schema.label not in header:
        missing.append(schema.label)
    if missing:
        raise SchemaError(f"column mismatch: CSV lacks {missing}")
    if not records:
        raise SchemaError("no rows")
    rows = encode_records(records, schema)
    labels = []
    for i, rec in enumerate(records):
        raw = rec[schema.label].strip()
        if schema.classes:
            if raw not in schema.classes:
                raise SchemaError(f"row {i}: unknown label {raw!r}")
            labels.append(schema.classes.index(raw))
        else:
            labels.append(int(_parse_float(raw, i, schema.label)))
    groups = None
    if schema.subgroup:
        if schema.subgroup not in header:
            raise SchemaError(f"column mismatch: subgroup column {schema.subgroup!r} absent")
        groups = np.array([rec[schema.subgroup].strip() for rec in records])
    return Dataset(rows, np.array(labels), groups, split)


def split_dataset(ds: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_train = int(round(fractions[0] * len(ds)))
    n_val = int(round(fractions[1] * len(ds)))
    return (ds.subset(perm[:n_train], "train"),
            ds.subset(perm[n_train:n_train + n_val], "val"),
            ds.subset(perm[n_train + n_val:], "test"))


# ---------------------------------------------------------------------------
# standardization and costs

@dataclass(frozen=True)
class Standardizer:
    """Affine map fitted on the train split; one-hot coordinates pass through."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, train: Dataset, schema: DatasetSchema) -> "Standardizer":
        if train.split != "train":
            raise ValueError("standardization statistics must come from the train split")
        kinds = schema.feature_kinds
        mean = train.rows.mean(axis=0)
        std = train.rows.std(axis=0)
        onehot = np.array([k == ONEHOT for k in kinds])
        mean = np.where(onehot, 0.0, mean)
        scale = np.where(onehot | (std == 0), 1.0, std)
        return cls(mean, scale)

    def transform(self, ds: Dataset) -> Dataset:
        return Dataset((ds.rows - self.mean) / self.scale, ds.labels.copy(),
                       None if ds.groups is None else ds.groups.copy(), ds.split)

    def inverse(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(rows) * self.scale + self.mean

    def transform_schema(self, schema: DatasetSchema) -> DatasetSchema:
        lo = (schema.lower - self.mean) / self.scale
        hi = (schema.upper - self.mean) / self.scale
        ordv = {j: (v - self.mean[j]) / self.scale[j] for j, v in schema.ordinal_values.items()}
        return schema.with_bounds(lo, hi, ordv)


def compute_feature_stats(train: Dataset, eps: float = DEFAULT_EPS) -> FeatureStats:
    if train.split != "train":
        raise ValueError("feature statistics must come from the train split")
    x = train.rows
    med = np.median(x, axis=0)
    return FeatureStats(x.mean(axis=0), x.std(axis=0), np.median(np.abs(x - med), axis=0), eps)


def compute_cost_weights(stats: FeatureStats, mode: str = "inverse-std", p: int = 1) -> CostSpec:
    if mode == "inverse-std":
        w = 1.0 / (np.asarray(stats.std, dtype=np.float64) + stats.eps)
    elif mode == "uniform":
        w = np.ones_like(np.asarray(stats.std, dtype=np.float64))
    elif mode == "inverse-mad":
        w = 1.0 / (np.asarray(stats.mad, dtype=np.float64) + stats.eps)
    else:
        raise ValueError(f"unknown weighting mode {mode!r}")
    return CostSpec(w, p, stats.eps)


def action_cost(delta, cost: CostSpec):
    """Weighted norm ``||W delta||_p`` over the last axis (numpy or torch)."""
    if delta.shape[-1] != len(cost.weights):
        raise ValueError(f"action has dimension {delta.shape[-1]}, cost expects {len(cost.weights)}")
    if isinstance(delta, torch.Tensor):
        w = torch.as_tensor(cost.weights, dtype=delta.dtype)
        return torch.linalg.vector_norm(delta * w, ord=cost.p, dim=-1)
    v = np.asarray(delta, dtype=np.float64) * cost.weights
    # rescale by the largest entry so squaring cannot underflow or overflow
    m = np.max(np.abs(v), axis=-1, keepdims=True) if v.shape[-1] else np.ones(v.shape[:-1] + (1,))
    m = np.where(m > 0, m, 1.0)
    return m[..., 0] * np.linalg.norm(v / m, ord=cost.p, axis=-1)


# ---------------------------------------------------------------------------
# synthetic and built-in layouts

def make_two_gaussians(n: int = 2000, d: int = 10, separation: float = 2.5, seed: int = 0,
                       n_immutable: int = 2, sparsity_k: int | None = None,
                       bound: float = 6.0) -> tuple[Dataset, DatasetSchema]:
    """Two isotropic Gaussian blobs, labels 0 (unfavorable) and 1 (favorable).

    Class means sit at +/- separation/2 along a random unit direction. The
    first ``n_immutable`` features are immutable; a binary subgroup id is
    derived from the sign of feature 0.
    """
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    labels = rng.integers(0, 2, size=n)
    centers = np.where(labels[:, None] == 1, 0.5, -0.5) * separation * direction
    rows = np.clip(centers + rng.normal(size=(n, d)), -bound, bound)
    groups = np.where(rows[:, 0] > 0, "a", "b")
    spec = {
        "features": [{"name": f"x{j}", "kind": CONTINUOUS, "lower": -bound, "upper": bound}
                     for j in range(d)],
        "immutable": [f"x{j}" for j in range(n_immutable)],
        "sparsity_k": sparsity_k,
        "favorable": {"mode": "fixed", "class": 1},
    }
    return Dataset(rows, labels, groups, "train"), DatasetSchema.from_dict(spec)


BUILTIN_SCHEMAS: dict[str, dict[str, Any]] = {
    "adult": {
        "features": [
            {"name": "age", "kind": CONTINUOUS, "lower": 17, "upper": 90},
            {"name": "education-num", "kind": ORDINAL, "values": list(range(1, 17))},
            {"name": "hours-per-week", "kind": CONTINUOUS, "lower": 1, "upper": 99},
            {"name": "capital-gain", "kind": CONTINUOUS, "lower": 0, "upper": 99999},
            {"name": "capital-loss", "kind": CONTINUOUS, "lower": 0, "upper": 4356},
            {"name": "workclass", "kind": CATEGORICAL,
             "categories": ["Private", "Self-emp", "Gov", "Other"]},
            {"name": "marital-status", "kind": CATEGORICAL,
             "categories": ["Married", "Never-married", "Separated", "Widowed"]},
            {"name": "sex", "kind": CATEGORICAL, "categories": ["Female", "Male"]},
            {"name": "race", "kind": CATEGORICAL, "categories": ["White", "Black", "Other"]},
        ],
        "label": "income",
        "classes": ["<=50K", ">50K"],
        "immutable": ["age", "sex", "race", "marital-status"],
        "sparsity_k": 3,
        "favorable": {"mode": "fixed", "class": 1},
        "subgroup": "sex",
    },
    "german": {
        "features": [
            {"name": "duration", "kind": CONTINUOUS, "lower": 4, "upper": 72},
            {"name": "credit-amount", "kind": CONTINUOUS, "lower": 250, "upper": 18424},
            {"name": "installment-rate", "kind": ORDINAL, "values": [1, 2, 3, 4]},
            {"name": "age", "kind": CONTINUOUS, "lower": 19, "upper": 75},
            {"name": "existing-credits", "kind": ORDINAL, "values": [1, 2, 3, 4]},
            {"name": "checking-status", "kind": CATEGORICAL,
             "categories": ["<0", "0-200", ">=200", "none"]},
            {"name": "savings", "kind": CATEGORICAL,
             "categories": ["<100", "100-500", "500-1000", ">=1000", "unknown"]},
            {"name": "personal-status", "kind": CATEGORICAL,
             "categories": ["male-single", "male-married", "female"]},
        ],
        "label": "credit",
        "classes": ["bad", "good"],
        "immutable": ["age", "personal-status"],
        "sparsity_k": 3,
        "favorable": {"mode": "fixed", "class": 1},
        "subgroup": "personal-status",
    },
    "compas": {
        "features": [
            {"name": "age", "kind": CONTINUOUS, "lower": 18, "upper": 96},
            {"name": "priors-count", "kind": CONTINUOUS, "lower": 0, "upper": 38},
            {"name": "juv-fel-count", "kind": CONTINUOUS, "lower": 0, "upper": 20},
            {"name": "charge-degree", "kind": CATEGORICAL, "categories": ["F", "M"]},
            {"name": "sex", "kind": CATEGORICAL, "categories": ["Female", "Male"]},
            {"name": "race", "kind": CATEGORICAL,
             "categories": ["African-American", "Caucasian", "Hispanic", "Other"]},
        ],
        "label": "two-year-recid",
        "classes": ["1", "0"],
        "immutable": ["age", "sex", "race"],
        "sparsity_k": 2,
        "favorable": {"mode": "fixed", "class": 1},
        "subgroup": "race",
    },
}


def builtin_schema(name: str) -> DatasetSchema:
    try:
        return DatasetSchema.from_dict(BUILTIN_SCHEMAS[name])
    except KeyError:
        raise ValueError(f"no built-in layout named {name!r}") from None
