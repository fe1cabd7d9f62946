"""Datasets, synthetic generators and evaluation metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from faircert.errors import DimensionError, ValidationError
from faircert.local import lfc, upper_local
from faircert.nn import ModelParams, predict

Array = np.ndarray


@dataclass
class Dataset:
    """Standardised features with binary labels and a binary protected attribute.

    ``protected_feature`` is the column of ``features`` holding the protected
    attribute, or ``None`` when it is kept only as metadata.
    """

    features: Array
    labels: Array
    protected: Array
    feature_names: list[str]
    protected_feature: int | None = None
    mean: Array | None = None
    std: Array | None = None
    encoding: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.protected = np.asarray(self.protected, dtype=np.int64)
        n, m = self.features.shape
        if self.labels.shape != (n,) or self.protected.shape != (n,):
            raise DimensionError("features, labels and protected must have the same number of rows")
        if len(self.feature_names) != m:
            raise DimensionError(f"{len(self.feature_names)} names for {m} features")
        if not np.isin(self.protected, (0, 1)).all():
            raise ValidationError("protected attribute must be binary")
        if self.mean is None:
            self.mean = np.zeros(m)
        if self.std is None:
            self.std = np.ones(m)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, features=self.features[idx], labels=self.labels[idx], protected=self.protected[idx])

    def split(self, frac: float = 0.1, seed=0) -> tuple["Dataset", "Dataset"]:
        """Seeded shuffle into ``(rest, held_out)`` with ``frac`` held out."""
        idx = np.random.default_rng(seed).permutation(self.n)
        k = max(1, int(round(frac * self.n)))
        return self.subset(idx[k:]), self.subset(idx[:k])


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------

@dataclass
class Schema:
    label: str
    protected: str
    categorical: Sequence[str] = ()
    positive_label: str | None = None
    protected_positive: str | None = None
    keep_protected: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(**d)

    def to_dict(self) -> dict:
        return {"label": self.label, "protected": self.protected, "categorical": list(self.categorical),
                "positive_label": self.positive_label, "protected_positive": self.protected_positive,
                "keep_protected": self.keep_protected}


def _sort_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def _binary_map(values: list[str], positive: str | None, what: str) -> dict:
    uniq = sorted(set(values), key=_sort_key)
    if positive is not None:
        return {v: int(v == positive) for v in uniq}
    if len(uniq) > 2:
        raise ValidationError(f"{what} column has {len(uniq)} distinct values; set the positive value in the schema")
    return {v: i for i, v in enumerate(uniq)} if len(uniq) == 2 else {uniq[0]: 0}


def load_csv(path, schema: Schema, reference: Dataset | None = None) -> Dataset:
    """Read a header-first CSV into a standardised :class:`Dataset`.

    Categorical columns are one-hot encoded; every feature column is then
    centred and scaled with the file's own statistics, or with those of
    ``reference`` (typically the training split). Zero-variance columns get
    scale 1.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise ValidationError(f"{path}: missing header row")
        for col in [schema.label, schema.protected, *schema.categorical]:
            if col not in header:
                raise ValidationError(f"{path}: column {col!r} not found")
        rows = []
        for i, row in enumerate(reader):
            if None in row or any(v is None for v in row.values()):
                raise ValidationError(f"{path}: row {i} has the wrong number of fields")
            rows.append(row)
    if not rows:
        raise ValidationError(f"{path}: no data rows")

    enc = reference.encoding if reference is not None else {}
    label_map = enc.get("label_map") or _binary_map([r[schema.label] for r in rows], schema.positive_label, "label")
    prot_map = enc.get("protected_map") or _binary_map(
        [r[schema.protected] for r in rows], schema.protected_positive, "protected")
    cats = enc.get("categories") or {c: sorted({r[c] for r in rows}) for c in schema.categorical}
    numeric = [c for c in header if c not in (schema.label, schema.protected) and c not in schema.categorical]

    def lookup(mapping, value, i, col):
        try:
            return mapping[value]
        except KeyError:
            raise ValidationError(f"{path}: row {i}: unexpected value {value!r} in column {col!r}") from None

    names: list[str] = []
    if schema.keep_protected:
        names.append(schema.protected)
    names += numeric
    for c in schema.categorical:
        names += [f"{c}={v}" for v in cats[c]]

    raw = np.empty((len(rows), len(names)))
    labels = np.empty(len(rows), dtype=np.int64)
    prot = np.empty(len(rows), dtype=np.int64)
    for i, r in enumerate(rows):
        labels[i] = lookup(label_map, r[schema.label], i, schema.label)
        prot[i] = lookup(prot_map, r[schema.protected], i, schema.protected)
        vals = [float(prot[i])] if schema.keep_protected else []
        for c in numeric:
            try:
                vals.append(float(r[c]))
            except ValueError:
                raise ValidationError(f"{path}: row {i}: cannot parse {r[c]!r} in column {c!r}") from None
        for c in schema.categorical:
            v = r[c]
            if v not in cats[c]:
                raise ValidationError(f"{path}: row {i}: unseen category {v!r} in column {c!r}")
            vals.extend(float(v == u) for u in cats[c])
        raw[i] = vals
    if not np.all(np.isfinite(raw)):
        bad = int(np.argwhere(~np.isfinite(raw))[0, 0])
        raise ValidationError(f"{path}: row {bad}: non-finite value")

    if reference is not None:
        mean, std = reference.mean, reference.std
    else:
        mean, std = standardization_stats(raw)
    return Dataset((raw - mean) / std, labels, prot, names, 0 if schema.keep_protected else None, mean, std,
                   {"label_map": label_map, "protected_map": prot_map, "categories": cats})


def standardization_stats(raw: Array) -> tuple[Array, Array]:
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def save_csv(data: Dataset, path) -> Schema:
    """Write features, label and (if not a feature) protected; returns a schema to reload."""
    prot_col = data.feature_names[data.protected_feature] if data.protected_feature is not None else "protected"
    header = list(data.feature_names) + ["label"]
    if data.protected_feature is None:
        header.append(prot_col)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(data.n):
            row = [repr(float(v)) for v in data.features[i]] + [int(data.labels[i])]
            if data.protected_feature is None:
                row.append(int(data.protected[i]))
            w.writerow(row)
    return Schema(label="label", protected=prot_col, keep_protected=data.protected_feature is not None)


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------

def halfmoons(n: int = 2000, noise: float = 0.1, seed=0) -> Dataset:
    """Two interleaved unit half-circles; label and protected attribute are the moon index."""
    if n < 2 or n % 2:
        raise ValidationError("halfmoons needs an even n >= 2")
    rng = np.random.default_rng(seed)
    h = n // 2
    t = np.linspace(0.0, math.pi, h)
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    X = np.vstack([outer, inner])
    y = np.repeat([0, 1], h)
    if noise > 0:
        X = X + rng.normal(0.0, noise, size=X.shape)
    perm = rng.permutation(n)
    return Dataset(X[perm], y[perm], y[perm].copy(), ["x0", "x1"])


CENSUS_FEATURES = [
    "sex", "age", "education", "hours", "occupation", "capital", "married",
    "tenure", "commute", "industry", "household", "region",
]


def census_like(n: int = 5000, seed=0, shift: float = 0.0) -> Dataset:
    """Census-style fixture: 12 standardised features, binary sex as protected column 0.

    Several features carry planted correlation with sex; the label depends
    on some of them. ``shift`` moves feature means to mimic a population
    from another region or year.
    """
    rng = np.random.default_rng(seed)
    sex = (rng.uniform(size=n) < 0.5 + 0.05 * shift).astype(np.float64)
    s = 2 * sex - 1
    z = rng.standard_normal((n, 11))
    age = z[:, 0] + 0.3 * shift
    education = 0.15 * s + z[:, 1] + 0.2 * shift
    hours = 0.3 * s + z[:, 2]
    occupation = 0.25 * s + 0.3 * education + z[:, 3]
    capital = np.exp(0.5 * z[:, 4]) + 0.1 * shift
    married = (0.5 * age + 0.2 * s + z[:, 5] > 0).astype(np.float64)
    tenure = 0.7 * age + 0.7 * z[:, 6]
    commute = z[:, 7] + 0.3 * shift
    industry = 0.3 * s + z[:, 8]
    household = 0.4 * married + z[:, 9]
    region = z[:, 10] + shift
    raw = np.stack([sex, age, education, hours, occupation, capital, married,
                    tenure, commute, industry, household, region], axis=1)
    logit = (1.2 * education + 0.9 * age + 1.0 * np.log(capital) + 0.5 * tenure + 0.5 * married
             + 0.3 * hours - 0.5 * commute + 0.2 * s - 0.4 + 0.3 * rng.standard_normal(n))
    y = (rng.uniform(size=n) < 1 / (1 + np.exp(-2.0 * logit))).astype(np.int64)
    mean, std = standardization_stats(raw)
    return Dataset((raw - mean) / std, y, sex.astype(np.int64), list(CENSUS_FEATURES), 0, mean, std)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def accuracy(params: ModelParams, data: Dataset) -> float:
    return float(np.mean(predict(params, data.features) == data.labels))


def e_dfc(params: ModelParams, metric, shifted, delta: float) -> float:
    """Largest mean local certificate over a list of shifted datasets (or arrays)."""
    if len(shifted) == 0:
        raise ValidationError("need at least one shifted dataset")
    return max(lfc(params, metric, d.features if isinstance(d, Dataset) else d, delta) for d in shifted)


def _rate(mask: Array, pred: Array):
    return float(pred[mask].mean()) if mask.any() else None


def _absdiff(a, b):
    return None if a is None or b is None else abs(a - b)


def group_metrics(params: ModelParams, data: Dataset, metric=None, delta: float | None = None) -> dict:
    """Demographic parity, equalised odds/opportunity and IF parity gaps between groups.

    Undefined quantities (an empty group or stratum, or no metric for IF
    parity) are reported as ``None``.
    """
    pred = predict(params, data.features)
    return group_metrics_from_predictions(
        pred, data.labels, data.protected,
        upper_local(params, metric, data.features, delta) if metric is not None else None)


def group_metrics_from_predictions(pred, labels, group, local_upper=None) -> dict:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    group = np.asarray(group)
    g0, g1 = group == 0, group == 1
    dem = _absdiff(_rate(g0, pred), _rate(g1, pred))
    tpr = _absdiff(_rate(g0 & (labels == 1), pred), _rate(g1 & (labels == 1), pred))
    fpr = _absdiff(_rate(g0 & (labels == 0), pred), _rate(g1 & (labels == 0), pred))
    odds = None if tpr is None or fpr is None else max(tpr, fpr)
    ifp = None
    if local_upper is not None:
        lu = np.asarray(local_upper)
        ifp = _absdiff(float(lu[g0].mean()) if g0.any() else None, float(lu[g1].mean()) if g1.any() else None)
    return {"dem_parity": dem, "eq_odds": odds, "eq_opp": tpr, "if_parity": ifp}


def empirical_wasserstein(X, Z, p: int = 2, seed=0, metric=None) -> float:
    """Exact p-Wasserstein distance between two equal-weight point clouds.

    The larger set is subsampled (seeded) to the size of the smaller one;
    the optimal matching is found with the Hungarian algorithm and the
    result is ``((1/n) * min_cost) ** (1/p)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if X.shape[1] != Z.shape[1]:
        raise DimensionError("point clouds live in different dimensions")
    rng = np.random.default_rng(seed)
    n = min(len(X), len(Z))
    if len(X) > n:
        X = X[np.sort(rng.choice(len(X), n, replace=False))]
    if len(Z) > n:
        Z = Z[np.sort(rng.choice(len(Z), n, replace=False))]
    if metric is None:
        D = cdist(X, Z)
    else:
        D = metric.norm(X[:, None, :] - Z[None, :, :])
    C = D ** p
    r, c = linear_sum_assignment(C)
    return float((C[r, c].sum() / n) ** (1.0 / p))


def pairwise_wasserstein(clouds: Sequence[Array], p: int = 2, seed=0, quantiles=(0.25, 0.5, 0.75)) -> dict:
    """Distance matrix between point clouds plus linear-interpolation quantiles of its off-diagonal."""
    k = len(clouds)
    M = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            M[i, j] = M[j, i] = empirical_wasserstein(clouds[i], clouds[j], p, seed)
    off = M[np.triu_indices(k, 1)]
    qs = {str(q): float(np.quantile(off, q)) for q in quantiles} if off.size else {}
    return {"matrix": M.tolist(), "quantiles": qs}
