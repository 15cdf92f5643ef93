"""Choice dataset schema, CSV ingestion, preprocessing and splitting.

A dataset is stored column-wise as dense arrays: ``X`` holds the per-alternative
attributes with shape ``(N, J, d_x)`` and ``Z`` the consumer covariates with
shape ``(N, d_z)``. Missing numeric cells are ``NaN`` until
:func:`impute_missing` fills them.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

PRICE = "price"
DISCOUNT = "discount"


class ChoiceDataError(ValueError):
    """Raised for malformed input data or schema/column mismatches."""


@dataclass(frozen=True)
class ChoiceObservation:
    consumer_id: str
    alternatives: tuple
    alt_features: np.ndarray
    consumer_covariates: np.ndarray
    chosen: int
    timestamp: int | None = None

    def __post_init__(self):
        x = np.asarray(self.alt_features, dtype=float)
        z = np.asarray(self.consumer_covariates, dtype=float).reshape(-1)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ChoiceDataError("alt_features must be a (J, d_x) array with J >= 2")
        if len(self.alternatives) != x.shape[0]:
            raise ChoiceDataError("alternatives and alt_features disagree on J")
        if not 0 <= int(self.chosen) < x.shape[0]:
            raise ChoiceDataError(f"chosen={self.chosen} outside [0, {x.shape[0]})")
        object.__setattr__(self, "alt_features", x)
        object.__setattr__(self, "consumer_covariates", z)
        object.__setattr__(self, "chosen", int(self.chosen))

    @property
    def n_alternatives(self) -> int:
        return self.alt_features.shape[0]


@dataclass
class ChoiceDataset:
    """A panel of choice observations with a fixed choice-set size ``J``.

    Parameters
    ----------
    X : ndarray, shape (N, J, d_x)
        Alternative attributes.
    Z : ndarray, shape (N, d_z)
        Consumer covariates (may have zero columns).
    chosen : ndarray of int, shape (N,)
    consumer_ids : ndarray of str, shape (N,)
    alt_feature_names, covariate_names : list of str
    alternatives : list of str
        Alternative identifiers, length ``J``.
    timestamps : ndarray of int, optional
        Epoch days per observation.
    categoricals : dict
        Raw, not yet encoded consumer-level categorical columns
        (``None`` marks a missing cell). Models never read these.
    scaling_stats : dict, optional
        Per-column ``{"mean", "std"}`` recorded by standardization.
    log_columns : list of str
        Columns currently stored on the natural-log scale.
    history : list of dict
        Preprocessing steps applied, in order.
    """

    X: np.ndarray
    Z: np.ndarray
    chosen: np.ndarray
    consumer_ids: np.ndarray
    alt_feature_names: list[str]
    covariate_names: list[str]
    alternatives: list[str]
    timestamps: np.ndarray | None = None
    categoricals: dict[str, np.ndarray] = field(default_factory=dict)
    scaling_stats: dict[str, dict[str, float]] | None = None
    log_columns: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        n = self.X.shape[0] if self.X.ndim == 3 else 0
        if self.X.ndim != 3 or n == 0:
            raise ChoiceDataError("dataset is empty or X is not (N, J, d_x)")
        self.Z = np.asarray(self.Z, dtype=float).reshape(n, -1)
        self.chosen = np.asarray(self.chosen, dtype=np.int64).reshape(-1)
        self.consumer_ids = np.asarray(self.consumer_ids, dtype=object).reshape(-1)
        self.alt_feature_names = list(self.alt_feature_names)
        self.covariate_names = list(self.covariate_names)
        self.alternatives = [str(a) for a in self.alternatives]
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        J, d_x = self.X.shape[1:]
        if J < 2:
            raise ChoiceDataError("choice sets need at least two alternatives")
        if len(self.alternatives) != J:
            raise ChoiceDataError("alternatives length does not match J")
        if len(self.alt_feature_names) != d_x:
            raise ChoiceDataError("alt_feature_names length does not match d_x")
        if len(self.covariate_names) != self.Z.shape[1]:
            raise ChoiceDataError("covariate_names length does not match d_z")
        for name, arr in (("chosen", self.chosen), ("consumer_ids", self.consumer_ids)):
            if arr.shape[0] != n:
                raise ChoiceDataError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if self.timestamps is not None and self.timestamps.shape[0] != n:
            raise ChoiceDataError("timestamps length mismatch")
        bad = np.flatnonzero((self.chosen < 0) | (self.chosen >= J))
        if bad.size:
            raise ChoiceDataError(f"chosen index out of range at observation(s) {bad[:10].tolist()}")

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> ChoiceObservation:
        return ChoiceObservation(
            consumer_id=str(self.consumer_ids[i]),
            alternatives=tuple(self.alternatives),
            alt_features=self.X[i],
            consumer_covariates=self.Z[i],
            chosen=int(self.chosen[i]),
            timestamp=None if self.timestamps is None else int(self.timestamps[i]),
        )

    @property
    def observations(self) -> list[ChoiceObservation]:
        return [self[i] for i in range(len(self))]

    @property
    def n_alternatives(self) -> int:
        return self.X.shape[1]

    @property
    def d_x(self) -> int:
        return self.X.shape[2]

    @property
    def d_z(self) -> int:
        return self.Z.shape[1]

    @property
    def feature_names(self) -> list[str]:
        return self.alt_feature_names + self.covariate_names

    def feature_index(self, name: str) -> int:
        try:
            return self.alt_feature_names.index(name)
        except ValueError:
            raise ChoiceDataError(f"no alternative attribute named {name!r}") from None

    def subset(self, idx) -> ChoiceDataset:
        idx = np.asarray(idx)
        return replace(
            self,
            X=self.X[idx],
            Z=self.Z[idx],
            chosen=self.chosen[idx],
            consumer_ids=self.consumer_ids[idx],
            timestamps=None if self.timestamps is None else self.timestamps[idx],
            categoricals={k: v[idx] for k, v in self.categoricals.items()},
            history=list(self.history),
        )

    def missing_mask(self) -> dict[str, np.ndarray]:
        """Per-column boolean masks of missing cells."""
        masks = {}
        for j, name in enumerate(self.alt_feature_names):
            masks[name] = np.isnan(self.X[:, :, j])
        for j, name in enumerate(self.covariate_names):
            masks[name] = np.isnan(self.Z[:, j])
        for name, col in self.categoricals.items():
            masks[name] = np.array([_is_missing(v) for v in col], dtype=bool)
        return masks

    def validate(self) -> None:
        """Check the value-range invariants on prices and discounts."""
        if PRICE in self.alt_feature_names and PRICE not in self.log_columns \
                and not (self.scaling_stats and PRICE in self.scaling_stats):
            p = self.X[:, :, self.feature_index(PRICE)]
            bad = np.flatnonzero(np.any(p <= 0, axis=1))
            if bad.size:
                raise ChoiceDataError(f"non-positive price at observation(s) {bad[:10].tolist()}")
        if DISCOUNT in self.alt_feature_names:
            d = self.X[:, :, self.feature_index(DISCOUNT)]
            bad = np.flatnonzero(np.any((d < 0) | (d > 1), axis=1))
            if bad.size:
                raise ChoiceDataError(f"discount outside [0, 1] at observation(s) {bad[:10].tolist()}")

    def inverse_column(self, name: str) -> np.ndarray:
        """Recover a column's original values from the recorded transforms."""
        if name in self.alt_feature_names:
            values = self.X[:, :, self.feature_index(name)].copy()
        elif name in self.covariate_names:
            values = self.Z[:, self.covariate_names.index(name)].copy()
        else:
            raise ChoiceDataError(f"unknown column {name!r}")
        if self.scaling_stats and name in self.scaling_stats:
            s = self.scaling_stats[name]
            values = values * s["std"] + s["mean"]
        if name in self.log_columns:
            values = np.exp(values)
        return values


def _is_missing(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v)) or v == ""


def dataset_from_observations(
    observations: Sequence[ChoiceObservation],
    alt_feature_names: Sequence[str],
    covariate_names: Sequence[str] = (),
) -> ChoiceDataset:
    if not observations:
        raise ChoiceDataError("dataset is empty")
    first = observations[0]
    ts = [o.timestamp for o in observations]
    return ChoiceDataset(
        X=np.stack([o.alt_features for o in observations]),
        Z=np.stack([o.consumer_covariates for o in observations]),
        chosen=[o.chosen for o in observations],
        consumer_ids=[o.consumer_id for o in observations],
        alt_feature_names=list(alt_feature_names),
        covariate_names=list(covariate_names),
        alternatives=list(first.alternatives),
        timestamps=None if any(t is None for t in ts) else ts,
    )


# ---------------------------------------------------------------------------
# CSV in / out
# ---------------------------------------------------------------------------

def load_schema(schema) -> dict:
    """Accept a schema mapping or a path to its JSON file."""
    if isinstance(schema, (str, Path)):
        with open(schema, encoding="utf-8") as fh:
            schema = json.load(fh)
    schema = dict(schema)
    for key in ("chosen", "alt_features"):
        if key not in schema:
            raise ChoiceDataError(f"schema lacks required key {key!r}")
    if "alternatives" not in schema and "n_alternatives" not in schema:
        raise ChoiceDataError("schema must give 'alternatives' or 'n_alternatives'")
    price = schema.get("price", PRICE)
    if price not in schema["alt_features"]:
        raise ChoiceDataError("schema must name at least one price column")
    return schema


def _alt_column(schema: dict, j: int, attr: str) -> str:
    return schema.get("alt_column_pattern", "alt_{j}_{attr}").format(j=j, attr=attr)


def schema_for(ds: ChoiceDataset) -> dict:
    """Column-role mapping that round-trips ``ds`` through :func:`write_csv`."""
    return {
        "consumer_id": "consumer_id",
        "chosen": "chosen",
        "timestamp": "timestamp" if ds.timestamps is not None else None,
        "alternatives": list(ds.alternatives),
        "alt_features": list(ds.alt_feature_names),
        "alt_column_pattern": "alt_{j}_{attr}",
        "price": PRICE,
        "covariates": list(ds.covariate_names),
        "categorical": list(ds.categoricals),
        "missing_policy": "reject",
        "transforms": {
            "scaling_stats": ds.scaling_stats,
            "log_columns": list(ds.log_columns),
            "history": list(ds.history),
        },
    }


def ingest_csv(path, schema) -> ChoiceDataset:
    """Parse a long-format CSV (one row per observation) into a dataset.

    With ``schema["missing_policy"] == "impute"`` blank attribute or covariate
    cells become ``NaN`` for :func:`impute_missing`; otherwise they are errors.
    All row-level problems are collected and raised together, naming 1-based
    data row numbers.
    """
    schema = load_schema(schema)
    path = Path(path)
    if not path.exists():
        raise ChoiceDataError(f"no such file: {path}")
    if "alternatives" in schema:
        alternatives = [str(a) for a in schema["alternatives"]]
    else:
        alternatives = [str(j) for j in range(int(schema["n_alternatives"]))]
    J = len(alternatives)
    attrs = list(schema["alt_features"])
    covs = list(schema.get("covariates") or [])
    cats = list(schema.get("categorical") or [])
    id_col = schema.get("consumer_id")
    ts_col = schema.get("timestamp")
    impute = schema.get("missing_policy", "reject") == "impute"

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [schema["chosen"]] + [_alt_column(schema, j, a) for j in range(J) for a in attrs]
        needed += covs + cats + [c for c in (id_col, ts_col) if c]
        missing_cols = [c for c in needed if c not in header]
        if missing_cols:
            raise ChoiceDataError(f"columns named in schema not found in CSV: {missing_cols}")
        rows = list(reader)
    if not rows:
        raise ChoiceDataError("dataset is empty")

    N = len(rows)
    X = np.empty((N, J, len(attrs)))
    Z = np.empty((N, len(covs)))
    chosen = np.empty(N, dtype=np.int64)
    ids = np.empty(N, dtype=object)
    ts = np.empty(N, dtype=np.int64) if ts_col else None
    cat_cols = {c: np.empty(N, dtype=object) for c in cats}
    errors: list[str] = []

    def number(raw: str, row: int, col: str, required: bool) -> float:
        raw = raw.strip()
        if raw == "":
            if required or not impute:
                errors.append(f"row {row}: blank value in {col!r}")
            return math.nan
        try:
            return float(raw)
        except ValueError:
            errors.append(f"row {row}: non-numeric value {raw!r} in {col!r}")
            return math.nan

    for i, rec in enumerate(rows):
        row = i + 1
        raw_choice = rec[schema["chosen"]].strip()
        try:
            c = int(raw_choice)
        except ValueError:
            errors.append(f"row {row}: chosen value {raw_choice!r} is not an integer")
            c = 0
        else:
            if not 0 <= c < J:
                errors.append(f"row {row}: chosen index {c} not in [0, {J})")
        chosen[i] = c
        ids[i] = rec[id_col].strip() if id_col else str(i)
        for j in range(J):
            for a, attr in enumerate(attrs):
                col = _alt_column(schema, j, attr)
                X[i, j, a] = number(rec[col], row, col, required=False)
        for k, col in enumerate(covs):
            Z[i, k] = number(rec[col], row, col, required=False)
        for col in cats:
            v = rec[col].strip()
            if v == "" and not impute:
                errors.append(f"row {row}: blank value in {col!r}")
            cat_cols[col][i] = v if v != "" else None
        if ts_col:
            raw_ts = rec[ts_col].strip()
            try:
                ts[i] = int(raw_ts)
            except ValueError:
                errors.append(f"row {row}: timestamp {raw_ts!r} is not an integer")
    if errors:
        shown = "; ".join(errors[:20])
        more = f" (+{len(errors) - 20} more)" if len(errors) > 20 else ""
        raise ChoiceDataError(f"rejected rows: {shown}{more}")

    ds = ChoiceDataset(
        X=X, Z=Z, chosen=chosen, consumer_ids=ids,
        alt_feature_names=attrs, covariate_names=covs, alternatives=alternatives,
        timestamps=ts, categoricals=cat_cols,
    )
    transforms = schema.get("transforms") or {}
    ds.scaling_stats = transforms.get("scaling_stats")
    ds.log_columns = list(transforms.get("log_columns") or [])
    ds.history = list(transforms.get("history") or [])
    _validate_present(ds)
    return ds


def _validate_present(ds: ChoiceDataset) -> None:
    # range checks ignore cells that are still missing
    with np.errstate(invalid="ignore"):
        if PRICE in ds.alt_feature_names:
            p = ds.inverse_column(PRICE)
            bad = np.flatnonzero(np.any(p <= 0, axis=1))
            if bad.size:
                raise ChoiceDataError(f"non-positive price at row(s) {(bad[:10] + 1).tolist()}")
        if DISCOUNT in ds.alt_feature_names:
            d = ds.inverse_column(DISCOUNT)
            bad = np.flatnonzero(np.any((d < 0) | (d > 1), axis=1))
            if bad.size:
                raise ChoiceDataError(f"discount outside [0, 1] at row(s) {(bad[:10] + 1).tolist()}")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(ds: ChoiceDataset, path) -> dict:
    """Write ``ds`` in the long format read by :func:`ingest_csv`; returns the schema."""
    schema = schema_for(ds)
    cols = ["consumer_id"]
    cols += [_alt_column(schema, j, a) for j in range(ds.n_alternatives) for a in ds.alt_feature_names]
    cols += ds.covariate_names + list(ds.categoricals) + ["chosen"]
    if ds.timestamps is not None:
        cols.append("timestamp")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(len(ds)):
            row = [ds.consumer_ids[i]]
            row += [_fmt(v) for v in ds.X[i].reshape(-1)]
            row += [_fmt(v) for v in ds.Z[i]]
            row += [_fmt(ds.categoricals[c][i]) for c in ds.categoricals]
            row.append(int(ds.chosen[i]))
            if ds.timestamps is not None:
                row.append(int(ds.timestamps[i]))
            w.writerow(row)
    return schema


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def impute_missing(ds: ChoiceDataset, max_missing_fraction: float = 0.20) -> ChoiceDataset:
    """Drop columns missing in more than ``max_missing_fraction`` of cells, then
    fill what is left: numeric cells with the column mean, categoricals with the
    mode (ties go to the lexicographically smallest level).

    The dropped columns and fill counts are appended to ``ds.history``.
    """
    if not 0 < max_missing_fraction <= 1:
        raise ValueError("max_missing_fraction must be in (0, 1]")
    if ds.X.dtype.kind != "f" or ds.Z.dtype.kind != "f":
        raise ChoiceDataError("non-numeric cell in numeric column")
    masks = ds.missing_mask()
    if not any(m.any() for m in masks.values()):
        return ds

    dropped = [name for name, m in masks.items() if m.mean() > max_missing_fraction]
    keep_attr = [j for j, n in enumerate(ds.alt_feature_names) if n not in dropped]
    keep_cov = [j for j, n in enumerate(ds.covariate_names) if n not in dropped]
    keep_cat = {n: v.copy() for n, v in ds.categoricals.items() if n not in dropped}
    if not keep_attr:
        raise ChoiceDataError("all alternative attributes dropped by the missingness rule")
    if dropped:
        warnings.warn(f"dropping columns with > {max_missing_fraction:.0%} missing: {dropped}")

    X = ds.X[:, :, keep_attr].copy()
    Z = ds.Z[:, keep_cov].copy()
    filled: dict[str, int] = {}
    for j in range(X.shape[2]):
        col = X[:, :, j]
        m = np.isnan(col)
        if m.any():
            col[m] = np.mean(col[~m])
            filled[ds.alt_feature_names[keep_attr[j]]] = int(m.sum())
    for j in range(Z.shape[1]):
        col = Z[:, j]
        m = np.isnan(col)
        if m.any():
            col[m] = np.mean(col[~m])
            filled[ds.covariate_names[keep_cov[j]]] = int(m.sum())
    for name, col in keep_cat.items():
        m = np.array([_is_missing(v) for v in col], dtype=bool)
        if m.any():
            levels, counts = np.unique(col[~m].astype(str), return_counts=True)
            col[m] = levels[np.argmax(counts)]
            filled[name] = int(m.sum())

    return replace(
        ds,
        X=X,
        Z=Z,
        alt_feature_names=[ds.alt_feature_names[j] for j in keep_attr],
        covariate_names=[ds.covariate_names[j] for j in keep_cov],
        categoricals=keep_cat,
        history=ds.history + [{"step": "impute", "dropped": dropped, "filled": filled,
                               "max_missing_fraction": max_missing_fraction}],
    )


def numeric_table(ds: ChoiceDataset) -> tuple[np.ndarray, list[str]]:
    """Flatten attributes and covariates into one ``(N, J*d_x + d_z)`` table."""
    names = [f"alt_{j}_{a}" for j in range(ds.n_alternatives) for a in ds.alt_feature_names]
    names += ds.covariate_names
    return np.hstack([ds.X.reshape(len(ds), -1), ds.Z]), names


def flag_outliers(ds: ChoiceDataset, iqr_k: float = 1.5, mahal_p: float = 0.999) -> list[int]:
    """Indices of observations outside an IQR fence or a Mahalanobis bound.

    A row is flagged if any numeric column lies outside
    ``[Q1 - k*IQR, Q3 + k*IQR]``, or if its squared Mahalanobis distance exceeds
    the chi-square quantile at ``mahal_p`` with ``d`` degrees of freedom.
    Columns with zero IQR are skipped. If the covariance of the non-constant
    columns is singular only the IQR rule is applied. Nothing is removed.
    """
    if len(ds) < 4:
        raise ChoiceDataError("outlier flagging needs at least 4 observations")
    table, names = numeric_table(ds)
    flagged = np.zeros(len(ds), dtype=bool)

    q1, q3 = np.percentile(table, [25, 75], axis=0)
    iqr = q3 - q1
    degenerate = iqr <= 0
    if degenerate.any():
        warnings.warn(f"skipping zero-IQR columns in IQR rule: {[n for n, d in zip(names, degenerate) if d]}")
    ok = ~degenerate
    if ok.any():
        lo = q1[ok] - iqr_k * iqr[ok]
        hi = q3[ok] + iqr_k * iqr[ok]
        flagged |= np.any((table[:, ok] < lo) | (table[:, ok] > hi), axis=1)

    varying = np.ptp(table, axis=0) > 0
    if varying.sum() == 0:
        warnings.warn("singular covariance: no dispersion, Mahalanobis rule skipped")
    else:
        sub = table[:, varying]
        centered = sub - sub.mean(axis=0)
        cov = np.atleast_2d(np.cov(sub, rowvar=False))
        if np.linalg.matrix_rank(cov) < cov.shape[0]:
            warnings.warn("singular covariance: Mahalanobis rule skipped, IQR only")
        else:
            d2 = np.einsum("ni,ij,nj->n", centered, np.linalg.inv(cov), centered)
            flagged |= d2 > stats.chi2.ppf(mahal_p, df=sub.shape[1])
    return np.flatnonzero(flagged).tolist()


def _column_ref(ds: ChoiceDataset, name: str):
    if name in ds.alt_feature_names:
        return "alt", ds.feature_index(name)
    if name in ds.covariate_names:
        return "cov", ds.covariate_names.index(name)
    if name in ds.categoricals:
        return "cat", name
    raise ChoiceDataError(f"unknown column {name!r} in transform list")


def trailing_means(values: np.ndarray, groups: np.ndarray, order: np.ndarray, window: int) -> np.ndarray:
    """Per-group trailing means over ``window`` entries, visiting rows in ``order``.

    The first ``window - 1`` entries of each group use the partial window.
    """
    out = np.empty(len(values))
    buffers: dict = {}
    for i in order:
        buf = buffers.setdefault(groups[i], [])
        buf.append(values[i])
        if len(buf) > window:
            buf.pop(0)
        out[i] = sum(buf) / len(buf)
    return out


def transform_features(ds: ChoiceDataset, spec: Iterable[dict]) -> ChoiceDataset:
    """Apply a list of column transforms in order.

    Supported entries::

        {"op": "log", "column": "income"}
        {"op": "onehot", "column": "region"}
        {"op": "moving_average", "column": "spend", "window": 3}
        {"op": "standardize", "column": "age"}

    ``moving_average`` accepts any covariate, or ``"spend"`` (chosen price times
    one minus its discount) and ``"promo"`` (chosen discount), and appends a
    covariate named ``<column>_ma<window>``.
    """
    X, Z = ds.X.copy(), ds.Z.copy()
    alt_names, cov_names = list(ds.alt_feature_names), list(ds.covariate_names)
    cats = dict(ds.categoricals)
    stats_ = dict(ds.scaling_stats) if ds.scaling_stats else {}
    log_cols = list(ds.log_columns)
    steps = []

    for entry in spec:
        op, col = entry.get("op"), entry.get("column")
        cur = replace(ds, X=X, Z=Z, alt_feature_names=alt_names, covariate_names=cov_names,
                      categoricals=cats)
        if op == "log":
            kind, j = _column_ref(cur, col)
            if kind == "cat":
                raise ChoiceDataError(f"cannot log-transform categorical {col!r}")
            values = X[:, :, j] if kind == "alt" else Z[:, j]
            if np.any(~(values > 0)):
                raise ChoiceDataError(f"log of non-positive value in column {col!r}")
            if kind == "alt":
                X[:, :, j] = np.log(values)
            else:
                Z[:, j] = np.log(values)
            log_cols.append(col)
        elif op == "standardize":
            kind, j = _column_ref(cur, col)
            values = X[:, :, j] if kind == "alt" else Z[:, j]
            mu, sd = float(np.mean(values)), float(np.std(values))
            if sd == 0:
                raise ChoiceDataError(f"cannot standardize constant column {col!r}")
            if kind == "alt":
                X[:, :, j] = (values - mu) / sd
            else:
                Z[:, j] = (values - mu) / sd
            stats_[col] = {"mean": mu, "std": sd}
        elif op == "onehot":
            kind, _ = _column_ref(cur, col)
            if kind == "cov":
                raw = Z[:, cov_names.index(col)]
                keep = [k for k, n in enumerate(cov_names) if n != col]
                Z, cov_names = Z[:, keep], [cov_names[k] for k in keep]
                raw = np.array([repr(float(v)) for v in raw], dtype=object)
            elif kind == "cat":
                raw = cats.pop(col)
                if any(_is_missing(v) for v in raw):
                    raise ChoiceDataError(f"categorical {col!r} has missing cells; impute first")
            else:
                raise ChoiceDataError("one-hot encoding applies to consumer-level columns only")
            levels = sorted(set(str(v) for v in raw))
            ind = np.stack([(raw.astype(str) == lv).astype(float) for lv in levels[1:]], axis=1) \
                if len(levels) > 1 else np.empty((len(raw), 0))
            Z = np.hstack([Z, ind])
            cov_names += [f"{col}_{lv}" for lv in levels[1:]]
        elif op == "moving_average":
            window = int(entry.get("window", 3))
            if window < 1:
                raise ChoiceDataError("moving-average window must be >= 1")
            if ds.timestamps is None:
                raise ChoiceDataError("moving averages require timestamps")
            rows = np.arange(len(ds))
            # spend and promo are built from raw (untransformed) attributes
            raw = replace(cur, scaling_stats=stats_ or None, log_columns=log_cols)
            if col == "spend":
                price = raw.inverse_column(PRICE)[rows, ds.chosen]
                disc = raw.inverse_column(DISCOUNT)[rows, ds.chosen] if DISCOUNT in alt_names else 0.0
                values = price * (1.0 - disc)
            elif col == "promo":
                values = raw.inverse_column(DISCOUNT)[rows, ds.chosen]
            elif col in cov_names:
                values = Z[:, cov_names.index(col)]
            else:
                raise ChoiceDataError(f"unknown column {col!r} in transform list")
            order = np.lexsort((rows, ds.timestamps))
            ma = trailing_means(np.asarray(values, dtype=float), ds.consumer_ids, order, window)
            Z = np.hstack([Z, ma[:, None]])
            cov_names.append(f"{col}_ma{window}")
        else:
            raise ChoiceDataError(f"unknown transform op {op!r}")
        steps.append(dict(entry))

    return replace(
        ds, X=X, Z=Z, alt_feature_names=alt_names, covariate_names=cov_names,
        categoricals=cats, scaling_stats=stats_ or None, log_columns=log_cols,
        history=ds.history + [{"step": "transform", "ops": steps}],
    )


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("train", "validation", "test")}

    @classmethod
    def from_dict(cls, d: dict) -> SplitIndices:
        return cls(*(np.asarray(d[k], dtype=np.int64) for k in ("train", "validation", "test")))


def strata_labels(ds: ChoiceDataset, column: str | None = None) -> np.ndarray:
    """Stratum label per observation; continuous columns are cut at quartiles."""
    if column in (None, "chosen"):
        return ds.chosen.copy()
    if column in ds.categoricals:
        return np.array([str(v) for v in ds.categoricals[column]], dtype=object)
    if column in ds.covariate_names:
        values = ds.Z[:, ds.covariate_names.index(column)]
    elif column in ds.alt_feature_names:
        values = ds.X[:, :, ds.feature_index(column)].mean(axis=1)
    else:
        raise ChoiceDataError(f"unknown stratification column {column!r}")
    if np.unique(values).size <= 4:
        return values
    edges = np.quantile(values, [0.25, 0.5, 0.75])
    return np.searchsorted(edges, values, side="right")


def _apportion(sizes: list[int], ratios: np.ndarray) -> np.ndarray:
    """Integer allocation of each stratum to the parts.

    Each stratum receives the floor or ceiling of its quota; leftover units go
    to the parts furthest below their global largest-remainder target, so the
    split totals stay within one observation of the requested ratios.
    """
    sizes_a = np.asarray(sizes)
    quotas = sizes_a[:, None] * ratios[None, :]
    alloc = np.floor(quotas + 1e-9).astype(np.int64)
    alloc = np.minimum(alloc, np.ceil(quotas - 1e-9).astype(np.int64))
    frac = quotas - alloc
    total = int(sizes_a.sum())
    g_quota = total * ratios
    target = np.floor(g_quota + 1e-9).astype(np.int64)
    extra = total - target.sum()
    order = np.lexsort((np.arange(len(ratios)), -(g_quota - target)))
    target[order[:extra]] += 1
    deficit = target - alloc.sum(axis=0)
    for s in range(len(sizes)):
        left = sizes[s] - alloc[s].sum()
        if left <= 0:
            continue
        cand = np.flatnonzero(frac[s] > 1e-9)
        ranked = sorted(cand, key=lambda p: (-deficit[p], -frac[s, p], p))
        for p in ranked[:left]:
            alloc[s, p] += 1
            deficit[p] -= 1
    return alloc


def stratified_split(
    ds: ChoiceDataset,
    ratios: Sequence[float] = (0.70, 0.15, 0.15),
    strat_column: str | None = None,
    seed: int = 0,
) -> SplitIndices:
    """Seeded stratified train/validation/test split.

    Strata default to the chosen-alternative label. Within a stratum the indices
    are shuffled and apportioned by largest remainder; a stratum smaller than
    the number of non-empty parts goes entirely to train.
    """
    r = np.asarray(ratios, dtype=float)
    if r.shape != (3,) or np.any(r < 0) or r.sum() <= 0 or abs(r.sum() - 1) > 1e-9:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    labels = strata_labels(ds, strat_column)
    rng = np.random.default_rng(seed)
    n_parts = int((r > 0).sum())
    uniq = sorted(set(labels.tolist()), key=lambda v: (str(type(v)), v))
    members = [np.flatnonzero(labels == u) for u in uniq]
    shuffled = [rng.permutation(m) for m in members]
    small = [len(m) < n_parts for m in members]
    if any(small):
        warnings.warn("stratum smaller than the number of split parts assigned to train")
    regular = [s for s in range(len(members)) if not small[s]]
    alloc = _apportion([len(members[s]) for s in regular], r) if regular else np.zeros((0, 3), int)
    parts: list[list[np.ndarray]] = [[], [], []]
    for s, idx in enumerate(shuffled):
        if small[s]:
            parts[0].append(idx)
    for row, s in enumerate(regular):
        idx = shuffled[s]
        cuts = np.cumsum(alloc[row])[:-1]
        for p, chunk in enumerate(np.split(idx, cuts)):
            parts[p].append(chunk)
    out = [np.sort(np.concatenate(p)) if p else np.empty(0, np.int64) for p in parts]
    return SplitIndices(*(o.astype(np.int64) for o in out))


def stratified_folds(labels: np.ndarray, folds: int, seed: int = 0) -> list[np.ndarray]:
    """Partition indices into ``folds`` disjoint validation folds.

    Indices are shuffled within each label, concatenated label by label and
    dealt round-robin, so folds differ in size by at most one and each label is
    spread evenly.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if not 2 <= folds <= n:
        raise ValueError(f"folds must be in [2, {n}]")
    rng = np.random.default_rng(seed)
    seq = np.concatenate([rng.permutation(np.flatnonzero(labels == u)) for u in np.unique(labels)])
    assign = np.empty(n, dtype=np.int64)
    assign[seq] = np.arange(n) % folds
    return [np.flatnonzero(assign == f) for f in range(folds)]
