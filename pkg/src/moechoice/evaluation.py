"""Goodness-of-fit metrics, cross-validation and the four-model benchmark."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from .data import ChoiceDataset, SplitIndices, stratified_folds
from .estimation import FitConfig, fit_family, log_likelihood
from .models import ModelParams, choice_probabilities

logger = logging.getLogger(__name__)

FAMILIES = ("mnl", "mxl", "lcm", "moe")
MODEL_LABELS = {
    "mnl": "Multinomial Logit (MNL)",
    "mxl": "Mixed Logit (MXL)",
    "lcm": "Latent Class Model (LCM)",
    "moe": "Mixture of Experts (MoE)",
}
CSV_HEADERS = ["Model", "Log-Likelihood", "AIC", "BIC", "Predictive Accuracy (%)", "auc"]
AUC_REDUCTION = "unweighted macro average of one-vs-rest rank-statistic AUC over alternatives ever chosen"


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def information_criteria(ll: float, n_params: int, n_obs: int) -> tuple[float, float]:
    """``(aic, bic)`` with ``aic = 2p - 2 ll`` and ``bic = p ln(n) - 2 ll``."""
    if n_obs < 1 or n_params < 0:
        raise ValueError("need n_obs >= 1 and n_params >= 0")
    return 2 * n_params - 2 * ll, n_params * math.log(n_obs) - 2 * ll


def accuracy_from_probs(P: np.ndarray, chosen: np.ndarray) -> float:
    """Percent of rows whose argmax (lowest index on ties) equals the choice."""
    P = np.asarray(P)
    if P.shape[0] == 0:
        raise ValueError("empty dataset")
    return 100.0 * float(np.mean(np.argmax(P, axis=1) == np.asarray(chosen)))


def argmax_ties(P: np.ndarray) -> int:
    """Rows whose largest probability is shared by two or more alternatives."""
    P = np.asarray(P)
    return int(np.sum(np.sum(P == P.max(axis=1, keepdims=True), axis=1) > 1))


def predictive_accuracy(ds: ChoiceDataset, params: ModelParams) -> float:
    return accuracy_from_probs(choice_probabilities(ds, params), ds.chosen)


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney rank statistic; tied scores count one half."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative cases")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class AucResult:
    macro: float
    per_class: dict[int, float]
    excluded: list[int]


def auc_from_probs(P: np.ndarray, chosen: np.ndarray) -> AucResult:
    """Macro one-vs-rest AUC of probability columns against the observed choices.

    Alternatives never chosen (or always chosen) are excluded and reported.
    """
    chosen = np.asarray(chosen)
    J = P.shape[1]
    per_class, excluded = {}, []
    for i in range(J):
        pos = chosen == i
        if pos.all() or not pos.any():
            excluded.append(i)
            continue
        per_class[i] = binary_auc(P[:, i], pos)
    if not per_class:
        raise ValueError("AUC undefined: only one alternative is ever chosen")
    if excluded:
        warnings.warn(f"alternatives {excluded} excluded from macro AUC (never or always chosen)")
    return AucResult(float(np.mean(list(per_class.values()))), per_class, excluded)


def auc_ovr(ds: ChoiceDataset, params: ModelParams) -> float:
    return auc_from_probs(choice_probabilities(ds, params), ds.chosen).macro


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def k_fold_cv(ds: ChoiceDataset, folds: int, family: str, cfg: FitConfig | None = None) -> dict:
    """Rotate ``folds`` stratified held-out folds; report per-fold and mean metrics."""
    cfg = cfg or FitConfig()
    parts = stratified_folds(ds.chosen, folds, seed=cfg.seed)
    rows = []
    for f, held in enumerate(parts):
        if np.unique(ds.chosen[held]).size < 2:
            raise ValueError(f"fold {f} contains a single chosen alternative")
        train = np.setdiff1d(np.arange(len(ds)), held)
        fit = fit_family(ds.subset(train), family, cfg)
        test = ds.subset(held)
        rows.append({"fold": f, "n": int(len(held)), "ll": log_likelihood(test, fit.params),
                     "accuracy": predictive_accuracy(test, fit.params), "indices": held.tolist()})
    ll = np.array([r["ll"] for r in rows])
    acc = np.array([r["accuracy"] for r in rows])
    return {"family": family, "folds": rows, "mean_ll": float(ll.mean()), "std_ll": float(ll.std(ddof=1)),
            "mean_accuracy": float(acc.mean()), "std_accuracy": float(acc.std(ddof=1))}


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

@dataclass
class MetricsRow:
    model: str
    family: str
    log_likelihood: float | None = None
    aic: float | None = None
    bic: float | None = None
    accuracy: float | None = None
    auc: float | None = None
    n_params: int | None = None
    n_eval: int | None = None
    k: int | None = None
    converged: bool | None = None
    train_ll: float | None = None
    argmax_ties: int | None = None
    error: str | None = None


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    metadata: dict = field(default_factory=dict)
    # wall-clock seconds per family; informational and never serialized
    timings: dict = field(default_factory=dict, compare=False, repr=False)

    def row(self, family: str) -> MetricsRow:
        for r in self.rows:
            if r.family == family:
                return r
        raise KeyError(family)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls([MetricsRow(**r) for r in d["rows"]], d.get("metadata", {}))

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, text_or_path: str) -> MetricsReport:
        text = text_or_path
        if not text_or_path.lstrip().startswith("{"):
            with open(text_or_path, encoding="utf-8") as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))

    def to_csv(self, path) -> None:
        def cell(v, nd):
            return "" if v is None else f"{v:.{nd}f}"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADERS)
            for r in self.rows:
                w.writerow([r.model, cell(r.log_likelihood, 1), cell(r.aic, 1), cell(r.bic, 1),
                            cell(r.accuracy, 1), cell(r.auc, 4)])


def _select_k(train: ChoiceDataset, val: ChoiceDataset | None, family: str, cfg: FitConfig):
    """Fit every candidate K on train; pick by validation LL, or by train BIC
    when there is no validation slice. Ties go to the smaller K."""
    table, fits = [], {}
    for K in sorted(set(cfg.k_candidates)):
        fit = fit_family(train, family, replace(cfg, k_experts=K))
        fits[K] = fit
        entry = {"k": K, "train_ll": fit.final_ll, "n_params": fit.n_params}
        if val is not None:
            entry["validation_ll"] = log_likelihood(val, fit.params)
        else:
            entry["train_bic"] = information_criteria(fit.final_ll, fit.n_params, len(train))[1]
        table.append(entry)
    if val is not None:
        best = max(table, key=lambda e: (e["validation_ll"], -e["k"]))
    else:
        best = min(table, key=lambda e: (e["train_bic"], e["k"]))
    return fits[best["k"]], best["k"], table


def run_benchmark(ds: ChoiceDataset, split: SplitIndices, cfg: FitConfig | None = None,
                  families=FAMILIES) -> MetricsReport:
    """Fit each family on train (K chosen on validation for LCM/MoE) and score on test.

    AIC and BIC use the test log-likelihood with ``N_eval`` = test size. A
    failing family yields a row carrying the error message.
    """
    cfg = cfg or FitConfig()
    n = len(ds)
    for name in ("train", "validation", "test"):
        idx = getattr(split, name)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError(f"{name} indices out of range for a dataset of {n} rows")
    if split.train.size == 0 or split.test.size == 0:
        raise ValueError("split needs non-empty train and test parts")
    train, test = ds.subset(split.train), ds.subset(split.test)
    val = ds.subset(split.validation) if split.validation.size else None
    meta = {"auc_reduction": AUC_REDUCTION, "n_train": int(split.train.size),
            "n_validation": int(split.validation.size), "n_test": int(split.test.size),
            "k_selection": "validation log-likelihood" if val is not None else "train BIC",
            "selection": {}, "config": cfg.to_dict()}
    timings = {}
    rows = []
    for fam in families:
        row = MetricsRow(model=MODEL_LABELS[fam], family=fam)
        t0 = time.perf_counter()
        try:
            if fam in ("lcm", "moe"):
                fit, K, table = _select_k(train, val, fam, cfg)
                row.k = K
                meta["selection"][fam] = table
            else:
                fit = fit_family(train, fam, cfg)
            ll = log_likelihood(test, fit.params)
            P = choice_probabilities(test, fit.params)
            row.log_likelihood = ll
            row.aic, row.bic = information_criteria(ll, fit.n_params, len(test))
            row.accuracy = accuracy_from_probs(P, test.chosen)
            row.argmax_ties = argmax_ties(P)
            row.auc = auc_from_probs(P, test.chosen).macro
            row.n_params, row.n_eval = int(fit.n_params), len(test)
            row.converged, row.train_ll = bool(fit.converged), float(fit.final_ll)
        except Exception as exc:  # recorded per row, remaining rows still run
            logger.exception("benchmark row %s failed", fam)
            row.error = f"{type(exc).__name__}: {exc}"
        timings[fam] = time.perf_counter() - t0
        rows.append(row)
    return MetricsReport(rows, meta, timings)
