"""Post-estimation economics: price elasticities, segment profiles,
Shapley attribution and discount response.

Per-observation functions take attributes in their raw units (prices in
currency, discounts as fractions). :func:`segment_elasticity_report`
undoes recorded log/standardize transforms of the price column itself.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np
from scipy.special import softmax

from .data import DISCOUNT, PRICE, ChoiceDataset, ChoiceObservation
from .estimation import ZeroProbabilityError, e_step
from .models import (
    LcmParams,
    MnlParams,
    ModelParams,
    MoeParams,
    choice_probabilities,
    mixture_components,
    price_index,
)

MAX_SHAPLEY_PLAYERS = 12
FD_RELATIVE_STEP = 1e-4
DEEP_DISCOUNT = "deep_discount"


def _arrays(obs) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(obs, ChoiceObservation):
        return np.asarray(obs.alt_features, dtype=float), np.asarray(obs.consumer_covariates, dtype=float)
    if isinstance(obs, tuple):
        X, z = obs
        return np.asarray(X, dtype=float), None if z is None else np.asarray(z, dtype=float)
    return np.asarray(obs, dtype=float), None


def component_probabilities(X: np.ndarray, z, params: ModelParams):
    """``(weights (C,), betas (C, d), component probabilities (C, J))`` at one observation."""
    w, betas, ascs = mixture_components(X, z, params)
    V = betas @ X.T + np.hstack([ascs, np.zeros((ascs.shape[0], 1))])
    return np.asarray(w, dtype=float), betas, softmax(V, axis=1)


def price_derivatives(X: np.ndarray, z, params: ModelParams) -> np.ndarray:
    """Matrix ``D[i, j] = dP_i / dprice_j`` for one observation.

    Every family is a mixture of MNL components whose weights do not depend
    on price, so ``D = sum_c w_c beta_c,price P_c,i (delta_ij - P_c,j)``.
    """
    w, betas, Pc = component_probabilities(X, z, params)
    bp = betas[:, price_index(params)]
    J = X.shape[0]
    D = np.zeros((J, J))
    for c in range(len(w)):
        D += w[c] * bp[c] * (np.diag(Pc[c]) - np.outer(Pc[c], Pc[c]))
    return D


def _finite_difference(X: np.ndarray, z, params: ModelParams, i: int, j: int) -> float:
    pi = price_index(params)
    h = FD_RELATIVE_STEP * abs(X[j, pi])
    up, down = X.copy(), X.copy()
    up[j, pi] += h
    down[j, pi] -= h
    return (choice_probabilities(up, params, z)[i] - choice_probabilities(down, params, z)[i]) / (2 * h)


def _elasticity(obs, params, i: int, j: int, method: str) -> float:
    X, z = _arrays(obs)
    pi = price_index(params)
    price = X[j, pi]
    if price == 0:
        raise ValueError("elasticity undefined at zero price")
    P = choice_probabilities(X, params, z)
    if P[i] <= 0:
        raise ZeroProbabilityError(i)
    if method == "analytic":
        dP = price_derivatives(X, z, params)[i, j]
    elif method == "fd":
        dP = _finite_difference(X, z, params, i, j)
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(dP * price / P[i])


def own_price_elasticity(obs, params: ModelParams, alt: int, method: str = "analytic") -> float:
    """``(dP_alt / dprice_alt) * price_alt / P_alt``; ``method`` is ``"analytic"`` or ``"fd"``."""
    return _elasticity(obs, params, alt, alt, method)


def cross_price_elasticity(obs, params: ModelParams, alt_i: int, alt_j: int, method: str = "analytic") -> float:
    """``(dP_i / dprice_j) * price_j / P_i`` for ``i != j``."""
    if alt_i == alt_j:
        raise ValueError("cross elasticity needs two different alternatives")
    return _elasticity(obs, params, alt_i, alt_j, method)


def elasticity_matrix(obs, params: ModelParams) -> np.ndarray:
    """All own (diagonal) and cross elasticities ``E[i, j]`` at one observation."""
    X, z = _arrays(obs)
    P = choice_probabilities(X, params, z)
    return price_derivatives(X, z, params) * X[:, price_index(params)][None, :] / P[:, None]


# ---------------------------------------------------------------------------
# Segment report
# ---------------------------------------------------------------------------

@dataclass
class ElasticityReport:
    rows: list[dict]
    evaluation_point: str
    cross_elasticity: list[list[float]] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["Segment", "Percentage (%)", "Price Elasticity", "Soft Percentage (%)", "Observations"])
            for r in self.rows:
                e = r["own_price_elasticity"]
                w.writerow([r["segment"], f"{r['share_pct']:.1f}", "" if e is None else f"{e:.3f}",
                            f"{r['soft_share_pct']:.1f}", r["n_obs"]])


def price_scale_factor(ds: ChoiceDataset) -> np.ndarray:
    """Per-cell ``price * d(model price feature)/d(price)`` undoing recorded transforms."""
    x = ds.X[:, :, ds.feature_index(PRICE)]
    std = ds.scaling_stats[PRICE]["std"] if ds.scaling_stats and PRICE in ds.scaling_stats else 1.0
    if PRICE in ds.log_columns:
        return np.full_like(x, 1.0 / std)
    return ds.inverse_column(PRICE) / std


def segment_elasticity_report(ds: ChoiceDataset, params: ModelParams, segment_names=None,
                              with_cross: bool = False) -> ElasticityReport:
    """Per-segment share and mean own-price elasticity.

    Observations go to their highest-responsibility expert (soft shares are
    reported alongside). A segment's elasticity is the mean over its
    observations and all alternatives of the expert-level elasticity
    ``beta_k,price * price * (1 - P_k)`` at observed prices.
    """
    if isinstance(params, MnlParams):
        betas, ascs = params.beta[None], params.asc[None]
        resp = np.ones((len(ds), 1))
    elif isinstance(params, (MoeParams, LcmParams)):
        betas, ascs = params.betas, params.ascs
        resp = e_step(ds, params)
    else:
        raise TypeError("segment report requires an MNL, LCM or MoE model")
    K = betas.shape[0]
    names = list(segment_names) if segment_names is not None else [f"segment_{k + 1}" for k in range(K)]
    if len(names) != K:
        raise ValueError("need one segment name per expert")
    pi = ds.feature_index(PRICE)
    factor = price_scale_factor(ds)
    assign = np.argmax(resp, axis=1)
    N = len(ds)
    rows = []
    for k in range(K):
        idx = np.flatnonzero(assign == k)
        elast = None
        if idx.size:
            V = ds.X[idx] @ betas[k] + np.append(ascs[k], 0.0)
            P = softmax(V, axis=1)
            elast = float(np.mean(betas[k, pi] * factor[idx] * (1 - P)))
        rows.append({"segment": names[k], "own_price_elasticity": elast,
                     "share_pct": 100.0 * idx.size / N, "soft_share_pct": 100.0 * float(resp[:, k].mean()),
                     "n_obs": int(idx.size), "price_coefficient": float(betas[k, pi])})
    cross = None
    if with_cross:
        acc = np.zeros((ds.n_alternatives,) * 2)
        for n in range(N):
            z = ds.Z[n] if isinstance(params, MoeParams) else None
            D = price_derivatives(ds.X[n], z, params)
            P = choice_probabilities(ds.X[n], params, z)
            acc += D * factor[n][None, :] / P[:, None]
        cross = (acc / N).tolist()
    return ElasticityReport(rows, "observed per-observation prices, averaged within argmax-responsibility segment",
                            cross)


# ---------------------------------------------------------------------------
# Shapley attribution
# ---------------------------------------------------------------------------

def exact_shapley(value_fn, d: int) -> tuple[np.ndarray, dict]:
    """Exact Shapley values of ``value_fn(frozenset_of_players)`` over ``d`` players.

    Enumerates all ``2^d`` coalitions once and combines marginal
    contributions with weights ``|S|! (d-|S|-1)! / d!``.
    """
    if d > MAX_SHAPLEY_PLAYERS:
        raise ValueError(f"exact enumeration supports at most {MAX_SHAPLEY_PLAYERS} players (got {d}); "
                         "sampling-based Shapley is out of scope")
    values = {}
    for size in range(d + 1):
        for S in combinations(range(d), size):
            values[frozenset(S)] = float(value_fn(frozenset(S)))
    weight = [math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) for s in range(d)]
    phi = np.zeros(d)
    for S, vS in values.items():
        for j in range(d):
            if j not in S:
                phi[j] += weight[len(S)] * (values[S | {j}] - vS)
    return phi, values


@dataclass
class ShapleyAttribution:
    players: list[str]
    contributions: list[float]
    baseline_value: float
    full_value: float
    target_alt: int

    @property
    def efficiency_residual(self) -> float:
        return abs(sum(self.contributions) - (self.full_value - self.baseline_value))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["efficiency_residual"] = self.efficiency_residual
        return d


def feature_means(ds: ChoiceDataset) -> np.ndarray:
    """Attribute means over all observations and alternatives (the default baseline)."""
    return ds.X.mean(axis=(0, 1))


def shapley_attribution(obs, params: ModelParams, target_alt: int, baseline,
                        players=None) -> ShapleyAttribution:
    """Exact Shapley attribution of ``P(target_alt)`` to named attributes.

    Each attribute is one player shared by all alternatives. Players outside
    a coalition take their ``baseline`` value (a ``d_x`` vector, a ``(J, d_x)``
    array, or a dataset whose attribute means are used).
    """
    X, z = _arrays(obs)
    J, d = X.shape
    if isinstance(baseline, ChoiceDataset):
        baseline = feature_means(baseline)
    base = np.broadcast_to(np.asarray(baseline, dtype=float), (J, d))
    names = list(params.feature_names) if params.feature_names else [f"x{k}" for k in range(d)]
    cols = list(range(d)) if players is None else [names.index(p) for p in players]

    def value(S):
        Xs = base.copy()
        for s in S:
            Xs[:, cols[s]] = X[:, cols[s]]
        return choice_probabilities(Xs, params, z)[target_alt]

    phi, values = exact_shapley(value, len(cols))
    return ShapleyAttribution(players=[names[c] for c in cols], contributions=phi.tolist(),
                              baseline_value=values[frozenset()], full_value=values[frozenset(range(len(cols)))],
                              target_alt=int(target_alt))


# ---------------------------------------------------------------------------
# Discount response
# ---------------------------------------------------------------------------

@dataclass
class DiscountResponse:
    levels: list[float]
    segment_names: list[str]
    deltas: list[list[float]]    # percentage points, [level][segment]
    overall: list[float]         # mixture-weighted, percentage points
    most_affected: list[str]
    alt: int = 0
    knee: float = 0.20
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["Discount Level (%)", "Purchase Probability Increase (%)", "Most Affected Segment"]
                       + [f"{s} (%)" for s in self.segment_names])
            for lv, tot, top, row in zip(self.levels, self.overall, self.most_affected, self.deltas):
                w.writerow([f"{100 * lv:g}", f"{tot:.2f}", top] + [f"{v:.2f}" for v in row])


def reference_observation(ds: ChoiceDataset) -> ChoiceObservation:
    """``J`` identical alternatives at the attribute means, undiscounted, with
    covariates at their means."""
    x = feature_means(ds)
    for name in (DISCOUNT, DEEP_DISCOUNT):
        if name in ds.alt_feature_names:
            x[ds.feature_index(name)] = 0.0
    X = np.tile(x, (ds.n_alternatives, 1))
    return ChoiceObservation("reference", tuple(ds.alternatives), X, ds.Z.mean(axis=0), 0)


def discount_response_curve(params: ModelParams, obs, discount_grid, alt: int = 0, knee: float = 0.20,
                            segment_names=None) -> DiscountResponse:
    """Change in the probability (percentage points) of choosing ``alt`` when its
    discount moves from 0 to each grid level, per expert and for the mixture.

    A ``deep_discount`` attribute, when present, is recomputed as
    ``discount > knee`` so the threshold indicator follows the discount.
    """
    grid = [float(v) for v in discount_grid]
    if any(v < 0 or v > 0.5 for v in grid):
        raise ValueError("discounts must lie in [0, 0.5]")
    X, z = _arrays(obs)
    names = list(params.feature_names or [])
    if DISCOUNT not in names:
        raise ValueError("model has no discount attribute")
    di = names.index(DISCOUNT)
    deep = names.index(DEEP_DISCOUNT) if DEEP_DISCOUNT in names else None

    def at(level):
        Xd = X.copy()
        Xd[alt, di] = level
        if deep is not None:
            Xd[alt, deep] = float(level > knee)
        w, _, Pc = component_probabilities(Xd, z, params)
        return Pc[:, alt], float(w @ Pc[:, alt])

    base_k, base = at(0.0)
    C = base_k.size
    seg_names = list(segment_names) if segment_names is not None else \
        (["all"] if C == 1 else [f"segment_{k + 1}" for k in range(C)])
    deltas, overall, top = [], [], []
    for lv in grid:
        pk, p = at(lv)
        dk = 100 * (pk - base_k)
        deltas.append(dk.tolist())
        overall.append(100 * (p - base))
        top.append(seg_names[int(np.argmax(dk))])
    return DiscountResponse(grid, seg_names, deltas, overall, top, alt=alt, knee=knee)
