"""Maximum-likelihood fitting for the four model families.

MNL is fitted by damped Newton ascent, mixed logit by simulated maximum
likelihood with common random numbers, and the latent class and mixture of
experts models by (generalized) EM: each M-step improves, but need not
maximize, the expected complete-data log-likelihood.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import optimize
from scipy.special import logsumexp, softmax

from .data import ChoiceDataset, stratified_folds
from .models import (
    LcmParams,
    MnlParams,
    ModelParams,
    MoeParams,
    MxlParams,
    expert_log_probs,
    gate_design,
    gate_log_weights,
    log_softmax,
    price_index,
)
from .optim import ascend

logger = logging.getLogger(__name__)

STARVED_FRACTION = 1e-6
SEPARATION_NORM = 1e3
SEPARATION_MEAN_LL = -1e-3


class EstimationError(RuntimeError):
    pass


class ZeroProbabilityError(EstimationError):
    """An observed choice has probability exactly zero under the model."""

    def __init__(self, index: int):
        super().__init__(f"observed choice has zero probability at observation {index}")
        self.index = index


@dataclass
class InnerOptConfig:
    method: str = "newton"
    step_size: float = 1.0
    max_iters: int = 25
    grad_tol: float = 1e-6


@dataclass
class FitConfig:
    """Estimation settings shared by all families.

    ``k_experts`` is an integer or ``"select-by-cv"``. ``max_iters`` caps the
    direct (non-EM) fits; ``inner_opt.max_iters`` caps each M-step sub-problem.
    ``accelerate`` enables squared extrapolation of the EM map (SQUAREM) with a
    fallback to the plain EM step whenever extrapolation would lower the
    log-likelihood, so the trace stays non-decreasing either way.
    """

    max_em_iters: int = 500
    rel_ll_tol: float = 1e-6
    inner_opt: InnerOptConfig = field(default_factory=InnerOptConfig)
    seed: int = 0
    k_experts: int | str = 2
    k_candidates: tuple[int, ...] = (1, 2, 3, 4)
    cv_folds: int = 5
    n_restarts: int = 5
    accelerate: bool = True
    mxl_draws: int = 100
    max_iters: int = 200

    def __post_init__(self):
        if isinstance(self.inner_opt, dict):
            self.inner_opt = InnerOptConfig(**self.inner_opt)
        self.k_candidates = tuple(int(k) for k in self.k_candidates)
        if self.rel_ll_tol <= 0:
            raise ValueError("rel_ll_tol must be positive")
        if self.max_em_iters < 1:
            raise ValueError("max_em_iters must be >= 1")
        if not (self.k_experts == "select-by-cv" or int(self.k_experts) >= 1):
            raise ValueError("k_experts must be >= 1 or 'select-by-cv'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_candidates"] = list(self.k_candidates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FitConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown FitConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> FitConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class FitResult:
    params: ModelParams
    final_ll: float
    ll_trace: list[float]
    iterations: int
    converged: bool
    n_params: int
    n_obs: int = 0
    restarts: list[dict] = field(default_factory=list)

    @property
    def family(self) -> str:
        return self.params.family


# ---------------------------------------------------------------------------
# Likelihoods and gradients
# ---------------------------------------------------------------------------

def _rows(ds: ChoiceDataset) -> np.ndarray:
    return np.arange(len(ds))


def chosen_log_probs(ds: ChoiceDataset, params: ModelParams) -> np.ndarray:
    """Per-observation ``log P(y_n = chosen_n)``."""
    X, y, n = ds.X, ds.chosen, _rows(ds)
    if isinstance(params, MnlParams):
        lp = expert_log_probs(X, params.beta[None], params.asc[None])[:, 0]
        return lp[n, y]
    if isinstance(params, MoeParams):
        lp = expert_log_probs(X, params.betas, params.ascs)[n, :, y]
        return logsumexp(gate_log_weights(ds.Z, params) + lp, axis=1)
    if isinstance(params, LcmParams):
        lp = expert_log_probs(X, params.betas, params.ascs)[n, :, y]
        return logsumexp(np.log(params.class_weights()) + lp, axis=1)
    if isinstance(params, MxlParams):
        B = params.coefficient_draws()
        lp = expert_log_probs(X, B, np.broadcast_to(params.asc, (B.shape[0], params.asc.size)))[n, :, y]
        return logsumexp(lp, axis=1) - np.log(params.draws)
    raise TypeError(f"unknown parameter type {type(params).__name__}")


def log_likelihood(ds: ChoiceDataset, params: ModelParams) -> float:
    """Sum over observations of the log probability of the observed choice."""
    terms = chosen_log_probs(ds, params)
    bad = np.flatnonzero(~np.isfinite(terms))
    if bad.size:
        raise ZeroProbabilityError(int(bad[0]))
    return float(np.sum(terms))


def _design(X: np.ndarray) -> np.ndarray:
    """Append alternative dummies for the J-1 constants: ``(N, J, d_x + J - 1)``."""
    N, J, _ = X.shape
    dummies = np.broadcast_to(np.eye(J)[:, : J - 1], (N, J, J - 1))
    return np.concatenate([X, dummies], axis=2)


def weighted_mnl_objective(Xa: np.ndarray, y: np.ndarray, w: np.ndarray | None = None):
    """Objective ``sum_n w_n log P(y_n)`` over ``theta = [beta, asc]`` for :func:`ascend`."""
    N, J, _ = Xa.shape
    n = np.arange(N)
    w_ = np.ones(N) if w is None else np.asarray(w, dtype=float)
    by_alt = np.ascontiguousarray(Xa.transpose(1, 0, 2))  # (J, N, D)
    wXy = w_ @ Xa[n, y]

    def fun(theta, order):
        lp = log_softmax((by_alt @ theta).T, axis=1)
        f = float(w_ @ lp[n, y])
        if order == 0:
            return f
        wP = np.exp(lp) * w_[:, None]
        wxbar = sum(wP[:, j, None] * by_alt[j] for j in range(J))
        g = wXy - wxbar.sum(axis=0)
        if order == 1:
            return f, g
        H = -sum((by_alt[j] * wP[:, j, None]).T @ by_alt[j] for j in range(J))
        safe_w = np.where(w_ > 0, w_, 1.0)
        H += (wxbar / safe_w[:, None]).T @ wxbar
        return f, g, H

    return fun


def weighted_gate_objective(Zt: np.ndarray, resp: np.ndarray):
    """Objective ``sum_n sum_k r_nk log g_k(z_n)`` over the flattened ``(K-1, p)`` gate."""
    N, p = Zt.shape
    K = resp.shape[1]

    def fun(theta, order):
        G = theta.reshape(K - 1, p)
        scores = np.hstack([Zt @ G.T, np.zeros((N, 1))])
        lg = log_softmax(scores, axis=1)
        f = float(np.sum(resp * lg))
        if order == 0:
            return f
        g_ = np.exp(lg)
        grad = ((resp - g_)[:, : K - 1].T @ Zt).ravel()
        if order == 1:
            return f, grad
        gk = g_[:, : K - 1]
        H = np.empty((K - 1, p, K - 1, p))
        for a in range(K - 1):
            for b in range(a, K - 1):
                c = gk[:, a] * ((a == b) - gk[:, b])
                block = -(Zt * c[:, None]).T @ Zt
                H[a, :, b, :] = block
                H[b, :, a, :] = block.T
        return f, grad, H.reshape((K - 1) * p, (K - 1) * p)

    return fun


def mnl_gradient(ds: ChoiceDataset, params: MnlParams) -> np.ndarray:
    """Analytic gradient of the MNL log-likelihood w.r.t. ``[beta, asc]``."""
    theta = np.concatenate([params.beta, params.asc])
    return weighted_mnl_objective(_design(ds.X), ds.chosen)(theta, 1)[1]


def moe_to_vector(params: MoeParams) -> np.ndarray:
    return np.concatenate([params.gamma.ravel(), params.betas.ravel(), params.ascs.ravel()])


def mixture_to_vector(params: MoeParams | LcmParams) -> np.ndarray:
    if isinstance(params, LcmParams):
        return np.concatenate([params.class_logits, params.betas.ravel(), params.ascs.ravel()])
    return moe_to_vector(params)


def mixture_from_vector(theta: np.ndarray, template: MoeParams | LcmParams) -> MoeParams | LcmParams:
    if isinstance(template, LcmParams):
        nl, nb = template.class_logits.size, template.betas.size
        return replace(template, class_logits=theta[:nl], betas=theta[nl: nl + nb].reshape(template.betas.shape),
                       ascs=theta[nl + nb:].reshape(template.ascs.shape))
    return moe_from_vector(theta, template)


def moe_from_vector(theta: np.ndarray, template: MoeParams) -> MoeParams:
    ng, nb = template.gamma.size, template.betas.size
    return replace(
        template,
        gamma=theta[:ng].reshape(template.gamma.shape),
        betas=theta[ng: ng + nb].reshape(template.betas.shape),
        ascs=theta[ng + nb:].reshape(template.ascs.shape),
    )


def _posterior(ds: ChoiceDataset, params: MoeParams | LcmParams) -> tuple[np.ndarray, float]:
    n, y = _rows(ds), ds.chosen
    lp = expert_log_probs(ds.X, params.betas, params.ascs)[n, :, y]
    if isinstance(params, LcmParams):
        log_prior = np.log(params.class_weights())[None, :]
    else:
        log_prior = gate_log_weights(ds.Z, params)
    joint = log_prior + lp
    norm = logsumexp(joint, axis=1)
    bad = np.flatnonzero(~np.isfinite(norm))
    if bad.size:
        raise ZeroProbabilityError(int(bad[0]))
    return np.exp(joint - norm[:, None]), float(np.sum(norm))


def e_step(ds: ChoiceDataset, params: MoeParams | LcmParams) -> np.ndarray:
    """Posterior expert responsibilities ``g_k P_k(y) / sum_j g_j P_j(y)``, shape ``(N, K)``."""
    return _posterior(ds, params)[0]


def moe_gradient(ds: ChoiceDataset, params: MoeParams) -> np.ndarray:
    """Analytic gradient of the MoE observed-data log-likelihood.

    Ordered as :func:`moe_to_vector`. For expert k the gradient is
    ``sum_n r_nk (x_{n,y} - sum_j P_kj x_nj)`` and for gate row k
    ``sum_n (r_nk - g_nk) [1, z_n]``, with ``r`` the E-step responsibilities.
    """
    resp = e_step(ds, params)
    K = params.n_experts
    Xa = _design(ds.X)
    grads_expert = []
    for k in range(K):
        theta = np.concatenate([params.betas[k], params.ascs[k]])
        grads_expert.append(weighted_mnl_objective(Xa, ds.chosen, resp[:, k])(theta, 1)[1])
    ge = np.array(grads_expert)
    d = params.d_x
    if K > 1:
        g_gate = (resp - gate_weights_arr(ds, params))[:, : K - 1].T @ gate_design(ds.Z)
    else:
        g_gate = np.zeros((0,) + params.gamma.shape[1:])
    return np.concatenate([g_gate.ravel(), ge[:, :d].ravel(), ge[:, d:].ravel()])


def gate_weights_arr(ds: ChoiceDataset, params: MoeParams) -> np.ndarray:
    return np.exp(gate_log_weights(ds.Z, params))


def expected_complete_loglik(ds: ChoiceDataset, resp: np.ndarray, params: MoeParams | LcmParams) -> float:
    """The EM auxiliary function ``Q = sum_n sum_k r_nk [log g_nk + log P_k(y_n)]``."""
    n, y = _rows(ds), ds.chosen
    lp = expert_log_probs(ds.X, params.betas, params.ascs)[n, :, y]
    if isinstance(params, LcmParams):
        lg = np.log(params.class_weights())[None, :]
    else:
        lg = gate_log_weights(ds.Z, params)
    return float(np.sum(resp * (lg + lp)))


# ---------------------------------------------------------------------------
# MNL
# ---------------------------------------------------------------------------

def check_identified(ds: ChoiceDataset) -> None:
    """Raise if the within-choice-set design is rank deficient."""
    Xa = _design(ds.X)
    centered = Xa - Xa.mean(axis=1, keepdims=True)
    flat = centered.reshape(-1, Xa.shape[2])
    rank = np.linalg.matrix_rank(flat)
    if rank < Xa.shape[2]:
        raise EstimationError(
            f"design is rank deficient ({rank} < {Xa.shape[2]}): collinear attributes "
            "or attributes constant across alternatives"
        )


def fit_mnl(ds: ChoiceDataset, cfg: FitConfig | None = None, init: MnlParams | None = None,
            weights: np.ndarray | None = None) -> FitResult:
    """Maximum-likelihood MNL by damped Newton ascent.

    Converged when the infinity norm of the per-observation gradient drops
    below ``cfg.inner_opt.grad_tol``. Raises :class:`EstimationError` on a
    collinear design or when the coefficients diverge (perfect separation).
    """
    cfg = cfg or FitConfig()
    check_identified(ds)
    J, d = ds.n_alternatives, ds.d_x
    theta0 = np.zeros(d + J - 1) if init is None else np.concatenate([init.beta, init.asc])
    fun = weighted_mnl_objective(_design(ds.X), ds.chosen, weights)
    res = ascend(fun, theta0, method=cfg.inner_opt.method, max_iter=cfg.max_iters,
                 grad_tol=cfg.inner_opt.grad_tol, step_size=cfg.inner_opt.step_size,
                 scale=float(len(ds)))
    if np.linalg.norm(res.x) > SEPARATION_NORM:
        raise EstimationError(
            f"coefficient norm {np.linalg.norm(res.x):.3g} exceeds {SEPARATION_NORM:g}: "
            "likelihood appears unbounded (perfect separation)"
        )
    if res.f / len(ds) > SEPARATION_MEAN_LL:
        # the gradient vanishes before the norm grows large when every choice is fitted exactly
        raise EstimationError(
            f"mean log-likelihood {res.f / len(ds):.3g} is essentially zero: "
            "likelihood appears unbounded (perfect separation)"
        )
    params = MnlParams(res.x[:d], res.x[d:], ds.alt_feature_names)
    return FitResult(params=params, final_ll=res.f, ll_trace=[float(v) for v in res.trace],
                     iterations=res.iterations, converged=res.converged,
                     n_params=params.n_params, n_obs=len(ds))


# ---------------------------------------------------------------------------
# Mixture of experts
# ---------------------------------------------------------------------------

def _column_scales(a: np.ndarray) -> np.ndarray:
    sd = a.std(axis=0) if a.shape[0] else np.ones(a.shape[1:])
    return np.where(sd > 0, sd, 1.0)


def random_moe_params(ds: ChoiceDataset, K: int, rng: np.random.Generator) -> MoeParams:
    """Small random starting values: uniform(-0.1, 0.1) per coefficient,
    divided by the column's standard deviation so the scale is unit-free."""
    J, d, dz = ds.n_alternatives, ds.d_x, ds.d_z
    sx = _column_scales(ds.X.reshape(-1, d))
    sz = np.concatenate([[1.0], _column_scales(ds.Z)])
    betas = rng.uniform(-0.1, 0.1, (K, d)) / sx
    ascs = rng.uniform(-0.1, 0.1, (K, J - 1))
    gamma = rng.uniform(-0.1, 0.1, (K - 1, dz + 1)) / sz
    return MoeParams(gamma, betas, ascs, ds.alt_feature_names, ds.covariate_names)


def mnl_seeded_moe_params(ds: ChoiceDataset, K: int, mnl: MnlParams, rng: np.random.Generator) -> MoeParams:
    """Every expert at the MNL estimate with a random gate.

    The log-likelihood at this start equals the MNL optimum exactly; the gate
    breaks the symmetry because each expert's M-step sees different weights.
    """
    dz = ds.d_z
    sz = np.concatenate([[1.0], _column_scales(ds.Z)])
    gamma = rng.uniform(-1.0, 1.0, (K - 1, dz + 1)) / sz
    betas = np.tile(mnl.beta, (K, 1))
    ascs = np.tile(mnl.asc, (K, 1))
    return MoeParams(gamma, betas, ascs, ds.alt_feature_names, ds.covariate_names)


def _reorder_reference(rows: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Permute softmax score rows (last implicit row = 0) and re-reference to the new last."""
    full = np.vstack([rows, np.zeros((1,) + rows.shape[1:])])[perm]
    return full[:-1] - full[-1]


def canonicalize(params: MoeParams | LcmParams) -> MoeParams | LcmParams:
    """Sort experts by ascending price coefficient (most negative first)."""
    pi = price_index(params)
    perm = np.argsort(params.betas[:, pi], kind="stable")
    if np.array_equal(perm, np.arange(len(perm))):
        return params
    if isinstance(params, MoeParams):
        gamma = _reorder_reference(params.gamma, perm) if params.n_experts > 1 else params.gamma
        return replace(params, gamma=gamma, betas=params.betas[perm], ascs=params.ascs[perm])
    logits = _reorder_reference(params.class_logits[:, None], perm)[:, 0]
    return replace(params, class_logits=logits, betas=params.betas[perm], ascs=params.ascs[perm])


def split_expert(params: MoeParams, k: int) -> MoeParams:
    """Duplicate expert ``k`` into two copies sharing its gate mass equally.

    The mixture's choice probabilities (and log-likelihood) are unchanged, so
    an EM run from the result cannot end below the original fit.
    """
    K = params.n_experts
    dz1 = params.gamma.shape[1] if params.gamma.shape[1] else 1
    full = np.vstack([params.gamma.reshape(K - 1, dz1) if K > 1 else np.zeros((0, dz1)),
                      np.zeros((1, dz1))])
    row = full[k].copy()
    row[0] -= np.log(2.0)
    full[k] = row
    full = np.vstack([full[:k + 1], row[None], full[k + 1:]])
    gamma = full[:-1] - full[-1]
    betas = np.insert(params.betas, k + 1, params.betas[k], axis=0)
    ascs = np.insert(params.ascs, k + 1, params.ascs[k], axis=0)
    return replace(params, gamma=gamma, betas=betas, ascs=ascs)


def _update_experts(Xa, y, resp, betas, ascs, cfg: FitConfig, N: int):
    K, d = betas.shape
    new_b, new_a = betas.copy(), ascs.copy()
    totals = resp.sum(axis=0)
    for k in range(K):
        if totals[k] < STARVED_FRACTION * N:
            warnings.warn(f"expert {k} starved (total responsibility {totals[k]:.3g}); parameters frozen")
            continue
        fun = weighted_mnl_objective(Xa, y, resp[:, k])
        theta0 = np.concatenate([betas[k], ascs[k]])
        res = ascend(fun, theta0, method=cfg.inner_opt.method, max_iter=cfg.inner_opt.max_iters,
                     grad_tol=cfg.inner_opt.grad_tol, step_size=cfg.inner_opt.step_size,
                     scale=float(max(totals[k], 1.0)))
        new_b[k], new_a[k] = res.x[:d], res.x[d:]
    return new_b, new_a


def m_step(ds: ChoiceDataset, resp: np.ndarray, params_in: MoeParams, cfg: FitConfig | None = None,
           _Xa: np.ndarray | None = None) -> MoeParams:
    """One generalized M-step warm-started from ``params_in``.

    Each expert's coefficients ascend its responsibility-weighted MNL
    log-likelihood; the gate ascends the weighted multinomial-logistic
    objective ``sum_n sum_k r_nk log g_k(z_n)``. Experts whose total
    responsibility is below ``1e-6 * N`` are left unchanged.
    """
    cfg = cfg or FitConfig()
    Xa = _design(ds.X) if _Xa is None else _Xa
    N = len(ds)
    betas, ascs = _update_experts(Xa, ds.chosen, resp, params_in.betas, params_in.ascs, cfg, N)
    gamma = params_in.gamma
    K = params_in.n_experts
    if K > 1:
        Zt = gate_design(ds.Z)
        res = ascend(weighted_gate_objective(Zt, resp), params_in.gamma.ravel(),
                     method=cfg.inner_opt.method, max_iter=cfg.inner_opt.max_iters,
                     grad_tol=cfg.inner_opt.grad_tol, step_size=cfg.inner_opt.step_size,
                     scale=float(N))
        gamma = res.x.reshape(params_in.gamma.shape)
    return replace(params_in, gamma=gamma, betas=betas, ascs=ascs)


def lcm_m_step(ds: ChoiceDataset, resp: np.ndarray, params_in: LcmParams, cfg: FitConfig | None = None,
               _Xa: np.ndarray | None = None) -> LcmParams:
    """Class weights set to the mean responsibilities (closed form); class
    coefficients updated as in :func:`m_step`."""
    cfg = cfg or FitConfig()
    Xa = _design(ds.X) if _Xa is None else _Xa
    betas, ascs = _update_experts(Xa, ds.chosen, resp, params_in.betas, params_in.ascs, cfg, len(ds))
    shares = np.maximum(resp.mean(axis=0), 1e-300)
    logits = np.log(shares[:-1]) - np.log(shares[-1])
    return replace(params_in, class_logits=logits, betas=betas, ascs=ascs)


def _squarem_cycle(ds, params, resp, ll, cfg, step, Xa):
    """One SQUAREM cycle; returns the better of the extrapolated and plain
    two-step EM points together with its posterior and log-likelihood."""
    p1 = step(ds, resp, params, cfg, _Xa=Xa)
    r1, ll1 = _posterior(ds, p1)
    p2 = step(ds, r1, p1, cfg, _Xa=Xa)
    r2, ll2 = _posterior(ds, p2)
    t0, t1, t2 = mixture_to_vector(params), mixture_to_vector(p1), mixture_to_vector(p2)
    r, v = t1 - t0, t2 - 2 * t1 + t0
    nv = np.linalg.norm(v)
    if nv == 0 or ll2 <= ll1:
        return p2, r2, ll2
    alpha = min(-np.linalg.norm(r) / nv, -1.0)
    try:
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pe = mixture_from_vector(t0 - 2 * alpha * r + alpha ** 2 * v, params)
            re, _ = _posterior(ds, pe)
            p3 = step(ds, re, pe, cfg, _Xa=Xa)
            r3, ll3 = _posterior(ds, p3)
    except (ValueError, EstimationError, np.linalg.LinAlgError):
        return p2, r2, ll2
    if np.isfinite(ll3) and ll3 >= ll2:
        return p3, r3, ll3
    return p2, r2, ll2


def _em(ds: ChoiceDataset, params, cfg: FitConfig, step) -> FitResult:
    Xa = _design(ds.X)
    resp, ll = _posterior(ds, params)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, cfg.max_em_iters + 1):
        if cfg.accelerate:
            params, resp, ll_new = _squarem_cycle(ds, params, resp, ll, cfg, step, Xa)
        else:
            params = step(ds, resp, params, cfg, _Xa=Xa)
            resp, ll_new = _posterior(ds, params)
        trace.append(ll_new)
        if (ll_new - ll) / abs(ll) < cfg.rel_ll_tol:
            converged = True
            ll = ll_new
            break
        ll = ll_new
    return FitResult(params=params, final_ll=ll, ll_trace=trace, iterations=it,
                     converged=converged, n_params=params.n_params, n_obs=len(ds))


def _best_of(runs: list[FitResult], canon) -> FitResult:
    best = runs[int(np.argmax([r.final_ll for r in runs]))]
    best.params = canon(best.params)
    best.restarts = [{"final_ll": r.final_ll, "iterations": r.iterations, "converged": r.converged}
                     for r in runs]
    if not any(r.converged for r in runs):
        warnings.warn("no EM restart converged; returning best-effort result")
    return best


def fit_moe(ds: ChoiceDataset, cfg: FitConfig | None = None, init: MoeParams | None = None,
            method: str = "em") -> FitResult:
    """Fit a K-expert mixture of MNL experts.

    Restart 0 starts every expert at the MNL estimate with a random gate;
    the remaining ``n_restarts - 1`` restarts use small random values. The
    best run by final log-likelihood is returned with experts in canonical
    order. Passing ``init`` runs a single EM from that point instead.

    ``method="direct"`` instead maximizes the observed-data log-likelihood
    jointly with L-BFGS from each start (a cross-check of EM).
    """
    cfg = cfg or FitConfig()
    if cfg.k_experts == "select-by-cv":
        K, _ = select_k_by_cv(ds, cfg.k_candidates, cfg.cv_folds, cfg)
        cfg = replace(cfg, k_experts=K)
    K = int(cfg.k_experts)
    if len(ds) < 10 * K * ds.d_x:
        warnings.warn(f"N={len(ds)} is below 10*K*d_x={10 * K * ds.d_x}; estimates may be unstable")
    runner = _em if method == "em" else _direct_moe
    if init is not None:
        return _best_of([runner(ds, init, cfg, m_step)], canonicalize)
    rng = np.random.default_rng(cfg.seed)
    mnl = fit_mnl(ds, cfg).params
    if K == 1:
        start = MoeParams(np.zeros((0, ds.d_z + 1)), mnl.beta[None], mnl.asc[None],
                          ds.alt_feature_names, ds.covariate_names)
        return _best_of([runner(ds, start, cfg, m_step)], canonicalize)
    starts = [mnl_seeded_moe_params(ds, K, mnl, rng)]
    starts += [random_moe_params(ds, K, rng) for _ in range(max(cfg.n_restarts, 1) - 1)]
    runs = [runner(ds, s, cfg, m_step) for s in starts]
    return _best_of(runs, canonicalize)


def _direct_moe(ds: ChoiceDataset, params: MoeParams, cfg: FitConfig, _step=None) -> FitResult:
    trace: list[float] = []

    def negll(theta):
        p = moe_from_vector(theta, params)
        ll = log_likelihood(ds, p)
        return -ll, -moe_gradient(ds, p)

    res = optimize.minimize(negll, moe_to_vector(params), jac=True, method="L-BFGS-B",
                            callback=lambda xk: trace.append(-negll(xk)[0]),
                            options={"maxiter": cfg.max_iters, "gtol": cfg.inner_opt.grad_tol * len(ds)})
    fitted = moe_from_vector(res.x, params)
    ll = log_likelihood(ds, fitted)
    return FitResult(params=fitted, final_ll=ll, ll_trace=trace or [ll], iterations=int(res.nit),
                     converged=bool(res.success), n_params=fitted.n_params, n_obs=len(ds))


# ---------------------------------------------------------------------------
# Latent class
# ---------------------------------------------------------------------------

def random_lcm_params(ds: ChoiceDataset, K: int, rng: np.random.Generator) -> LcmParams:
    J, d = ds.n_alternatives, ds.d_x
    sx = _column_scales(ds.X.reshape(-1, d))
    return LcmParams(rng.uniform(-0.1, 0.1, K - 1), rng.uniform(-0.1, 0.1, (K, d)) / sx,
                     rng.uniform(-0.1, 0.1, (K, J - 1)), ds.alt_feature_names)


def fit_lcm(ds: ChoiceDataset, cfg: FitConfig | None = None, init: LcmParams | None = None) -> FitResult:
    """Latent class logit by EM with covariate-free class weights.

    Restart 0 perturbs the MNL estimate multiplicatively per class, the rest
    are small random starts; classes are returned in canonical order.
    """
    cfg = cfg or FitConfig()
    if cfg.k_experts == "select-by-cv":
        raise ValueError("select K for the latent class model before fitting")
    K = int(cfg.k_experts)
    if init is not None:
        return _best_of([_em(ds, init, cfg, lcm_m_step)], canonicalize)
    rng = np.random.default_rng(cfg.seed)
    mnl = fit_mnl(ds, cfg).params
    if K == 1:
        start = LcmParams(np.zeros(0), mnl.beta[None], mnl.asc[None], ds.alt_feature_names)
        return _best_of([_em(ds, start, cfg, lcm_m_step)], canonicalize)
    spread = np.exp(rng.uniform(-0.5, 0.5, (K, ds.d_x)))
    starts = [LcmParams(np.zeros(K - 1), mnl.beta[None] * spread, np.tile(mnl.asc, (K, 1)),
                        ds.alt_feature_names)]
    starts += [random_lcm_params(ds, K, rng) for _ in range(max(cfg.n_restarts, 1) - 1)]
    return _best_of([_em(ds, s, cfg, lcm_m_step) for s in starts], canonicalize)


# ---------------------------------------------------------------------------
# Mixed logit
# ---------------------------------------------------------------------------

def mxl_loglik_and_gradient(ds: ChoiceDataset, params: MxlParams) -> tuple[float, np.ndarray]:
    """Simulated log-likelihood and its gradient w.r.t. ``[mean, log_std, asc]``."""
    X, y, n = ds.X, ds.chosen, _rows(ds)
    N, J, d = X.shape
    eta = params.normal_draws()
    B = params.coefficient_draws()
    R = B.shape[0]
    flat = X.reshape(N * J, d)
    V = (flat @ B.T).reshape(N, J, R).transpose(0, 2, 1) + np.append(params.asc, 0.0)
    lp = log_softmax(V, axis=2)
    lpy = lp[n, :, y]
    lmix = logsumexp(lpy, axis=1)
    ll = float(np.sum(lmix) - N * np.log(R))
    w = np.exp(lpy - lmix[:, None])
    wP = w[:, :, None] * np.exp(lp)  # (N, R, J)
    # WS[r] = sum_n w_nr (x_ny - sum_j P_nrj x_nj)
    WS = w.T @ X[n, y] - wP.transpose(1, 0, 2).reshape(R, N * J) @ flat
    dB_dm = np.ones((R, d))
    dB_ds = params.std * eta
    if params.lognormal_price:
        pi = params.price_index
        dB_dm[:, pi] = B[:, pi]
        dB_ds[:, pi] = B[:, pi] * params.std[pi] * eta[:, pi]
    g_mean = np.sum(WS * dB_dm, axis=0)
    g_lstd = np.sum(WS * dB_ds, axis=0)
    onehot = np.zeros((N, J))
    onehot[n, y] = 1.0
    g_asc = (onehot - wP.sum(axis=1)).sum(axis=0)[: J - 1]
    return ll, np.concatenate([g_mean, g_lstd, g_asc])


def fit_mxl(ds: ChoiceDataset, cfg: FitConfig | None = None, init: MxlParams | None = None,
            freeze_std: bool = False, lognormal_price: bool = False) -> FitResult:
    """Simulated maximum likelihood with fixed standard-normal draws.

    Starts from the MNL estimate with small standard deviations unless
    ``init`` is given. With ``freeze_std`` only the means and constants move.
    Uses L-BFGS on the analytic gradient.
    """
    cfg = cfg or FitConfig()
    d, J = ds.d_x, ds.n_alternatives
    pi = ds.alt_feature_names.index("price") if "price" in ds.alt_feature_names else 0
    if init is None:
        mnl = fit_mnl(ds, cfg).params
        mean = mnl.beta.copy()
        if lognormal_price:
            mean[pi] = np.log(max(-mnl.beta[pi], 1e-8))
        sx = _column_scales(ds.X.reshape(-1, d))
        init = MxlParams(mean, np.log(0.1 / sx), mnl.asc, draws=cfg.mxl_draws, seed=cfg.seed,
                         lognormal_price=lognormal_price, price_index=pi,
                         feature_names=ds.alt_feature_names)
    free = np.ones(2 * d + J - 1, dtype=bool)
    if freeze_std:
        free[d: 2 * d] = False
    theta_full = np.concatenate([init.mean, init.log_std, init.asc])
    # optimize in units of each attribute's spread so L-BFGS sees a well-scaled problem
    unit = np.ones_like(theta_full)
    unit[:d] = _column_scales(ds.X.reshape(-1, d))
    if init.lognormal_price:
        unit[init.price_index] = 1.0
    unit = unit[free]

    def build(x):
        t = theta_full.copy()
        t[free] = x / unit
        return replace(init, mean=t[:d], log_std=t[d: 2 * d], asc=t[2 * d:])

    n = len(ds)
    last = {}

    def negll(x):
        ll, g = mxl_loglik_and_gradient(ds, build(x))
        if not np.isfinite(ll):
            return np.inf, np.zeros_like(x)
        last[x.tobytes()] = ll
        return -ll / n, -g[free] / unit / n

    x0 = theta_full[free] * unit
    trace = [-negll(x0)[0] * n]

    def record(xk):
        trace.append(last[xk.tobytes()] if xk.tobytes() in last else -negll(xk)[0] * n)
        last.clear()

    res = optimize.minimize(negll, x0, jac=True, method="L-BFGS-B", callback=record,
                            options={"maxiter": cfg.max_iters, "gtol": cfg.inner_opt.grad_tol,
                                     "ftol": cfg.rel_ll_tol * 1e-2})
    params = build(res.x)
    ll = log_likelihood(ds, params)
    if not np.isfinite(ll):
        raise EstimationError("non-finite simulated likelihood")
    grad_norm = np.max(np.abs(res.jac)) if res.jac is not None else np.inf
    return FitResult(params=params, final_ll=ll, ll_trace=trace, iterations=int(res.nit),
                     converged=bool(res.success or grad_norm < cfg.inner_opt.grad_tol),
                     n_params=params.n_params, n_obs=n)


# ---------------------------------------------------------------------------
# Model selection
# ---------------------------------------------------------------------------

def fit_family(ds: ChoiceDataset, family: str, cfg: FitConfig) -> FitResult:
    if family == "mnl":
        return fit_mnl(ds, cfg)
    if family == "mxl":
        return fit_mxl(ds, cfg)
    if family == "lcm":
        return fit_lcm(ds, cfg)
    if family == "moe":
        return fit_moe(ds, cfg)
    raise ValueError(f"unknown model family {family!r}")


def select_k_by_cv(ds: ChoiceDataset, k_candidates, folds: int = 5, cfg: FitConfig | None = None,
                   family: str = "moe") -> tuple[int, list[dict]]:
    """Choose K by mean held-out log-likelihood over stratified folds.

    Returns the chosen K (ties go to the smaller K) and one table row per
    candidate with the per-fold held-out log-likelihoods.
    """
    cfg = cfg or FitConfig()
    cands = sorted(set(int(k) for k in k_candidates))
    if not cands:
        raise ValueError("candidate list is empty")
    parts = stratified_folds(ds.chosen, folds, seed=cfg.seed)
    table = []
    for K in cands:
        fold_ll = []
        for f, held in enumerate(parts):
            train = np.setdiff1d(np.arange(len(ds)), held)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit = fit_family(ds.subset(train), family, replace(cfg, k_experts=K))
            fold_ll.append(log_likelihood(ds.subset(held), fit.params))
        table.append({"k": K, "fold_ll": fold_ll, "mean_ll": float(np.mean(fold_ll)),
                      "fold_sizes": [len(p) for p in parts]})
        logger.info("K=%d mean held-out LL %.3f", K, table[-1]["mean_ll"])
    best = max(table, key=lambda r: (r["mean_ll"], -r["k"]))
    return best["k"], table
