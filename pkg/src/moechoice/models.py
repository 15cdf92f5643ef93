"""Choice-probability engines: MNL, mixed logit, latent class and mixture of experts.

All engines accept either a single observation (``X`` of shape ``(J, d_x)``)
or a batch (``(N, J, d_x)``). Each alternative-specific constant vector has
length ``J - 1``; the last alternative is the reference with constant 0.
Likewise the last expert (or latent class) is the gate's reference with all
weights fixed at 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import logsumexp, softmax

from .data import PRICE, ChoiceDataset, ChoiceObservation


class DimensionError(ValueError):
    pass


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def _names(names):
    return None if names is None else tuple(names)


@dataclass(frozen=True)
class MnlParams:
    beta: np.ndarray
    asc: np.ndarray
    feature_names: tuple[str, ...] | None = None

    family = "mnl"

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(self.beta, 1, "beta"))
        object.__setattr__(self, "asc", _frozen(self.asc, 1, "asc"))
        object.__setattr__(self, "feature_names", _names(self.feature_names))

    @property
    def n_alternatives(self) -> int:
        return self.asc.shape[0] + 1

    @property
    def d_x(self) -> int:
        return self.beta.shape[0]

    @property
    def n_params(self) -> int:
        return self.d_x + self.n_alternatives - 1


@dataclass(frozen=True)
class MxlParams:
    """Independent-normal random coefficients, simulated with ``draws`` fixed
    standard-normal vectors generated from ``seed``.

    With ``lognormal_price`` the price coefficient is ``-exp(mean + std * eta)``.
    """

    mean: np.ndarray
    log_std: np.ndarray
    asc: np.ndarray
    draws: int = 100
    seed: int = 0
    lognormal_price: bool = False
    price_index: int = 0
    feature_names: tuple[str, ...] | None = None

    family = "mxl"

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean, 1, "mean"))
        # log_std of -inf encodes an exactly degenerate coefficient
        ls = np.array(self.log_std, dtype=float)
        if ls.ndim != 1 or np.any(np.isnan(ls)) or np.any(ls == np.inf):
            raise ValueError("log_std must be a 1-d array of finite values or -inf")
        ls.setflags(write=False)
        object.__setattr__(self, "log_std", ls)
        object.__setattr__(self, "asc", _frozen(self.asc, 1, "asc"))
        object.__setattr__(self, "feature_names", _names(self.feature_names))
        if int(self.draws) < 1:
            raise ValueError("MXL needs at least one draw (R >= 1)")
        if self.mean.shape != self.log_std.shape:
            raise DimensionError("mean and log_std must have equal length")

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def n_alternatives(self) -> int:
        return self.asc.shape[0] + 1

    @property
    def d_x(self) -> int:
        return self.mean.shape[0]

    @property
    def n_params(self) -> int:
        return 2 * self.d_x + self.n_alternatives - 1

    def normal_draws(self) -> np.ndarray:
        return standard_normal_draws(self.draws, self.d_x, self.seed)

    def coefficient_draws(self) -> np.ndarray:
        """Coefficient vectors, shape ``(R, d_x)``."""
        b = self.mean + self.std * self.normal_draws()
        if self.lognormal_price:
            b[:, self.price_index] = -np.exp(b[:, self.price_index])
        return b


@dataclass(frozen=True)
class LcmParams:
    class_logits: np.ndarray
    betas: np.ndarray
    ascs: np.ndarray
    feature_names: tuple[str, ...] | None = None

    family = "lcm"

    def __post_init__(self):
        object.__setattr__(self, "class_logits", _frozen(self.class_logits, 1, "class_logits"))
        object.__setattr__(self, "betas", _frozen(self.betas, 2, "betas"))
        object.__setattr__(self, "ascs", _frozen(self.ascs, 2, "ascs"))
        object.__setattr__(self, "feature_names", _names(self.feature_names))
        K = self.betas.shape[0]
        if self.class_logits.shape != (K - 1,) or self.ascs.shape[0] != K:
            raise DimensionError("class_logits must have K-1 entries and ascs K rows")

    @property
    def n_classes(self) -> int:
        return self.betas.shape[0]

    @property
    def n_alternatives(self) -> int:
        return self.ascs.shape[1] + 1

    @property
    def d_x(self) -> int:
        return self.betas.shape[1]

    @property
    def n_params(self) -> int:
        K = self.n_classes
        return K * (self.d_x + self.n_alternatives - 1) + (K - 1)

    def class_weights(self) -> np.ndarray:
        return softmax(np.append(self.class_logits, 0.0))


@dataclass(frozen=True)
class MoeParams:
    """Mixture-of-experts parameters.

    ``gamma`` has shape ``(K-1, d_z+1)``; column 0 is the intercept. ``betas``
    is ``(K, d_x)`` and ``ascs`` ``(K, J-1)``.
    """

    gamma: np.ndarray
    betas: np.ndarray
    ascs: np.ndarray
    feature_names: tuple[str, ...] | None = None
    covariate_names: tuple[str, ...] | None = None

    family = "moe"

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float)
        if gamma.size == 0:
            gamma = gamma.reshape(0, gamma.shape[-1] if gamma.ndim == 2 else 0)
        object.__setattr__(self, "gamma", _frozen(gamma, 2, "gamma"))
        object.__setattr__(self, "betas", _frozen(self.betas, 2, "betas"))
        object.__setattr__(self, "ascs", _frozen(self.ascs, 2, "ascs"))
        object.__setattr__(self, "feature_names", _names(self.feature_names))
        object.__setattr__(self, "covariate_names", _names(self.covariate_names))
        K = self.betas.shape[0]
        if K < 1:
            raise DimensionError("need at least one expert")
        if self.gamma.shape[0] != K - 1 or self.ascs.shape[0] != K:
            raise DimensionError("gamma must have K-1 rows and ascs K rows")

    @property
    def n_experts(self) -> int:
        return self.betas.shape[0]

    @property
    def n_alternatives(self) -> int:
        return self.ascs.shape[1] + 1

    @property
    def d_x(self) -> int:
        return self.betas.shape[1]

    @property
    def d_z(self) -> int:
        """Covariate count, or None for a single expert with no gate."""
        return self.gamma.shape[1] - 1 if self.gamma.shape[1] else None

    @property
    def n_params(self) -> int:
        K = self.n_experts
        return K * (self.d_x + self.n_alternatives - 1) + int(self.gamma.size)

    def expert(self, k: int) -> MnlParams:
        return MnlParams(self.betas[k], self.ascs[k], self.feature_names)


ModelParams = Union[MnlParams, MxlParams, LcmParams, MoeParams]


def price_index(params: ModelParams, default: int = 0) -> int:
    names = params.feature_names
    if names and PRICE in names:
        return names.index(PRICE)
    return default


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------

def standard_normal_draws(R: int, d: int, seed: int) -> np.ndarray:
    """Common random numbers for simulated likelihoods, shape ``(R, d)``."""
    if R < 1:
        raise ValueError("R must be >= 1")
    return np.random.default_rng(seed).standard_normal((R, d))


def unpack(data, z=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Return ``(X, Z)`` arrays from an observation, dataset or raw arrays."""
    if isinstance(data, ChoiceDataset):
        return data.X, data.Z
    if isinstance(data, ChoiceObservation):
        return data.alt_features, data.consumer_covariates
    X = np.asarray(data, dtype=float)
    return X, None if z is None else np.asarray(z, dtype=float)


def utilities(X: np.ndarray, beta: np.ndarray, asc: np.ndarray) -> np.ndarray:
    """Systematic utilities ``x_i . beta + asc_i``; trailing axis is J."""
    if X.shape[-1] != beta.shape[-1]:
        raise DimensionError(f"X has {X.shape[-1]} attributes, beta has {beta.shape[-1]}")
    if X.shape[-2] != asc.shape[-1] + 1:
        raise DimensionError(f"X has J={X.shape[-2]}, asc implies J={asc.shape[-1] + 1}")
    V = X @ beta + np.append(asc, 0.0)
    if not np.all(np.isfinite(V)):
        raise ValueError("non-finite utility")
    return V


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted log-softmax; exact for finite inputs of any magnitude."""
    shifted = v - np.max(v, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def expert_log_probs(X: np.ndarray, betas: np.ndarray, ascs: np.ndarray) -> np.ndarray:
    """Log choice probabilities under each of K MNL experts, shape ``(..., K, J)``."""
    if X.shape[-1] != betas.shape[1]:
        raise DimensionError(f"X has {X.shape[-1]} attributes, betas have {betas.shape[1]}")
    if X.shape[-2] != ascs.shape[1] + 1:
        raise DimensionError(f"X has J={X.shape[-2]}, ascs imply J={ascs.shape[1] + 1}")
    V = np.swapaxes(X @ betas.T, -1, -2)
    V = V + np.hstack([ascs, np.zeros((ascs.shape[0], 1))])
    if not np.all(np.isfinite(V)):
        raise ValueError("non-finite utility")
    return log_softmax(V, axis=-1)


def gate_design(Z: np.ndarray) -> np.ndarray:
    """Prepend the intercept column: ``[1, z]``."""
    Z = np.asarray(Z, dtype=float)
    return np.concatenate([np.ones(Z.shape[:-1] + (1,)), Z], axis=-1)


def gate_log_weights(Z, params: MoeParams) -> np.ndarray:
    K = params.n_experts
    Z = np.asarray(Z, dtype=float)
    if K == 1:
        return np.zeros(Z.shape[:-1] + (1,))
    if Z.shape[-1] + 1 != params.gamma.shape[1]:
        raise DimensionError(f"z has {Z.shape[-1]} covariates, gate expects {params.gamma.shape[1] - 1}")
    scores = gate_design(Z) @ params.gamma.T
    scores = np.concatenate([scores, np.zeros(scores.shape[:-1] + (1,))], axis=-1)
    return log_softmax(scores, axis=-1)


# ---------------------------------------------------------------------------
# Public probability engines
# ---------------------------------------------------------------------------

def mnl_probs(data, params: MnlParams) -> np.ndarray:
    """Logit probabilities ``exp(V_i - m) / sum_j exp(V_j - m)`` with ``m = max V``."""
    X, _ = unpack(data)
    return softmax(utilities(X, params.beta, params.asc), axis=-1)


def gate_weights(z, params: MoeParams) -> np.ndarray:
    """Softmax gate over ``[1, z] . gamma_k`` with the last expert's score fixed at 0."""
    if isinstance(z, (ChoiceObservation, ChoiceDataset)):
        _, z = unpack(z)
    return np.exp(gate_log_weights(z, params))


def moe_probs(data, params: MoeParams, z=None) -> np.ndarray:
    """Mixture of expert MNL probabilities weighted by the gate."""
    X, Z = unpack(data, z)
    if Z is None:
        if params.n_experts > 1:
            raise DimensionError("moe_probs needs consumer covariates")
        Z = np.zeros(X.shape[:-2] + (0,))
    log_g = gate_log_weights(Z, params)
    log_p = expert_log_probs(X, params.betas, params.ascs)
    return np.exp(logsumexp(log_g[..., :, None] + log_p, axis=-2))


def lcm_probs(data, params: LcmParams) -> np.ndarray:
    X, _ = unpack(data)
    log_w = np.log(params.class_weights())
    log_p = expert_log_probs(X, params.betas, params.ascs)
    return np.exp(logsumexp(log_w[:, None] + log_p, axis=-2))


def mxl_log_probs_by_draw(X: np.ndarray, params: MxlParams) -> np.ndarray:
    """Log MNL probabilities at each coefficient draw, shape ``(..., R, J)``."""
    B = params.coefficient_draws()
    return expert_log_probs(X, B, np.broadcast_to(params.asc, (B.shape[0], params.asc.shape[0])))


def mxl_probs(data, params: MxlParams) -> np.ndarray:
    """Simulated mixed-logit probabilities averaged over the fixed draws."""
    X, _ = unpack(data)
    return np.exp(logsumexp(mxl_log_probs_by_draw(X, params), axis=-2) - np.log(params.draws))


def choice_probabilities(data, params: ModelParams, z=None) -> np.ndarray:
    """Dispatch to the engine matching the parameter family."""
    if isinstance(params, MoeParams):
        return moe_probs(data, params, z)
    if isinstance(params, LcmParams):
        return lcm_probs(data, params)
    if isinstance(params, MxlParams):
        return mxl_probs(data, params)
    if isinstance(params, MnlParams):
        return mnl_probs(data, params)
    raise TypeError(f"unknown parameter type {type(params).__name__}")


def mixture_components(X: np.ndarray, Z, params: ModelParams):
    """Express any family as a finite mixture of MNL components.

    Returns ``(weights, betas, ascs)`` with weights shaped ``(..., C)`` (one row
    per observation when ``X`` is batched). MNL is one component, LCM and MoE
    are K, simulated mixed logit is R equally weighted draws.
    """
    batch = X.shape[:-2]
    if isinstance(params, MnlParams):
        return np.ones(batch + (1,)), params.beta[None, :], params.asc[None, :]
    if isinstance(params, LcmParams):
        return np.broadcast_to(params.class_weights(), batch + (params.n_classes,)), params.betas, params.ascs
    if isinstance(params, MoeParams):
        if Z is None:
            Z = np.zeros(batch + (0,))
        return gate_weights(Z, params), params.betas, params.ascs
    if isinstance(params, MxlParams):
        B = params.coefficient_draws()
        R = B.shape[0]
        return (np.full(batch + (R,), 1.0 / R), B,
                np.broadcast_to(params.asc, (R, params.asc.shape[0])))
    raise TypeError(f"unknown parameter type {type(params).__name__}")


def mnl_loglik_gradient(x: np.ndarray, chosen: int, params: MnlParams) -> np.ndarray:
    """Gradient of ``log P(chosen)`` w.r.t. ``beta`` for one observation: ``x_y - sum_j P_j x_j``."""
    p = mnl_probs(x, params)
    return x[chosen] - p @ x
