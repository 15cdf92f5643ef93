"""Synthetic choice markets with planted consumer segments.

Consumers draw covariates from truncated normals, a segment from a softmax
gate on those covariates, and on every choice occasion pick the alternative
with the highest utility ``x . beta_segment + Gumbel noise``. The default
market has four segments whose shares, attribute moments, price elasticities
and discount response are calibrated to the retail targets below.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import optimize, stats
from scipy.special import log_softmax, softmax

from .data import ChoiceDataset
from .models import MnlParams, MoeParams

BLOCK = 4096

# Retail summary statistics the default market reproduces.
PRICE_RANGE = (5.99, 499.99)
TARGET_MEANS = {"price": 120.50, "discount": 0.1075, "loyalty": 7.8, "age": 35.6, "income": 55.0}
TARGET_SHARES = {"price_sensitive": 0.352, "brand_loyal": 0.254,
                 "promotion_driven": 0.201, "feature_oriented": 0.193}
TARGET_ELASTICITIES = {"price_sensitive": -2.35, "brand_loyal": -0.75,
                       "promotion_driven": -1.9, "feature_oriented": -1.1}
TARGET_DISCOUNT_DELTAS = {0.05: 2.1, 0.10: 4.8, 0.15: 7.9, 0.20: 15.3, 0.25: 22.7}


@dataclass(frozen=True)
class TruncNormal:
    """Normal truncated to ``[low, high]`` whose *truncated* mean is ``mean``."""

    mean: float
    sd: float
    low: float
    high: float
    integer: bool = False

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        loc = _truncnorm_loc(self.mean, self.sd, self.low, self.high)
        a, b = (self.low - loc) / self.sd, (self.high - loc) / self.sd
        x = stats.truncnorm.ppf(rng.random(size), a, b, loc=loc, scale=self.sd)
        x = np.clip(x, self.low, self.high)
        return np.round(x) if self.integer else x


@lru_cache(maxsize=256)
def _truncnorm_loc(mean: float, sd: float, low: float, high: float) -> float:
    def gap(loc):
        return stats.truncnorm.mean((low - loc) / sd, (high - loc) / sd, loc=loc, scale=sd) - mean
    return float(optimize.brentq(gap, low - 5 * sd, high + 5 * sd, xtol=1e-12))


@dataclass(frozen=True)
class DiscountThreshold:
    """Utility ``boost`` for the segment's alternatives discounted strictly beyond ``knee``."""

    knee: float = 0.20
    boost: float = 0.0
    segment: int = 2


@dataclass
class MarketSpec:
    """Ground-truth market definition.

    ``segment_betas`` is ``(K, d_x)`` over ``attribute_names``;
    ``gate_gammas`` is ``(K-1, d_z+1)`` over ``[1] + covariate names`` with the
    last segment as reference. Its intercepts are shifted at generation time
    so the expected segment shares equal ``segment_shares``.
    """

    n_consumers: int
    segment_names: tuple[str, ...]
    segment_shares: tuple[float, ...]
    segment_betas: np.ndarray
    gate_gammas: np.ndarray
    covariate_distributions: dict[str, TruncNormal]
    attribute_names: tuple[str, ...] = ("price", "discount", "brand", "quality", "deep_discount")
    price: TruncNormal = TruncNormal(120.50, 45.2, *PRICE_RANGE)
    discount: TruncNormal = TruncNormal(0.1075, 0.054, 0.0, 0.50)
    indicator_probs: dict[str, float] = field(default_factory=lambda: {"brand": 0.4, "quality": 0.4})
    segment_ascs: np.ndarray | None = None
    n_obs_per_consumer: int = 1
    J: int = 3
    discount_threshold: DiscountThreshold | None = None
    regions: tuple[str, ...] = ("midwest", "northeast", "south", "west")
    region_probs: tuple[float, ...] = (0.21, 0.17, 0.38, 0.24)
    emit_elasticity_feature: bool = False
    seed: int = 0

    def __post_init__(self):
        self.segment_betas = np.asarray(self.segment_betas, dtype=float)
        K = len(self.segment_names)
        self.gate_gammas = np.asarray(self.gate_gammas, dtype=float).reshape(
            K - 1, len(self.covariate_distributions) + 1)
        if self.segment_ascs is None:
            self.segment_ascs = np.zeros((K, self.J - 1))
        self.segment_ascs = np.asarray(self.segment_ascs, dtype=float)
        if abs(sum(self.segment_shares) - 1) > 1e-9 or len(self.segment_shares) != K:
            raise ValueError("segment_shares must have K entries summing to 1")
        if self.segment_betas.shape != (K, len(self.attribute_names)):
            raise ValueError("segment_betas must be (K, number of attributes)")
        if self.gate_gammas.shape[1] != len(self.covariate_distributions) + 1:
            raise ValueError("gate_gammas must have d_z + 1 columns")
        if self.segment_ascs.shape != (K, self.J - 1):
            raise ValueError("segment_ascs must be (K, J-1)")
        if self.price.low < PRICE_RANGE[0] or self.price.high > PRICE_RANGE[1]:
            raise ValueError(f"price support must lie within {PRICE_RANGE}")
        if self.n_consumers < 1 or self.n_obs_per_consumer < 1 or self.J < 2:
            raise ValueError("invalid market dimensions")

    @property
    def n_segments(self) -> int:
        return len(self.segment_names)

    @property
    def covariate_names(self) -> list[str]:
        return list(self.covariate_distributions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["segment_betas"] = self.segment_betas.tolist()
        d["gate_gammas"] = self.gate_gammas.tolist()
        d["segment_ascs"] = self.segment_ascs.tolist()
        return d


@dataclass
class GroundTruth:
    """Out-of-band truth: never part of the model-facing dataset."""

    segments: np.ndarray            # per observation
    consumer_segments: np.ndarray   # per consumer
    params: MoeParams               # planted gate (after share blending) and experts
    segment_names: tuple[str, ...]
    spec: MarketSpec

    def to_dict(self) -> dict:
        from .serialize import params_to_dict
        return {
            "segment_names": list(self.segment_names),
            "segments": self.segments.tolist(),
            "consumer_segments": self.consumer_segments.tolist(),
            "planted_params": params_to_dict(self.params),
            "market": self.spec.to_dict(),
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _standardized_gate(coefs: dict[str, dict[str, float]], dists: dict[str, TruncNormal],
                       segments: list[str]) -> np.ndarray:
    """Gate rows from per-standard-deviation effects, centred at the covariate means."""
    names = list(dists)
    gamma = np.zeros((len(segments) - 1, len(names) + 1))
    for k, seg in enumerate(segments[:-1]):
        for name, c in coefs.get(seg, {}).items():
            j = names.index(name)
            gamma[k, j + 1] = c / dists[name].sd
            gamma[k, 0] -= c * dists[name].mean / dists[name].sd
    return gamma


CONSUMER_COVARIATES = {
    "age": TruncNormal(35.6, 12.5, 18.0, 70.0),
    "income": TruncNormal(55.0, 15.0, 15.0, 120.0),
    "household_size": TruncNormal(2.6, 1.3, 1.0, 8.0, integer=True),
    "loyalty": TruncNormal(7.8, 2.1, 1.0, 10.0),
    "purchase_frequency": TruncNormal(4.3, 2.7, 1.0, 15.0),
}

# Per-standard-deviation gate effects; feature_oriented is the reference.
DEFAULT_GATE = {
    "price_sensitive": {"income": -6.0, "age": -3.0, "loyalty": -3.0},
    "brand_loyal": {"loyalty": 7.5, "age": 3.0, "income": -1.5},
    "promotion_driven": {"purchase_frequency": 6.0, "household_size": 3.0, "income": -3.0},
}

# Columns: price ($), discount (fraction), brand flag, quality flag, deep-discount flag.
# Price coefficients are frozen output of calibrate_price_coefficients(); the
# discount slope and boost of the promotion segment come from calibrate_discount_response().
DEFAULT_BETAS = {
    "price_sensitive": [-0.026512, 1.5, 0.3, 0.3, 0.0],
    "brand_loyal": [-0.009042, 0.3, 2.5, 0.3, 0.0],
    "promotion_driven": [-0.021668, 2.258796, 0.2, 0.3, 0.370963],
    "feature_oriented": [-0.013097, 0.5, 0.3, 2.5, 0.0],
}


def default_market(n_consumers: int = 20_000, seed: int = 0, n_obs_per_consumer: int = 1) -> MarketSpec:
    """Four-segment retail market (price-sensitive, brand-loyal,
    promotion-driven, feature-oriented)."""
    names = list(TARGET_SHARES)
    return MarketSpec(
        n_consumers=n_consumers,
        segment_names=tuple(names),
        segment_shares=tuple(TARGET_SHARES.values()),
        segment_betas=np.array([DEFAULT_BETAS[s] for s in names]),
        gate_gammas=_standardized_gate(DEFAULT_GATE, CONSUMER_COVARIATES, names),
        covariate_distributions=dict(CONSUMER_COVARIATES),
        discount_threshold=DiscountThreshold(knee=0.20, boost=DEFAULT_BETAS["promotion_driven"][4], segment=2),
        n_obs_per_consumer=n_obs_per_consumer,
        seed=seed,
    )


def two_segment_market(n_consumers: int = 20_000, seed: int = 0, gate_strength: float = 1.5) -> MarketSpec:
    """Two segments with price coefficients -2.0 and -0.4 and a gate on income only.

    Prices are low-ticket (mean $10, sd $1) so the per-dollar coefficients
    give moderate utility differences.
    """
    dists = {"age": CONSUMER_COVARIATES["age"], "income": CONSUMER_COVARIATES["income"]}
    names = ["price_sensitive", "price_insensitive"]
    return MarketSpec(
        n_consumers=n_consumers,
        segment_names=tuple(names),
        segment_shares=(0.5, 0.5),
        segment_betas=np.array([[-2.0, 0.5, 1.0], [-0.4, 0.5, 1.0]]),
        gate_gammas=_standardized_gate({"price_sensitive": {"income": -gate_strength}}, dists, names),
        covariate_distributions=dists,
        attribute_names=("price", "discount", "brand"),
        price=TruncNormal(10.0, 1.0, 6.0, 14.0),
        indicator_probs={"brand": 0.5},
        seed=seed,
    )


def homogeneous_market(n_consumers: int = 20_000, seed: int = 0) -> MarketSpec:
    """Single-segment MNL market with the default attributes and covariates."""
    return MarketSpec(
        n_consumers=n_consumers,
        segment_names=("all",),
        segment_shares=(1.0,),
        segment_betas=np.array([[-0.018, 1.0, 1.0, 1.0, 0.0]]),
        gate_gammas=np.zeros((0, len(CONSUMER_COVARIATES) + 1)),
        covariate_distributions=dict(CONSUMER_COVARIATES),
        seed=seed,
    )


PRESETS = {"four-segment": default_market, "two-segment": two_segment_market, "homogeneous": homogeneous_market}


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def gumbel_max_choices(V: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Argmax of utilities plus i.i.d. standard Gumbel noise (last axis)."""
    return np.argmax(V + rng.gumbel(size=V.shape), axis=-1)


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block])))


def blend_gate_intercepts(gamma: np.ndarray, Z: np.ndarray, shares, iters: int = 500) -> np.ndarray:
    """Shift gate intercepts so the average gate probability over ``Z`` equals ``shares``."""
    K = len(shares)
    if K == 1:
        return gamma
    target = np.log(np.asarray(shares, dtype=float))
    Zt = np.hstack([np.ones((len(Z), 1)), Z])
    g = gamma.copy()
    for _ in range(iters):
        scores = np.hstack([Zt @ g.T, np.zeros((len(Z), 1))])
        mean_p = softmax(scores, axis=1).mean(axis=0)
        step = target - np.log(mean_p)
        step = step[:-1] - step[-1]
        g[:, 0] += step
        if np.max(np.abs(step)) < 1e-13:
            break
    return g


def _attributes(spec: MarketSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    J = spec.J
    cols = []
    for name in spec.attribute_names:
        if name == "price":
            cols.append(spec.price.sample(rng, (n, J)))
        elif name == "discount":
            cols.append(spec.discount.sample(rng, (n, J)))
        elif name == "deep_discount":
            cols.append(None)
        else:
            cols.append((rng.random((n, J)) < spec.indicator_probs.get(name, 0.5)).astype(float))
    if "deep_discount" in spec.attribute_names:
        knee = spec.discount_threshold.knee if spec.discount_threshold else 0.20
        disc = cols[spec.attribute_names.index("discount")]
        cols[spec.attribute_names.index("deep_discount")] = (disc > knee).astype(float)
    return np.stack(cols, axis=2)


def generate(spec: MarketSpec) -> tuple[ChoiceDataset, GroundTruth]:
    """Draw a dataset from ``spec``; ground truth is returned separately.

    Consumers are processed in blocks of 4096, each with its own counter-based
    generator keyed on ``(seed, block)``, so any block can be regenerated
    independently of the others.
    """
    C, T, J, K = spec.n_consumers, spec.n_obs_per_consumer, spec.J, spec.n_segments
    n_blocks = -(-C // BLOCK)
    rngs = [_block_rng(spec.seed, b) for b in range(n_blocks)]
    sizes = [min(BLOCK, C - b * BLOCK) for b in range(n_blocks)]

    cov_names = spec.covariate_names
    Zc_parts, region_parts = [], []
    for rng, m in zip(rngs, sizes):
        Zc_parts.append(np.column_stack([spec.covariate_distributions[c].sample(rng, m) for c in cov_names])
                        if cov_names else np.empty((m, 0)))
        region_parts.append(rng.choice(len(spec.regions), size=m, p=spec.region_probs))
    Zc = np.vstack(Zc_parts)
    gamma = blend_gate_intercepts(spec.gate_gammas, Zc, spec.segment_shares)
    truth_params = MoeParams(gamma, spec.segment_betas, spec.segment_ascs,
                             spec.attribute_names, tuple(cov_names))

    X_parts, y_parts, seg_parts, cseg_parts, day_parts = [], [], [], [], []
    start = 0
    for rng, m in zip(rngs, sizes):
        z = Zc[start: start + m]
        if K > 1:
            lg = log_softmax(np.hstack([np.hstack([np.ones((m, 1)), z]) @ gamma.T, np.zeros((m, 1))]), axis=1)
            cdf = np.cumsum(np.exp(lg), axis=1)
            seg = np.minimum((rng.random(m)[:, None] > cdf).sum(axis=1), K - 1)
        else:
            seg = np.zeros(m, dtype=np.int64)
        seg_obs = np.repeat(seg, T)
        X = _attributes(spec, rng, m * T)
        V = np.einsum("njd,nd->nj", X, spec.segment_betas[seg_obs]) + \
            np.hstack([spec.segment_ascs, np.zeros((K, 1))])[seg_obs]
        y = gumbel_max_choices(V, rng)
        first_day = rng.integers(17_500, 17_900, size=m)
        gaps = rng.integers(1, 60, size=(m, T))
        days = first_day[:, None] + np.cumsum(gaps, axis=1) - gaps[:, :1]
        X_parts.append(X)
        y_parts.append(y)
        seg_parts.append(seg_obs)
        cseg_parts.append(seg)
        day_parts.append(days.reshape(-1))
        start += m

    X = np.concatenate(X_parts)
    Z = np.repeat(Zc, T, axis=0)
    segments = np.concatenate(seg_parts)
    covariates = list(cov_names)
    if spec.emit_elasticity_feature:
        # noisy consumer-level price-response measure from "historical" data
        rng_e = _block_rng(spec.seed, n_blocks)
        own = spec.segment_betas[segments, spec.attribute_names.index("price")] * \
            X[:, :, spec.attribute_names.index("price")].mean(axis=1) * (1 - 1 / J)
        Z = np.hstack([Z, (own + rng_e.normal(0, 0.3, len(own)))[:, None]])
        covariates.append("hist_price_elasticity")
    regions = np.array(spec.regions, dtype=object)[np.repeat(np.concatenate(region_parts), T)]
    ids = np.repeat(np.array([f"c{c:06d}" for c in range(C)], dtype=object), T)
    ds = ChoiceDataset(
        X=X, Z=Z, chosen=np.concatenate(y_parts), consumer_ids=ids,
        alt_feature_names=list(spec.attribute_names), covariate_names=covariates,
        alternatives=[str(j) for j in range(J)], timestamps=np.concatenate(day_parts),
        categoricals={"region": regions},
    )
    truth = GroundTruth(segments=segments, consumer_segments=np.concatenate(cseg_parts),
                        params=truth_params, segment_names=spec.segment_names, spec=spec)
    return ds, truth


def generate_mixed_logit(n: int, mean, std, seed: int = 0, J: int = 3,
                         price: TruncNormal = TruncNormal(10.0, 1.0, 6.0, 14.0)) -> ChoiceDataset:
    """Observations with independently drawn normal coefficients per observation.

    Attributes are ``price`` (truncated normal) followed by standard-normal
    columns for the remaining coefficients.
    """
    rng = np.random.default_rng(seed)
    mean, std = np.asarray(mean, float), np.asarray(std, float)
    d = len(mean)
    X = np.concatenate([price.sample(rng, (n, J))[:, :, None], rng.standard_normal((n, J, d - 1))], axis=2)
    B = mean + std * rng.standard_normal((n, d))
    y = gumbel_max_choices(np.einsum("njd,nd->nj", X, B), rng)
    names = ["price"] + [f"x{k}" for k in range(1, d)]
    return ChoiceDataset(X=X, Z=np.empty((n, 0)), chosen=y, consumer_ids=[f"c{i:06d}" for i in range(n)],
                         alt_feature_names=names, covariate_names=[], alternatives=[str(j) for j in range(J)])


def generate_mnl(n: int, beta, seed: int = 0, J: int = 3, asc=None) -> ChoiceDataset:
    """Standard-normal attributes with choices from a single MNL."""
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta, float)
    X = rng.standard_normal((n, J, len(beta)))
    asc = np.zeros(J - 1) if asc is None else np.asarray(asc, float)
    y = gumbel_max_choices(X @ beta + np.append(asc, 0.0), rng)
    return ChoiceDataset(X=X, Z=np.empty((n, 0)), chosen=y, consumer_ids=[f"c{i:06d}" for i in range(n)],
                         alt_feature_names=[f"x{k}" for k in range(len(beta))], covariate_names=[],
                         alternatives=[str(j) for j in range(J)])


# ---------------------------------------------------------------------------
# Calibration helpers (used to derive the frozen constants above)
# ---------------------------------------------------------------------------

def segment_mean_elasticity(X: np.ndarray, beta: np.ndarray, price_idx: int = 0) -> float:
    """Mean own-price elasticity ``beta_p * p * (1 - P)`` over observations and alternatives."""
    P = softmax(X @ beta, axis=-1)
    return float(np.mean(beta[price_idx] * X[:, :, price_idx] * (1 - P)))


def calibrate_price_coefficients(spec: MarketSpec, targets, n: int = 100_000, seed: int = 12345) -> np.ndarray:
    """Bisect each segment's price coefficient so its realized mean own-price
    elasticity on a fresh attribute sample matches ``targets``."""
    X = _attributes(spec, np.random.default_rng(seed), n)
    pi = spec.attribute_names.index("price")
    out = []
    for k, target in enumerate(targets):
        beta = spec.segment_betas[k].copy()

        def gap(bp):
            b = beta.copy()
            b[pi] = bp
            return segment_mean_elasticity(X, b, pi) - target

        out.append(optimize.brentq(gap, -1.0, 0.0, xtol=1e-9))
    return np.array(out)


def discount_delta(beta_discount: float, discount: float, J: int = 3, boost: float = 0.0) -> float:
    """Probability increase (points) for one of J otherwise identical alternatives."""
    a = beta_discount * discount + boost
    return 100 * (np.exp(a) / (np.exp(a) + J - 1) - 1 / J)


def calibrate_discount_response(J: int = 3) -> tuple[float, float]:
    """Discount slope matching the 15% response and the boost matching the 25% response."""
    slope = optimize.brentq(lambda b: discount_delta(b, 0.15, J) - TARGET_DISCOUNT_DELTAS[0.15], 0.0, 50.0, xtol=1e-12)
    boost = optimize.brentq(lambda c: discount_delta(slope, 0.25, J, c) - TARGET_DISCOUNT_DELTAS[0.25], 0.0, 10.0,
                            xtol=1e-12)
    return slope, boost
