import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moechoice.models import (
    DimensionError,
    LcmParams,
    MnlParams,
    MoeParams,
    MxlParams,
    choice_probabilities,
    gate_weights,
    log_softmax,
    mixture_components,
    mnl_loglik_gradient,
    mnl_probs,
    moe_probs,
    mxl_probs,
)

from conftest import random_dataset, random_mnl, random_moe

finite = st.floats(-50, 50, allow_nan=False)


def mp_softmax(v):
    with mpmath.workdps(50):
        e = [mpmath.exp(mpmath.mpf(float(x))) for x in v]
        s = mpmath.fsum(e)
        return np.array([float(x / s) for x in e])


class TestMnl:
    def test_against_high_precision(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            X = rng.normal(size=(4, 3)) * 5
            p = MnlParams(rng.normal(size=3), rng.normal(size=3))
            V = X @ p.beta + np.append(p.asc, 0)
            np.testing.assert_allclose(mnl_probs(X, p), mp_softmax(V), rtol=1e-12)

    def test_huge_utilities(self):
        X = np.array([[1000.0], [999.0], [-1000.0]])
        p = MnlParams(np.array([1.0]), np.zeros(2))
        P = mnl_probs(X, p)
        assert np.all(np.isfinite(P))
        np.testing.assert_allclose(P, mp_softmax([1000.0, 999.0, -1000.0]), rtol=1e-12)

    def test_translation_invariance_of_log_softmax(self):
        v = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(log_softmax(v), log_softmax(v + 700.0), atol=1e-12)

    def test_dimension_errors(self):
        p = MnlParams(np.ones(2), np.zeros(2))
        with pytest.raises(DimensionError):
            mnl_probs(np.ones((3, 3)), p)
        with pytest.raises(DimensionError):
            mnl_probs(np.ones((4, 2)), p)

    def test_nan_utility_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            mnl_probs(np.array([[np.nan], [1.0]]), MnlParams(np.ones(1), np.zeros(1)))

    def test_gradient_formula(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(3, 2))
        p = MnlParams(rng.normal(size=2), rng.normal(size=2))
        P = mnl_probs(X, p)
        np.testing.assert_allclose(mnl_loglik_gradient(X, 1, p), X[1] - P @ X, atol=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(arrays(float, (5, 3), elements=finite), arrays(float, 3, elements=st.floats(-3, 3)))
    def test_simplex(self, X, beta):
        P = mnl_probs(X, MnlParams(beta, np.zeros(4)))
        assert np.all(P >= 0)
        assert abs(P.sum() - 1) < 1e-12


def brute_force_moe(x, z, params):
    K = params.n_experts
    scores = [float(np.dot(np.append(1, z), params.gamma[k])) for k in range(K - 1)] + [0.0]
    g = mp_softmax(scores)
    total = np.zeros(x.shape[0])
    for k in range(K):
        V = x @ params.betas[k] + np.append(params.ascs[k], 0)
        total += g[k] * mp_softmax(V)
    return total, g


class TestMoe:
    def test_against_brute_force_loops(self):
        for seed in range(10):
            p = random_moe(K=3, seed=seed, scale=2.0)
            ds = random_dataset(n=5, seed=seed)
            for n in range(5):
                expect, g = brute_force_moe(ds.X[n], ds.Z[n], p)
                np.testing.assert_allclose(moe_probs(ds[n], p), expect, rtol=1e-12)
                np.testing.assert_allclose(gate_weights(ds.Z[n], p), g, rtol=1e-12)

    def test_batch_matches_single(self):
        p = random_moe(K=4, seed=1)
        ds = random_dataset(n=30, seed=1)
        batch = moe_probs(ds, p)
        for n in range(30):
            np.testing.assert_allclose(batch[n], moe_probs(ds[n], p), rtol=1e-13)

    def test_k1_equals_mnl(self):
        mnl = random_mnl(seed=3)
        moe = MoeParams(np.zeros((0, 3)), mnl.beta[None], mnl.asc[None])
        ds = random_dataset(n=20, seed=3)
        np.testing.assert_allclose(moe_probs(ds, moe), mnl_probs(ds, mnl), atol=1e-15)

    def test_extreme_gate(self):
        p = MoeParams(np.array([[800.0, 0.0]]), np.array([[1.0], [-1.0]]), np.zeros((2, 1)))
        P = moe_probs(np.array([[1.0], [0.0]]), p, z=np.array([0.0]))
        assert np.all(np.isfinite(P))
        np.testing.assert_allclose(P, mp_softmax([1.0, 0.0]), rtol=1e-12)

    def test_needs_covariates(self):
        p = random_moe(K=2)
        with pytest.raises(DimensionError):
            moe_probs(np.ones((3, 2)), p)
        with pytest.raises(DimensionError):
            gate_weights(np.ones(5), p)

    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            MoeParams(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2)))

    def test_frozen(self):
        p = random_moe()
        with pytest.raises(ValueError):
            p.betas[0, 0] = 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 5), st.integers(0, 10_000), st.floats(0.1, 20.0))
    def test_simplex_property(self, K, J, seed, scale):
        p = random_moe(K=K, J=J, seed=seed, scale=scale)
        ds = random_dataset(n=10, J=J, seed=seed)
        P = moe_probs(ds, p)
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
        G = gate_weights(ds.Z, p)
        np.testing.assert_allclose(G.sum(axis=1), 1.0, atol=1e-12)


class TestLcmMxl:
    def test_lcm_is_mixture(self):
        rng = np.random.default_rng(0)
        p = LcmParams(rng.normal(size=2), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
        X = rng.normal(size=(3, 2))
        w = p.class_weights()
        expect = sum(w[k] * mnl_probs(X, MnlParams(p.betas[k], p.ascs[k])) for k in range(3))
        np.testing.assert_allclose(choice_probabilities(X, p), expect, rtol=1e-13)

    def test_mxl_zero_std_r1(self):
        mnl = random_mnl(seed=4)
        mxl = MxlParams(mnl.beta, np.full(2, -np.inf), mnl.asc, draws=1)
        ds = random_dataset(n=15, seed=4)
        np.testing.assert_allclose(mxl_probs(ds, mxl), mnl_probs(ds, mnl), atol=1e-15)

    def test_mxl_average_over_draws(self):
        mxl = MxlParams(np.array([-1.0, 0.5]), np.log([0.3, 0.2]), np.zeros(2), draws=7, seed=3)
        X = np.random.default_rng(1).normal(size=(3, 2))
        B = mxl.coefficient_draws()
        expect = np.mean([mnl_probs(X, MnlParams(b, np.zeros(2))) for b in B], axis=0)
        np.testing.assert_allclose(mxl_probs(X, mxl), expect, rtol=1e-13)

    def test_lognormal_price_negative(self):
        mxl = MxlParams(np.array([0.0, 0.5]), np.log([0.3, 0.2]), np.zeros(2), draws=50, lognormal_price=True)
        assert np.all(mxl.coefficient_draws()[:, 0] < 0)

    def test_mxl_validation(self):
        with pytest.raises(ValueError):
            MxlParams(np.zeros(2), np.zeros(2), np.zeros(1), draws=0)
        with pytest.raises(ValueError):
            MxlParams(np.zeros(2), np.array([np.nan, 0]), np.zeros(1))

    def test_common_draws_reproducible(self):
        a = MxlParams(np.zeros(2), np.zeros(2), np.zeros(1), draws=5, seed=9)
        np.testing.assert_array_equal(a.normal_draws(), a.normal_draws())


def test_mixture_components_reconstruct_probabilities():
    ds = random_dataset(n=12, seed=5)
    fams = [random_mnl(seed=5), random_moe(K=3, seed=5),
            LcmParams(np.array([0.2, -0.1]), np.ones((3, 2)) * [[-1], [0.5], [1]], np.zeros((3, 2))),
            MxlParams(np.array([-1.0, 0.5]), np.log([0.3, 0.2]), np.zeros(2), draws=9)]
    for p in fams:
        w, betas, ascs = mixture_components(ds.X, ds.Z, p)
        manual = sum(w[:, c, None] * mnl_probs(ds.X, MnlParams(betas[c], ascs[c])) for c in range(betas.shape[0]))
        np.testing.assert_allclose(manual, choice_probabilities(ds, p), rtol=1e-12)
