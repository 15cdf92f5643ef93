import warnings
from dataclasses import replace

import numpy as np
import pytest

from moechoice.data import ChoiceDataset
from moechoice.estimation import (
    EstimationError,
    FitConfig,
    canonicalize,
    e_step,
    expected_complete_loglik,
    fit_lcm,
    fit_mnl,
    fit_moe,
    fit_mxl,
    log_likelihood,
    m_step,
    mnl_gradient,
    moe_from_vector,
    moe_gradient,
    moe_to_vector,
    mxl_loglik_and_gradient,
    split_expert,
)
from moechoice.models import LcmParams, MnlParams, MoeParams, MxlParams, choice_probabilities
from moechoice.optim import ascend
from moechoice.synthgen import generate, generate_mixed_logit, generate_mnl, two_segment_market

from conftest import random_dataset, random_mnl, random_moe

FAST = FitConfig(n_restarts=2, max_em_iters=200)


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def planted_moe_data(n=3000, seed=0):
    return generate(two_segment_market(n, seed=seed))


class TestOptim:
    def quad(self, theta, order):
        A = np.array([[3.0, 1.0], [1.0, 2.0]])
        b = np.array([1.0, -1.0])
        f = -0.5 * theta @ A @ theta + b @ theta
        if order == 0:
            return f
        g = b - A @ theta
        return (f, g) if order == 1 else (f, g, -A)

    @pytest.mark.parametrize("method", ["newton", "gradient", "adam"])
    def test_converges_to_quadratic_max(self, method):
        res = ascend(self.quad, np.zeros(2), method=method, max_iter=5000, grad_tol=1e-8,
                     step_size=0.3 if method != "newton" else 1.0)
        np.testing.assert_allclose(res.x, np.linalg.solve([[3, 1], [1, 2]], [1, -1]), atol=1e-6)
        assert np.all(np.diff(res.trace) >= 0)
        assert res.converged

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            ascend(self.quad, np.zeros(2), method="sgd")


class TestLikelihood:
    def test_hand_computed_mnl(self):
        X = np.array([[[1.0], [0.0]], [[0.0], [2.0]]])
        ds = ChoiceDataset(X=X, Z=np.zeros((2, 0)), chosen=np.array([0, 0]), consumer_ids=["a", "b"],
                           alt_feature_names=["price"], covariate_names=[], alternatives=["0", "1"])
        p = MnlParams(np.array([-1.0]), np.array([0.5]))
        expect = np.log(np.exp(-0.5) / (np.exp(-0.5) + 1)) + np.log(np.exp(0.5) / (np.exp(0.5) + np.exp(-2)))
        assert log_likelihood(ds, p) == pytest.approx(expect, abs=1e-12)

    def test_extreme_utility_keeps_finite_log_probability(self):
        X = np.array([[[1000.0], [0.0]]])
        ds = ChoiceDataset(X=X, Z=np.zeros((1, 0)), chosen=np.array([1]), consumer_ids=["a"],
                           alt_feature_names=["price"], covariate_names=[], alternatives=["0", "1"])
        assert log_likelihood(ds, MnlParams(np.array([10.0]), np.zeros(1))) == pytest.approx(-10_000.0, rel=1e-15)

    def test_mnl_gradient_matches_fd(self):
        ds = random_dataset(n=50, seed=1)
        p = random_mnl(seed=1)
        f = lambda t: log_likelihood(ds, MnlParams(t[:2], t[2:]))
        theta = np.concatenate([p.beta, p.asc])
        np.testing.assert_allclose(mnl_gradient(ds, p), central_diff(f, theta), rtol=1e-5, atol=1e-6)

    def test_moe_gradient_matches_fd(self):
        ds = random_dataset(n=40, seed=2)
        p = random_moe(K=3, seed=2)
        f = lambda t: log_likelihood(ds, moe_from_vector(t, p))
        np.testing.assert_allclose(moe_gradient(ds, p), central_diff(f, moe_to_vector(p)), rtol=1e-5, atol=1e-6)

    def test_mxl_gradient_matches_fd(self):
        ds = random_dataset(n=40, seed=3)
        for logn in (False, True):
            p = MxlParams(np.array([-0.3, 0.4]), np.log([0.5, 0.3]), np.array([0.1, -0.2]), draws=20,
                          lognormal_price=logn)
            f = lambda t: mxl_loglik_and_gradient(ds, replace(p, mean=t[:2], log_std=t[2:4], asc=t[4:]))[0]
            theta = np.concatenate([p.mean, p.log_std, p.asc])
            np.testing.assert_allclose(mxl_loglik_and_gradient(ds, p)[1], central_diff(f, theta), rtol=1e-5, atol=1e-6)


class TestMnlFit:
    def test_recovers_planted(self):
        beta = np.array([-1.0, 0.8, 0.5])
        ds = generate_mnl(20_000, beta, seed=1, asc=[0.2, -0.1])
        fit = fit_mnl(ds)
        assert fit.converged
        np.testing.assert_allclose(fit.params.beta, beta, atol=0.06)
        np.testing.assert_allclose(fit.params.asc, [0.2, -0.1], atol=0.06)
        assert np.all(np.diff(fit.ll_trace) >= 0)

    def test_gradient_zero_at_optimum(self):
        ds = random_dataset(n=300, seed=4)
        fit = fit_mnl(ds)
        assert np.max(np.abs(mnl_gradient(ds, fit.params))) / len(ds) < 1e-6

    def test_collinear(self):
        ds = random_dataset(n=50, d_x=2, seed=5)
        X = ds.X.copy()
        X[:, :, 1] = 2 * X[:, :, 0]
        with pytest.raises(EstimationError, match="rank"):
            fit_mnl(replace(ds, X=X))

    def test_separation(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(100, 2, 1))
        chosen = (X[:, 1, 0] > X[:, 0, 0]).astype(int)
        ds = ChoiceDataset(X=X, Z=np.zeros((100, 0)), chosen=chosen, consumer_ids=[str(i) for i in range(100)],
                           alt_feature_names=["x"], covariate_names=[], alternatives=["0", "1"])
        with pytest.raises(EstimationError, match="separation"):
            fit_mnl(ds, FitConfig(max_iters=500))


class TestEm:
    def test_e_step_brute_force(self):
        ds = random_dataset(n=20, seed=6)
        p = random_moe(K=3, seed=6)
        R = e_step(ds, p)
        for n in range(20):
            from moechoice.models import gate_weights, mnl_probs
            g = gate_weights(ds.Z[n], p)
            lik = np.array([mnl_probs(ds.X[n], p.expert(k))[ds.chosen[n]] for k in range(3)])
            np.testing.assert_allclose(R[n], g * lik / np.sum(g * lik), rtol=1e-12)

    def test_m_step_increases_q(self):
        ds = random_dataset(n=300, seed=7)
        p = random_moe(K=3, seed=7, scale=0.5)
        R = e_step(ds, p)
        q0 = expected_complete_loglik(ds, R, p)
        q1 = expected_complete_loglik(ds, R, m_step(ds, R, p))
        assert q1 >= q0

    def test_moe_trace_monotone_and_stop_rule(self):
        ds, _ = planted_moe_data(2000, seed=1)
        fit = fit_moe(ds, replace(FAST, k_experts=2))
        trace = np.array(fit.ll_trace)
        assert np.all(np.diff(trace) >= -1e-8)
        assert fit.converged
        assert abs(trace[-1] - trace[-2]) / abs(trace[-2]) < 1e-6

    def test_plain_em_monotone(self):
        ds, _ = planted_moe_data(1000, seed=2)
        fit = fit_moe(ds, replace(FAST, k_experts=2, accelerate=False, n_restarts=1))
        assert np.all(np.diff(fit.ll_trace) >= -1e-8)

    def test_nested_never_below_mnl(self):
        ds = random_dataset(n=400, seed=8)
        mnl = fit_mnl(ds).final_ll
        for K in (2, 3):
            assert fit_moe(ds, replace(FAST, k_experts=K)).final_ll >= mnl - 1e-6
            assert fit_lcm(ds, replace(FAST, k_experts=K)).final_ll >= mnl - 1e-6

    def test_split_expert_preserves_likelihood(self):
        ds = random_dataset(n=50, seed=9)
        p = random_moe(K=2, seed=9)
        q = split_expert(p, 0)
        assert q.n_experts == 3
        np.testing.assert_allclose(choice_probabilities(ds, q), choice_probabilities(ds, p), rtol=1e-12)

    def test_canonical_order_keeps_probabilities(self):
        ds = random_dataset(n=30, seed=10)
        p = random_moe(K=4, seed=10)
        c = canonicalize(p)
        assert np.all(np.diff(c.betas[:, 0]) >= 0)
        np.testing.assert_allclose(choice_probabilities(ds, c), choice_probabilities(ds, p), rtol=1e-12)
        lc = LcmParams(np.array([0.3, -0.2]), np.array([[1.0, 0], [-1.0, 0], [0.0, 0]]), np.zeros((3, 2)),
                       ("price", "x1"))
        np.testing.assert_allclose(choice_probabilities(ds, canonicalize(lc)), choice_probabilities(ds, lc),
                                   rtol=1e-12)

    def test_canonical_labels_stable_across_permuted_inits(self):
        ds, _ = planted_moe_data(2000, seed=3)
        a = fit_moe(ds, replace(FAST, k_experts=2, seed=0)).params
        b = fit_moe(ds, replace(FAST, k_experts=2, seed=5)).params
        # same labels: a swap would move price coefficients by about 1.6
        np.testing.assert_allclose(a.betas, b.betas, atol=0.05)

    def test_starved_expert_frozen(self):
        ds = random_dataset(n=200, seed=11)
        p = random_moe(K=2, seed=11)
        R = np.column_stack([np.ones(200), np.zeros(200)])
        with pytest.warns(UserWarning, match="starved"):
            q = m_step(ds, R, p)
        np.testing.assert_array_equal(q.betas[1], p.betas[1])

    def test_separable_gate_does_not_crash(self):
        ds, _ = planted_moe_data(600, seed=4)
        Z = ds.Z.copy()
        Z[:, 0] = np.where(ds.chosen == 0, 5.0, -5.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_moe(replace(ds, Z=Z), replace(FAST, k_experts=2, max_em_iters=60))
        assert np.isfinite(fit.final_ll)
        assert np.all(np.diff(fit.ll_trace) >= -1e-8)

    def test_direct_method_agrees_with_em(self):
        ds, _ = planted_moe_data(1500, seed=5)
        em = fit_moe(ds, replace(FAST, k_experts=2))
        direct = fit_moe(ds, replace(FAST, k_experts=2, max_iters=500), init=em.params, method="direct")
        assert direct.final_ll == pytest.approx(em.final_ll, abs=0.5)

    def test_lcm_recovers_shares(self):
        rng = np.random.default_rng(0)
        n = 8000
        cls = rng.random(n) < 0.3
        X = rng.normal(size=(n, 3, 2))
        beta = np.where(cls[:, None], [-3.0, 1.0], [0.5, 1.0])
        V = np.einsum("njd,nd->nj", X, beta)
        chosen = np.argmax(V + rng.gumbel(size=V.shape), axis=1)
        ds = ChoiceDataset(X=X, Z=np.zeros((n, 0)), chosen=chosen, consumer_ids=[str(i) for i in range(n)],
                           alt_feature_names=["price", "x"], covariate_names=[], alternatives=["0", "1", "2"])
        fit = fit_lcm(ds, replace(FAST, k_experts=2))
        np.testing.assert_allclose(fit.params.class_weights(), [0.3, 0.7], atol=0.05)
        np.testing.assert_allclose(fit.params.betas[:, 0], [-3.0, 0.5], atol=0.3)


class TestMxl:
    def test_recovers_mean_and_std(self):
        ds = generate_mixed_logit(8000, mean=[-1.0, 1.0], std=[0.8, 0.0], seed=2)
        fit = fit_mxl(ds, FitConfig(mxl_draws=200))
        np.testing.assert_allclose(fit.params.mean, [-1.0, 1.0], atol=0.15)
        assert abs(fit.params.std[0] - 0.8) < 0.25

    def test_frozen_std_single_draw_equals_mnl(self):
        ds = random_dataset(n=300, seed=12)
        mnl = fit_mnl(ds)
        init = MxlParams(mnl.params.beta, np.full(2, -np.inf), mnl.params.asc, draws=1,
                         feature_names=ds.alt_feature_names)
        fit = fit_mxl(ds, init=init, freeze_std=True)
        assert fit.final_ll == pytest.approx(mnl.final_ll, abs=1e-6)


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = FitConfig(seed=3, k_candidates=(1, 3))
        path = tmp_path / "c.json"
        import json
        path.write_text(json.dumps(cfg.to_dict()))
        assert FitConfig.from_json(path) == cfg

    def test_rejects(self):
        with pytest.raises(ValueError):
            FitConfig.from_dict({"bogus": 1})
        with pytest.raises(ValueError):
            FitConfig(k_experts=0)
        with pytest.raises(ValueError):
            FitConfig(rel_ll_tol=0)
