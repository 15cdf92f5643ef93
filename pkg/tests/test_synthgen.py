import json
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats
from scipy.special import softmax

from moechoice.models import choice_probabilities
from moechoice.synthgen import (
    BLOCK,
    DEFAULT_BETAS,
    TARGET_SHARES,
    TARGET_ELASTICITIES,
    TARGET_DISCOUNT_DELTAS,
    MarketSpec,
    TruncNormal,
    _attributes,
    blend_gate_intercepts,
    calibrate_discount_response,
    default_market,
    discount_delta,
    generate,
    gumbel_max_choices,
    homogeneous_market,
    segment_mean_elasticity,
    two_segment_market,
)


class TestTruncNormal:
    def test_truncated_mean_hits_target(self):
        d = TruncNormal(120.5, 45.2, 5.99, 499.99)
        x = d.sample(np.random.default_rng(0), 200_000)
        assert x.min() >= 5.99 and x.max() <= 499.99
        assert abs(x.mean() - 120.5) < 0.5

    def test_asymmetric_support(self):
        d = TruncNormal(0.1075, 0.054, 0.0, 0.5)
        x = d.sample(np.random.default_rng(1), 200_000)
        assert x.min() >= 0.0
        assert abs(x.mean() - 0.1075) < 1e-3

    def test_integer(self):
        x = TruncNormal(2.6, 1.3, 1.0, 8.0, integer=True).sample(np.random.default_rng(2), 1000)
        np.testing.assert_array_equal(x, np.round(x))


class TestGumbel:
    def test_frequencies_match_softmax(self):
        V = np.array([0.3, -0.5, 1.1, 0.0])
        rng = np.random.default_rng(0)
        y = gumbel_max_choices(np.broadcast_to(V, (200_000, 4)), rng)
        np.testing.assert_allclose(np.bincount(y, minlength=4) / 200_000, softmax(V), atol=5e-3)


class TestGenerate:
    def test_shapes_and_truth_separate(self):
        ds, truth = generate(default_market(1000, seed=0, n_obs_per_consumer=3))
        assert len(ds) == 3000 and ds.X.shape == (3000, 3, 5)
        assert "segment" not in " ".join(ds.covariate_names)
        assert truth.segments.shape == (3000,)
        np.testing.assert_array_equal(truth.segments[::3], truth.consumer_segments)
        assert list(ds.consumer_ids[:3]) == ["c000000"] * 3
        for c in range(5):
            assert np.all(np.diff(ds.timestamps[3 * c: 3 * c + 3]) > 0)

    def test_deep_discount_indicator(self):
        ds, _ = generate(default_market(500, seed=3))
        np.testing.assert_array_equal(ds.X[:, :, 4], (ds.X[:, :, 1] > 0.20).astype(float))

    def test_deterministic(self):
        a, ta = generate(default_market(5000, seed=9))
        b, tb = generate(default_market(5000, seed=9))
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.chosen, b.chosen)
        np.testing.assert_array_equal(ta.segments, tb.segments)
        c, _ = generate(default_market(5000, seed=10))
        assert not np.array_equal(a.chosen, c.chosen)

    def test_blocks_independent_of_total(self):
        # the first block's covariates do not depend on how many consumers follow
        a, _ = generate(default_market(BLOCK + 10, seed=4))
        b, _ = generate(default_market(2 * BLOCK, seed=4))
        np.testing.assert_array_equal(a.Z[:BLOCK], b.Z[:BLOCK])

    def test_gate_blending_hits_shares(self):
        rng = np.random.default_rng(0)
        Z = rng.normal(size=(5000, 2))
        g = blend_gate_intercepts(np.array([[0.0, 2.0, 0.0], [0.0, 0.0, -1.0]]), Z, (0.5, 0.3, 0.2))
        Zt = np.hstack([np.ones((5000, 1)), Z])
        P = softmax(np.hstack([Zt @ g.T, np.zeros((5000, 1))]), axis=1).mean(axis=0)
        np.testing.assert_allclose(P, [0.5, 0.3, 0.2], atol=1e-12)

    def test_homogeneous_and_two_segment(self):
        ds, truth = generate(homogeneous_market(300, seed=0))
        assert truth.params.n_experts == 1
        ds2, truth2 = generate(two_segment_market(300, seed=0))
        assert ds2.alt_feature_names == ["price", "discount", "brand"]
        np.testing.assert_array_equal(truth2.params.betas[:, 0], [-2.0, -0.4])

    def test_truth_json(self, tmp_path):
        _, truth = generate(two_segment_market(50, seed=0))
        truth.to_json(tmp_path / "t.json")
        d = json.loads((tmp_path / "t.json").read_text())
        assert d["planted_params"]["family"] == "moe" and len(d["segments"]) == 50

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            MarketSpec(10, ("a", "b"), (0.6, 0.6), np.zeros((2, 5)), np.zeros((1, 1)), {})
        with pytest.raises(ValueError, match="price support"):
            MarketSpec(10, ("a",), (1.0,), np.zeros((1, 5)), np.zeros((0, 1)), {},
                       price=TruncNormal(50, 10, 1.0, 100.0))


class TestCalibration:
    def test_price_coefficients_reproduce_elasticity_targets(self):
        spec = default_market()
        X = _attributes(spec, np.random.default_rng(12345), 100_000)
        for k, name in enumerate(spec.segment_names):
            e = segment_mean_elasticity(X, np.array(DEFAULT_BETAS[name]))
            assert e == pytest.approx(TARGET_ELASTICITIES[name], abs=0.01)

    def test_discount_response_anchors(self):
        slope, boost = calibrate_discount_response()
        assert slope == pytest.approx(DEFAULT_BETAS["promotion_driven"][1], abs=1e-5)
        assert boost == pytest.approx(DEFAULT_BETAS["promotion_driven"][4], abs=1e-5)
        assert discount_delta(slope, 0.15) == pytest.approx(TARGET_DISCOUNT_DELTAS[0.15], abs=1e-9)
        assert discount_delta(slope, 0.25, boost=boost) == pytest.approx(TARGET_DISCOUNT_DELTAS[0.25], abs=1e-9)

    def test_discount_delta_closed_form(self):
        assert discount_delta(0.0, 0.1) == 0.0
        assert discount_delta(10.0, 0.1) == pytest.approx(100 * (np.e / (np.e + 2) - 1 / 3))

    def test_planted_shares(self):
        _, truth = generate(default_market(20_000, seed=1))
        shares = np.bincount(truth.segments, minlength=4) / 20_000
        np.testing.assert_allclose(shares, list(TARGET_SHARES.values()), atol=0.015)


class TestGeneratorProperties:
    def test_zero_utilities_give_uniform_shares(self):
        spec = MarketSpec(50_000, ("a",), (1.0,), np.zeros((1, 5)), np.zeros((0, 1)), {}, seed=3)
        ds, _ = generate(spec)
        np.testing.assert_allclose(np.bincount(ds.chosen) / 50_000, 1 / 3, atol=4 * np.sqrt(2 / 9 / 50_000))

    def test_single_segment_refit(self):
        from moechoice.estimation import fit_mnl
        beta = np.array([-0.02, 2.0, 0.8, 0.6, 0.0])
        spec = MarketSpec(20_000, ("a",), (1.0,), beta[None], np.zeros((0, 1)), {}, seed=4,
                          attribute_names=("price", "discount", "brand", "quality", "deep_discount"))
        ds, _ = generate(spec)
        # the deep-discount flag is inert here and nearly collinear with discount
        keep = [0, 1, 2, 3]
        sub = replace(ds, X=ds.X[:, :, keep], alt_feature_names=[ds.alt_feature_names[i] for i in keep])
        fit = fit_mnl(sub)
        est = fit.params.beta
        np.testing.assert_allclose(est[[0, 2, 3]], beta[[0, 2, 3]], atol=0.05)
        # discount spreads only 0.054, so its standard error is near 0.17 at this N
        assert abs(est[1] - beta[1]) < 3 * 0.17

    def test_label_fidelity_with_sharp_gate(self):
        from moechoice.estimation import e_step
        spec = two_segment_market(4000, seed=2, gate_strength=40.0)
        ds, truth = generate(spec)
        R = e_step(ds, truth.params)
        assert np.mean(np.argmax(R, axis=1) == truth.segments) > 0.95

    def test_values_within_support(self):
        ds, _ = generate(default_market(5000, seed=1))
        assert ds.X[:, :, 0].min() >= 5.99 and ds.X[:, :, 0].max() <= 499.99
        assert ds.X[:, :, 1].min() >= 0 and ds.X[:, :, 1].max() <= 0.5
        for name, dist in zip(ds.covariate_names, default_market().covariate_distributions.values()):
            col = ds.Z[:, ds.covariate_names.index(name)]
            assert col.min() >= dist.low and col.max() <= dist.high
