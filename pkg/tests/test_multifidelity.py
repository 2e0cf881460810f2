import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from mfal.evaluation import CallCounters
from mfal.multifidelity import (
    CostFunction,
    LfModelHandle,
    ModelEnsemble,
    choose,
    compute_weights,
    folded_normal_cdf,
    folded_normal_pdf,
    folded_normal_sf,
    select_and_correct,
    selection_weights,
)
from mfal.rng import stream


def mc_weights(mu, sd, n, rng, scale=None):
    mu, sd = np.asarray(mu, float), np.asarray(sd, float)
    g = np.ones_like(mu) if scale is None else np.asarray(scale, float)
    draws = np.abs(g * (mu + sd * rng.standard_normal((n, mu.size))))
    return np.bincount(np.argmin(draws, axis=1), minlength=mu.size) / n


class TestFoldedNormal:
    def test_half_normal_values(self):
        assert folded_normal_pdf(0.0, 0.0, 1.0) == pytest.approx(0.7978845608, abs=1e-9)
        assert folded_normal_cdf(1.0, 0.0, 1.0) == pytest.approx(0.6826894921, abs=1e-9)

    def test_sf_complements_cdf(self):
        z = np.linspace(0, 6, 50)
        np.testing.assert_allclose(folded_normal_sf(z, 1.3, 0.7) + folded_normal_cdf(z, 1.3, 0.7), 1.0, atol=1e-14)

    def test_sf_far_tail_positive(self):
        assert 0 < folded_normal_sf(12.0, 0.0, 1.0) < 1e-30

    def test_pdf_integrates_to_cdf(self):
        from scipy.integrate import quad

        val, _ = quad(lambda z: float(folded_normal_pdf(z, -0.8, 1.1)), 0, 2.0)
        assert val == pytest.approx(float(folded_normal_cdf(2.0, -0.8, 1.1)), abs=1e-10)

    def test_ks_against_sampling(self):
        x = np.abs(3.0 + 0.5 * stream(1, "folded").standard_normal(1_000_000))
        d = stats.kstest(x, lambda z: folded_normal_cdf(z, 3.0, 0.5)).statistic
        assert d < 1.63 / math.sqrt(x.size)


class TestWeights:
    def test_single_model(self):
        assert compute_weights([(0.3, 0.2)]).tolist() == [1.0]

    def test_identical_models(self):
        np.testing.assert_allclose(compute_weights([(0.4, 0.3), (0.4, 0.3)]), [0.5, 0.5], atol=1e-6)

    def test_separated_models(self):
        assert compute_weights([(0.0, 0.1), (5.0, 0.1)])[0] > 0.999

    def test_three_models_against_sampling(self):
        mu, sd = [0.5, 0.7, 1.5], [0.2, 0.3, 0.1]
        w = compute_weights(list(zip(mu, sd)))
        n = 10_000_000
        rng = stream(2, "weights-mc")
        counts = np.zeros(3)
        for _ in range(10):
            counts += mc_weights(mu, sd, n // 10, rng) * (n // 10)
        emp = counts / n
        se = np.sqrt(np.maximum(w * (1 - w), 1e-300) / n)
        assert np.all(np.abs(emp - w) <= 3 * se + 1e-12)

    def test_sign_of_mean_irrelevant(self):
        a = compute_weights([(0.5, 0.2), (-0.7, 0.3)])
        b = compute_weights([(-0.5, 0.2), (0.7, 0.3)])
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_point_mass_against_continuous(self):
        # deterministic |eps_1| = 0.5 wins when |eps_2| > 0.5
        w = compute_weights([(0.5, 0.0), (0.0, 1.0)])
        expected = 2 * special.ndtr(-0.5)
        np.testing.assert_allclose(w, [expected, 1 - expected], atol=1e-9)

    def test_two_point_masses(self):
        np.testing.assert_allclose(compute_weights([(0.2, 0.0), (-0.1, 0.0)]), [0.0, 1.0])
        np.testing.assert_allclose(compute_weights([(0.2, 0.0), (0.2, 0.0)]), [0.5, 0.5])

    def test_quadrature_convergence(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            m = rng.integers(2, 5)
            mu = rng.normal(0, 1, size=(1, m))
            sd = rng.uniform(0.01, 1.0, size=(1, m))
            a = selection_weights(mu, sd, n_nodes=32)
            b = selection_weights(mu, sd, n_nodes=64)
            assert np.max(np.abs(a - b)) < 1e-7

    def test_common_cost_scaling_invariant(self):
        rng = np.random.default_rng(4)
        mu = rng.normal(size=(20, 3))
        sd = rng.uniform(0.05, 1, size=(20, 3))
        g = np.array([0.3, 1.0, 2.0])
        np.testing.assert_allclose(selection_weights(mu, sd, g), selection_weights(mu, sd, 7.5 * g), atol=1e-8)

    def test_cost_weights_match_scaled_folded_normals(self):
        cost = CostFunction(10.0)
        taus = [1.0, 100.0]
        corr = [(0.10, 0.05), (0.09, 0.05)]
        w = compute_weights(corr, cost, taus)
        g = np.asarray(taus) ** 10.0
        direct = compute_weights([(g[i] * corr[i][0], g[i] * corr[i][1]) for i in range(2)])
        np.testing.assert_allclose(w, direct, atol=1e-10)
        assert w[0] > 0.999

    def test_cost_needs_taus(self):
        with pytest.raises(ValueError):
            compute_weights([(0.1, 0.1), (0.2, 0.1)], CostFunction(1.0))

    def test_negative_beta_rejected(self):
        with pytest.raises(ValueError):
            CostFunction(-1.0)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(5)
        mu = rng.normal(size=(7, 3))
        sd = rng.uniform(0.1, 1, size=(7, 3))
        batch = selection_weights(mu, sd)
        for r in range(7):
            np.testing.assert_allclose(batch[r], compute_weights(list(zip(mu[r], sd[r]))), atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(
        st.tuples(st.floats(-5, 5), st.one_of(st.just(0.0), st.floats(1e-3, 3))),
        min_size=1,
        max_size=4,
    )
)
def test_weights_normalised(corr):
    w = compute_weights(corr)
    assert np.all(w >= -1e-12) and np.all(w <= 1 + 1e-12)
    assert abs(w.sum() - 1.0) <= 1e-6


class TestChoose:
    def test_argmax(self):
        assert choose(np.array([[0.2, 0.5, 0.3]]), np.array([1.0, 1.0, 1.0])).tolist() == [1]

    def test_tie_goes_to_cheaper(self):
        assert choose(np.array([[0.5, 0.5]]), np.array([0.1, 0.01])).tolist() == [1]

    def test_tie_same_cost_lower_index(self):
        assert choose(np.full((1, 4), 0.25), np.ones(4)).tolist() == [0]


# -- ensembles -------------------------------------------------------------------


def hf(x):
    return np.sin(x[:, 0]) + 0.5 * x[:, 1] ** 2


def design(n=15, seed=0):
    return np.random.default_rng(seed).uniform(-3, 3, size=(n, 2))


def make_ensemble(lfs, cost=None):
    handles = [LfModelHandle(i, f, c) for i, (f, c) in enumerate(lfs)]
    ens = ModelEnsemble(hf, handles, cost, CallCounters(len(handles)))
    ens.initialize(design(), np.random.default_rng(0))
    return ens


class TestSelectAndCorrect:
    def test_zero_correction_regime(self):
        ens = make_ensemble([(hf, 0.01)])
        q = np.random.default_rng(1).uniform(-3, 3, size=(50, 2))
        for x in q:
            val, sel = select_and_correct(ens, x)
            assert abs(val - hf(x[None, :])[0]) <= 2 * sel.correction_sd + 1e-9

    def test_dominant_model(self):
        biased = lambda x: hf(x) + 10.0 + 0.3 * x[:, 0]
        ens = make_ensemble([(biased, 0.01), (hf, 0.01)])
        q = np.random.default_rng(2).uniform(-3, 3, size=(100, 2))
        chosen = [select_and_correct(ens, x)[1].chosen_index for x in q]
        assert set(chosen) == {1}

    def test_one_lf_call_per_selection(self):
        ens = make_ensemble([(lambda x: hf(x) + 0.1, 0.01), (lambda x: hf(x) - 0.2 * x[:, 0], 0.05)])
        before = sum(ens.counters.lf)
        hf_before = ens.counters.hf
        for x in design(20, seed=7):
            select_and_correct(ens, x)
        assert sum(ens.counters.lf) - before == 20
        assert ens.counters.hf == hf_before

    def test_weights_sum_to_one(self):
        ens = make_ensemble([(lambda x: hf(x) + 0.1 * x[:, 1], 0.01), (lambda x: hf(x) - 0.1 * x[:, 0], 0.05)])
        for x in design(20, seed=8):
            assert abs(select_and_correct(ens, x)[1].weights.sum() - 1) <= 1e-6

    def test_cost_prefers_cheap_model(self):
        a = lambda x: hf(x) + 0.05 * x[:, 0]
        b = lambda x: hf(x) + 0.05 * x[:, 1]
        ens = make_ensemble([(a, 1.0), (b, 100.0)], cost=CostFunction(10.0))
        q = np.random.default_rng(3).normal(size=(200, 2))
        chosen = [select_and_correct(ens, x)[1].chosen_index for x in q]
        assert np.mean(np.array(chosen) == 0) >= 0.95

    def test_lf_failure_falls_back(self):
        def broken(x):
            raise RuntimeError("mesh generation failed")

        handles = [LfModelHandle(0, hf, 0.01), LfModelHandle(1, lambda x: hf(x) + 5.0 + x[:, 0], 0.01)]
        ens = ModelEnsemble(hf, handles, counters=CallCounters(2))
        ens.initialize(design(), np.random.default_rng(0))
        ens.lf_models[0].evaluator = broken
        val, sel = select_and_correct(ens, np.array([0.3, -0.2]))
        assert sel.chosen_index == 1
        assert sel.degraded and sel.degraded[0]["failed_model"] == 0
        assert np.isfinite(val)

    def test_needs_lf_models(self):
        ens = ModelEnsemble(hf, [])
        ens.initialize(design(), np.random.default_rng(0))
        with pytest.raises(ValueError):
            select_and_correct(ens, np.zeros(2))

    def test_corrections_trained_on_differences(self):
        lf = lambda x: hf(x) - 0.4 * x[:, 0]
        ens = make_ensemble([(lf, 0.01)])
        x = ens.train_x
        np.testing.assert_allclose(ens.gps[0].train_targets, hf(x) - lf(x))

    def test_single_training_point(self):
        ens = ModelEnsemble(hf, [])
        ens.initialize(np.array([[0.0, 0.0]]), np.random.default_rng(0))
        mu, sd = ens.predict_corrections(np.array([[5.0, 5.0]]))
        assert sd[0, 0] == pytest.approx(1.0, rel=1e-3)
