"""Mixture representation, EM fitting, scoring, serialization."""

import math

import numpy as np
import pytest

from mixfusion import mixture as mix


def scalar_mixture(weights, means, sigmas):
    comps = [
        mix.GaussianComponent(w, np.array([m]), np.array([[1.0 / s]]))
        for w, m, s in zip(weights, means, sigmas)
    ]
    return mix.GaussianMixture(comps)


def quad_density_oracle(w, mu, sqrt_info, e):
    """Direct quadratic-form evaluation of the unnormalized density."""
    u = np.atleast_2d(sqrt_info)
    y = u @ (np.atleast_1d(e) - np.atleast_1d(mu))
    det = np.prod(np.diag(u))
    return w * det * math.exp(-0.5 * float(y @ y))


class TestComponentDensity:
    def test_unit_component_at_zero(self):
        comp = mix.GaussianComponent(1.0, [0.0], [[1.0]])
        assert mix.component_density(comp, [0.0]) == pytest.approx(1.0, abs=1e-15)

    def test_unit_component_at_one(self):
        comp = mix.GaussianComponent(1.0, [0.0], [[1.0]])
        assert mix.component_density(comp, [1.0]) == pytest.approx(math.exp(-0.5), rel=1e-12)

    def test_scaled_component_matches_quadratic_oracle(self):
        comp = mix.GaussianComponent(0.5, [0.0], [[2.0]])
        got = mix.component_density(comp, [0.5])
        assert got == pytest.approx(0.5 * 2.0 * math.exp(-0.5), rel=1e-12)
        assert got == pytest.approx(quad_density_oracle(0.5, [0.0], [[2.0]], [0.5]), rel=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            mu = rng.normal(size=2)
            shift = rng.normal(size=2)
            e = rng.normal(size=2)
            u = np.triu(rng.uniform(0.5, 2.0, size=(2, 2)))
            a = mix.component_density(mix.GaussianComponent(0.7, mu, u), e)
            b = mix.component_density(mix.GaussianComponent(0.7, mu + shift, u), e + shift)
            assert a == pytest.approx(b, rel=1e-12)

    def test_dimension_mismatch_raises(self):
        comp = mix.GaussianComponent(1.0, [0.0, 0.0], np.eye(2))
        with pytest.raises(ValueError):
            mix.component_density(comp, [1.0])


class TestValidation:
    def test_weights_must_sum_to_one(self):
        comps = [
            mix.GaussianComponent(0.5, [0.0], [[1.0]]),
            mix.GaussianComponent(0.4, [0.0], [[1.0]]),
        ]
        with pytest.raises(ValueError):
            mix.GaussianMixture(comps)

    def test_lower_triangular_rejected(self):
        with pytest.raises(ValueError):
            mix.GaussianComponent(1.0, [0.0, 0.0], [[1.0, 0.0], [0.5, 1.0]])

    def test_negative_diagonal_rejected(self):
        with pytest.raises(ValueError):
            mix.GaussianComponent(1.0, [0.0], [[-1.0]])


class TestEStep:
    def test_single_component_all_ones(self):
        gmm = scalar_mixture([1.0], [0.0], [1.0])
        resp = mix.e_step(gmm, np.array([[0.0], [1.0], [-3.0]]))
        assert np.allclose(resp.matrix, 1.0)

    def test_identical_components_split_evenly(self):
        gmm = scalar_mixture([0.5, 0.5], [0.0, 0.0], [1.0, 1.0])
        resp = mix.e_step(gmm, np.array([[0.3], [-2.0]]))
        assert np.allclose(resp.matrix, 0.5)

    def test_detached_scales_at_origin(self):
        # densities at 0 scale with det: 1 vs 0.1
        gmm = scalar_mixture([0.5, 0.5], [0.0, 0.0], [1.0, 10.0])
        resp = mix.e_step(gmm, np.array([[0.0]]))
        assert resp.matrix[0, 0] == pytest.approx(10.0 / 11.0, rel=1e-12)
        assert resp.matrix[0, 1] == pytest.approx(1.0 / 11.0, rel=1e-12)

    def test_rows_sum_to_one_random(self):
        rng = np.random.default_rng(11)
        gmm = scalar_mixture([0.2, 0.3, 0.5], [-1.0, 0.0, 2.0], [0.5, 1.0, 3.0])
        e = rng.normal(0, 5, size=(200, 1))
        resp = mix.e_step(gmm, e)
        assert np.allclose(resp.matrix.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(resp.matrix >= 0) and np.all(resp.matrix <= 1)

    def test_underflow_row_goes_uniform(self):
        # quadratic overflows, every log density is -inf for that sample
        gmm = scalar_mixture([0.5, 0.5], [0.0, 0.0], [1e-3, 1e-3])
        with np.errstate(over="ignore"):
            resp = mix.e_step(gmm, np.array([[1e200]]))
        assert resp.uniform_rows == [0]
        assert np.allclose(resp.matrix[0], 0.5)


class TestMStep:
    def test_single_component_sample_moments(self):
        errors = np.array([[-1.0], [1.0]])
        resp = mix.Responsibilities(np.ones((2, 1)))
        cfg = mix.EmConfig(cov_regularizer=1e-4)
        out = mix.m_step(errors, resp, cfg)
        c = out.components[0]
        assert c.weight == pytest.approx(1.0)
        assert c.mean[0] == pytest.approx(0.0, abs=1e-15)
        # sqrt_info recovers 1/sqrt(var + reg) exactly
        assert c.sqrt_info[0, 0] == pytest.approx(1.0 / math.sqrt(1.0 + 1e-4), rel=1e-12)

    def test_hard_assignment_delta_components(self):
        errors = np.array([[0.0], [10.0]])
        alpha = np.array([[1.0, 0.0], [0.0, 1.0]])
        cfg = mix.EmConfig(cov_regularizer=1e-6)
        out = mix.m_step(errors, mix.Responsibilities(alpha), cfg)
        assert out.components[0].mean[0] == pytest.approx(0.0, abs=1e-12)
        assert out.components[1].mean[0] == pytest.approx(10.0, rel=1e-12)
        for c in out.components:
            assert c.sqrt_info[0, 0] == pytest.approx(1.0 / math.sqrt(1e-6), rel=1e-9)

    def test_one_pass_moves_toward_truth(self):
        rng = np.random.default_rng(42)
        m = 10_000
        pick = rng.uniform(size=m) < 0.3
        e = np.where(pick, rng.normal(2.0, 3.0, m), rng.normal(0.0, 0.5, m))[:, None]
        init = mix.default_init(np.array([[1.0 / 0.5]]), 2)
        resp = mix.e_step(init, e)
        out = mix.m_step(e, resp, mix.EmConfig())
        truth = np.array([0.7, 0.3, 0.0, 2.0, 0.5, 3.0])

        def params(g):
            order = np.argsort([1.0 / c.sqrt_info[0, 0] for c in g.components])
            w = [g.components[i].weight for i in order]
            mu = [g.components[i].mean[0] for i in order]
            s = [1.0 / g.components[i].sqrt_info[0, 0] for i in order]
            return np.array(w + mu + s)

        d_init = np.linalg.norm(params(init) - truth)
        d_out = np.linalg.norm(params(out) - truth)
        assert d_out < d_init

    def test_sqrt_info_times_cov_is_identity(self):
        rng = np.random.default_rng(5)
        errors = rng.normal(size=(300, 2)) @ np.array([[1.0, 0.3], [0.0, 0.7]])
        alpha = rng.uniform(0.1, 1.0, size=(300, 2))
        alpha /= alpha.sum(axis=1, keepdims=True)
        out = mix.m_step(errors, mix.Responsibilities(alpha), mix.EmConfig(cov_regularizer=1e-9))
        for j, c in enumerate(out.components):
            mass = alpha[:, j].sum()
            mu = (alpha[:, j] @ errors) / mass
            diff = errors - mu
            cov = (diff.T * alpha[:, j]) @ diff / mass + 1e-9 * np.eye(2)
            ident = c.sqrt_info.T @ c.sqrt_info @ cov
            assert np.allclose(ident, np.eye(2), atol=1e-8)

    def test_zero_mass_column_without_fallback_raises(self):
        errors = np.array([[0.0], [1.0]])
        alpha = np.array([[1.0, 0.0], [1.0, 0.0]])
        with pytest.raises(ValueError):
            mix.m_step(errors, mix.Responsibilities(alpha), mix.EmConfig())

    def test_zero_mass_column_resets_to_fallback(self):
        errors = np.array([[0.0], [1.0]])
        alpha = np.array([[1.0, 0.0], [1.0, 0.0]])
        fb = scalar_mixture([0.5, 0.5], [0.0, 5.0], [1.0, 2.0])
        out = mix.m_step(errors, mix.Responsibilities(alpha), mix.EmConfig(), fallback=fb)
        assert out.components[1].mean[0] == pytest.approx(5.0)
        assert out.components[1].sqrt_info[0, 0] == pytest.approx(0.5)


class TestFitEm:
    def test_empty_errors_rejected(self):
        gmm = scalar_mixture([1.0], [0.0], [1.0])
        with pytest.raises(ValueError):
            mix.fit_em(np.zeros((0, 1)), gmm)

    def test_sampled_from_init_barely_moves(self):
        rng = np.random.default_rng(2)
        gmm = scalar_mixture([0.5, 0.5], [0.0, 0.0], [0.1, 1.0])
        pick = rng.uniform(size=20_000) < 0.5
        e = np.where(pick, rng.normal(0, 0.1, 20_000), rng.normal(0, 1.0, 20_000))[:, None]
        fit_exact, _ = mix.fit_em(e, gmm, mix.EmConfig(max_iterations=10))
        perturbed = scalar_mixture([0.5, 0.5], [0.3, 0.3], [0.05, 2.0])
        fit_pert, _ = mix.fit_em(e, perturbed, mix.EmConfig(max_iterations=10))

        def dist(a, b):
            return sum(
                abs(ca.weight - cb.weight)
                + abs(ca.mean[0] - cb.mean[0])
                + abs(ca.sqrt_info[0, 0] - cb.sqrt_info[0, 0]) / cb.sqrt_info[0, 0]
                for ca, cb in zip(a.components, b.components)
            )

        assert dist(fit_exact, gmm) < dist(fit_pert, gmm)

    def test_degenerate_m_equals_n(self):
        gmm = scalar_mixture([0.5, 0.5], [0.0, 0.0], [1.0, 10.0])
        e = np.array([[0.0], [5.0]])
        fit, diag = mix.fit_em(e, gmm, mix.EmConfig(cov_regularizer=1e-6))
        for c in fit.components:
            assert np.isfinite(c.sqrt_info[0, 0])

    def test_contaminated_ranges_weight_on_narrow(self):
        rng = np.random.default_rng(7)
        m = 5000
        pick = rng.uniform(size=m) < 0.3
        e = np.where(pick, rng.normal(1.0, 0.5, m), rng.normal(0.0, 0.1, m))[:, None]
        init = mix.default_init(np.array([[10.0]]), 2)
        fit, _ = mix.fit_em(e, init, mix.EmConfig(cov_regularizer=1e-8))
        comps = sorted(fit.components, key=lambda c: 1.0 / c.sqrt_info[0, 0])
        narrow, wide = comps
        assert narrow.weight > wide.weight
        assert abs(narrow.mean[0]) < 0.05

    def test_monotone_loglik_random_datasets(self):
        rng = np.random.default_rng(123)
        for _ in range(30):
            m = 400
            w = rng.uniform(0.2, 0.8)
            mus = rng.normal(0, 1, 2)
            sigmas = rng.uniform(0.05, 2.0, 2)
            pick = rng.uniform(size=m) < w
            e = np.where(pick, rng.normal(mus[0], sigmas[0], m), rng.normal(mus[1], sigmas[1], m))[:, None]
            init = mix.default_init(np.array([[1.0 / sigmas.min()]]), 2)
            _, diag = mix.fit_em(e, init, mix.EmConfig(cov_regularizer=1e-8))
            trace = np.array(diag.loglik_trace)
            assert np.all(np.diff(trace) >= -1e-9)

    def test_1d_fast_path_matches_generic(self):
        rng = np.random.default_rng(99)
        e = np.concatenate([rng.normal(0, 0.2, 300), rng.normal(1.5, 0.8, 200)])[:, None]
        init = mix.default_init(np.array([[5.0]]), 2)
        cfg = mix.EmConfig(max_iterations=25, cov_regularizer=1e-8)
        fast, diag_fast = mix.fit_em(e, init, cfg)
        generic, diag_gen = mix._fit_em_generic(e, init, cfg)
        assert diag_fast.iterations == diag_gen.iterations
        assert np.allclose(diag_fast.loglik_trace, diag_gen.loglik_trace, rtol=1e-9)
        for cf, cg in zip(fast.components, generic.components):
            assert cf.weight == pytest.approx(cg.weight, rel=1e-9)
            assert cf.mean[0] == pytest.approx(cg.mean[0], abs=1e-9)
            assert cf.sqrt_info[0, 0] == pytest.approx(cg.sqrt_info[0, 0], rel=1e-8)


class TestDefaultInit:
    def test_uwb_base(self):
        gmm = mix.default_init(np.array([[10.0]]), 2)
        sigmas = [1.0 / c.sqrt_info[0, 0] for c in gmm.components]
        assert sigmas == pytest.approx([0.1, 1.0])
        assert [c.weight for c in gmm.components] == pytest.approx([0.5, 0.5])
        assert all(c.mean[0] == 0.0 for c in gmm.components)

    def test_pseudorange_base(self):
        gmm = mix.default_init(np.array([[0.1]]), 2)
        sigmas = [1.0 / c.sqrt_info[0, 0] for c in gmm.components]
        assert sigmas == pytest.approx([10.0, 100.0])

    def test_single_component_recovers_base(self):
        base = np.array([[3.0]])
        gmm = mix.default_init(base, 1)
        assert gmm.n_components == 1
        assert gmm.components[0].sqrt_info[0, 0] == pytest.approx(3.0)

    def test_sigma_ratio_is_ten(self):
        gmm = mix.default_init(np.array([[2.0]]), 4)
        sigmas = [1.0 / c.sqrt_info[0, 0] for c in gmm.components]
        for a, b in zip(sigmas, sigmas[1:]):
            assert b / a == pytest.approx(10.0, rel=1e-12)
        assert sum(c.weight for c in gmm.components) == pytest.approx(1.0, abs=1e-12)


class TestInformationCriterion:
    def test_free_parameter_count(self):
        assert mix.free_parameter_count(2, 1) == 5
        assert mix.free_parameter_count(1, 1) == 2
        assert mix.free_parameter_count(3, 2) == 17

    def test_bic_penalty_grows_with_log_m(self):
        gmm = scalar_mixture([1.0], [0.0], [1.0])
        e = np.array([[0.5], [-0.5]])
        e2 = np.vstack([e, e])
        k = mix.free_parameter_count(1, 1)
        bic1 = mix.information_criterion(gmm, e, "bic")
        bic2 = mix.information_criterion(gmm, e2, "bic")
        # doubling identical data doubles -2L and moves the penalty by k*ln2
        expected = 2 * (bic1 - k * math.log(2)) + k * math.log(4)
        assert bic2 == pytest.approx(expected, rel=1e-12)

    def test_bic_prefers_single_gaussian_on_unimodal(self):
        rng = np.random.default_rng(31)
        e = rng.normal(0.0, 1.0, size=(4000, 1))
        init1 = mix.default_init(np.array([[1.0]]), 1)
        init2 = mix.default_init(np.array([[1.0]]), 2)
        fit1, _ = mix.fit_em(e, init1)
        fit2, _ = mix.fit_em(e, init2)
        bic1 = mix.information_criterion(fit1, e, "bic")
        bic2 = mix.information_criterion(fit2, e, "bic")
        assert bic1 <= bic2

    def test_aic_formula(self):
        gmm = scalar_mixture([1.0], [0.0], [1.0])
        e = np.array([[0.0]])
        loglik = mix.total_log_likelihood(gmm, e, normalized=True)
        k = mix.free_parameter_count(1, 1)
        assert mix.information_criterion(gmm, e, "aic") == pytest.approx(2 * k - 2 * loglik)


class TestSerialization:
    def test_round_trip(self):
        gmm = scalar_mixture([0.3, 0.7], [0.1, -2.5], [0.37, 4.1])
        text = mix.mixture_to_text(gmm)
        back = mix.mixture_from_text(text)
        for a, b in zip(gmm.components, back.components):
            assert a.weight == b.weight
            assert np.array_equal(a.mean, b.mean)
            assert np.array_equal(a.sqrt_info, b.sqrt_info)

    def test_round_trip_2d(self):
        c = mix.GaussianComponent(1.0, [1.0, 2.0], [[1.5, 0.25], [0.0, 0.5]])
        gmm = mix.GaussianMixture([c])
        back = mix.mixture_from_text(mix.mixture_to_text(gmm))
        assert back.dimension == 2
        assert np.array_equal(back.components[0].sqrt_info, c.sqrt_info)

    def test_bad_field_count_rejected(self):
        with pytest.raises(ValueError):
            mix.mixture_from_text("0.5 0.0\n")
