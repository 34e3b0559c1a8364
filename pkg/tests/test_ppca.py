import numpy as np
import pytest

from cytomatch.errors import ConditioningError, ConfigError
from cytomatch.ppca import (
    PatternFactors,
    PpcaComponent,
    _chol_observed,
    condition,
    marginal_covariance,
)
from oracles import gaussian_logpdf_direct, schur_condition


def random_component(rng, d=None, q=None, weight=1.0):
    d = d if d is not None else int(rng.integers(2, 7))
    q = q if q is not None else int(rng.integers(1, d + 1))
    return PpcaComponent(
        weight,
        rng.normal(size=d),
        rng.normal(size=(d, q)),
        float(rng.uniform(0.2, 2.0)),
    )


class TestMarginalCovariance:
    def test_zero_loadings(self):
        comp = PpcaComponent(1.0, np.zeros(3), np.zeros((3, 1)), 2.0)
        assert np.allclose(marginal_covariance(comp), 2.0 * np.eye(3))

    def test_direct_product(self):
        comp = PpcaComponent(1.0, np.zeros(2), np.array([[1.0], [1.0]]), 1.0)
        assert np.allclose(marginal_covariance(comp), [[2.0, 1.0], [1.0, 2.0]])

    def test_low_rank_structure(self):
        # C - sigma^2 I must have rank <= q; checked via singular values.
        rng = np.random.default_rng(0)
        comp = random_component(rng, d=6, q=2)
        core = marginal_covariance(comp) - comp.noise_variance * np.eye(6)
        singular = np.linalg.svd(core, compute_uv=False)
        assert (singular[2:] < 1e-10 * singular[0]).all()

    def test_eigenvalues_at_least_noise(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            comp = random_component(rng)
            eigvals = np.linalg.eigvalsh(marginal_covariance(comp))
            assert eigvals.min() >= comp.noise_variance - 1e-10


class TestComponentValidation:
    def test_noise_must_be_positive(self):
        with pytest.raises(ConfigError):
            PpcaComponent(1.0, np.zeros(2), np.zeros((2, 1)), 0.0)

    def test_latent_dim_bounds(self):
        with pytest.raises(ConfigError):
            PpcaComponent(1.0, np.zeros(2), np.zeros((2, 3)), 1.0)

    def test_weight_range(self):
        with pytest.raises(ConfigError):
            PpcaComponent(1.5, np.zeros(2), np.zeros((2, 1)), 1.0)


class TestCondition:
    def test_diagonal_covariance_independence(self):
        comp = PpcaComponent(1.0, np.array([1.0, -2.0, 3.0]), np.zeros((3, 1)), 1.5)
        mom = condition(comp, np.array([9.0]), np.array([True, False, False]))
        assert np.allclose(mom.cond_mean, [-2.0, 3.0])
        assert np.allclose(mom.cond_cov, 1.5 * np.eye(2))

    def test_two_by_two_hand_value(self):
        # C = [[2, 1], [1, 2]], observe x1 = 1: E[x2|x1] = 0.5, var = 1.5.
        comp = PpcaComponent(1.0, np.zeros(2), np.array([[1.0], [1.0]]), 1.0)
        mom = condition(comp, np.array([1.0]), np.array([True, False]))
        assert abs(mom.cond_mean[0] - 0.5) < 1e-12
        assert abs(mom.cond_cov[0, 0] - 1.5) < 1e-12

    def test_observation_at_mean_gives_mean(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            comp = random_component(rng, d=5)
            observed = np.zeros(5, bool)
            observed[rng.permutation(5)[:3]] = True
            mom = condition(comp, comp.mean[observed], observed)
            assert np.allclose(mom.cond_mean, comp.mean[~observed], atol=1e-10)

    def test_full_mask_matches_direct_logpdf(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            comp = random_component(rng)
            x = rng.normal(size=comp.dim)
            mom = condition(comp, x, np.ones(comp.dim, bool))
            assert mom.cond_mean.size == 0 and mom.cond_cov.size == 0
            direct = gaussian_logpdf_direct(x, comp.mean, marginal_covariance(comp))
            assert abs(mom.obs_logdensity - direct) < 1e-9

    def test_matches_schur_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            comp = random_component(rng)
            d = comp.dim
            n_obs = int(rng.integers(1, d))
            observed = np.zeros(d, bool)
            observed[rng.permutation(d)[:n_obs]] = True
            x_obs = rng.normal(size=n_obs)
            mom = condition(comp, x_obs, observed)
            ref_mean, ref_cov = schur_condition(
                comp.mean,
                marginal_covariance(comp),
                np.flatnonzero(observed),
                np.flatnonzero(~observed),
                x_obs,
            )
            assert np.allclose(mom.cond_mean, ref_mean, atol=1e-10)
            assert np.allclose(mom.cond_cov, ref_cov, atol=1e-10)

    def test_conditioning_never_inflates_variance(self):
        # C^mm - Q is PSD: conditioning cannot increase variance.
        rng = np.random.default_rng(5)
        for _ in range(25):
            comp = random_component(rng)
            d = comp.dim
            n_obs = int(rng.integers(1, d))
            observed = np.zeros(d, bool)
            observed[rng.permutation(d)[:n_obs]] = True
            mom = condition(comp, rng.normal(size=n_obs), observed)
            c_mm = marginal_covariance(comp)[np.ix_(~observed, ~observed)]
            assert np.linalg.eigvalsh(c_mm - mom.cond_cov).min() > -1e-10
            assert np.linalg.eigvalsh(mom.cond_cov).min() > -1e-10

    def test_logdensity_matches_latent_monte_carlo(self):
        # p(x^o) = E_t[ N(x^o; mean^o + W^o t, sigma^2 I) ]: estimate by
        # sampling the latent variable, an evaluation path that never touches
        # the marginal covariance.
        rng = np.random.default_rng(6)
        comp = PpcaComponent(1.0, np.array([0.5, -0.5, 1.0]), rng.normal(size=(3, 2)), 0.8)
        observed = np.array([True, True, False])
        x_obs = comp.mean[observed] + 0.3
        mom = condition(comp, x_obs, observed)
        draws = rng.standard_normal((100_000, 2))
        centers = comp.mean[observed] + draws @ comp.loadings[observed].T
        diff = x_obs - centers
        dens = np.exp(-0.5 * (diff**2).sum(axis=1) / comp.noise_variance) / (
            2 * np.pi * comp.noise_variance
        )
        estimate = dens.mean()
        stderr = dens.std(ddof=1) / np.sqrt(dens.size)
        assert abs(np.exp(mom.obs_logdensity) - estimate) < 3 * stderr

    def test_empty_mask_rejected(self):
        comp = PpcaComponent(1.0, np.zeros(2), np.zeros((2, 1)), 1.0)
        with pytest.raises(ConfigError, match="nonempty"):
            condition(comp, np.array([]), np.array([False, False]))

    def test_singular_block_raises_after_jitter(self):
        indefinite = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(ConditioningError, match="component 3"):
            _chol_observed(indefinite, "component 3")


class TestPatternFactors:
    def test_batch_consistent_with_single_row(self):
        rng = np.random.default_rng(7)
        comp = random_component(rng, d=5, q=2)
        observed_idx = np.array([0, 2, 4])
        factors = PatternFactors(comp, observed_idx)
        x = rng.normal(size=(8, 3))
        mask = np.zeros(5, bool)
        mask[observed_idx] = True
        for i in range(8):
            mom = condition(comp, x[i], mask)
            assert np.allclose(factors.conditional_mean(x)[i], mom.cond_mean)
            assert abs(factors.log_density(x)[i] - mom.obs_logdensity) < 1e-12
        assert np.allclose(factors.cond_cov, condition(comp, x[0], mask).cond_cov)

    def test_no_observed_coordinates_convention(self):
        rng = np.random.default_rng(8)
        comp = random_component(rng, d=4, q=1)
        factors = PatternFactors(comp, np.array([], dtype=int))
        x = np.zeros((3, 0))
        assert np.array_equal(factors.log_density(x), np.zeros(3))
        assert np.allclose(factors.conditional_mean(x), np.tile(comp.mean, (3, 1)))
        assert np.allclose(factors.cond_cov, marginal_covariance(comp))
