import math

import numpy as np
import pytest

from morphflow.latent import (
    REFERENCE_PRESET,
    GaussianPrior,
    LatentCode,
    LatentError,
    chi2_cdf,
    chi2_critical,
    fit_prior,
    gamma_p,
    interpolate,
    load_codes,
    mahalanobis,
    nearest_neighbor,
    project_to_hyperellipsoid,
    save_codes,
)

scipy_stats = pytest.importorskip("scipy.stats")


def cholesky_mahalanobis_oracle(b, mean, cov):
    # independent of the package's symmetric-square-root whitener
    l = np.linalg.cholesky(cov)
    y = np.linalg.solve(l, b - mean)
    return float(np.linalg.norm(y))


class TestChi2:
    def test_cdf_matches_scipy(self):
        for zeta in (1, 2, 3, 7, 12, 26, 50):
            for x in (0.01, 0.5, 1.0, 3.0, 10.0, 40.0, 120.0):
                ref = scipy_stats.chi2.cdf(x, zeta)
                got = chi2_cdf(x, zeta)
                assert abs(got - ref) < 1e-10

    def test_quantile_matches_scipy(self):
        for zeta in (1, 2, 5, 7, 26, 40):
            for rho in (0.01, 0.5, 0.9, 0.95, 0.99, 0.999):
                ref = math.sqrt(scipy_stats.chi2.ppf(rho, zeta))
                got = chi2_critical(zeta, rho)
                assert abs(got - ref) < 1e-6

    def test_frozen_table_value(self):
        # classic 99% critical value for 1 dof
        assert abs(chi2_critical(1, 0.99) ** 2 - 6.6349) < 1e-3

    def test_two_dof_closed_form(self):
        rho = 1.0 - math.exp(-1.0)
        assert abs(chi2_critical(2, rho) ** 2 - 2.0) < 1e-9

    def test_monotone_grid(self):
        betas = [chi2_critical(z, 0.9) for z in (1, 2, 4, 8, 16, 32)]
        assert all(b2 > b1 for b1, b2 in zip(betas, betas[1:]))
        betas = [chi2_critical(7, r) for r in (0.1, 0.3, 0.5, 0.7, 0.9, 0.99)]
        assert all(b2 > b1 for b1, b2 in zip(betas, betas[1:]))

    def test_cdf_inverts_quantile(self):
        for zeta, rho in ((3, 0.42), (7, 0.99), (26, 0.75)):
            q = chi2_critical(zeta, rho) ** 2
            assert abs(chi2_cdf(q, zeta) - rho) < 1e-6

    def test_domain_errors(self):
        with pytest.raises(LatentError):
            chi2_critical(0, 0.5)
        with pytest.raises(LatentError):
            chi2_critical(3, 0.0)
        with pytest.raises(LatentError):
            chi2_critical(3, 1.0)
        with pytest.raises(LatentError):
            gamma_p(1.0, -0.5)

    def test_reference_preset_verbatim(self):
        assert REFERENCE_PRESET["rho"] == 0.99
        assert REFERENCE_PRESET["zeta_ex"] == 7
        assert REFERENCE_PRESET["beta_ex"] == 4.07
        assert REFERENCE_PRESET["zeta_id"] == 26
        assert REFERENCE_PRESET["beta_id"] == 6.01


class TestPrior:
    def test_two_sample_hand_arithmetic(self):
        prior = fit_prior(np.array([[0.0, 0.0], [2.0, 0.0]]))
        np.testing.assert_allclose(prior.mean, [1.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(prior.cov, [[2.0, 0.0], [0.0, 0.0]], atol=1e-12)

    def test_monte_carlo_identity(self):
        rng = np.random.default_rng(0)
        prior = fit_prior(rng.standard_normal((10000, 3)))
        assert np.max(np.abs(prior.cov - np.eye(3))) < 0.1
        assert np.linalg.norm(prior.mean) < 0.1

    def test_affine_pushforward(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((20000, 2))
        a = np.array([[2.0, 0.5], [0.0, 1.5]])
        b = np.array([3.0, -1.0])
        base = fit_prior(x)
        moved = fit_prior(x @ a.T + b)
        np.testing.assert_allclose(moved.mean, a @ base.mean + b, atol=0.05)
        np.testing.assert_allclose(moved.cov, a @ base.cov @ a.T, atol=0.15)

    def test_whitener_inverts_cov(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((500, 4)) @ rng.standard_normal((4, 4))
        prior = fit_prior(x)
        ident = prior.whitener @ prior.cov @ prior.whitener
        np.testing.assert_allclose(ident, np.eye(4), atol=1e-6)

    def test_too_few_samples(self):
        with pytest.raises(LatentError):
            fit_prior(np.zeros((1, 3)))


class TestProjection:
    def anisotropic_prior(self, seed=3, d=4):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((d, d))
        cov = a @ a.T + 0.5 * np.eye(d)
        mean = rng.standard_normal(d)
        evals, evecs = np.linalg.eigh(cov)
        whitener = (evecs / np.sqrt(evals)) @ evecs.T
        return GaussianPrior(mean, cov, whitener)

    def test_isotropic_example(self):
        prior = GaussianPrior(np.zeros(2), np.eye(2), np.eye(2))
        out = project_to_hyperellipsoid(np.array([2.0, 0.0]), prior, 3.0)
        np.testing.assert_allclose(out, [3.0, 0.0], atol=1e-12)

    def test_fixed_point_on_shell(self):
        prior = self.anisotropic_prior()
        b = prior.mean + np.array([1.0, -0.5, 0.2, 0.8])
        beta = mahalanobis(prior, b)
        out = project_to_hyperellipsoid(b, prior, beta)
        np.testing.assert_allclose(out, b, atol=1e-10)

    def test_mahalanobis_equals_beta_cholesky_oracle(self):
        prior = self.anisotropic_prior(seed=7)
        rng = np.random.default_rng(8)
        for _ in range(20):
            b = prior.mean + rng.standard_normal(4) * 3
            out = project_to_hyperellipsoid(b, prior, 2.5)
            dist = cholesky_mahalanobis_oracle(out, prior.mean, prior.cov)
            assert abs(dist - 2.5) < 1e-8

    def test_idempotent_and_direction_preserving(self):
        prior = self.anisotropic_prior(seed=9)
        b = prior.mean + np.array([0.3, 2.0, -1.0, 0.5])
        once = project_to_hyperellipsoid(b, prior, 1.7)
        twice = project_to_hyperellipsoid(once, prior, 1.7)
        np.testing.assert_allclose(twice, once, atol=1e-10)
        u = b - prior.mean
        v = once - prior.mean
        cosine = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
        assert abs(cosine - 1.0) < 1e-12

    def test_mean_rejected(self):
        prior = self.anisotropic_prior()
        with pytest.raises(LatentError):
            project_to_hyperellipsoid(prior.mean.copy(), prior, 2.0)
        with pytest.raises(LatentError):
            project_to_hyperellipsoid(prior.mean + 1.0, prior, 0.0)


class TestInterpolate:
    def test_endpoints(self):
        a = LatentCode(np.array([1.0, 2.0]), "expression", "z")
        b = LatentCode(np.array([3.0, -1.0]), "expression", "z")
        np.testing.assert_array_equal(interpolate(a, b, 0.0).values, a.values)
        np.testing.assert_array_equal(interpolate(a, b, 1.0).values, b.values)

    def test_midpoint(self):
        a = LatentCode(np.array([0.0, 0.0]), "identity", "w")
        b = LatentCode(np.array([2.0, 4.0]), "identity", "w")
        np.testing.assert_allclose(interpolate(a, b, 0.5).values, [1.0, 2.0], atol=1e-15)

    def test_tag_mismatch(self):
        a = LatentCode(np.zeros(2), "identity", "w")
        b = LatentCode(np.zeros(2), "expression", "w")
        c = LatentCode(np.zeros(2), "identity", "z")
        with pytest.raises(LatentError):
            interpolate(a, b, 0.5)
        with pytest.raises(LatentError):
            interpolate(a, c, 0.5)


class TestNearestNeighbor:
    def test_query_in_pool(self):
        pool = [np.array([0.0, 1.0]), np.array([2.0, 2.0]), np.array([5.0, 5.0])]
        idx, dist = nearest_neighbor(np.array([2.0, 2.0]), pool)
        assert idx == 1 and dist == 0.0

    def test_one_dimensional_example(self):
        idx, _ = nearest_neighbor(np.array([4.0]), [np.array([0.0]), np.array([10.0])])
        assert idx == 0

    def test_tie_lowest_index(self):
        pool = [np.array([1.0, 0.0]), np.array([-1.0, 0.0])]
        idx, dist = nearest_neighbor(np.array([0.0, 0.0]), pool)
        assert idx == 0 and abs(dist - 1.0) < 1e-15

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            pool = [rng.standard_normal(3) for _ in range(30)]
            q = rng.standard_normal(3)
            idx, dist = nearest_neighbor(q, pool)
            dists = [np.linalg.norm(p - q) for p in pool]
            assert idx == int(np.argmin(dists))
            assert abs(dist - min(dists)) < 1e-12

    def test_empty_pool(self):
        with pytest.raises(LatentError):
            nearest_neighbor(np.zeros(2), [])


class TestSerialization:
    def test_round_trip(self, tmp_path):
        codes = [
            LatentCode(np.array([0.25, -1.5, 3.0]), "identity", "w"),
            LatentCode(np.array([1e-17, 2.0]), "expression", "z"),
        ]
        path = str(tmp_path / "codes.txt")
        save_codes(path, codes)
        loaded = load_codes(path)
        assert len(loaded) == 2
        for orig, back in zip(codes, loaded):
            np.testing.assert_array_equal(orig.values, back.values)
            assert orig.space == back.space and orig.coords == back.coords

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("something else\n")
        with pytest.raises(LatentError):
            load_codes(str(p))

    def test_bad_tags(self):
        with pytest.raises(LatentError):
            LatentCode(np.zeros(2), "nope", "w")
        with pytest.raises(LatentError):
            LatentCode(np.zeros(2), "identity", "q")
