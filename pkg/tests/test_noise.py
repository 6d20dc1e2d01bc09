import numpy as np
import pytest
from scipy import integrate, stats

from nsmix.exceptions import ConfigurationError
from nsmix.noise import (
    COEFF_VARIANCE,
    CylinderSpec,
    NoiseSample,
    amplitude_rule,
    build_noise_basis,
    coefficient_density,
    density,
    enumerate_triples,
    log_density,
    noise_csv,
    read_noise_csv,
    render,
    rng_stream,
    sample_coefficients,
    sample_noise,
)


def _rho_cdf(x):
    # antiderivative of 15/16 (1 - x^2)^2
    x = np.clip(x, -1, 1)
    return 0.5 + 15.0 / 16.0 * (x - 2 * x**3 / 3 + x**5 / 5)


def test_density_normalised_with_stated_variance():
    mass, _ = integrate.quad(coefficient_density, -1, 1)
    var, _ = integrate.quad(lambda r: r * r * coefficient_density(r), -1, 1)
    assert mass == pytest.approx(1.0, abs=1e-13)
    assert var == pytest.approx(COEFF_VARIANCE, abs=1e-13)
    assert coefficient_density(1.5) == 0.0


def test_samples_follow_density():
    x = sample_coefficients(np.random.default_rng(3), 20000)
    assert np.all(np.abs(x) <= 1)
    assert stats.kstest(x, _rho_cdf).pvalue > 1e-3
    assert np.var(x) == pytest.approx(1 / 7, rel=0.05)


def test_log_density_matches_product_and_vanishes_outside():
    xi = np.array([0.2, -0.5, 0.9])
    assert log_density(xi) == pytest.approx(np.sum(np.log(coefficient_density(xi))), rel=1e-14)
    assert density(np.array([0.2, 1.0])) == 0.0
    assert log_density(np.array([[0.0, 1.2]]))[0] == -np.inf


def test_rng_streams_are_deterministic_and_distinct():
    a = rng_stream(7, 1, 2).standard_normal(4)
    b = rng_stream(7, 1, 2).standard_normal(4)
    c = rng_stream(7, 2, 1).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_amplitude_rule_and_triples():
    np.testing.assert_allclose(amplitude_rule(4), [0.3, 0.15, 0.1, 0.075])
    tr = enumerate_triples(10)
    assert tr[0] == (1, 1, 1, 0) and tr[1] == (1, 1, 1, 1)
    assert len(set(tr)) == 10
    with pytest.raises(ConfigurationError):
        amplitude_rule(3, explicit=[1.0, 2.0])


def test_cylinder_validation():
    with pytest.raises(ConfigurationError):
        CylinderSpec(t_a=0.8, t_b=0.5)
    with pytest.raises(ConfigurationError):
        CylinderSpec.from_list([0.1, 0.2, 1.0, 7.0, 1.0, 2.0])


def test_non_degeneracy_enforced(grid4):
    b = amplitude_rule(8)
    b[2] = 0.0
    with pytest.raises(ConfigurationError):
        build_noise_basis(CylinderSpec(), 8, b=b, grid=grid4)
    # zero amplitudes beyond the active block are allowed
    build_noise_basis(CylinderSpec(), 8, b=b, grid=grid4, n_active=2)


def test_dictionary_supported_in_cylinder(basis4):
    c = basis4.cylinder
    rng = np.random.default_rng(0)
    t, x, y = rng.uniform(0, 1, 500), rng.uniform(0, 2 * np.pi, 500), rng.uniform(0, 2 * np.pi, 500)
    outside = ~c.contains(t, x, y)
    for j in range(basis4.J):
        vals = basis4.evaluate(j, t, x, y)
        assert np.all(vals[:, outside] == 0.0)
    prof = basis4.mesh_profile(1e-2)
    ts = np.arange(101) * 1e-2
    assert np.all(prof[(ts <= c.t_a) | (ts >= c.t_b)] == 0.0)


def test_l2_norms_by_direct_quadrature(basis4):
    # full (non-separable) evaluation on a tensor Gauss grid
    c = basis4.cylinder
    x, w = np.polynomial.legendre.leggauss(60)

    def nodes(a, b):
        return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w

    (tt, wt), (xx, wx), (yy, wy) = nodes(c.t_a, c.t_b), nodes(c.x_a, c.x_b), nodes(c.y_a, c.y_b)
    T, X, Y = np.meshgrid(tt, xx, yy, indexing="ij")
    W = wt[:, None, None] * wx[None, :, None] * wy[None, None, :] / (2 * np.pi) ** 2
    for j in (0, 5, 11):
        val = np.sum(W * np.sum(basis4.evaluate(j, T, X, Y) ** 2, axis=0))
        assert np.sqrt(val) == pytest.approx(basis4.l2_norms[j], rel=1e-6)


def test_spatial_coefficients_match_projection_oracle(basis4, grid4):
    n = 256
    s = 2 * np.pi * np.arange(n) / n
    X, Y = np.meshgrid(s, s, indexing="ij")
    t0 = 0.5
    T = basis4.time_factor(np.array([t0]))[0]
    for j in (0, 3, 9):
        F = basis4.evaluate(j, t0, X, Y) / T[j]
        expect = np.empty(grid4.M, complex)
        for m in range(grid4.M):
            e = np.exp(-1j * (grid4.kx[m] * X + grid4.ky[m] * Y))
            expect[m] = np.mean((F[0] * grid4.sigma[m, 0] + F[1] * grid4.sigma[m, 1]) * e)
        np.testing.assert_allclose(basis4.spatial[j], expect, atol=1e-10)


def test_render_linear_in_coefficients(basis4, rng):
    xi = sample_noise(basis4, rng)
    r = render(basis4, xi, 1e-2)
    r2 = render(basis4, 2 * xi.xi, 1e-2)
    np.testing.assert_allclose(r2, 2 * r, atol=1e-14)
    assert r.shape == (101, basis4.grid.M)
    c = rng.standard_normal(4)
    rc = render(basis4, c, 1e-2, scaled=False)
    np.testing.assert_allclose(rc, np.einsum("j,tj,jm->tm", c, basis4.mesh_profile(1e-2)[:, :4], basis4.spatial[:4]))


def test_noise_sample_validation():
    with pytest.raises(ValueError):
        NoiseSample(np.array([0.5, 1.5]))


def test_support_bound(basis4):
    assert basis4.B == pytest.approx(np.sum(basis4.b * basis4.h1_norms))
    assert np.isfinite(basis4.gram_condition) and basis4.gram_condition >= 1


def test_noise_csv_roundtrip(basis4, rng):
    xi = sample_noise(basis4, rng)
    b, x = read_noise_csv(noise_csv(basis4, xi))
    np.testing.assert_array_equal(b, basis4.b)
    np.testing.assert_array_equal(x, xi.xi)
