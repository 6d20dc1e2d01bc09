import numpy as np
import pytest

from nsmix.exceptions import ConfigurationError, GridMismatchError
from nsmix.spectral import (
    SpectralVelocity,
    bilinear,
    build_grid,
    decode_snapshot,
    encode_snapshot,
    leray_project,
    nonlinear_term,
    project_N,
    read_snapshot,
    write_snapshot,
)


def _physical_oracle(grid, a, n):
    """Velocity and its gradient by direct summation over modes."""
    x = 2 * np.pi * np.arange(n) / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    u = np.zeros((2, n, n))
    du = np.zeros((2, 2, n, n))
    for j in range(grid.M):
        e = np.exp(1j * (grid.kx[j] * X + grid.ky[j] * Y))
        for i in range(2):
            amp = a[j] * grid.sigma[j, i]
            u[i] += 2 * np.real(amp * e)
            du[i, 0] += 2 * np.real(1j * grid.kx[j] * amp * e)
            du[i, 1] += 2 * np.real(1j * grid.ky[j] * amp * e)
    return X, Y, u, du


def _mode_coefficients(grid, F, X, Y):
    """Sigma-component of the Fourier coefficient of a real vector field."""
    out = np.empty(grid.M, complex)
    for j in range(grid.M):
        e = np.exp(-1j * (grid.kx[j] * X + grid.ky[j] * Y))
        out[j] = np.mean((F[0] * grid.sigma[j, 0] + F[1] * grid.sigma[j, 1]) * e)
    return out


def test_grid_counts_and_order():
    g = build_grid(3)
    assert g.M == ((2 * 3 + 1) ** 2 - 1) // 2
    ev = g.sorted_eigenvalues
    assert np.all(np.diff(ev) >= 0)
    assert ev[0] == 1.0


def test_grid_rejects_bad_K():
    with pytest.raises(ConfigurationError):
        build_grid(0)


def test_divergence_free_and_norm(grid4, rng):
    u = SpectralVelocity.random(grid4, rng)
    X, Y, phys, du = _physical_oracle(grid4, u.coeffs, 24)
    assert np.max(np.abs(du[0, 0] + du[1, 1])) < 1e-12
    # area-normalised L2 norm from the physical field
    assert np.mean(phys[0] ** 2 + phys[1] ** 2) == pytest.approx(u.norm() ** 2, rel=1e-12)
    assert np.mean(np.sum(du**2, axis=(0, 1))) == pytest.approx(u.h1_norm() ** 2, rel=1e-12)


def test_fft_path_matches_direct_sum(grid4, rng):
    u = SpectralVelocity.random(grid4, rng)
    n = grid4.n
    _, _, direct, _ = _physical_oracle(grid4, u.coeffs, n)
    np.testing.assert_allclose(u.to_physical(), direct, atol=1e-12)
    np.testing.assert_allclose(u.to_physical(n), direct, atol=1e-12)


def test_leray_projection_properties(grid4, rng):
    raw = rng.standard_normal((grid4.M, 2)) + 1j * rng.standard_normal((grid4.M, 2))
    u = leray_project(grid4, raw)
    # idempotent and the residual is parallel to k
    again = leray_project(grid4, u.vector_coeffs())
    np.testing.assert_allclose(again.coeffs, u.coeffs, atol=1e-14)
    resid = raw - u.vector_coeffs()
    cross = resid[:, 0] * grid4.ky - resid[:, 1] * grid4.kx
    assert np.max(np.abs(cross)) < 1e-12
    with pytest.raises(GridMismatchError):
        leray_project(grid4, raw[:-1])


def test_bilinear_matches_physical_oracle(grid4, rng):
    u = SpectralVelocity.random(grid4, rng)
    v = SpectralVelocity.random(grid4, rng)
    n = 3 * grid4.K + 5
    X, Y, up, _ = _physical_oracle(grid4, u.coeffs, n)
    _, _, _, dv = _physical_oracle(grid4, v.coeffs, n)
    F = np.einsum("jxy,ijxy->ixy", up, dv)
    expect = _mode_coefficients(grid4, F, X, Y)
    np.testing.assert_allclose(bilinear(u, v).coeffs, expect, atol=1e-12)
    np.testing.assert_allclose(nonlinear_term(grid4, u.coeffs), bilinear(u, u).coeffs, atol=1e-12)


def test_bilinear_antisymmetry(grid4, rng):
    u, v, w = (SpectralVelocity.random(grid4, rng) for _ in range(3))
    assert abs(bilinear(u, v).inner(w) + bilinear(u, w).inner(v)) < 1e-12
    assert abs(bilinear(u, u).inner(u)) < 1e-12


def test_shear_mode_is_nonlinear_fixed_point(grid4):
    u = SpectralVelocity.mode(grid4, (0, 1), 0.7)
    assert np.max(np.abs(bilinear(u, u).coeffs)) < 1e-14


def test_project_N_keeps_lowest_modes(grid4, rng):
    u = SpectralVelocity.random(grid4, rng)
    p = project_N(u, 4)
    kept = np.flatnonzero(p.coeffs)
    assert kept.size == 4
    # two modes with |k|^2 = 1 and two with |k|^2 = 2 among the representatives
    np.testing.assert_array_equal(np.sort(grid4.k2[kept]), [1.0, 1.0, 2.0, 2.0])


def test_real_coordinates_are_isometric(grid4, rng):
    u = SpectralVelocity.random(grid4, rng)
    x = u.to_real()
    assert np.linalg.norm(x) == pytest.approx(u.norm(), rel=1e-14)
    np.testing.assert_allclose(SpectralVelocity.from_real(grid4, x).coeffs, u.coeffs, rtol=1e-15, atol=1e-15)


def test_snapshot_roundtrip(tmp_path, grid4, rng):
    u = SpectralVelocity.random(grid4, rng)
    blob = encode_snapshot(u)
    assert blob[:4] == b"NSMX" and len(blob) == 16 + 16 * grid4.M
    v, end = decode_snapshot(blob)
    assert end == len(blob)
    np.testing.assert_array_equal(v.coeffs, u.coeffs)
    write_snapshot(tmp_path / "u.nsmx", u)
    np.testing.assert_array_equal(read_snapshot(tmp_path / "u.nsmx").coeffs, u.coeffs)
    with pytest.raises(ValueError):
        decode_snapshot(b"XXXX" + blob[4:])


def test_grid_mismatch_raises(grid4, grid8):
    with pytest.raises(GridMismatchError):
        SpectralVelocity.zeros(grid4) + SpectralVelocity.zeros(grid8)
