"""Divergence-free Fourier Galerkin fields on the periodic box [0, 2*pi)^2.

A velocity field is stored as one complex amplitude ``a_k`` per wavevector
``k`` (one representative per conjugate pair), along the unit
divergence-free direction ``sigma_k = k_perp / |k|`` with
``k_perp = (-k2, k1)``::

    u(x) = sum_k (a_k sigma_k exp(i k.x) + c.c.)

Norms use the area-normalised measure ``dx / (2 pi)^2`` so that
``||u||^2 = sum_k 2 |a_k|^2`` and ``||u||_1^2 = sum_k 2 |k|^2 |a_k|^2``.

Quadratic terms are evaluated on a padded collocation grid with more than
``3K`` points per direction, which reproduces the Galerkin-truncated
mode-space convolution exactly (no aliasing).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .exceptions import ConfigurationError, GridMismatchError

__all__ = [
    "WaveGrid",
    "SpectralVelocity",
    "build_grid",
    "leray_project",
    "leray_project_raw",
    "bilinear",
    "project_N",
    "write_snapshot",
    "read_snapshot",
    "encode_snapshot",
    "decode_snapshot",
]

MAX_WAVENUMBER = 64
SNAPSHOT_MAGIC = b"NSMX"
SNAPSHOT_VERSION = 1


def _fft_size(K: int) -> int:
    return sfft.next_fast_len(3 * K + 1, real=True)


class WaveGrid:
    """Conjugate-representative wavevectors with ``0 < |k|_inf <= K``.

    Wavevectors are kept in lexicographic order; ``pi_order`` lists the
    mode indices sorted by ``(|k|^2, k1, k2)``, the order used by ``project_N``.
    """

    def __init__(self, K: int):
        K = int(K)
        if not 1 <= K <= MAX_WAVENUMBER:
            raise ConfigurationError(f"max wavenumber K must lie in [1, {MAX_WAVENUMBER}], got {K}")
        self.K = K
        ks = [
            (k1, k2)
            for k1 in range(0, K + 1)
            for k2 in range(-K, K + 1)
            if k1 > 0 or k2 > 0
        ]
        kv = np.array(ks, dtype=np.int64)
        self.kx = kv[:, 0]
        self.ky = kv[:, 1]
        self.k2 = (self.kx**2 + self.ky**2).astype(float)
        self.kabs = np.sqrt(self.k2)
        self.sigma = np.stack([-self.ky, self.kx], axis=1) / self.kabs[:, None]
        self.M = len(ks)
        self.pi_order = np.lexsort((self.ky, self.kx, self.k2))
        self.pi_rank = np.empty(self.M, dtype=np.int64)
        self.pi_rank[self.pi_order] = np.arange(self.M)

        n = _fft_size(K)
        nh = n // 2 + 1
        self.n = n
        self._nh = nh
        pos = lambda a, b: (a % n) * nh + b  # noqa: E731
        nonneg = self.ky >= 0
        neg = ~nonneg
        zero = self.ky == 0
        # scatter: k2 >= 0 stored directly, k2 < 0 (and the k2 = 0 mirror) stored conjugated
        self._sel_direct = np.flatnonzero(nonneg)
        self._pos_direct = pos(self.kx[nonneg], self.ky[nonneg])
        conj_sel = np.concatenate([np.flatnonzero(neg), np.flatnonzero(zero)])
        self._sel_conj = conj_sel
        self._pos_conj = pos(-self.kx[conj_sel], np.abs(self.ky[conj_sel]))
        self._sel_neg = np.flatnonzero(neg)
        self._pos_neg = pos(-self.kx[neg], -self.ky[neg])

        # single gather from [c, conj(c), 0] into the half-spectrum
        M = self.M
        gather = np.full(n * nh, 2 * M, dtype=np.int64)
        gather[self._pos_direct] = self._sel_direct
        gather[self._pos_conj] = M + self._sel_conj
        self._gather = gather

    def __repr__(self) -> str:
        return f"WaveGrid(K={self.K}, M={self.M})"

    def __eq__(self, other) -> bool:
        return isinstance(other, WaveGrid) and other.K == self.K

    def __hash__(self) -> int:
        return hash(("WaveGrid", self.K))

    @property
    def eigenvalues(self) -> np.ndarray:
        """Stokes eigenvalues ``|k|^2`` in lexicographic mode order."""
        return self.k2

    @cached_property
    def half(self) -> "HalfSpectrum":
        return HalfSpectrum(self)

    @cached_property
    def sorted_eigenvalues(self) -> np.ndarray:
        return self.k2[self.pi_order]

    # -- collocation transforms -------------------------------------------------

    def scalar_to_physical(self, c: np.ndarray) -> np.ndarray:
        """Real field ``sum_k (c_k e^{ik.x} + c.c.)`` on the padded ``n x n`` grid."""
        c = np.asarray(c)
        lead = c.shape[:-1]
        ext = np.concatenate([c, np.conj(c), np.zeros(lead + (1,), dtype=complex)], axis=-1)
        F = np.take(ext, self._gather, axis=-1).reshape(lead + (self.n, self._nh))
        return sfft.irfft2(F, s=(self.n, self.n), axes=(-2, -1), norm="forward")

    def scalar_from_physical(self, f: np.ndarray) -> np.ndarray:
        """Coefficients ``c_k`` of a real field, for the representative wavevectors."""
        F = sfft.rfft2(f, axes=(-2, -1), norm="forward")
        F = F.reshape(F.shape[:-2] + (-1,))
        c = np.empty(F.shape[:-1] + (self.M,), dtype=complex)
        c[..., self._sel_direct] = F[..., self._pos_direct]
        c[..., self._sel_neg] = np.conj(F[..., self._pos_neg])
        return c

    def velocity_to_physical(self, a: np.ndarray) -> np.ndarray:
        """Velocity components with shape ``(..., 2, n, n)``."""
        a = np.asarray(a)
        comps = a[..., None, :] * self.sigma.T
        return self.scalar_to_physical(comps)

    def project_vector(self, F1: np.ndarray, F2: np.ndarray) -> np.ndarray:
        """Leray projection of a real vector field given by its components on the grid."""
        c1 = self.scalar_from_physical(F1)
        c2 = self.scalar_from_physical(F2)
        return c1 * self.sigma[:, 0] + c2 * self.sigma[:, 1]

    # -- coordinates --------------------------------------------------------------

    def to_real(self, a: np.ndarray) -> np.ndarray:
        """Orthonormal real coordinates: Euclidean norm equals the L2 norm."""
        a = np.asarray(a)
        return np.sqrt(2.0) * np.concatenate([a.real, a.imag], axis=-1)

    def from_real(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        M = self.M
        return (x[..., :M] + 1j * x[..., M:]) / np.sqrt(2.0)

    def pi_mask(self, N: int) -> np.ndarray:
        """Boolean mask of the ``N`` lowest modes in the ``(|k|^2, k)`` order."""
        if not 1 <= N <= self.M:
            raise ConfigurationError(f"N must lie in [1, {self.M}], got {N}")
        mask = np.zeros(self.M, dtype=bool)
        mask[self.pi_order[:N]] = True
        return mask

    def pi_real_indices(self, N: int) -> np.ndarray:
        """Indices of ``H_N`` inside the real coordinate vector (length ``2N``)."""
        idx = np.flatnonzero(self.pi_mask(N))
        return np.concatenate([idx, idx + self.M])


def build_grid(K: int) -> WaveGrid:
    """Wave grid with all conjugate representatives ``0 < |k|_inf <= K``."""
    return WaveGrid(K)


def _l2_inner(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * np.real(np.sum(np.conj(a) * b, axis=-1))


@dataclass(frozen=True, eq=False)
class SpectralVelocity:
    """Divergence-free field: one complex amplitude along ``sigma_k`` per mode."""

    grid: WaveGrid
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        if c.shape != (self.grid.M,):
            raise GridMismatchError(f"expected {self.grid.M} coefficients, got shape {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, grid: WaveGrid) -> "SpectralVelocity":
        return cls(grid, np.zeros(grid.M, dtype=complex))

    @classmethod
    def mode(cls, grid: WaveGrid, k: tuple[int, int], amplitude: complex = 1.0) -> "SpectralVelocity":
        """Single Fourier mode; ``k`` may be either member of a conjugate pair."""
        k1, k2 = k
        c = np.zeros(grid.M, dtype=complex)
        hit = np.flatnonzero((grid.kx == k1) & (grid.ky == k2))
        if hit.size:
            c[hit[0]] = amplitude
        else:
            hit = np.flatnonzero((grid.kx == -k1) & (grid.ky == -k2))
            if not hit.size:
                raise ConfigurationError(f"wavevector {k} not on grid K={grid.K}")
            # conj partner: a_{-k} sigma_{-k} = conj(a_k) sigma_k with sigma_{-k} = -sigma_k
            c[hit[0]] = -np.conj(amplitude)
        return cls(grid, c)

    @classmethod
    def random(cls, grid: WaveGrid, rng: np.random.Generator, decay: float = 1.0) -> "SpectralVelocity":
        """Random smooth field with amplitudes decaying like ``|k|^-(1+decay)``."""
        scale = grid.kabs ** -(1.0 + decay)
        c = (rng.standard_normal(grid.M) + 1j * rng.standard_normal(grid.M)) * scale
        return cls(grid, c)

    def _check(self, other: "SpectralVelocity"):
        if other.grid != self.grid:
            raise GridMismatchError(f"grid mismatch: {self.grid} vs {other.grid}")

    def __add__(self, other: "SpectralVelocity") -> "SpectralVelocity":
        self._check(other)
        return SpectralVelocity(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralVelocity") -> "SpectralVelocity":
        self._check(other)
        return SpectralVelocity(self.grid, self.coeffs - other.coeffs)

    def __neg__(self) -> "SpectralVelocity":
        return SpectralVelocity(self.grid, -self.coeffs)

    def __mul__(self, s: float) -> "SpectralVelocity":
        return SpectralVelocity(self.grid, self.coeffs * s)

    __rmul__ = __mul__

    def inner(self, other: "SpectralVelocity") -> float:
        """L2 inner product."""
        self._check(other)
        return float(_l2_inner(self.coeffs, other.coeffs))

    def norm(self) -> float:
        return float(np.sqrt(2.0 * np.sum(np.abs(self.coeffs) ** 2)))

    def h1_norm(self) -> float:
        """Homogeneous H^1 norm ``||grad u||``."""
        return float(np.sqrt(2.0 * np.sum(self.grid.k2 * np.abs(self.coeffs) ** 2)))

    def energy(self) -> float:
        return 0.5 * self.norm() ** 2

    def enstrophy(self) -> float:
        return 0.5 * self.h1_norm() ** 2

    def vector_coeffs(self) -> np.ndarray:
        """Complex vector amplitude ``a_k sigma_k`` per mode, shape ``(M, 2)``."""
        return self.coeffs[:, None] * self.grid.sigma

    def to_physical(self, n: int | None = None) -> np.ndarray:
        """Velocity on an ``n x n`` collocation grid, shape ``(2, n, n)``."""
        if n is None:
            return self.grid.velocity_to_physical(self.coeffs)
        return evaluate_velocity(self.grid, self.coeffs, n)

    def to_real(self) -> np.ndarray:
        return self.grid.to_real(self.coeffs)

    @classmethod
    def from_real(cls, grid: WaveGrid, x: np.ndarray) -> "SpectralVelocity":
        return cls(grid, grid.from_real(x))


def evaluate_velocity(grid: WaveGrid, a: np.ndarray, n: int) -> np.ndarray:
    """Evaluate velocity on an ``n x n`` uniform grid by direct summation.

    Independent of the FFT path; meant for quadrature checks.
    """
    x = 2 * np.pi * np.arange(n) / n
    ex = np.exp(1j * np.outer(grid.kx, x))  # (M, n)
    ey = np.exp(1j * np.outer(grid.ky, x))
    out = np.empty((2, n, n))
    for c in range(2):
        amp = a * grid.sigma[:, c]
        field_c = np.einsum("m,mi,mj->ij", amp, ex, ey)
        out[c] = 2.0 * field_c.real
    return out


def leray_project_raw(grid: WaveGrid, raw: np.ndarray) -> np.ndarray:
    """Project complex vector amplitudes ``(M, 2)`` onto ``sigma_k``; returns ``(M, 2)``."""
    raw = np.asarray(raw, dtype=complex)
    if raw.shape != (grid.M, 2):
        raise GridMismatchError(f"raw field must have shape {(grid.M, 2)}, got {raw.shape}")
    a = np.sum(raw * grid.sigma, axis=1)
    return a[:, None] * grid.sigma


def leray_project(grid: WaveGrid, raw: np.ndarray) -> SpectralVelocity:
    """Divergence-free part of a raw field given as complex pairs per wavevector."""
    raw = np.asarray(raw, dtype=complex)
    if raw.shape != (grid.M, 2):
        raise GridMismatchError(f"raw field must have shape {(grid.M, 2)}, got {raw.shape}")
    return SpectralVelocity(grid, np.sum(raw * grid.sigma, axis=1))


def _bilinear_coeffs(grid: WaveGrid, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    u = grid.velocity_to_physical(a)
    kk = np.stack([grid.kx, grid.ky])  # derivative multipliers
    # d_j v_i coefficients: i k_j b sigma_i
    grads = grid.scalar_to_physical(
        1j * b[..., None, None, :] * kk[None, :, :] * grid.sigma.T[:, None, :]
    )  # (..., i, j, n, n)
    F1 = u[..., 0, :, :] * grads[..., 0, 0, :, :] + u[..., 1, :, :] * grads[..., 0, 1, :, :]
    F2 = u[..., 0, :, :] * grads[..., 1, 0, :, :] + u[..., 1, :, :] * grads[..., 1, 1, :, :]
    return grid.project_vector(F1, F2)


def bilinear(u: SpectralVelocity, v: SpectralVelocity) -> SpectralVelocity:
    """``B(u, v) = Pi((u . grad) v)`` truncated to the grid."""
    u._check(v)
    return SpectralVelocity(u.grid, _bilinear_coeffs(u.grid, u.coeffs, v.coeffs))


def project_N(u: SpectralVelocity, N: int) -> SpectralVelocity:
    """Keep the ``N`` lowest Stokes modes of ``u``."""
    mask = u.grid.pi_mask(N)
    return SpectralVelocity(u.grid, np.where(mask, u.coeffs, 0.0))


# -- batched kernels used by the time integrators --------------------------------


def nonlinear_term(grid: WaveGrid, a: np.ndarray) -> np.ndarray:
    """``B(u, u)`` for a batch of coefficient vectors, via the vorticity form.

    In 2D, ``curl((u.grad)u) = u.grad(omega)`` and the sigma-component of a
    projected field equals ``-i curl_hat / |k|``.
    """
    kx, ky, kabs = grid.kx, grid.ky, grid.kabs
    phys = grid.scalar_to_physical(
        np.stack(
            [
                a * grid.sigma[:, 0],
                a * grid.sigma[:, 1],
                -kx * kabs * a,  # d1 omega, omega_hat = i |k| a
                -ky * kabs * a,
            ],
            axis=-2,
        )
    )
    adv = phys[..., 0, :, :] * phys[..., 2, :, :] + phys[..., 1, :, :] * phys[..., 3, :, :]
    return -1j * grid.scalar_from_physical(adv) / kabs


class LinearizationFields:
    """Physical-space data of a reference field needed by the linearised operators."""

    __slots__ = ("u1", "u2", "w1", "w2")

    def __init__(self, grid: WaveGrid, a: np.ndarray):
        kx, ky, kabs = grid.kx, grid.ky, grid.kabs
        phys = grid.scalar_to_physical(
            np.stack(
                [a * grid.sigma[:, 0], a * grid.sigma[:, 1], -kx * kabs * a, -ky * kabs * a],
                axis=-2,
            )
        )
        self.u1, self.u2, self.w1, self.w2 = phys[..., 0, :, :], phys[..., 1, :, :], phys[..., 2, :, :], phys[..., 3, :, :]

    def __getitem__(self, idx) -> "LinearizationFields":
        out = object.__new__(LinearizationFields)
        out.u1, out.u2, out.w1, out.w2 = self.u1[idx], self.u2[idx], self.w1[idx], self.w2[idx]
        return out


def linearized_term(grid: WaveGrid, ref: LinearizationFields, v: np.ndarray) -> np.ndarray:
    """``B(u_ref, v) + B(v, u_ref)`` using the polarised vorticity identity."""
    kx, ky, kabs = grid.kx, grid.ky, grid.kabs
    phys = grid.scalar_to_physical(
        np.stack(
            [v * grid.sigma[:, 0], v * grid.sigma[:, 1], -kx * kabs * v, -ky * kabs * v],
            axis=-2,
        )
    )
    adv = (
        ref.u1 * phys[..., 2, :, :]
        + ref.u2 * phys[..., 3, :, :]
        + phys[..., 0, :, :] * ref.w1
        + phys[..., 1, :, :] * ref.w2
    )
    return -1j * grid.scalar_from_physical(adv) / kabs


def linearized_adjoint_term(grid: WaveGrid, ref: LinearizationFields, w: np.ndarray) -> np.ndarray:
    """L2-transpose of ``v -> B(u_ref, v) + B(v, u_ref)``.

    Equals ``-Pi(u_ref . (grad w + grad w^T))`` after dropping a gradient.
    """
    kx, ky = grid.kx, grid.ky
    s1, s2 = grid.sigma[:, 0], grid.sigma[:, 1]
    # d1 w1 and (d2 w1 + d1 w2); d2 w2 = -d1 w1
    phys = grid.scalar_to_physical(
        np.stack([1j * kx * s1 * w, 1j * (ky * s1 + kx * s2) * w], axis=-2)
    )
    S11, S12 = phys[..., 0, :, :], phys[..., 1, :, :]
    G1 = 2.0 * ref.u1 * S11 + ref.u2 * S12
    G2 = ref.u1 * S12 - 2.0 * ref.u2 * S11
    return -grid.project_vector(G1, G2)


class HalfSpectrum:
    """Fields stored directly in the ``rfft2`` half-plane layout ``(..., n, n//2 + 1)``.

    Slot ``(k1, k2)`` holds the scalar amplitude ``A(k)`` with velocity
    coefficient ``sigma_k A(k)``; for non-representative slots
    ``A(k) = -conj(a_{-k})``. Time integrators work in this layout to avoid
    gathers between the mode list and the FFT buffers on every evaluation.
    """

    def __init__(self, grid: WaveGrid):
        self.grid = grid
        n, nh = grid.n, grid._nh
        self.n, self.nh = n, nh
        k1 = np.fft.fftfreq(n, 1.0 / n).astype(np.int64)[:, None] * np.ones((1, nh), dtype=np.int64)
        k2 = np.arange(nh, dtype=np.int64)[None, :] * np.ones((n, 1), dtype=np.int64)
        K = grid.K
        self.mask = (np.abs(k1) <= K) & (k2 <= K) & ((k1 != 0) | (k2 != 0))
        k2f = (k1**2 + k2**2).astype(float)
        kabs = np.sqrt(k2f)
        safe = np.where(self.mask, kabs, 1.0)
        self.k1, self.k2 = k1, k2
        self.ksq = np.where(self.mask, k2f, 0.0)
        self.inv_kabs = np.where(self.mask, 1.0 / safe, 0.0)
        self.sig1 = np.where(self.mask, -k2 / safe, 0.0)
        self.sig2 = np.where(self.mask, k1 / safe, 0.0)
        # d_j omega = -k_j |k| A
        self.dw1 = np.where(self.mask, -k1 * safe, 0.0)
        self.dw2 = np.where(self.mask, -k2 * safe, 0.0)
        self.weight = np.where(self.mask, np.where(k2 > 0, 2.0, 1.0), 0.0)
        self._field_coef = np.stack([self.sig1, self.sig2, self.dw1, self.dw2])
        self._adj_coef = np.stack([1j * k1 * self.sig1, 1j * (k2 * self.sig1 + k1 * self.sig2)])
        self._curl_inv = -1j * self.inv_kabs
        # representative slots and their mirrors
        rep_k1 = grid.kx
        rep_k2 = grid.ky
        direct = rep_k2 >= 0
        self._rep_flat = np.where(direct, (rep_k1 % n) * nh + rep_k2, (-rep_k1 % n) * nh - rep_k2)
        self._rep_direct = direct
        mirror = rep_k2 == 0
        self._mirror_sel = np.flatnonzero(mirror)
        self._mirror_flat = (-rep_k1[mirror] % n) * nh

    def to_half(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=complex)
        lead = a.shape[:-1]
        out = np.zeros(lead + (self.n * self.nh,), dtype=complex)
        d = self._rep_direct
        out[..., self._rep_flat[d]] = a[..., d]
        out[..., self._rep_flat[~d]] = -np.conj(a[..., ~d])
        out[..., self._mirror_flat] = -np.conj(a[..., self._mirror_sel])
        return out.reshape(lead + (self.n, self.nh))

    def from_half(self, A: np.ndarray) -> np.ndarray:
        flat = A.reshape(A.shape[:-2] + (self.n * self.nh,))
        vals = flat[..., self._rep_flat]
        return np.where(self._rep_direct, vals, -np.conj(vals))

    def inner(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return np.sum(self.weight * np.real(np.conj(A) * B), axis=(-2, -1))

    def _phys(self, stack: np.ndarray) -> np.ndarray:
        return sfft.irfft2(stack, s=(self.n, self.n), axes=(-2, -1), norm="forward")

    def _spec(self, f: np.ndarray) -> np.ndarray:
        return sfft.rfft2(f, axes=(-2, -1), norm="forward")

    def fields(self, A: np.ndarray) -> np.ndarray:
        """Physical ``(u1, u2, d1 omega, d2 omega)`` stacked on axis -3."""
        return self._phys(A[..., None, :, :] * self._field_coef)

    def nonlinear(self, A: np.ndarray) -> np.ndarray:
        """``B(u, u)`` in half layout."""
        p = self.fields(A)
        adv = p[..., 0, :, :] * p[..., 2, :, :] + p[..., 1, :, :] * p[..., 3, :, :]
        return self._curl_inv * self._spec(adv)

    def linearized(self, ref: "LinearizationFields", V: np.ndarray) -> np.ndarray:
        p = self.fields(V)
        adv = ref.u1 * p[..., 2, :, :] + ref.u2 * p[..., 3, :, :] + p[..., 0, :, :] * ref.w1 + p[..., 1, :, :] * ref.w2
        return self._curl_inv * self._spec(adv)

    def linearized_adjoint(self, ref: "LinearizationFields", W: np.ndarray) -> np.ndarray:
        # d1 w1 and (d2 w1 + d1 w2), with w = sigma W
        p = self._phys(W[..., None, :, :] * self._adj_coef)
        S11, S12 = p[..., 0, :, :], p[..., 1, :, :]
        G = self._spec(np.stack([2.0 * ref.u1 * S11 + ref.u2 * S12, ref.u1 * S12 - 2.0 * ref.u2 * S11], axis=-3))
        return -(self.sig1 * G[..., 0, :, :] + self.sig2 * G[..., 1, :, :])


# -- snapshot format ---------------------------------------------------------------


def encode_snapshot(u: SpectralVelocity) -> bytes:
    """NSMX record: magic, version, K, mode count (u32 LE), then (re, im) f64 LE pairs."""
    g = u.grid
    head = SNAPSHOT_MAGIC + struct.pack("<III", SNAPSHOT_VERSION, g.K, g.M)
    body = np.empty(2 * g.M, dtype="<f8")
    body[0::2] = u.coeffs.real
    body[1::2] = u.coeffs.imag
    return head + body.tobytes()


def decode_snapshot(data: bytes, offset: int = 0) -> tuple[SpectralVelocity, int]:
    """Decode one NSMX record; returns the field and the offset after it."""
    if data[offset : offset + 4] != SNAPSHOT_MAGIC:
        raise ValueError("not an NSMX snapshot (bad magic)")
    version, K, M = struct.unpack_from("<III", data, offset + 4)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported NSMX version {version}")
    grid = build_grid(K)
    if grid.M != M:
        raise ValueError(f"mode count {M} inconsistent with K={K}")
    start = offset + 16
    body = np.frombuffer(data, dtype="<f8", count=2 * M, offset=start)
    return SpectralVelocity(grid, body[0::2] + 1j * body[1::2]), start + 16 * M


def write_snapshot(path: str | Path, u: SpectralVelocity) -> None:
    Path(path).write_bytes(encode_snapshot(u))


def read_snapshot(path: str | Path) -> SpectralVelocity:
    u, _ = decode_snapshot(Path(path).read_bytes())
    return u
