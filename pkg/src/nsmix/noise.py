"""Space-time localised forcing dictionary and bounded random coefficients.

Each dictionary element is a separable product::

    psi_j(t, x, y) = T_n(t) S_p(x) S_q(y) e_pol

where every factor is an L2-normalised sine mode on its interval multiplied
by the smooth bump ``beta(s) = exp(1 - 1/(1 - s^2))`` on the rescaled
interval. Spatial integrals use the area-normalised measure of
:mod:`nsmix.spectral`; time integrals use ``dt`` on ``[0, 1]``.

Coefficients are i.i.d. with density ``rho(r) = 15/16 (1 - r^2)^2`` on
``[-1, 1]``, i.e. ``2 * Beta(3, 3) - 1``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError
from .spectral import WaveGrid

__all__ = [
    "CylinderSpec",
    "NoiseBasis",
    "NoiseSample",
    "build_noise_basis",
    "sample_noise",
    "sample_coefficients",
    "density",
    "log_density",
    "coefficient_density",
    "render",
    "bump",
    "rng_stream",
    "amplitude_rule",
]

RHO_NORMALIZER = 15.0 / 16.0
COEFF_VARIANCE = 1.0 / 7.0
MAX_DICTIONARY = 256
GRAM_CONDITION_LIMIT = 1e12
_FINE_FFT = 1024


def rng_stream(master_seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(master seed, key...)``, e.g. (seed, chain, step)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, keys)]))


def coefficient_density(r: np.ndarray) -> np.ndarray:
    """``rho(r) = 15/16 (1 - r^2)^2`` on [-1, 1], zero elsewhere."""
    r = np.asarray(r, dtype=float)
    return np.where(np.abs(r) <= 1.0, RHO_NORMALIZER * (1.0 - r * r) ** 2, 0.0)


def coefficient_density_grad(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    return np.where(np.abs(r) <= 1.0, -4.0 * RHO_NORMALIZER * r * (1.0 - r * r), 0.0)


def bump(s: np.ndarray, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Smooth bump on ``(a, b)`` and its derivative."""
    s = np.asarray(s, dtype=float)
    z = 2.0 * (s - a) / (b - a) - 1.0
    inside = np.abs(z) < 1.0
    zz = np.where(inside, z, 0.0)
    one_minus = 1.0 - zz * zz
    val = np.where(inside, np.exp(1.0 - 1.0 / one_minus), 0.0)
    dval = np.where(inside, val * (-2.0 * zz / one_minus**2) * (2.0 / (b - a)), 0.0)
    return val, dval


def _sine_factor(s: np.ndarray, a: float, b: float, mode: int, scale: float):
    """Bump-times-sine factor and its derivative; ``scale`` normalises the sine."""
    L = b - a
    w = mode * np.pi / L
    arg = w * (np.asarray(s, dtype=float) - a)
    beta, dbeta = bump(s, a, b)
    sin, cos = np.sin(arg), np.cos(arg)
    return scale * beta * sin, scale * (dbeta * sin + beta * w * cos)


@dataclass(frozen=True)
class CylinderSpec:
    """Support ``(t_a, t_b) x (x_a, x_b) x (y_a, y_b)`` of the forcing."""

    t_a: float = 0.25
    t_b: float = 0.75
    x_a: float = 0.5 * np.pi
    x_b: float = 1.5 * np.pi
    y_a: float = 0.5 * np.pi
    y_b: float = 1.5 * np.pi

    def __post_init__(self):
        if not 0.0 < self.t_a < self.t_b < 1.0:
            raise ConfigurationError(
                f"cylinder time window must satisfy 0 < t_a < t_b < 1, got ({self.t_a}, {self.t_b})"
            )
        two_pi = 2.0 * np.pi
        for lo, hi, name in ((self.x_a, self.x_b, "x"), (self.y_a, self.y_b, "y")):
            if not 0.0 < lo < hi < two_pi:
                raise ConfigurationError(
                    f"cylinder {name}-interval must satisfy 0 < {name}_a < {name}_b < 2*pi, got ({lo}, {hi})"
                )

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "CylinderSpec":
        if len(values) != 6:
            raise ConfigurationError("cylinder needs six numbers [t_a, t_b, x_a, x_b, y_a, y_b]")
        return cls(*map(float, values))

    def as_list(self) -> list[float]:
        return [self.t_a, self.t_b, self.x_a, self.x_b, self.y_a, self.y_b]

    def contains(self, t, x, y) -> np.ndarray:
        return (
            (self.t_a < t) & (t < self.t_b) & (self.x_a < x) & (x < self.x_b) & (self.y_a < y) & (y < self.y_b)
        )


def enumerate_triples(J: int) -> list[tuple[int, int, int, int]]:
    """First ``J`` (time mode, x mode, y mode, polarisation) in diagonal order."""
    out: list[tuple[int, int, int, int]] = []
    total = 3
    while len(out) < J:
        for n in range(1, total - 1):
            for p in range(1, total - n):
                q = total - n - p
                for pol in (0, 1):
                    out.append((n, p, q, pol))
        total += 1
    return out[:J]


def amplitude_rule(J: int, b0: float = 0.3, decay_s: float = 1.0, explicit: Sequence[float] | None = None) -> np.ndarray:
    """``b_j = b0 * j**(-s)`` or an explicit list."""
    if explicit is not None:
        b = np.asarray(explicit, dtype=float)
        if b.shape != (J,):
            raise ConfigurationError(f"explicit amplitude list must have length J={J}")
    else:
        if decay_s < 0:
            raise ConfigurationError("amplitude decay exponent s must be >= 0")
        b = b0 * np.arange(1, J + 1, dtype=float) ** (-decay_s)
    if np.any(b < 0):
        raise ConfigurationError("amplitudes b_j must be non-negative")
    return b


def _gauss_nodes(a: float, b: float, n: int = 400):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


class NoiseBasis:
    """Dictionary ``psi_j = chi * phi_j`` with amplitudes ``b_j``.

    Attributes
    ----------
    triples : (J, 4) int array of (time mode, x mode, y mode, polarisation).
    b : amplitudes.
    spatial : (J, M) complex Leray-projected spatial coefficients.
    gram_condition : condition number of the L2(Q) Gram matrix of ``psi_j``.
    """

    def __init__(
        self,
        cylinder: CylinderSpec,
        J: int,
        b: np.ndarray,
        grid: WaveGrid,
        n_active: int | None = None,
    ):
        if not 1 <= J <= MAX_DICTIONARY:
            raise ConfigurationError(f"dictionary size J must lie in [1, {MAX_DICTIONARY}], got {J}")
        b = np.asarray(b, dtype=float)
        if b.shape != (J,):
            raise ConfigurationError(f"need {J} amplitudes, got {b.shape}")
        n_active = J if n_active is None else int(n_active)
        if np.any(b[:n_active] == 0):
            raise ConfigurationError(
                "non-degeneracy violated: b_j must be nonzero for j <= n_active"
            )
        self.cylinder = cylinder
        self.J = J
        self.b = b
        self.grid = grid
        self.n_active = n_active
        self.triples = np.array(enumerate_triples(J), dtype=np.int64)
        c = cylinder
        self._t_scale = np.sqrt(2.0 / (c.t_b - c.t_a))
        self._x_scale = np.sqrt(4.0 * np.pi / (c.x_b - c.x_a))
        self._y_scale = np.sqrt(4.0 * np.pi / (c.y_b - c.y_a))
        self.spatial = self._spatial_coefficients()
        self.gram = self._gram(derivative=False)
        eig = np.linalg.eigvalsh(self.gram)
        self.gram_condition = float(eig[-1] / eig[0]) if eig[0] > 0 else np.inf
        if not np.isfinite(self.gram_condition) or self.gram_condition > GRAM_CONDITION_LIMIT:
            raise ConfigurationError(
                f"dictionary Gram matrix is degenerate (condition number {self.gram_condition:.3g})"
            )
        self._mesh_cache: dict[float, np.ndarray] = {}

    def __repr__(self) -> str:
        return f"NoiseBasis(J={self.J}, K={self.grid.K}, cond={self.gram_condition:.3g})"

    # -- factors ---------------------------------------------------------------

    def time_factor(self, t: np.ndarray, derivative: bool = False) -> np.ndarray:
        """``T_n(t)`` for every dictionary element, shape ``(len(t), J)``."""
        c = self.cylinder
        t = np.atleast_1d(np.asarray(t, dtype=float))
        modes = np.unique(self.triples[:, 0])
        out = np.zeros((t.size, self.J))
        for n in modes:
            val, dval = _sine_factor(t, c.t_a, c.t_b, int(n), self._t_scale)
            out[:, self.triples[:, 0] == n] = (dval if derivative else val)[:, None]
        return out

    def space_factor_1d(self, s: np.ndarray, axis: int, mode: int, derivative: bool = False) -> np.ndarray:
        c = self.cylinder
        a, b, scale = (c.x_a, c.x_b, self._x_scale) if axis == 0 else (c.y_a, c.y_b, self._y_scale)
        val, dval = _sine_factor(s, a, b, mode, scale)
        return dval if derivative else val

    def evaluate(self, j: int, t: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Pointwise values of ``psi_j`` (0-based ``j``) on broadcast arrays; returns ``(2, ...)``."""
        n, p, q, pol = self.triples[j]
        t, x, y = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float), np.asarray(y, float))
        T = self.time_factor(t.ravel())[:, j].reshape(t.shape)
        val = T * self.space_factor_1d(x, 0, int(p)) * self.space_factor_1d(y, 1, int(q))
        out = np.zeros((2,) + t.shape)
        out[pol] = val
        return out

    def _spatial_coefficients(self) -> np.ndarray:
        g = self.grid
        nf = _FINE_FFT
        s = 2.0 * np.pi * np.arange(nf) / nf
        out = np.zeros((self.J, g.M), dtype=complex)
        cache: dict[tuple[int, int], np.ndarray] = {}

        def coeffs_1d(axis: int, mode: int) -> np.ndarray:
            key = (axis, mode)
            if key not in cache:
                f = self.space_factor_1d(s, axis, mode)
                cache[key] = np.fft.fft(f) / nf  # index k -> coefficient of e^{iks}
            return cache[key]

        for j, (n, p, q, pol) in enumerate(self.triples):
            cx = coeffs_1d(0, int(p))[g.kx % nf]
            cy = coeffs_1d(1, int(q))[g.ky % nf]
            out[j] = cx * cy * g.sigma[:, pol]
        return out

    # -- Gram matrices and norms ------------------------------------------------

    def _factor_grams(self, derivative_in: str | None):
        c = self.cylinder
        tt, wt = _gauss_nodes(c.t_a, c.t_b)
        xx, wx = _gauss_nodes(c.x_a, c.x_b)
        yy, wy = _gauss_nodes(c.y_a, c.y_b)
        wx = wx / (2.0 * np.pi)
        wy = wy / (2.0 * np.pi)
        T = self.time_factor(tt, derivative=derivative_in == "t")
        X = np.stack([self.space_factor_1d(xx, 0, int(p), derivative=derivative_in == "x") for p in self.triples[:, 1]], axis=1)
        Y = np.stack([self.space_factor_1d(yy, 1, int(q), derivative=derivative_in == "y") for q in self.triples[:, 2]], axis=1)
        GT = T.T @ (wt[:, None] * T)
        GX = X.T @ (wx[:, None] * X)
        GY = Y.T @ (wy[:, None] * Y)
        pol = self.triples[:, 3]
        return GT * GX * GY * (pol[:, None] == pol[None, :])

    def _gram(self, derivative: bool) -> np.ndarray:
        G = self._factor_grams(None)
        if derivative:
            G = G + self._factor_grams("t") + self._factor_grams("x") + self._factor_grams("y")
        return G

    @cached_property
    def gram_h1(self) -> np.ndarray:
        """Space-time ``H^1(D_1)`` Gram matrix of the (unprojected) dictionary."""
        return self._gram(derivative=True)

    @cached_property
    def l2_norms(self) -> np.ndarray:
        return np.sqrt(np.diag(self.gram))

    @cached_property
    def h1_norms(self) -> np.ndarray:
        return np.sqrt(np.diag(self.gram_h1))

    @property
    def B(self) -> float:
        """``sum_j b_j ||psi_j||_{H^1(D_1)}``."""
        return float(np.sum(self.b * self.h1_norms))

    @cached_property
    def projected_gram(self) -> np.ndarray:
        """L2(D_1) Gram matrix of the rendered (projected, truncated) dictionary."""
        c = self.cylinder
        tt, wt = _gauss_nodes(c.t_a, c.t_b)
        T = self.time_factor(tt)
        GT = T.T @ (wt[:, None] * T)
        S = self.spatial
        GS = 2.0 * np.real(np.conj(S) @ S.T)
        return GT * GS

    def support_bound_h1(self) -> float:
        """Almost-sure bound of ``||eta||_{H^1(D_1)}`` over the support of the law."""
        return self.B

    # -- rendering ---------------------------------------------------------------

    def mesh_profile(self, dt: float) -> np.ndarray:
        """Time factors on the mesh ``t_i = i dt``, shape ``(n_steps + 1, J)``; cached."""
        key = float(dt)
        if key not in self._mesh_cache:
            n_steps = int(round(1.0 / dt))
            t = np.arange(n_steps + 1) * dt
            prof = self.time_factor(t)
            prof[(t <= self.cylinder.t_a) | (t >= self.cylinder.t_b)] = 0.0
            self._mesh_cache[key] = prof
        return self._mesh_cache[key]


@dataclass(frozen=True, eq=False)
class NoiseSample:
    """Coefficients ``xi_j`` in [-1, 1] of one noise realisation."""

    xi: np.ndarray = field(repr=False)

    def __post_init__(self):
        xi = np.array(self.xi, dtype=float)
        if xi.ndim != 1:
            raise ValueError("NoiseSample expects a 1-D coefficient vector")
        if np.any(np.abs(xi) > 1.0):
            raise ValueError("noise coefficients must satisfy |xi_j| <= 1")
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)

    @property
    def J(self) -> int:
        return self.xi.size

    def weights(self, basis: NoiseBasis) -> np.ndarray:
        """Dictionary weights ``b_j xi_j``."""
        return basis.b * self.xi


def build_noise_basis(
    spec: CylinderSpec,
    J: int,
    b: np.ndarray | None = None,
    grid: WaveGrid | None = None,
    dt: float | None = None,
    *,
    b0: float = 0.3,
    decay_s: float = 1.0,
    n_active: int | None = None,
) -> NoiseBasis:
    """Build the dictionary; ``b`` defaults to ``b0 * j**(-decay_s)``."""
    if grid is None:
        raise ConfigurationError("a wave grid is required to render the dictionary")
    if b is None:
        b = amplitude_rule(J, b0, decay_s)
    basis = NoiseBasis(spec, J, b, grid, n_active=n_active)
    if dt is not None:
        basis.mesh_profile(dt)
    return basis


def sample_coefficients(rng: np.random.Generator, size) -> np.ndarray:
    """Draws from ``rho``: ``2 * Beta(3, 3) - 1``."""
    return 2.0 * rng.beta(3.0, 3.0, size=size) - 1.0


def sample_noise(basis: NoiseBasis, rng: np.random.Generator) -> NoiseSample:
    return NoiseSample(sample_coefficients(rng, basis.J))


def log_density(sample: NoiseSample | np.ndarray) -> float | np.ndarray:
    """Log of ``prod_j rho(xi_j)``; ``-inf`` outside the cube. Accepts batches."""
    xi = sample.xi if isinstance(sample, NoiseSample) else np.asarray(sample, dtype=float)
    inside = np.all(np.abs(xi) < 1.0, axis=-1)
    safe = np.where(np.abs(xi) < 1.0, xi, 0.0)
    val = np.sum(np.log(RHO_NORMALIZER) + 2.0 * np.log1p(-safe * safe), axis=-1)
    out = np.where(inside, val, -np.inf)
    return float(out) if np.ndim(out) == 0 else out


def density(sample: NoiseSample | np.ndarray) -> float | np.ndarray:
    out = np.exp(log_density(sample))
    return float(out) if np.ndim(out) == 0 else out


def render(basis: NoiseBasis, coefficients: np.ndarray | NoiseSample, dt: float, *, scaled: bool = True) -> np.ndarray:
    """Spectral time series of ``sum_j w_j psi_j`` on the mesh ``i * dt``.

    With a :class:`NoiseSample` (or ``scaled=True``) the weights are ``b_j xi_j``;
    with ``scaled=False`` they are raw control coefficients ``c_j`` (padded
    with zeros when fewer than ``J`` are given). Returns ``(..., n_steps + 1, M)``.
    """
    w = dictionary_weights(basis, coefficients, scaled=scaled)
    prof = basis.mesh_profile(dt)
    return np.einsum("...j,tj,jm->...tm", w, prof, basis.spatial)


def dictionary_weights(basis: NoiseBasis, coefficients, *, scaled: bool = True) -> np.ndarray:
    if isinstance(coefficients, NoiseSample):
        return basis.b * coefficients.xi
    c = np.asarray(coefficients, dtype=float)
    if scaled:
        return basis.b * c
    if c.shape[-1] < basis.J:
        pad = np.zeros(c.shape[:-1] + (basis.J - c.shape[-1],))
        c = np.concatenate([c, pad], axis=-1)
    return c


def noise_csv(basis: NoiseBasis, sample: NoiseSample | None = None) -> str:
    """CSV with columns ``j, b_j, xi_j`` (``xi_j`` empty without a sample)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["j", "b_j", "xi_j"])
    for j in range(basis.J):
        xi = "" if sample is None else repr(float(sample.xi[j]))
        w.writerow([j + 1, repr(float(basis.b[j])), xi])
    return buf.getvalue()


def read_noise_csv(text: str) -> tuple[np.ndarray, np.ndarray | None]:
    rows = list(csv.DictReader(io.StringIO(text)))
    b = np.array([float(r["b_j"]) for r in rows])
    if all(r["xi_j"] for r in rows):
        return b, np.array([float(r["xi_j"]) for r in rows])
    return b, None
