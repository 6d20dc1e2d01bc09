"""Time integration of the Galerkin Navier-Stokes system on [0, 1].

Scheme: integrating factor for the viscous term, explicit Heun for the
quadratic and forcing terms::

    u*      = E (u_n + dt N_n(u_n))
    u_{n+1} = E u_n + dt/2 (E N_n(u_n) + N_{n+1}(u*)),   E = exp(-nu |k|^2 dt)

with ``N_n(u) = -B(u, u) + f(t_n)``. The linearised solver applies the same
scheme to ``v -> -(B(u_ref, v) + B(v, u_ref)) + g``; the adjoint solver is
its exact transpose, so discrete duality holds to rounding.

Array-level integrators work on coefficient batches of shape ``(..., M)``;
the :class:`~nsmix.spectral.SpectralVelocity` wrappers are thin.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigurationError, GridMismatchError, IntegrationError
from .noise import NoiseBasis, NoiseSample, dictionary_weights
from .spectral import (
    LinearizationFields,
    SpectralVelocity,
    WaveGrid,
    decode_snapshot,
    encode_snapshot,
    nonlinear_term,
)

__all__ = [
    "PeriodicForce",
    "ForcingProfile",
    "Trajectory",
    "AdjointTrajectory",
    "ReferenceFlow",
    "step",
    "time_one_map",
    "solve_linearized",
    "solve_adjoint",
    "chain_step",
    "chain_step_batch",
    "reference_trajectory",
    "integrate",
    "integrate_linearized",
    "integrate_adjoint",
    "n_steps_for",
]

BLOWUP_THRESHOLD = 1e8
MAX_DT = 1e-2


def n_steps_for(dt: float) -> int:
    """Number of steps covering [0, 1]; ``dt`` must divide 1 and be at most 1e-2."""
    if not 0.0 < dt <= MAX_DT * (1 + 1e-12):
        raise ConfigurationError(f"time step must lie in (0, {MAX_DT}], got {dt}")
    n = int(round(1.0 / dt))
    if abs(n * dt - 1.0) > 1e-9:
        raise ConfigurationError(f"time step {dt} does not divide the unit interval")
    return n


def _guard(a: np.ndarray, n: int):
    if not np.all(np.isfinite(a)) or np.max(np.abs(a), initial=0.0) > BLOWUP_THRESHOLD:
        raise IntegrationError(f"integration blew up at step {n} (|coef| > {BLOWUP_THRESHOLD:g} or non-finite)")


# -- forcing -----------------------------------------------------------------------


class PeriodicForce:
    """1-periodic deterministic forcing ``h(t) = sum_l cos(2 pi l t) C_l + sin(2 pi l t) S_l``."""

    def __init__(self, grid: WaveGrid, cos: np.ndarray, sin: np.ndarray | None = None):
        cos = np.atleast_2d(np.asarray(cos, dtype=complex))
        sin = np.zeros_like(cos) if sin is None else np.atleast_2d(np.asarray(sin, dtype=complex))
        if cos.shape != sin.shape or cos.shape[1] != grid.M:
            raise GridMismatchError(f"forcing coefficients must have shape (L+1, {grid.M})")
        if not (np.all(np.isfinite(cos)) and np.all(np.isfinite(sin))):
            raise ConfigurationError("forcing coefficients must be finite")
        self.grid = grid
        self.cos = cos
        self.sin = sin
        self.sin[0] = 0.0

    @classmethod
    def zero(cls, grid: WaveGrid) -> "PeriodicForce":
        return cls(grid, np.zeros((1, grid.M)))

    @classmethod
    def steady(cls, u: SpectralVelocity) -> "PeriodicForce":
        return cls(u.grid, u.coeffs[None, :])

    @classmethod
    def random(cls, grid: WaveGrid, rng: np.random.Generator, amplitude: float = 1.0, n_harmonics: int = 2, kmax: int = 2):
        """Random smooth forcing on modes with ``|k|_inf <= kmax``."""
        L = n_harmonics + 1
        mask = (np.abs(grid.kx) <= kmax) & (np.abs(grid.ky) <= kmax)
        shape = (L, grid.M)
        c = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * mask
        s = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * mask
        f = cls(grid, c, s)
        scale = amplitude / max(f.l2_norm(), 1e-300)
        return cls(grid, c * scale, s * scale)

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.cos) or np.any(self.sin))

    def __add__(self, other: "PeriodicForce") -> "PeriodicForce":
        if other.grid != self.grid:
            raise GridMismatchError("forcings live on different grids")
        L = max(len(self.cos), len(other.cos))
        c = np.zeros((L, self.grid.M), complex)
        s = np.zeros((L, self.grid.M), complex)
        for f in (self, other):
            c[: len(f.cos)] += f.cos
            s[: len(f.sin)] += f.sin
        return PeriodicForce(self.grid, c, s)

    def __mul__(self, a: float) -> "PeriodicForce":
        return PeriodicForce(self.grid, self.cos * a, self.sin * a)

    __rmul__ = __mul__

    def __call__(self, t) -> np.ndarray:
        """Coefficients at times ``t``, shape ``(len(t), M)`` (or ``(M,)`` for scalar ``t``)."""
        scalar = np.ndim(t) == 0
        t = np.atleast_1d(np.asarray(t, dtype=float))
        w = 2.0 * np.pi * np.arange(len(self.cos))
        out = np.cos(np.outer(t, w)) @ self.cos + np.sin(np.outer(t, w)) @ self.sin
        return out[0] if scalar else out

    def time_derivative(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        w = 2.0 * np.pi * np.arange(len(self.cos))
        return (-np.sin(np.outer(t, w)) * w) @ self.cos + (np.cos(np.outer(t, w)) * w) @ self.sin

    def l2_norm(self) -> float:
        """``||h||_{L2(D_1)}`` (Parseval in time and space)."""
        c2 = np.sum(np.abs(self.cos) ** 2, axis=1)
        s2 = np.sum(np.abs(self.sin) ** 2, axis=1)
        tot = 2.0 * (c2[0] + 0.5 * np.sum(c2[1:] + s2[1:]))
        return float(np.sqrt(tot))

    def h1_norm(self) -> float:
        """Space-time ``||h||_{H^1(D_1)}``: ``L2 + d/dt + spatial gradient``."""
        k2 = self.grid.k2
        w2 = (2.0 * np.pi * np.arange(len(self.cos))) ** 2
        c2 = np.abs(self.cos) ** 2
        s2 = np.abs(self.sin) ** 2
        weight = 1.0 + k2[None, :] + w2[:, None]
        per = np.sum(weight * (c2 + s2), axis=1)
        tot = 2.0 * (np.sum(weight[0] * c2[0]) + 0.5 * np.sum(per[1:]))
        return float(np.sqrt(tot))


class _MeshForcing:
    """Forcing sampled on the mesh in half-spectrum layout, evaluated per step."""

    def __init__(self, grid: WaveGrid, h_mesh=None, prof=None, spatial=None, weights=None):
        H = grid.half
        self.shape = (H.n, H.nh)
        self.h_half = None if h_mesh is None else H.to_half(h_mesh)
        self.prof = prof
        self.spatial_half = None if spatial is None else H.to_half(spatial).reshape(spatial.shape[0], -1)
        self.weights = None if weights is None else np.asarray(weights, dtype=float)

    def __call__(self, n: int):
        out = None if self.h_half is None else self.h_half[n]
        if self.weights is not None and self.prof[n].any():
            eta = ((self.weights * self.prof[n]) @ self.spatial_half).reshape(self.weights.shape[:-1] + self.shape)
            out = eta if out is None else out + eta
        return out


class ForcingProfile:
    """``f = h + sum_j w_j psi_j``: deterministic part plus rendered dictionary forcing.

    ``weights`` may carry leading batch dimensions, one forcing per batch entry.
    """

    def __init__(
        self,
        grid: WaveGrid,
        h: PeriodicForce | None = None,
        basis: NoiseBasis | None = None,
        weights: np.ndarray | None = None,
    ):
        if h is not None and h.grid != grid:
            raise GridMismatchError("deterministic forcing is on a different grid")
        if weights is not None:
            if basis is None:
                raise ConfigurationError("dictionary weights need a noise basis")
            weights = np.asarray(weights, dtype=float)
            if weights.shape[-1] != basis.J:
                raise ConfigurationError(f"expected {basis.J} dictionary weights, got {weights.shape[-1]}")
            if not np.all(np.isfinite(weights)):
                raise ConfigurationError("dictionary weights must be finite")
        if basis is not None and basis.grid != grid:
            raise GridMismatchError("noise basis is on a different grid")
        self.grid = grid
        self.h = h
        self.basis = basis
        self.weights = weights

    @classmethod
    def zero(cls, grid: WaveGrid) -> "ForcingProfile":
        return cls(grid)

    @classmethod
    def from_noise(cls, h: PeriodicForce | None, basis: NoiseBasis, xi) -> "ForcingProfile":
        """``h + sum_j b_j xi_j psi_j``; ``xi`` may be a batch ``(..., J)``."""
        return cls(basis.grid, h, basis, dictionary_weights(basis, xi, scaled=True))

    @classmethod
    def from_control(cls, h: PeriodicForce | None, basis: NoiseBasis, c) -> "ForcingProfile":
        """``h + sum_j c_j psi_j`` for control coefficients (``len(c) <= J``)."""
        return cls(basis.grid, h, basis, dictionary_weights(basis, c, scaled=False))

    def with_weights(self, weights: np.ndarray) -> "ForcingProfile":
        return ForcingProfile(self.grid, self.h, self.basis, weights)

    def mesh(self, dt: float) -> _MeshForcing:
        n = n_steps_for(dt)
        t = np.arange(n + 1) * dt
        h_mesh = None if self.h is None or self.h.is_zero else self.h(t)
        if self.weights is None or not np.any(self.weights):
            return _MeshForcing(self.grid, h_mesh)
        return _MeshForcing(self.grid, h_mesh, self.basis.mesh_profile(dt), self.basis.spatial, self.weights)

    def on_mesh(self, dt: float) -> np.ndarray:
        """Full time series ``(..., n_steps + 1, M)``; for diagnostics and small batches."""
        m = self.mesh(dt)
        n = n_steps_for(dt)
        lead = () if self.weights is None else self.weights.shape[:-1]
        out = np.zeros(lead + (n + 1, self.grid.M), dtype=complex)
        H = self.grid.half
        for i in range(n + 1):
            f = m(i)
            if f is not None:
                out[..., i, :] = H.from_half(f)
        return out

    def at(self, t: float) -> np.ndarray:
        """Forcing coefficients at an arbitrary time (batch-aware)."""
        out = np.zeros(self.grid.M, dtype=complex) if self.h is None else self.h(float(t))
        if self.weights is not None:
            T = self.basis.time_factor(np.array([t]))[0]
            out = out + (self.weights * T) @ self.basis.spatial
        return out

    def h1_norm(self, n_nodes: int = 200) -> np.ndarray | float:
        """Space-time ``H^1(D_1)`` norm of the rendered forcing, by Gauss quadrature in time."""
        edges = [0.0, 1.0]
        if self.basis is not None:
            edges = [0.0, self.basis.cylinder.t_a, self.basis.cylinder.t_b, 1.0]
        k2 = self.grid.k2
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            x, w = np.polynomial.legendre.leggauss(n_nodes)
            t = 0.5 * (b - a) * x + 0.5 * (a + b)
            w = 0.5 * (b - a) * w
            f = np.zeros((len(t), self.grid.M), complex)
            df = np.zeros_like(f)
            if self.h is not None:
                f = f + self.h(t)
                df = df + self.h.time_derivative(t)
            if self.weights is not None:
                f = f + np.einsum("...j,tj,jm->...tm", self.weights, self.basis.time_factor(t), self.basis.spatial)
                df = df + np.einsum(
                    "...j,tj,jm->...tm", self.weights, self.basis.time_factor(t, derivative=True), self.basis.spatial
                )
            dens = 2.0 * np.sum((1.0 + k2) * np.abs(f) ** 2 + np.abs(df) ** 2, axis=-1)
            total = total + np.sum(dens * w, axis=-1)
        out = np.sqrt(total)
        return float(out) if np.ndim(out) == 0 else out

    def l2_norm(self, n_nodes: int = 200) -> np.ndarray | float:
        """``||f||_{L2(D_1)}`` of the rendered forcing."""
        edges = [0.0, 1.0]
        if self.basis is not None:
            edges = [0.0, self.basis.cylinder.t_a, self.basis.cylinder.t_b, 1.0]
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            x, w = np.polynomial.legendre.leggauss(n_nodes)
            t = 0.5 * (b - a) * x + 0.5 * (a + b)
            w = 0.5 * (b - a) * w
            f = np.zeros((len(t), self.grid.M), complex)
            if self.h is not None:
                f = f + self.h(t)
            if self.weights is not None:
                f = f + np.einsum("...j,tj,jm->...tm", self.weights, self.basis.time_factor(t), self.basis.spatial)
            total = total + np.sum(2.0 * np.sum(np.abs(f) ** 2, axis=-1) * w, axis=-1)
        out = np.sqrt(total)
        return float(out) if np.ndim(out) == 0 else out


# -- trajectories ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Snapshots ``u(t_i)``, ``t_i = i dt``, ``i = 0..1/dt``."""

    grid: WaveGrid
    dt: float
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = n_steps_for(self.dt)
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim != 2 or c.shape != (n + 1, self.grid.M):
            raise GridMismatchError(f"trajectory needs shape ({n + 1}, {self.grid.M}), got {c.shape}")
        object.__setattr__(self, "coeffs", c)

    @property
    def n_steps(self) -> int:
        return self.coeffs.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def __len__(self) -> int:
        return self.coeffs.shape[0]

    def __getitem__(self, i: int) -> SpectralVelocity:
        return SpectralVelocity(self.grid, self.coeffs[i])

    @property
    def snapshots(self) -> list[SpectralVelocity]:
        return [self[i] for i in range(len(self))]

    @property
    def initial(self) -> SpectralVelocity:
        return self[0]

    @property
    def final(self) -> SpectralVelocity:
        return self[-1]

    def energies(self) -> np.ndarray:
        return np.sum(np.abs(self.coeffs) ** 2, axis=1)

    def enstrophies(self) -> np.ndarray:
        return np.sum(self.grid.k2 * np.abs(self.coeffs) ** 2, axis=1)

    def norms(self) -> np.ndarray:
        return np.sqrt(2.0 * np.sum(np.abs(self.coeffs) ** 2, axis=1))

    def index_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "t", "energy", "enstrophy"])
        for i, (e, z) in enumerate(zip(self.energies(), self.enstrophies())):
            w.writerow([i, repr(float(i * self.dt)), repr(float(e)), repr(float(z))])
        return buf.getvalue()

    def export(self, directory: str | Path, stem: str = "trajectory", header: str | None = None) -> tuple[Path, Path]:
        """Write ``<stem>.nsmx`` (concatenated snapshot records) and ``<stem>.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        bin_path = directory / f"{stem}.nsmx"
        csv_path = directory / f"{stem}.csv"
        bin_path.write_bytes(b"".join(encode_snapshot(self[i]) for i in range(len(self))))
        text = self.index_csv()
        if header:
            text = "".join(f"# {line}\n" for line in header.splitlines()) + text
        csv_path.write_text(text)
        return bin_path, csv_path

    @classmethod
    def load(cls, path: str | Path, dt: float) -> "Trajectory":
        data = Path(path).read_bytes()
        snaps = []
        off = 0
        while off < len(data):
            u, off = decode_snapshot(data, off)
            snaps.append(u)
        if not snaps:
            raise ValueError(f"{path} holds no snapshot records")
        return cls(snaps[0].grid, dt, np.array([s.coeffs for s in snaps]))


@dataclass(frozen=True, eq=False)
class AdjointTrajectory(Trajectory):
    """Backward adjoint states ``theta(t_i)`` plus forcing sensitivities.

    ``sensitivity[i]`` is the weight with which a forcing value at ``t_i``
    enters ``<v(1), theta(1)>``, so that
    ``<v(1), theta(1)> = <v(0), theta(0)> + sum_i <g(t_i), sensitivity[i]>``.
    """

    sensitivity: np.ndarray = field(default=None, repr=False)


class ReferenceFlow:
    """Reference trajectory prepared for the linearised and adjoint solvers.

    ``history`` has shape ``(n_steps + 1, *batch, M)``; a batch of references
    is linearised independently. Physical fields are cached for a single
    reference and rebuilt per step for batches (to bound memory).
    """

    def __init__(self, traj: Trajectory | np.ndarray, nu: float, grid: WaveGrid | None = None, dt: float | None = None):
        if nu <= 0:
            raise ConfigurationError("viscosity must be positive")
        if isinstance(traj, Trajectory):
            grid, dt, hist = traj.grid, traj.dt, traj.coeffs
            self.traj = traj
        else:
            if grid is None or dt is None:
                raise ConfigurationError("a raw history needs its grid and time step")
            hist = np.asarray(traj, dtype=complex)
            self.traj = None
            if hist.shape[0] != n_steps_for(dt) + 1 or hist.shape[-1] != grid.M:
                raise GridMismatchError("reference history does not match the mesh")
        self.grid = grid
        self.dt = float(dt)
        self.nu = float(nu)
        self.history = hist
        self.n_steps = hist.shape[0] - 1
        self.batch_shape = hist.shape[1:-1]
        self.half = grid.half
        self.E = np.exp(-self.nu * self.half.ksq * self.dt)
        self._cached = LinearizationFields(grid, hist) if not self.batch_shape else None
        self._recent: dict[int, LinearizationFields] = {}

    def _fields(self, n: int) -> LinearizationFields:
        if self._cached is not None:
            return self._cached[n]
        if n not in self._recent:
            if len(self._recent) >= 2:
                self._recent.pop(next(iter(self._recent)))
            self._recent[n] = LinearizationFields(self.grid, self.history[n])
        return self._recent[n]

    def fields_at(self, n: int, extra: int = 0) -> LinearizationFields:
        f = self._fields(n)
        if extra:
            idx = (Ellipsis,) + (None,) * extra + (slice(None), slice(None))
            f = f[idx] if self.batch_shape else f
        return f

    def _extra(self, v: np.ndarray) -> int:
        return v.ndim - 2 - len(self.batch_shape)

    def C(self, n: int, v: np.ndarray) -> np.ndarray:
        """``B(u_ref(t_n), v) + B(v, u_ref(t_n))`` in half layout."""
        return self.half.linearized(self.fields_at(n, self._extra(v)), v)

    def CT(self, n: int, w: np.ndarray) -> np.ndarray:
        return self.half.linearized_adjoint(self.fields_at(n, self._extra(w)), w)


# -- array-level integrators ---------------------------------------------------------


def integrate(
    grid: WaveGrid,
    a0: np.ndarray,
    forcing: Callable[[int], np.ndarray | None] | None,
    nu: float,
    dt: float,
    keep: bool = False,
):
    """Nonlinear solve from ``a0`` (batch ``(..., M)``) over [0, 1].

    ``forcing`` is a mesh forcing from :meth:`ForcingProfile.mesh`. Returns the
    final coefficients, or the full history ``(n + 1, ..., M)`` with ``keep``.
    """
    if nu <= 0:
        raise ConfigurationError("viscosity must be positive")
    n = n_steps_for(dt)
    H = grid.half
    E = np.exp(-nu * H.ksq * dt)
    a = H.to_half(a0)
    hist = [a] if keep else None
    f_now = forcing(0) if forcing is not None else None
    for i in range(n):
        N0 = -H.nonlinear(a)
        if f_now is not None:
            N0 += f_now
        f_next = forcing(i + 1) if forcing is not None else None
        EN0 = E * N0
        N1 = -H.nonlinear(E * a + dt * EN0)
        if f_next is not None:
            N1 += f_next
        a = E * a + (0.5 * dt) * (EN0 + N1)
        f_now = f_next
        _guard(a, i + 1)
        if keep:
            hist.append(a)
    return H.from_half(np.array(hist)) if keep else H.from_half(a)


def integrate_linearized(
    ref: ReferenceFlow,
    v0: np.ndarray,
    forcing: Callable[[int], np.ndarray | None] | None = None,
    keep: bool = False,
):
    """Linearised solve around ``ref`` for a batch of initial data ``(..., M)``."""
    dt, E, H = ref.dt, ref.E, ref.half
    v = H.to_half(v0)
    hist = [v] if keep else None
    g_now = forcing(0) if forcing is not None else None
    for i in range(ref.n_steps):
        N0 = -ref.C(i, v)
        if g_now is not None:
            N0 += g_now
        g_next = forcing(i + 1) if forcing is not None else None
        EN0 = E * N0
        N1 = -ref.C(i + 1, E * v + dt * EN0)
        if g_next is not None:
            N1 += g_next
        v = E * v + (0.5 * dt) * (EN0 + N1)
        g_now = g_next
        _guard(v, i + 1)
        if keep:
            hist.append(v)
    return H.from_half(np.array(hist)) if keep else H.from_half(v)


def integrate_adjoint(
    ref: ReferenceFlow,
    theta1: np.ndarray,
    keep: bool = False,
    dictionary: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Exact transpose of :func:`integrate_linearized`, run backward from ``theta(1)``.

    Returns ``theta(0)`` and, when ``dictionary = (profile, spatial)`` is given,
    the sensitivities ``sum_i profile[i, j] <X_j, lambda_i>`` of ``<v(1), theta1>``
    to unit dictionary weights. With ``keep`` the full histories of ``theta`` and
    ``lambda`` are returned instead, both indexed forward in time.
    """
    dt, E, H = ref.dt, ref.E, ref.half
    n = ref.n_steps
    th = H.to_half(theta1)
    lam_next_part = 0.5 * dt * th  # forcing at t_{i+1} enters through the corrector stage
    thetas = [th] if keep else None
    lams = [np.zeros_like(th) for _ in range(n + 1)] if keep else None
    acc = None
    if dictionary is not None:
        prof, spatial = dictionary
        # inner products <X_j, lam> = Re(sum w conj(X) lam)
        Xw = (np.conj(H.to_half(spatial)) * H.weight).reshape(spatial.shape[0], -1).T
        acc = np.zeros(th.shape[:-2] + (prof.shape[1],))

    def deposit(i, lam):
        nonlocal acc
        if keep:
            lams[i] = lams[i] + lam
        if acc is not None and prof[i].any():
            acc = acc + prof[i] * np.real(lam.reshape(lam.shape[:-2] + (-1,)) @ Xw)

    for i in range(n - 1, -1, -1):
        y = ref.CT(i + 1, th)
        inner = E * (th - dt * y)
        deposit(i + 1, lam_next_part)
        deposit(i, 0.5 * dt * inner)
        th = E * (th - 0.5 * dt * y) - 0.5 * dt * ref.CT(i, inner)
        _guard(th, i)
        lam_next_part = 0.5 * dt * th
        if keep:
            thetas.append(th)
    if keep:
        return H.from_half(np.array(thetas[::-1])), H.from_half(np.array(lams))
    if acc is not None:
        return H.from_half(th), acc
    return H.from_half(th)


# -- field-level API ----------------------------------------------------------------


def _as_force(f, grid: WaveGrid):
    if f is None:
        return None
    if isinstance(f, SpectralVelocity):
        if f.grid != grid:
            raise GridMismatchError("forcing is on a different grid")
        return f.coeffs
    return np.asarray(f, dtype=complex)


def step(
    u: SpectralVelocity,
    f_t: SpectralVelocity | None,
    t: float,
    dt: float,
    nu: float,
    f_next: SpectralVelocity | None = None,
) -> SpectralVelocity:
    """One integrating-factor Heun step from ``t`` to ``t + dt``.

    ``f_t`` is the forcing at ``t``; ``f_next`` the forcing at ``t + dt``
    (defaults to ``f_t``).
    """
    if not 0.0 < dt <= MAX_DT * (1 + 1e-12):
        raise ConfigurationError(f"time step must lie in (0, {MAX_DT}]")
    if nu <= 0:
        raise ConfigurationError("viscosity must be positive")
    g = u.grid
    f0 = _as_force(f_t, g)
    f1 = f0 if f_next is None else _as_force(f_next, g)
    E = np.exp(-nu * g.k2 * dt)
    a = u.coeffs
    N0 = -nonlinear_term(g, a) + (0 if f0 is None else f0)
    EN0 = E * N0
    star = E * a + dt * EN0
    N1 = -nonlinear_term(g, star) + (0 if f1 is None else f1)
    out = E * a + 0.5 * dt * (EN0 + N1)
    _guard(out, 1)
    return SpectralVelocity(g, out)


def time_one_map(
    u0: SpectralVelocity,
    f: ForcingProfile | PeriodicForce | None,
    nu: float,
    dt: float = 1e-3,
    return_trajectory: bool = False,
):
    """``S(u0, f)``: the solution at ``t = 1``; optionally the full :class:`Trajectory`."""
    g = u0.grid
    if isinstance(f, PeriodicForce):
        f = ForcingProfile(g, f)
    forcing = None if f is None else f.mesh(dt)
    if f is not None and f.weights is not None and f.weights.ndim > 1:
        raise ConfigurationError("time_one_map takes a single forcing; use integrate() for batches")
    out = integrate(g, u0.coeffs, forcing, nu, dt, keep=return_trajectory)
    if return_trajectory:
        return Trajectory(g, dt, out)
    return SpectralVelocity(g, out)


def reference_trajectory(u0: SpectralVelocity, h, nu: float, dt: float) -> Trajectory:
    return time_one_map(u0, h, nu, dt, return_trajectory=True)


def _check_ref(uhat, nu, dt) -> ReferenceFlow:
    if isinstance(uhat, ReferenceFlow):
        ref = uhat
        if abs(ref.nu - nu) > 0:
            raise ConfigurationError("reference flow was built with a different viscosity")
    else:
        ref = ReferenceFlow(uhat, nu)
    if abs(ref.dt - dt) > 1e-15:
        raise GridMismatchError(f"reference mesh dt={ref.dt} differs from requested dt={dt}")
    return ref


def solve_linearized(
    v0: SpectralVelocity,
    g: ForcingProfile | None,
    uhat: Trajectory | ReferenceFlow,
    nu: float,
    dt: float,
) -> Trajectory:
    """``w = R^uhat(v0, g)`` on the reference mesh."""
    ref = _check_ref(uhat, nu, dt)
    if v0.grid != ref.grid:
        raise GridMismatchError("initial datum and reference live on different grids")
    forcing = None if g is None else g.mesh(dt)
    hist = integrate_linearized(ref, v0.coeffs, forcing, keep=True)
    return Trajectory(ref.grid, dt, hist)


def solve_adjoint(g1: SpectralVelocity, uhat: Trajectory | ReferenceFlow, nu: float, dt: float) -> AdjointTrajectory:
    """Backward adjoint trajectory with ``theta(1) = g1`` (discrete transpose of the linear solver)."""
    ref = _check_ref(uhat, nu, dt)
    if g1.grid != ref.grid:
        raise GridMismatchError("terminal datum and reference live on different grids")
    th, lam = integrate_adjoint(ref, g1.coeffs, keep=True)
    return AdjointTrajectory(ref.grid, dt, th, sensitivity=lam)


def chain_step(
    u: SpectralVelocity,
    h: PeriodicForce | None,
    eta: NoiseSample | None,
    nu: float,
    dt: float,
    basis: NoiseBasis | None = None,
) -> SpectralVelocity:
    """``S(u, h + eta)``: one step of the Markov chain."""
    if eta is None or not np.any(eta.xi):
        return time_one_map(u, ForcingProfile(u.grid, h), nu, dt)
    if basis is None:
        raise ConfigurationError("a noise basis is needed to render the sample")
    return time_one_map(u, ForcingProfile.from_noise(h, basis, eta), nu, dt)


def chain_step_batch(
    a: np.ndarray,
    h: PeriodicForce | None,
    basis: NoiseBasis,
    xi: np.ndarray,
    nu: float,
    dt: float,
) -> np.ndarray:
    """Batched chain step: ``a`` is ``(B, M)``, ``xi`` is ``(B, J)``."""
    f = ForcingProfile.from_noise(h, basis, xi)
    return integrate(basis.grid, a, f.mesh(dt), nu, dt)
