"""Noise shift, maximal couplings and the coupled Markov kernel.

For a pair ``(u, u')`` the shift ``Psi(xi) = xi + e(xi)`` moves the first ``m``
noise coordinates by ``b_j e_j = chi(||h + eta||_1) (Phi (u' - u))_j``, so that
on the event ``zeta' = Psi(zeta)`` the second copy receives the stabilising
control and ``S(u', h + zeta')`` tracks ``S(u, h + zeta)``.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog

from .control import ControlOperator, phi_batch
from .exceptions import ConfigurationError, NumericalFailure
from .noise import (
    NoiseBasis,
    coefficient_density,
    log_density,
    sample_coefficients,
    RHO_NORMALIZER,
)
from .solver import ForcingProfile, PeriodicForce, integrate
from .spectral import SpectralVelocity

__all__ = [
    "cutoff",
    "ShiftMap",
    "CouplingParams",
    "CoupledState",
    "DiscreteMeasure",
    "OTResult",
    "shift_map_build",
    "pushforward_density",
    "maximal_coupling_sample",
    "shift_tv",
    "coupled_kernel",
    "coupled_kernel_batch",
    "extension_step",
    "epsilon_cost_matrix",
    "epsilon_optimal_cost",
    "brute_force_cost",
    "tv_shift_1d",
    "tv_shift_quadrature",
    "tv_shift_experiment",
    "event_log_csv",
]

MAX_RESIDUAL_ATTEMPTS = 1_000_000
FIXED_POINT_ITERS = 100


def cutoff(r, R: float):
    """Smooth monotone ``chi``: 1 on ``r <= R - 1``, 0 on ``r >= R``."""
    s = np.clip(np.asarray(r, dtype=float) - (R - 1.0), 0.0, 1.0)

    def g(x):
        return np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)

    out = g(1.0 - s) / (g(1.0 - s) + g(s))
    return float(out) if np.ndim(out) == 0 else out


def _as_real(v) -> np.ndarray:
    if isinstance(v, SpectralVelocity):
        return v.to_real()
    return np.asarray(v, dtype=float)


@dataclass(eq=False)
class ShiftMap:
    """``Psi(xi) = xi + e(xi)`` with ``e`` supported on the first ``m`` coordinates.

    In ``frozen`` mode ``e`` is the constant vector ``offset``. In ``exact``
    mode ``offset_fn(xi)`` returns ``e(xi)`` restricted to the active block.
    """

    J: int
    m: int
    mode: str = "frozen"
    offset: np.ndarray | None = None
    offset_fn: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    failed: bool = False
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.mode not in ("frozen", "exact"):
            raise ConfigurationError(f"unknown shift mode {self.mode!r}")
        if self.mode == "frozen":
            off = np.zeros(self.m) if self.offset is None else np.asarray(self.offset, dtype=float)
            if off.shape != (self.m,):
                raise ConfigurationError("frozen offset must have length m")
            self.offset = off
        elif self.offset_fn is None:
            raise ConfigurationError("exact mode needs an offset function")

    @property
    def is_identity(self) -> bool:
        return self.mode == "frozen" and not np.any(self.offset)

    def shift(self, xi: np.ndarray) -> np.ndarray:
        """Full-length ``e(xi)`` (zero beyond ``m``); batch-aware."""
        xi = np.asarray(xi, dtype=float)
        out = np.zeros_like(xi)
        out[..., : self.m] = self.offset if self.mode == "frozen" else self.offset_fn(xi)
        return out

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        return np.asarray(xi, dtype=float) + self.shift(xi)

    def jacobian(self, xi: np.ndarray) -> np.ndarray:
        """``De`` on the active block by central differences (``m x m``)."""
        if self.mode == "frozen":
            return np.zeros((self.m, self.m))
        xi = np.asarray(xi, dtype=float)
        h = self.fd_step
        P = np.repeat(xi[None], 2 * self.m, axis=0)
        idx = np.arange(self.m)
        P[idx, idx] += h
        P[self.m + idx, idx] -= h
        E = self.offset_fn(P)
        return (E[: self.m] - E[self.m :]).T / (2 * h)

    def log_abs_det(self, xi: np.ndarray) -> float:
        if self.mode == "frozen":
            return 0.0
        _, ld = np.linalg.slogdet(np.eye(self.m) + self.jacobian(xi))
        return float(ld)

    def inverse(self, xi_p: np.ndarray, tol: float = 1e-12, return_residual: bool = False):
        """``Theta(xi')``: solves ``theta + e(theta) = xi'`` by fixed-point iteration."""
        xi_p = np.asarray(xi_p, dtype=float)
        if self.mode == "frozen":
            th = xi_p - self.shift(xi_p)
            return (th, 0.0) if return_residual else th
        th = xi_p.copy()
        for _ in range(FIXED_POINT_ITERS):
            nxt = xi_p - self.shift(th)
            if np.max(np.abs(nxt - th)) <= tol:
                th = nxt
                break
            th = nxt
        else:
            raise NumericalFailure("shift inversion did not converge in 100 iterations")
        res = float(np.max(np.abs(th + self.shift(th) - xi_p)))
        return (th, res) if return_residual else th


def shift_map_build(
    u: SpectralVelocity,
    u_prime: SpectralVelocity,
    h: PeriodicForce | None,
    phi,
    basis: NoiseBasis,
    *,
    mode: str = "frozen",
    R: float | None = None,
    m: int | None = None,
) -> ShiftMap:
    """Shift for the pair ``(u, u')``.

    ``phi`` is a :class:`ControlOperator`, an ``m x 2M`` matrix, or a builder
    ``phi(weights) -> (..., m, 2M)`` returning ``Phi(h + sum w_j psi_j, u)``
    for dictionary weights ``w`` (required in exact mode). A failing builder
    yields a flagged identity shift (independent coupling).
    """
    diff = _as_real(u_prime) - _as_real(u)
    h_norm = 0.0 if h is None else h.h1_norm()
    R = h_norm + basis.B + 1.0 if R is None else R
    if isinstance(phi, ControlOperator):
        phi = phi.phi
    if callable(phi) and not isinstance(phi, np.ndarray):
        builder = phi
        if mode == "frozen":
            try:
                mat = np.asarray(builder(np.zeros(basis.J)))
            except (ArithmeticError, np.linalg.LinAlgError):
                return ShiftMap(basis.J, m or 0, "frozen", failed=True)
            mat = mat.reshape(mat.shape[-2:])
        else:
            m = m if m is not None else np.asarray(builder(np.zeros(basis.J))).shape[-2]
            bm = basis.b[:m]

            def offset_fn(xi, builder=builder, bm=bm, m=m):
                xi = np.atleast_2d(xi)
                w = basis.b * xi
                mats = np.asarray(builder(w))
                chi = cutoff(ForcingProfile(basis.grid, h, basis, w).h1_norm(), R)
                c = np.einsum("bij,j->bi", mats, diff) * np.reshape(chi, (-1, 1))
                out = c / bm
                return out if out.shape[0] > 1 else out[0]

            if not np.any(diff):
                return ShiftMap(basis.J, m, "frozen")
            return ShiftMap(basis.J, m, "exact", offset_fn=offset_fn)
    else:
        mat = np.asarray(phi, dtype=float)
        if mode == "exact":
            raise ConfigurationError("exact mode needs a Phi builder, not a fixed matrix")
    mm = mat.shape[0]
    if mm > basis.J:
        raise ConfigurationError("control dimension exceeds the dictionary size")
    chi = cutoff(h_norm, R)
    offset = chi * (mat @ diff) / basis.b[:mm]
    return ShiftMap(basis.J, mm, "frozen", offset=offset)


def pushforward_density(smap: ShiftMap, xi: np.ndarray, *, log: bool = False):
    """Density of ``Psi_* lambda`` at ``xi`` (batch-aware in frozen mode)."""
    xi = np.asarray(xi, dtype=float)
    if smap.mode == "frozen":
        lp = log_density(smap.inverse(xi))
    else:
        th = smap.inverse(xi)
        lp = log_density(th) - smap.log_abs_det(th)
    return lp if log else np.exp(lp)


def maximal_coupling_sample(
    p_density: Callable,
    q_density: Callable,
    sample_p: Callable,
    sample_q: Callable,
    rng: np.random.Generator,
    max_attempts: int = MAX_RESIDUAL_ATTEMPTS,
):
    """One draw ``(X, Y, same)`` of the maximal coupling with ``X ~ q`` and ``Y ~ p``."""
    x = sample_q(rng)
    px, qx = p_density(x), q_density(x)
    if qx > 0 and rng.uniform() * qx <= px:
        return x, x, True
    for _ in range(max_attempts):
        y = sample_p(rng)
        py, qy = p_density(y), q_density(y)
        if rng.uniform() * py < py - min(py, qy):
            return x, y, False
    raise NumericalFailure("residual sampling exceeded the attempt budget")


def shift_tv(offset: np.ndarray, n: int = 200_000, rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Monte-Carlo ``||lambda - Psi_* lambda||_var`` for a frozen shift, with standard error."""
    offset = np.asarray(offset, dtype=float)
    if not np.any(offset):
        return 0.0, 0.0
    rng = rng or np.random.default_rng(0)
    z = sample_coefficients(rng, (n, offset.size))
    ratio = np.exp(log_density(z + offset) - log_density(z))
    v = np.maximum(0.0, 1.0 - ratio)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(n))


# -- coupled kernel --------------------------------------------------------------------


@dataclass
class CouplingParams:
    """Parameters of the coupled step.

    ``policy='state'`` builds the frozen ``Phi(h, u)`` around each first
    component; ``policy='reference'`` reuses ``phi`` (an ``m x 2M`` matrix).
    """

    nu: float = 0.5
    dt: float = 1e-2
    d: float = 0.02
    N: int = 8
    delta: float = 1e-2
    m: int = 32
    mode: str = "frozen"
    policy: str = "state"
    phi: np.ndarray | None = field(default=None, repr=False)
    R: float | None = None

    def __post_init__(self):
        if self.mode not in ("frozen", "exact"):
            raise ConfigurationError(f"unknown coupling mode {self.mode!r}")
        if self.policy not in ("state", "reference"):
            raise ConfigurationError(f"unknown control policy {self.policy!r}")
        if self.policy == "reference" and self.phi is None:
            raise ConfigurationError("reference policy needs a precomputed Phi")
        if not self.d > 0:
            raise ConfigurationError("d must be positive")


def _rows(rngs, n):
    if isinstance(rngs, np.random.Generator):
        return [rngs] * n
    if len(rngs) != n:
        raise ConfigurationError("one generator per chain is required")
    return list(rngs)


def _draw(rngs, J):
    if len(rngs) and all(r is rngs[0] for r in rngs):
        return sample_coefficients(rngs[0], (len(rngs), J))
    return np.array([sample_coefficients(r, J) for r in rngs]).reshape(len(rngs), J)


def _maximal_after_shift(offsets: np.ndarray, rngs, J: int):
    """Frozen-shift maximal coupling per row: returns ``zeta, zeta', same``."""
    B, m = offsets.shape
    z = _draw(rngs, J)
    x = z.copy()
    x[:, :m] += offsets
    # p = lambda, q = Psi_* lambda; only the active block differs
    lp_x = log_density(x[:, :m])
    lq_x = log_density(z[:, :m])
    u = np.array([r.uniform() for r in rngs]) if not all(r is rngs[0] for r in rngs) else rngs[0].uniform(size=B)
    same = np.log(np.maximum(u, 1e-300)) <= lp_x - lq_x
    zp = x.copy()
    todo = np.flatnonzero(~same)
    attempts = 0
    while todo.size:
        attempts += 1
        if attempts > MAX_RESIDUAL_ATTEMPTS:
            raise NumericalFailure("residual sampling exceeded the attempt budget")
        sub = [rngs[i] for i in todo]
        y = _draw(sub, J)
        ly = log_density(y[:, :m])
        lqy = log_density(y[:, :m] - offsets[todo])
        acc_p = -np.expm1(np.minimum(lqy - ly, 0.0))  # 1 - min(1, q/p)
        uu = np.array([r.uniform() for r in sub])
        ok = uu < acc_p
        zp[todo[ok]] = y[ok]
        todo = todo[~ok]
    return z, zp, same


def _exact_coupling_row(smap: ShiftMap, rng: np.random.Generator, J: int):
    """Maximal coupling of ``(Psi_* lambda, lambda)`` for a state-dependent shift."""
    z = sample_coefficients(rng, J)
    x = smap(z)
    lq = log_density(z) - smap.log_abs_det(z)
    if np.log(max(rng.uniform(), 1e-300)) <= log_density(x) - lq:
        return z, x, True
    for _ in range(MAX_RESIDUAL_ATTEMPTS):
        y = sample_coefficients(rng, J)
        try:
            lqy = pushforward_density(smap, y, log=True)
        except NumericalFailure:
            lqy = -np.inf
        if rng.uniform() < -np.expm1(min(lqy - log_density(y), 0.0)):
            return z, y, False
    raise NumericalFailure("residual sampling exceeded the attempt budget")


def coupled_kernel_batch(
    U: np.ndarray,
    Up: np.ndarray,
    h: PeriodicForce | None,
    basis: NoiseBasis,
    params: CouplingParams,
    rngs,
):
    """One step of the extension chain for a batch of pairs (complex ``(B, M)``).

    Near pairs (``||u - u'|| <= d``) are coupled by maximal coupling after the
    shift; far pairs get independent noise. Returns ``(V, V', info)`` with
    ``info`` holding ``near``, ``same``, ``tv`` (TV estimate of the shift at
    ``xi = 0``, NaN for far pairs), ``failed`` and the noise coefficients.
    """
    g = basis.grid
    U = np.atleast_2d(U)
    Up = np.atleast_2d(Up)
    B, J = U.shape[0], basis.J
    rngs = _rows(rngs, B)
    diff = g.to_real(Up - U)
    dist = np.linalg.norm(diff, axis=1)
    near = dist <= params.d
    xi = np.zeros((B, J))
    xip = np.zeros((B, J))
    same = np.zeros(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    tv = np.full(B, np.nan)
    far = np.flatnonzero(~near)
    if far.size:
        sub = [rngs[i] for i in far]
        xi[far] = _draw(sub, J)
        xip[far] = _draw(sub, J)
    idx = np.flatnonzero(near)
    if idx.size:
        m = params.m
        h_norm = 0.0 if h is None else h.h1_norm()
        R = h_norm + basis.B + 1.0 if params.R is None else params.R
        identical = dist[idx] == 0
        if params.mode == "frozen":
            if params.policy == "reference":
                mats = np.broadcast_to(params.phi[:m], (idx.size,) + params.phi[:m].shape)
            else:
                try:
                    mats = phi_batch(h, U[idx], basis, params.N, params.delta, m, params.nu, params.dt)
                except (ArithmeticError, np.linalg.LinAlgError):
                    mats = None
            if mats is None:
                failed[idx] = True
                offsets = np.zeros((idx.size, m))
            else:
                offsets = cutoff(h_norm, R) * np.einsum("bij,bj->bi", mats, diff[idx]) / basis.b[:m]
            z, zp, s = _maximal_after_shift(offsets, [rngs[i] for i in idx], J)
            s = s | identical
            zp[identical] = z[identical]
            xi[idx], xip[idx], same[idx] = z, zp, s
            # one estimate per distinct offset (pairs often share it)
            uniq, inv = np.unique(offsets, axis=0, return_inverse=True)
            est = np.array([shift_tv(o, n=4096, rng=np.random.default_rng(0))[0] for o in uniq])
            tv[idx] = est[np.ravel(inv)]
        else:
            for r, i in enumerate(idx):
                smap = _exact_map(U[i], Up[i], h, basis, params, R)
                if smap.failed:
                    failed[i] = True
                z, zp, s = _exact_coupling_row(smap, rngs[i], J) if not smap.is_identity else (None, None, True)
                if z is None:
                    z = sample_coefficients(rngs[i], J)
                    zp = z.copy()
                xi[i], xip[i], same[i] = z, zp, s
                if not smap.failed:
                    tv[i] = shift_tv(smap.shift(np.zeros(J))[:m], n=4096, rng=np.random.default_rng(0))[0]
    fp = ForcingProfile.from_noise(h, basis, np.concatenate([xi, xip]))
    out = integrate(g, np.concatenate([U, Up]), fp.mesh(params.dt), params.nu, params.dt)
    info = dict(near=near, same=same, tv=tv, failed=failed, xi=xi, xi_prime=xip, distance=dist)
    return out[:B], out[B:], info


def _exact_map(u, up, h, basis, params, R):
    g = basis.grid

    def builder(w):
        w = np.atleast_2d(w)
        prof = ForcingProfile(g, h, basis, w)
        return phi_batch(prof, np.repeat(np.atleast_2d(u), w.shape[0], axis=0), basis, params.N, params.delta, params.m, params.nu, params.dt)

    return shift_map_build(
        SpectralVelocity(g, u), SpectralVelocity(g, up), h, builder, basis, mode="exact", R=R, m=params.m
    )


def coupled_kernel(
    u: SpectralVelocity,
    u_prime: SpectralVelocity,
    h: PeriodicForce | None,
    basis: NoiseBasis,
    params: CouplingParams,
    rng: np.random.Generator,
):
    """``(V, V', same)`` for a single pair; see :func:`coupled_kernel_batch`."""
    V, Vp, info = coupled_kernel_batch(u.coeffs[None], u_prime.coeffs[None], h, basis, params, [rng])
    g = u.grid
    return SpectralVelocity(g, V[0]), SpectralVelocity(g, Vp[0]), bool(info["same"][0])


@dataclass
class CoupledState:
    u: SpectralVelocity
    u_prime: SpectralVelocity
    k: int = 0
    same_noise: bool = False

    @property
    def distance(self) -> float:
        return (self.u - self.u_prime).norm()


def extension_step(state: CoupledState, h, basis: NoiseBasis, params: CouplingParams, rng: np.random.Generator) -> CoupledState:
    """Coupled kernel when ``||u - u'|| <= d``, independent steps otherwise."""
    V, Vp, same = coupled_kernel(state.u, state.u_prime, h, basis, params, rng)
    return CoupledState(V, Vp, state.k + 1, same)


def event_log_csv(rows: Sequence[dict]) -> str:
    """Columns ``k, distance, branch, same_noise, tv_estimate``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "distance", "branch", "same_noise", "tv_estimate"])
    for r in rows:
        tv = r.get("tv_estimate", float("nan"))
        w.writerow([r["k"], repr(float(r["distance"])), r["branch"], int(bool(r["same_noise"])), repr(float(tv))])
    return buf.getvalue()


# -- epsilon-optimal transport -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.shape[0] != pts.shape[0]:
            raise ConfigurationError("weights must match the number of support points")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.asarray(points, dtype=float)
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))


@dataclass
class OTResult:
    cost: float
    dual: float
    plan: np.ndarray = field(repr=False)
    f: np.ndarray = field(repr=False)
    g: np.ndarray = field(repr=False)

    @property
    def gap(self) -> float:
        return abs(self.cost - self.dual)


def epsilon_cost_matrix(mu1: DiscreteMeasure, mu2: DiscreteMeasure, eps: float) -> np.ndarray:
    D = np.linalg.norm(mu1.points[:, None, :] - mu2.points[None, :, :], axis=-1)
    return (D > eps).astype(float)


def epsilon_optimal_cost(mu1: DiscreteMeasure, mu2: DiscreteMeasure, eps: float, cost: np.ndarray | None = None) -> OTResult:
    """``C_eps`` by the transport LP and ``K_eps`` by its dual program.

    Dual: maximise ``sum f_i a_i - sum g_j b_j`` subject to ``f_i - g_j <= d_eps(x_i, y_j)``.
    """
    if mu1.size > 64 or mu2.size > 64:
        raise ConfigurationError("support sizes are limited to 64")
    C = epsilon_cost_matrix(mu1, mu2, eps) if cost is None else np.asarray(cost, dtype=float)
    n1, n2 = C.shape
    a, b = mu1.weights, mu2.weights
    A_eq = np.zeros((n1 + n2, n1 * n2))
    for i in range(n1):
        A_eq[i, i * n2 : (i + 1) * n2] = 1.0
    for j in range(n2):
        A_eq[n1 + j, j::n2] = 1.0
    primal = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if primal.status != 0:
        raise ConfigurationError(f"transport LP failed: {primal.message}")
    # dual variables x = (f, g); minimise -(a.f - b.g)
    A_ub = np.zeros((n1 * n2, n1 + n2))
    for i in range(n1):
        for j in range(n2):
            A_ub[i * n2 + j, i] = 1.0
            A_ub[i * n2 + j, n1 + j] = -1.0
    dual = linprog(
        -np.concatenate([a, -b]), A_ub=A_ub, b_ub=C.ravel(), bounds=[(-1.0, 2.0)] * (n1 + n2), method="highs"
    )
    if dual.status != 0:
        raise ConfigurationError(f"dual LP failed: {dual.message}")
    return OTResult(float(primal.fun), float(-dual.fun), primal.x.reshape(n1, n2), dual.x[:n1], dual.x[n1:])


def brute_force_cost(mu1: DiscreteMeasure, mu2: DiscreteMeasure, eps: float, cost: np.ndarray | None = None, chunk: int = 100_000) -> float:
    """Minimum of the transport cost over all basic feasible plans.

    Every vertex of the transportation polytope is supported on ``n1 + n2 - 1``
    cells whose marginal constraints determine it; all such cell sets are
    enumerated and the nonsingular, nonnegative solutions compared.
    """
    C = epsilon_cost_matrix(mu1, mu2, eps) if cost is None else np.asarray(cost, dtype=float)
    n1, n2 = C.shape
    a, b = mu1.weights, mu2.weights
    k = n1 + n2 - 1
    A = np.zeros((n1 + n2, n1 * n2))
    for i in range(n1):
        A[i, i * n2 : (i + 1) * n2] = 1.0
    for j in range(n2):
        A[n1 + j, j::n2] = 1.0
    A, rhs = A[:-1], np.concatenate([a, b])[:-1]  # one redundant row
    c = C.ravel()
    best = np.inf
    combos = itertools.combinations(range(n1 * n2), k)
    while True:
        block = np.array(list(itertools.islice(combos, chunk)))
        if block.size == 0:
            break
        Ms = np.transpose(A[:, block], (1, 0, 2))
        det = np.linalg.det(Ms)
        ok = np.abs(det) > 1e-9
        if not ok.any():
            continue
        x = np.linalg.solve(Ms[ok], np.broadcast_to(rhs, (ok.sum(), k))[..., None])[..., 0]
        feas = np.all(x >= -1e-12, axis=1)
        if feas.any():
            vals = np.sum(c[block[ok][feas]] * x[feas], axis=1)
            best = min(best, float(vals.min()))
    return best


# -- TV of shifted product densities ---------------------------------------------------------


def _rho_cdf(x):
    x = np.clip(x, -1.0, 1.0)
    return 0.5 + RHO_NORMALIZER * (x - 2.0 * x**3 / 3.0 + x**5 / 5.0)


def tv_shift_1d(kappa):
    """Closed form ``1/2 int |rho(v) - rho(v - kappa)| dv = 2 F(|kappa|/2) - 1``."""
    k = np.abs(np.asarray(kappa, dtype=float))
    out = np.where(k >= 2.0, 1.0, 2.0 * _rho_cdf(k / 2.0) - 1.0)
    return float(out) if np.ndim(out) == 0 else out


_RHO_POLY = np.polynomial.Polynomial(RHO_NORMALIZER * np.array([1.0, 0.0, -2.0, 0.0, 1.0]))


def _panels(s: float) -> np.ndarray:
    return np.unique([-1.0, 1.0, -1.0 + s, 1.0 + s])


def _gauss_panels(br: np.ndarray, n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    t = np.concatenate([0.5 * (b - a) * x + 0.5 * (a + b) for a, b in zip(br[:-1], br[1:])])
    wt = np.concatenate([0.5 * (b - a) * w for a, b in zip(br[:-1], br[1:])])
    return t, wt


def _abs_integral_1d(A: float, B: float, s: float) -> float:
    """``int |A rho(y) - B rho(y - s)| dy`` exactly: polynomial panels split at their real roots."""
    shifted = _RHO_POLY(np.polynomial.Polynomial([-s, 1.0]))
    br = _panels(s)
    total = 0.0
    for a, b in zip(br[:-1], br[1:]):
        mid = 0.5 * (a + b)
        poly = np.polynomial.Polynomial([0.0])
        if abs(mid) < 1.0:
            poly = poly + A * _RHO_POLY
        if abs(mid - s) < 1.0:
            poly = poly - B * shifted
        roots = poly.roots() if poly.degree() > 0 else np.array([])
        cuts = np.sort([z.real for z in roots if abs(z.imag) < 1e-12 and a < z.real < b])
        pts = np.concatenate([[a], cuts, [b]])
        prim = poly.integ()
        total += float(np.sum(np.abs(np.diff(prim(pts)))))
    return total


def tv_shift_quadrature(shift: Sequence[float], n: int = 64) -> float:
    """``1/2 int |lambda - lambda(. - e)|`` over the union of supports.

    1D: exact, the integrand is polynomial between the support ends and its
    sign changes. 2D: Gauss quadrature in the first coordinate (panels split at
    the support ends and the midpoint) around the exact 1D integral in the second. Higher
    dimensions fall back to tensor Gauss panels.
    """
    e = np.atleast_1d(np.asarray(shift, dtype=float))
    if e.size == 1:
        return 0.5 * _abs_integral_1d(1.0, 1.0, float(e[0]))
    if e.size == 2:
        # rho(x) = rho(x - e_1) at x = e_1 / 2, a kink of the outer integrand
        t, wt = _gauss_panels(np.unique(np.append(_panels(float(e[0])), e[0] / 2.0)), n)
        A = coefficient_density(t)
        B = coefficient_density(t - e[0])
        inner = np.array([_abs_integral_1d(a, b, float(e[1])) for a, b in zip(A, B)])
        return float(0.5 * np.sum(wt * inner))
    nodes, weights = zip(*(_gauss_panels(np.unique(np.append(_panels(s), s / 2.0)), n) for s in e))
    grids = np.meshgrid(*nodes, indexing="ij")
    W = np.ones_like(grids[0])
    p = np.ones_like(grids[0])
    q = np.ones_like(grids[0])
    for i, (G, wt) in enumerate(zip(grids, weights)):
        shape = [1] * e.size
        shape[i] = -1
        W = W * wt.reshape(shape)
        p = p * coefficient_density(G)
        q = q * coefficient_density(G - e[i])
    return float(0.5 * np.sum(W * np.abs(p - q)))


@dataclass
class TVShiftReport:
    kappas: np.ndarray
    tv: np.ndarray
    slope: float
    intercept: float
    r2: float
    direction: np.ndarray


def tv_shift_experiment(direction: Sequence[float], kappas: Sequence[float] = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1), n: int = 64) -> TVShiftReport:
    """TV between the noise law and its frozen shift ``kappa * direction`` (unit direction) vs ``kappa``."""
    dvec = np.asarray(direction, dtype=float)
    dvec = dvec / np.linalg.norm(dvec)
    ks = np.asarray(kappas, dtype=float)
    if np.any(ks < 0) or np.any(ks > 0.2):
        raise ConfigurationError("shift magnitudes must lie in [0, 0.2]")
    tv = np.array([tv_shift_quadrature(k * dvec, n) for k in ks])
    slope, icpt = np.polyfit(ks, tv, 1)
    pred = slope * ks + icpt
    r2 = 1.0 - np.sum((tv - pred) ** 2) / np.sum((tv - tv.mean()) ** 2)
    return TVShiftReport(ks, tv, float(slope), float(icpt), float(r2), dvec)
