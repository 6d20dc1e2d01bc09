"""Finite-dimensional feedback stabilisation of the linearised flow.

The control ``c in R^m`` acts through ``sum_j c_j psi_j``. For a reference
``(h, uhat0)`` with linearised time-one map ``L`` and control-to-state map
``A`` (both in orthonormal real coordinates), the feedback is the minimiser of

    J(c) = 1/2 |c|^2 + (1/delta) |P_N (L v0 + A c)|^2,

i.e. ``c = Phi v0`` with ``Phi = -(2/delta)(I + (2/delta) A^T P A)^{-1} A^T P L``.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, GridMismatchError
from .noise import NoiseBasis
from .solver import (
    ForcingProfile,
    PeriodicForce,
    ReferenceFlow,
    Trajectory,
    _MeshForcing,
    integrate,
    integrate_adjoint,
    integrate_linearized,
    time_one_map,
)
from .spectral import SpectralVelocity, WaveGrid

__all__ = [
    "LinearizedFlowMatrix",
    "ControlToStateMatrix",
    "ControlOperator",
    "ContractionReport",
    "ObservabilityReport",
    "SweepResult",
    "FeedbackController",
    "reference_flow",
    "assemble_L",
    "assemble_A",
    "assemble_A_adjoint",
    "quadratic_objective",
    "quadratic_gradient",
    "solve_quadratic_min",
    "closed_form_phi",
    "build_phi",
    "phi_batch",
    "verify_contraction",
    "remainder_scaling",
    "calibrate_d",
    "observability_check",
    "parameter_sweep",
]

DEFAULT_N_GRID = (4, 8, 16, 32)
DEFAULT_M_GRID = (16, 32, 64)
DEFAULT_DELTA_GRID = tuple(10.0 ** -np.arange(1, 11))


def trajectory_digest(coeffs: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(coeffs, dtype=complex).tobytes()).hexdigest()[:16]


def _real_basis(grid: WaveGrid, idx: np.ndarray | None = None) -> np.ndarray:
    """Complex coefficient vectors of the real unit coordinates (rows)."""
    n = 2 * grid.M
    idx = np.arange(n) if idx is None else np.asarray(idx)
    E = np.zeros((len(idx), n))
    E[np.arange(len(idx)), idx] = 1.0
    return grid.from_real(E)


@dataclass(frozen=True, eq=False)
class LinearizedFlowMatrix:
    """``v0 -> w(1)`` of the unforced linearised flow, in real coordinates."""

    grid: WaveGrid
    matrix: np.ndarray = field(repr=False)

    def __matmul__(self, x):
        return self.matrix @ x

    def apply(self, v0: SpectralVelocity) -> SpectralVelocity:
        return SpectralVelocity.from_real(self.grid, self.matrix @ v0.to_real())


@dataclass(frozen=True, eq=False)
class ControlToStateMatrix:
    """``c -> R_1(0, sum_j c_j psi_j)`` in real coordinates (``2M x m``)."""

    grid: WaveGrid
    matrix: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return self.matrix.shape[1]

    def __matmul__(self, c):
        return self.matrix @ c


def reference_flow(h: PeriodicForce | None, uhat0: SpectralVelocity, nu: float, dt: float) -> ReferenceFlow:
    """Nonlinear reference ``uhat`` from ``(uhat0, h)`` prepared for linearisation."""
    traj = time_one_map(uhat0, h, nu, dt, return_trajectory=True)
    return ReferenceFlow(traj, nu)


def assemble_L(uhat: Trajectory | ReferenceFlow, nu: float | None = None, dt: float | None = None) -> LinearizedFlowMatrix:
    """All ``2M`` columns by one batched linearised solve."""
    ref = uhat if isinstance(uhat, ReferenceFlow) else ReferenceFlow(uhat, nu)
    g = ref.grid
    out = integrate_linearized(ref, _real_basis(g))
    return LinearizedFlowMatrix(g, g.to_real(out).T)


def assemble_A(uhat: Trajectory | ReferenceFlow, basis: NoiseBasis, m: int, nu: float | None = None, dt: float | None = None) -> ControlToStateMatrix:
    """Columns are linearised solves from rest forced by ``psi_1..psi_m``."""
    ref = uhat if isinstance(uhat, ReferenceFlow) else ReferenceFlow(uhat, nu)
    g = ref.grid
    if basis.grid != g:
        raise GridMismatchError("noise basis and reference are on different grids")
    if not 0 <= m <= basis.J:
        raise ConfigurationError(f"m must lie in [0, J={basis.J}], got {m}")
    if m == 0:
        return ControlToStateMatrix(g, np.zeros((2 * g.M, 0)))
    W = np.zeros((m, basis.J))
    W[np.arange(m), np.arange(m)] = 1.0
    forcing = _MeshForcing(g, None, basis.mesh_profile(ref.dt), basis.spatial, W)
    out = integrate_linearized(ref, np.zeros((m, g.M), dtype=complex), forcing)
    return ControlToStateMatrix(g, g.to_real(out).T)


def assemble_A_adjoint(ref: ReferenceFlow, basis: NoiseBasis, m: int, rows: np.ndarray | None = None):
    """Rows of ``A`` (and of ``L``) by adjoint solves from real unit vectors.

    Returns ``(A_rows, L_rows)``, shapes ``(*batch, r, m)`` and ``(*batch, r, 2M)``.
    """
    g = ref.grid
    theta1 = _real_basis(g, rows)
    if ref.batch_shape:
        theta1 = np.broadcast_to(theta1, ref.batch_shape + theta1.shape)
    th0, acc = integrate_adjoint(ref, theta1, dictionary=(basis.mesh_profile(ref.dt), basis.spatial))
    return acc[..., :m], g.to_real(th0)


# -- quadratic minimisation ------------------------------------------------------


def _check_qp(A: np.ndarray, L: np.ndarray, delta: float):
    if not delta > 0:
        raise ConfigurationError("delta must be positive")
    A = np.asarray(A, dtype=float)
    L = np.asarray(L, dtype=float)
    if A.shape[0] != L.shape[0]:
        raise ConfigurationError("A and L have incompatible row counts")
    return A, L


def quadratic_objective(c, A, L, v0, P: np.ndarray, delta: float) -> float:
    """``1/2 |c|^2 + (1/delta) |P (L v0 + A c)|^2``; ``P`` are the retained row indices."""
    r = (L @ v0 + A @ c)[P]
    return 0.5 * float(c @ c) + float(r @ r) / delta


def quadratic_gradient(c, A, L, v0, P: np.ndarray, delta: float) -> np.ndarray:
    r = np.zeros(A.shape[0])
    r[P] = (L @ v0 + A @ c)[P]
    return c + (2.0 / delta) * (A.T @ r)


def _system(A: np.ndarray, P: np.ndarray, delta: float):
    PA = A[P]
    return np.eye(A.shape[1]) + (2.0 / delta) * PA.T @ PA, PA


def solve_quadratic_min(
    A, L, v0, N: int, delta: float, grid: WaveGrid, return_residual: bool = False
):
    """Unique minimiser of the penalised functional via the SPD normal equations."""
    A, L = _check_qp(np.asarray(getattr(A, "matrix", A)), np.asarray(getattr(L, "matrix", L)), delta)
    v0 = v0.to_real() if isinstance(v0, SpectralVelocity) else np.asarray(v0, dtype=float)
    P = grid.pi_real_indices(N)
    S, PA = _system(A, P, delta)
    rhs = -(2.0 / delta) * PA.T @ (L @ v0)[P]
    if A.shape[1] == 0:
        c = np.zeros(0)
    else:
        cf = np.linalg.cholesky(S)
        c = np.linalg.solve(cf.T, np.linalg.solve(cf, rhs))
    if return_residual:
        res = np.linalg.norm(S @ c - rhs) / max(np.linalg.norm(rhs), 1e-300)
        return c, float(res)
    return c


def closed_form_phi(A, L, N: int, delta: float, grid: WaveGrid) -> np.ndarray:
    """``Phi = -(2/delta)(I + (2/delta) A^T P A)^{-1} A^T P L`` (``m x 2M``)."""
    A, L = _check_qp(np.asarray(getattr(A, "matrix", A)), np.asarray(getattr(L, "matrix", L)), delta)
    P = grid.pi_real_indices(N)
    if A.shape[1] == 0:
        return np.zeros((0, L.shape[1]))
    S, PA = _system(A, P, delta)
    return -(2.0 / delta) * np.linalg.solve(S, PA.T @ L[P])


def _phi_from_rows(PA: np.ndarray, PL: np.ndarray, delta: float) -> np.ndarray:
    m = PA.shape[-1]
    S = np.eye(m) + (2.0 / delta) * np.swapaxes(PA, -1, -2) @ PA
    return -(2.0 / delta) * np.linalg.solve(S, np.swapaxes(PA, -1, -2) @ PL)


# -- control operator ------------------------------------------------------------


@dataclass(eq=False)
class ControlOperator:
    """Feedback ``Phi: H -> R^m`` (real coordinates) with its parameters."""

    grid: WaveGrid
    phi: np.ndarray = field(repr=False)
    N: int
    delta: float
    m: int
    q: float = 0.25
    d: float | None = None
    seed: int | None = None
    digest: str = ""
    closed_loop_norm: float | None = None
    projected_norm: float | None = None
    L: LinearizedFlowMatrix | None = field(default=None, repr=False)
    A: ControlToStateMatrix | None = field(default=None, repr=False)

    def __call__(self, v0: SpectralVelocity | np.ndarray) -> np.ndarray:
        x = v0.to_real() if isinstance(v0, SpectralVelocity) else np.asarray(v0, dtype=float)
        return x @ self.phi.T

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.phi, 2)) if self.phi.size else 0.0

    def closed_loop(self) -> np.ndarray:
        if self.L is None or self.A is None:
            raise ConfigurationError("closed-loop matrix needs the assembled L and A")
        return self.L.matrix + self.A.matrix[:, : self.m] @ self.phi

    def metadata(self) -> dict:
        return {
            "N": self.N,
            "delta": self.delta,
            "m": self.m,
            "q": self.q,
            "d": self.d,
            "seed": self.seed,
            "trajectory_digest": self.digest,
            "K": self.grid.K,
            "closed_loop_norm": self.closed_loop_norm,
            "projected_norm": self.projected_norm,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# " + json.dumps(self.metadata(), sort_keys=True) + "\n")
        np.savetxt(buf, self.phi, delimiter=",", fmt="%.17g")
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def from_csv(cls, text: str, grid: WaveGrid | None = None) -> "ControlOperator":
        first, _, body = text.partition("\n")
        if not first.startswith("# "):
            raise ConfigurationError("control operator file lacks its metadata header")
        meta = json.loads(first[2:])
        grid = grid or WaveGrid(meta["K"])
        phi = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2) if body.strip() else np.zeros((0, 2 * grid.M))
        if phi.shape[1] != 2 * grid.M:
            raise GridMismatchError("operator width does not match the grid")
        return cls(
            grid,
            phi,
            N=meta["N"],
            delta=meta["delta"],
            m=meta["m"],
            q=meta["q"],
            d=meta["d"],
            seed=meta["seed"],
            digest=meta["trajectory_digest"],
            closed_loop_norm=meta.get("closed_loop_norm"),
            projected_norm=meta.get("projected_norm"),
        )

    @classmethod
    def load(cls, path: str | Path, grid: WaveGrid | None = None) -> "ControlOperator":
        return cls.from_csv(Path(path).read_text(), grid)


def build_phi(
    h: PeriodicForce | None,
    uhat0: SpectralVelocity,
    basis: NoiseBasis,
    N: int,
    delta: float,
    m: int,
    nu: float,
    dt: float,
    q: float = 0.25,
    *,
    L: LinearizedFlowMatrix | None = None,
    A: ControlToStateMatrix | None = None,
) -> ControlOperator:
    """Feedback operator for the reference driven by ``(uhat0, h)``.

    Assembles ``L`` and ``A`` unless given, and records ``||L + A Phi||`` and
    ``||P_N (L + A Phi)||``.
    """
    g = uhat0.grid
    ref = None
    if L is None or A is None:
        ref = reference_flow(h, uhat0, nu, dt)
    L = L if L is not None else assemble_L(ref)
    A = A if A is not None else assemble_A(ref, basis, m)
    if A.m < m:
        raise ConfigurationError(f"control-to-state matrix has {A.m} columns, need {m}")
    Am = A.matrix[:, :m]
    if m == 0:
        phi = np.zeros((0, 2 * g.M))
        closed = L.matrix
    else:
        phi = closed_form_phi(Am, L.matrix, N, delta, g)
        closed = L.matrix + Am @ phi
    P = g.pi_real_indices(N)
    digest = trajectory_digest(ref.history) if ref is not None else ""
    return ControlOperator(
        g,
        phi,
        N=N,
        delta=delta,
        m=m,
        q=q,
        digest=digest,
        closed_loop_norm=float(np.linalg.norm(closed, 2)),
        projected_norm=float(np.linalg.norm(closed[P], 2)),
        L=L,
        A=ControlToStateMatrix(g, Am),
    )


def phi_batch(
    h: PeriodicForce | ForcingProfile | None,
    states: np.ndarray,
    basis: NoiseBasis,
    N: int,
    delta: float,
    m: int,
    nu: float,
    dt: float,
) -> np.ndarray:
    """``Phi(h, u)`` for a batch of states ``(B, M)`` via ``2N`` adjoint solves each.

    ``h`` may be a :class:`ForcingProfile` with one forcing per state.
    Only the rows ``P_N L`` and ``P_N A`` enter the normal equations, and both
    follow from adjoint solves started at the real unit vectors of ``H_N``.
    Returns ``(B, m, 2M)``.
    """
    g = basis.grid
    states = np.atleast_2d(np.asarray(states, dtype=complex))
    f = h if isinstance(h, ForcingProfile) else ForcingProfile(g, h)
    hist = integrate(g, states, f.mesh(dt), nu, dt, keep=True)
    ref = ReferenceFlow(hist, nu, grid=g, dt=dt)
    PA, PL = assemble_A_adjoint(ref, basis, m, rows=g.pi_real_indices(N))
    return _phi_from_rows(PA, PL, delta)


# -- verification ----------------------------------------------------------------


@dataclass
class ContractionReport:
    q: float
    d: float
    ratios: np.ndarray = field(repr=False)
    distances: np.ndarray = field(repr=False)
    success_rate: float = 0.0
    worst_ratio: float = 0.0
    remainder_slope: float | None = None
    remainder_r2: float | None = None
    remainder_C4: float | None = None

    @property
    def passed(self) -> bool:
        return self.success_rate >= 0.95


def _controlled_finals(op: ControlOperator, h, basis, uhat0, V: np.ndarray, nu, dt):
    """Nonlinear finals from ``uhat0 + v`` with feedback control ``Phi v`` (batch of real v)."""
    g = op.grid
    C = V @ op.phi.T
    f = ForcingProfile.from_control(h, basis, C)
    a0 = uhat0.coeffs + g.from_real(V)
    return integrate(g, a0, f.mesh(dt), nu, dt)


def _random_directions(grid: WaveGrid, rng: np.random.Generator, n: int) -> np.ndarray:
    V = np.array([SpectralVelocity.random(grid, rng).to_real() for _ in range(n)])
    return V / np.linalg.norm(V, axis=1, keepdims=True)


def verify_contraction(
    op: ControlOperator,
    h: PeriodicForce | None,
    uhat0: SpectralVelocity,
    basis: NoiseBasis,
    nu: float,
    dt: float,
    *,
    d: float,
    q: float | None = None,
    n_pairs: int = 200,
    rng: np.random.Generator | None = None,
    pairs: np.ndarray | None = None,
    remainder: bool = True,
) -> ContractionReport:
    """Nonlinear check of ``||S(u0, h + Phi v0) - S(uhat0, h)|| <= q ||v0||``.

    Pairs are ``u0 = uhat0 + v0`` with ``||v0|| <= d`` (random smooth
    directions, radii uniform in ``(0, d]``) unless ``pairs`` gives the
    deviations ``v0`` in real coordinates.
    """
    q = op.q if q is None else q
    g = op.grid
    rng = rng or np.random.default_rng(0)
    if pairs is None:
        V = _random_directions(g, rng, n_pairs) * (d * rng.uniform(0.0, 1.0, size=(n_pairs, 1)))
    else:
        V = np.atleast_2d(np.asarray(pairs, dtype=float))
    base = time_one_map(uhat0, h, nu, dt).coeffs
    fin = _controlled_finals(op, h, basis, uhat0, V, nu, dt)
    diff = np.linalg.norm(g.to_real(fin - base), axis=1)
    dist = np.linalg.norm(V, axis=1)
    ratios = np.divide(diff, dist, out=np.zeros_like(diff), where=dist > 0)
    rep = ContractionReport(
        q=q,
        d=d,
        ratios=ratios,
        distances=dist,
        success_rate=float(np.mean(ratios <= q)),
        worst_ratio=float(ratios.max(initial=0.0)),
    )
    if remainder and op.L is not None:
        slope, r2, c4 = remainder_scaling(op, h, uhat0, basis, nu, dt, d=d, rng=rng)
        rep.remainder_slope, rep.remainder_r2, rep.remainder_C4 = slope, r2, c4
    return rep


def remainder_scaling(
    op: ControlOperator,
    h,
    uhat0: SpectralVelocity,
    basis: NoiseBasis,
    nu: float,
    dt: float,
    *,
    d: float,
    n_dirs: int = 4,
    n_levels: int = 6,
    rng: np.random.Generator | None = None,
):
    """Log-log slope of ``||z(1)||`` against ``||v0||`` over ``d, d/2, ..., d/2^(n-1)``.

    ``z(1)`` is the nonlinear deviation minus its linearisation ``(L + A Phi) v0``.
    Returns ``(slope, R^2, max ||z|| / ||v0||^2)``.
    """
    rng = rng or np.random.default_rng(1)
    g = op.grid
    dirs = _random_directions(g, rng, n_dirs)
    radii = d * 0.5 ** np.arange(n_levels)
    V = (radii[:, None, None] * dirs[None]).reshape(-1, 2 * g.M)
    base = time_one_map(uhat0, h, nu, dt).coeffs
    fin = g.to_real(_controlled_finals(op, h, basis, uhat0, V, nu, dt) - base)
    lin = V @ op.closed_loop().T
    z = np.linalg.norm(fin - lin, axis=1).reshape(n_levels, n_dirs)
    zm = np.exp(np.mean(np.log(np.maximum(z, 1e-300)), axis=1))
    x, y = np.log(radii), np.log(zm)
    slope, icpt = np.polyfit(x, y, 1)
    pred = slope * x + icpt
    r2 = 1.0 - np.sum((y - pred) ** 2) / max(np.sum((y - y.mean()) ** 2), 1e-300)
    c4 = float(np.max(z / radii[:, None] ** 2))
    return float(slope), float(r2), c4


def calibrate_d(
    op: ControlOperator,
    h,
    uhat0: SpectralVelocity,
    basis: NoiseBasis,
    nu: float,
    dt: float,
    *,
    q: float | None = None,
    n_dirs: int = 16,
    d_lo: float = 1e-8,
    d_hi: float = 1.0,
    iters: int = 20,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest ``d`` (bisection in ``log d``) with worst ratio ``<= q`` on probe directions at radius ``d``."""
    q = op.q if q is None else q
    rng = rng or np.random.default_rng(2)
    g = op.grid
    dirs = _random_directions(g, rng, n_dirs)
    base = time_one_map(uhat0, h, nu, dt).coeffs

    def worst(d):
        try:
            fin = _controlled_finals(op, h, basis, uhat0, d * dirs, nu, dt)
        except ArithmeticError:
            return np.inf
        return float(np.max(np.linalg.norm(g.to_real(fin - base), axis=1)) / d)

    if worst(d_lo) > q:
        return 0.0
    if worst(d_hi) <= q:
        return d_hi
    lo, hi = np.log(d_lo), np.log(d_hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if worst(np.exp(mid)) <= q:
            lo = mid
        else:
            hi = mid
    return float(np.exp(lo))


@dataclass
class ObservabilityReport:
    N: int
    m: int
    rank: int
    full_rank: bool
    C_obs: float
    singular_values: np.ndarray = field(repr=False)
    message: str = ""


def observability_check(uhat: Trajectory | ReferenceFlow, basis: NoiseBasis, N: int, m: int, nu: float | None = None) -> ObservabilityReport:
    """Constant of ``||g(0)|| <= C ||(<g, psi_j>_{L2(Q)})_{j<=m}||`` for ``g(1) in H_N``.

    Adjoint solves from the ``2N`` real unit vectors of ``H_N`` give both the
    observation map ``O`` (``m x 2N``) and ``G0: g(1) -> g(0)``. ``C_obs`` is the
    largest value of ``||G0 x|| / ||O x||``; a rank-deficient ``O`` is reported,
    not raised.
    """
    ref = uhat if isinstance(uhat, ReferenceFlow) else ReferenceFlow(uhat, nu)
    g = ref.grid
    if not 0 < m <= basis.J:
        raise ConfigurationError(f"m must lie in [1, J={basis.J}]")
    rows = g.pi_real_indices(N)
    Orows, G0rows = assemble_A_adjoint(ref, basis, m, rows=rows)
    O = Orows.T  # (m, 2N)
    G0 = G0rows.T  # (2M, 2N)
    U, s, Vt = np.linalg.svd(O, full_matrices=False)
    tol = s.max(initial=0.0) * max(O.shape) * np.finfo(float).eps
    rank = int(np.sum(s > tol))
    k = 2 * N
    if rank < k:
        return ObservabilityReport(
            N, m, rank, False, np.inf, s,
            message=f"observation map has rank {rank} < {k}: H_N is not observable through {m} dictionary functionals",
        )
    C = float(np.linalg.norm(G0 @ Vt.T / s, 2))
    return ObservabilityReport(N, m, rank, True, C, s, message="full rank")


# -- parameter sweep -----------------------------------------------------------------


@dataclass
class SweepResult:
    success: bool
    target: float
    N: int | None
    delta: float | None
    m: int | None
    norm: float | None
    table: list[dict] = field(default_factory=list, repr=False)
    report: str = ""
    operator: ControlOperator | None = field(default=None, repr=False)

    def table_csv(self) -> str:
        buf = io.StringIO()
        buf.write("N,m,delta,closed_loop_norm,projected_norm,phi_norm\n")
        for r in self.table:
            buf.write(f"{r['N']},{r['m']},{r['delta']!r},{r['closed_loop_norm']!r},{r['projected_norm']!r},{r['phi_norm']!r}\n")
        return buf.getvalue()


def parameter_sweep(
    h: PeriodicForce | None,
    uhat0: SpectralVelocity,
    basis: NoiseBasis,
    nu: float,
    dt: float,
    q: float = 0.25,
    N_grid: Sequence[int] = DEFAULT_N_GRID,
    m_grid: Sequence[int] = DEFAULT_M_GRID,
    delta_grid: Sequence[float] = DEFAULT_DELTA_GRID,
    stop_at_first: bool = True,
) -> SweepResult:
    """Increase ``N``, grow ``m``, shrink ``delta`` until SVD certifies ``||L + A Phi|| <= q/2``.

    ``L`` and the widest ``A`` are assembled once; every candidate is a dense
    solve. On failure the result carries an obstruction report (the best
    candidate and the conditioning of ``P_N A``).
    """
    g = uhat0.grid
    target = q / 2.0
    ref = reference_flow(h, uhat0, nu, dt)
    m_grid = [m for m in m_grid if m <= basis.J] or [basis.J]
    L = assemble_L(ref)
    A = assemble_A(ref, basis, max(m_grid))
    digest = trajectory_digest(ref.history)
    table = []
    best = None
    for N in N_grid:
        if N > g.M:
            continue
        P = g.pi_real_indices(N)
        for m in m_grid:
            Am = A.matrix[:, :m]
            for delta in delta_grid:
                phi = closed_form_phi(Am, L.matrix, N, delta, g)
                closed = L.matrix + Am @ phi
                row = dict(
                    N=N,
                    m=m,
                    delta=float(delta),
                    closed_loop_norm=float(np.linalg.norm(closed, 2)),
                    projected_norm=float(np.linalg.norm(closed[P], 2)),
                    phi_norm=float(np.linalg.norm(phi, 2)),
                )
                table.append(row)
                if best is None or row["closed_loop_norm"] < best["closed_loop_norm"]:
                    best = row
                if row["closed_loop_norm"] <= target and stop_at_first:
                    op = ControlOperator(
                        g, phi, N=N, delta=float(delta), m=m, q=q, digest=digest,
                        closed_loop_norm=row["closed_loop_norm"], projected_norm=row["projected_norm"],
                        L=L, A=ControlToStateMatrix(g, Am),
                    )
                    return SweepResult(True, target, N, float(delta), m, row["closed_loop_norm"], table,
                                       report=f"certified ||L + A Phi|| = {row['closed_loop_norm']:.6g} <= {target}",
                                       operator=op)
    ok = [r for r in table if r["closed_loop_norm"] <= target]
    if ok:
        r = min(ok, key=lambda r: (r["N"], r["m"], -r["delta"]))
        phi = closed_form_phi(A.matrix[:, : r["m"]], L.matrix, r["N"], r["delta"], g)
        op = ControlOperator(g, phi, N=r["N"], delta=r["delta"], m=r["m"], q=q, digest=digest,
                             closed_loop_norm=r["closed_loop_norm"], projected_norm=r["projected_norm"],
                             L=L, A=ControlToStateMatrix(g, A.matrix[:, : r["m"]]))
        return SweepResult(True, target, r["N"], r["delta"], r["m"], r["closed_loop_norm"], table,
                           report=f"certified ||L + A Phi|| = {r['closed_loop_norm']:.6g} <= {target}", operator=op)
    lines = [
        "OBSERVABILITY OBSTRUCTION: no (N, m, delta) in the sweep certifies the linear contraction",
        f"target ||L + A Phi|| <= {target:g}",
        f"best candidate N={best['N']} m={best['m']} delta={best['delta']:g}: "
        f"||L + A Phi|| = {best['closed_loop_norm']:.6g}, ||P_N(L + A Phi)|| = {best['projected_norm']:.6g}, "
        f"||Phi|| = {best['phi_norm']:.6g}",
    ]
    for N in N_grid:
        if N > g.M:
            continue
        s = np.linalg.svd(A.matrix[g.pi_real_indices(N)][:, : max(m_grid)], compute_uv=False)
        lines.append(f"N={N}: singular values of P_N A in [{s.min():.3e}, {s.max():.3e}]")
    return SweepResult(False, target, None, None, None, best["closed_loop_norm"], table, report="\n".join(lines))


# -- estimator front end --------------------------------------------------------------


class FeedbackController(TransformerMixin, BaseEstimator):
    """Estimator-style wrapper: ``fit`` builds ``Phi`` around a reference state.

    ``fit(X)`` takes the reference initial state ``uhat0`` as one row of real
    coordinates (length ``2M``) or a :class:`SpectralVelocity`. ``transform``
    maps deviations ``v0`` (rows) to control coefficients, ``predict`` to the
    linearised closed-loop deviation at ``t = 1``, and ``score`` returns minus
    the worst closed-loop gain on the given rows.
    """

    def __init__(self, basis=None, h=None, N=8, delta=1e-2, m=32, q=0.25, nu=0.5, dt=1e-3):
        self.basis = basis
        self.h = h
        self.N = N
        self.delta = delta
        self.m = m
        self.q = q
        self.nu = nu
        self.dt = dt

    def _validate_params(self):
        if self.basis is None:
            raise ConfigurationError("FeedbackController needs a noise basis")
        if not self.delta > 0:
            raise ConfigurationError("delta must be positive")
        if not 0 <= self.m <= self.basis.J:
            raise ConfigurationError(f"m must lie in [0, {self.basis.J}]")
        if not 0 < self.q < 1:
            raise ConfigurationError("q must lie in (0, 1)")

    def _as_state(self, X) -> SpectralVelocity:
        g = self.basis.grid
        if isinstance(X, SpectralVelocity):
            return X
        X = check_array(X, ensure_2d=False)
        X = X.reshape(-1)
        if X.shape[0] != 2 * g.M:
            raise GridMismatchError(f"expected {2 * g.M} real coordinates, got {X.shape[0]}")
        return SpectralVelocity.from_real(g, X)

    def fit(self, X, y=None):
        self._validate_params()
        uhat0 = self._as_state(X)
        self.operator_ = build_phi(self.h, uhat0, self.basis, self.N, self.delta, self.m, self.nu, self.dt, self.q)
        self.reference_ = uhat0
        self.n_features_in_ = 2 * self.basis.grid.M
        self.contraction_ = self.operator_.closed_loop_norm
        return self

    def _rows(self, X):
        check_is_fitted(self, "operator_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise GridMismatchError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return X

    def transform(self, X):
        return self._rows(X) @ self.operator_.phi.T

    def predict(self, X):
        return self._rows(X) @ self.operator_.closed_loop().T

    def score(self, X, y=None):
        X = self._rows(X)
        num = np.linalg.norm(self.predict(X), axis=1)
        den = np.linalg.norm(X, axis=1)
        return -float(np.max(num / np.where(den > 0, den, 1.0)))
