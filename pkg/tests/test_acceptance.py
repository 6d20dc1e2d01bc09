"""Acceptance suite at the default configuration.

Every criterion prints one ``ACCEPTANCE Cn ... PASS|FAIL`` line and then
asserts. Run alone with ``pytest -m acceptance -s``.
"""
import time

import numpy as np
import pytest

from nsmix import control as ctl
from nsmix import coupling as cpl
from nsmix import mixing as mx
from nsmix.cli import Lab, load_fixtures, main
from nsmix.config import parse_config
from nsmix.solver import ForcingProfile, ReferenceFlow, integrate_adjoint, integrate_linearized, time_one_map
from nsmix.spectral import SpectralVelocity

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


def verdict(capsys, tag: str, ok: bool, detail: str, elapsed: float, budget: float) -> None:
    ok = bool(ok) and elapsed <= budget
    with capsys.disabled():
        print(f"\nACCEPTANCE {tag}: {'PASS' if ok else 'FAIL'} | {detail} | {elapsed:.1f}s of {budget:.0f}s")
    assert ok, detail


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    return Lab(parse_config(), tmp_path_factory.mktemp("acceptance"))


@pytest.fixture(scope="module")
def certified(lab):
    t0 = time.perf_counter()
    out = lab.certified
    return out, time.perf_counter() - t0


def test_c1_solver_oracle(lab, capsys):
    t0 = time.perf_counter()
    g, nu = lab.grid, lab.nu
    errs = []
    for k in [(1, 0), (1, 1), (2, -1), (3, 2)]:
        u0 = SpectralVelocity.mode(g, k, 0.7 + 0.2j)
        u1 = time_one_map(u0, None, nu, lab.dt)
        exact = u0.coeffs * np.exp(-nu * (k[0] ** 2 + k[1] ** 2))
        errs.append(np.linalg.norm(u1.coeffs - exact) / np.linalg.norm(exact))
    # self-convergence on the forced nonlinear flow
    u0 = SpectralVelocity.random(g, np.random.default_rng(11))
    sols = [time_one_map(u0, lab.h, nu, dt).coeffs for dt in (1e-2, 5e-3, 2.5e-3)]
    order = float(np.log2(np.linalg.norm(sols[0] - sols[1]) / np.linalg.norm(sols[1] - sols[2])))
    ok = max(errs) <= 1e-6 and order >= 1.9
    verdict(capsys, "C1 solver oracle", ok, f"max shear rel err {max(errs):.2e}, order {order:.3f}",
            time.perf_counter() - t0, 10)


def test_c2_adjoint_duality(lab, capsys):
    t0 = time.perf_counter()
    g, b, dt = lab.grid, lab.basis, lab.dt
    rng = np.random.default_rng(12)
    u0 = lab.periodic_state(dt)
    ref = ReferenceFlow(time_one_map(u0, lab.h, lab.nu, dt, return_trajectory=True), lab.nu)
    dictionary = (b.mesh_profile(dt), b.spatial)
    worst = 0.0
    for _ in range(50):
        v0 = SpectralVelocity.random(g, rng).coeffs
        th1 = SpectralVelocity.random(g, rng).coeffs
        w = rng.standard_normal(b.J)
        v1 = integrate_linearized(ref, v0, ForcingProfile(g, None, b, w).mesh(dt))
        th0, sens = integrate_adjoint(ref, th1, dictionary=dictionary)
        lhs = g.to_real(v1) @ g.to_real(th1)
        rhs = g.to_real(v0) @ g.to_real(th0) + sens @ w
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    verdict(capsys, "C2 adjoint duality", worst <= 1e-8, f"50 instances, worst rel {worst:.2e}",
            time.perf_counter() - t0, 60)


def test_c3_gradient_check(lab, certified, capsys):
    (_, _, op), _ = certified
    if op is None:
        pytest.fail("no certified operator to take L and A from")
    t0 = time.perf_counter()
    rng = np.random.default_rng(13)
    L, A = op.L.matrix, op.A.matrix
    P = lab.grid.pi_real_indices(op.N)
    worst = 0.0
    for _ in range(20):
        c = rng.standard_normal(A.shape[1])
        v0 = rng.standard_normal(L.shape[0])
        delta = 10.0 ** rng.uniform(-3, -1)
        grad = ctl.quadratic_gradient(c, A, L, v0, P, delta)
        h = 1e-5 * max(1.0, np.abs(c).max())
        fd = np.array([
            (ctl.quadratic_objective(c + h * e, A, L, v0, P, delta) - ctl.quadratic_objective(c - h * e, A, L, v0, P, delta))
            / (2 * h)
            for e in np.eye(c.size)
        ])
        worst = max(worst, np.linalg.norm(grad - fd) / np.linalg.norm(grad))
    verdict(capsys, "C3 gradient check", worst <= 1e-5, f"20 instances, worst rel {worst:.2e}",
            time.perf_counter() - t0, 60)


def test_c4_linear_certificate(certified, capsys):
    (_, res, op), elapsed = certified
    if res.success:
        ok = op.closed_loop_norm <= 0.125
        detail = f"N={op.N} m={op.m} delta={op.delta:g} ||L + A Phi|| = {op.closed_loop_norm:.6g} <= 0.125"
    else:
        ok = False
        assert "OBSTRUCTION" in res.report, "sweep failed silently"
        detail = "sweep failed; obstruction report emitted: " + res.report.splitlines()[2]
    verdict(capsys, "C4 linear certificate", ok, detail, elapsed, 600)


def test_c5_nonlinear_contraction(lab, certified, capsys):
    (uhat0, _, op), _ = certified
    if op is None:
        pytest.fail("no certified operator")
    t0 = time.perf_counter()
    d = lab.calibrated_d(op, uhat0)
    rep = ctl.verify_contraction(op, lab.h, uhat0, lab.basis, lab.nu, lab.dt, d=d, q=0.25, n_pairs=200, rng=lab.rng(3))
    ok = rep.success_rate >= 0.95 and rep.remainder_slope is not None and abs(rep.remainder_slope - 2.0) <= 0.2
    verdict(capsys, "C5 nonlinear contraction", ok,
            f"d={d:.4g} success {rep.success_rate:.3f} worst ratio {rep.worst_ratio:.4g} slope {rep.remainder_slope:.4f}",
            time.perf_counter() - t0, 900)


def test_c6_observability(lab, capsys):
    t0 = time.perf_counter()
    ref = ctl.reference_flow(lab.h, lab.periodic_state(lab.dt), lab.nu, lab.dt)
    N = lab.config["control"]["N"]
    reps = [ctl.observability_check(ref, lab.basis, N, m) for m in (16, 32, 64)]
    Cs = [r.C_obs for r in reps]
    ok = all(r.full_rank for r in reps) and all(b <= a for a, b in zip(Cs, Cs[1:]))
    verdict(capsys, "C6 observability", ok,
            f"N={N} ranks {[r.rank for r in reps]} of {2 * N}, C_obs " + ", ".join(f"{c:.5g}" for c in Cs),
            time.perf_counter() - t0, 600)


def test_c7_coupling_inequality(lab, capsys):
    t0 = time.perf_counter()
    e = lab.config["experiment"]
    params = lab.coupling_params()
    u = lab.periodic_state(lab.mc_dt)
    direction = SpectralVelocity.random(lab.grid, lab.rng(4)).to_real()
    rec = mx.run_coupling_inequality(u, direction, lab.h, lab.basis, params, e["coupling_distances"], 10_000, seed=lab.seed)
    v = rec.verdicts
    rows = "; ".join(f"r={r[0]:.0e} P={r[1]:.4f}+-{r[2]:.4f} 2TV={2 * r[3]:.4f}" for r in rec.rows)
    verdict(capsys, "C7 coupling inequality", all(v.values()),
            f"{rows}; R2 p_fail {rec.fits['p_fail']['r2']:.4f} tv {rec.fits['tv']['r2']:.4f}",
            time.perf_counter() - t0, 1800)


def test_c8_ot_oracle(capsys):
    t0 = time.perf_counter()
    worst_brute, worst_gap, n = 0.0, 0.0, 0
    for f in load_fixtures("ot_fixtures.json")["transport"]:
        mu1 = cpl.DiscreteMeasure(np.array(f["points1"]), np.array(f["weights1"]))
        mu2 = cpl.DiscreteMeasure(np.array(f["points2"]), np.array(f["weights2"]))
        for eps in f["eps"]:
            res = cpl.epsilon_optimal_cost(mu1, mu2, eps)
            worst_brute = max(worst_brute, abs(res.cost - cpl.brute_force_cost(mu1, mu2, eps)))
            worst_gap = max(worst_gap, res.gap)
            n += 1
    ok = worst_brute <= 1e-9 and worst_gap <= 1e-9
    verdict(capsys, "C8 OT oracle", ok, f"{n} instances, |LP - brute| {worst_brute:.1e}, primal-dual gap {worst_gap:.1e}",
            time.perf_counter() - t0, 60)


def test_c9_tv_shift(capsys):
    t0 = time.perf_counter()
    fx = load_fixtures("tv_fixtures.json")
    r2s, worst = [], 0.0
    for f in fx["fixtures"]:
        rep = cpl.tv_shift_experiment(f["direction"], fx["kappas"])
        r2s.append(rep.r2)
        if np.count_nonzero(f["direction"]) == 1:
            worst = max(worst, max(abs(t - cpl.tv_shift_1d(k)) for k, t in zip(rep.kappas, rep.tv)))
    ok = min(r2s) >= 0.99 and worst <= 1e-6
    verdict(capsys, "C9 TV shift", ok, f"min R2 {min(r2s):.6f}, quadrature vs closed form {worst:.1e}",
            time.perf_counter() - t0, 60)


@pytest.fixture(scope="module")
def mixing_clock():
    return {"elapsed": 0.0}


def test_c10_mixing(lab, mixing_clock, capsys):
    t0 = time.perf_counter()
    U, Up = lab.stationary
    params = lab.coupling_params()
    rec = mx.run_mixing(U[:300], Up[:300], lab.h, lab.basis, params, 30, 300, seed=lab.seed)
    fa = rec.fits.get("coupling_estimator")
    ok = rec.verdicts["coupling_decay"]
    detail = f"gamma {fa.rate:.4g} R2 {fa.r2:.4f}" if fa else rec.meta.get("note", "")
    mixing_clock["elapsed"] += time.perf_counter() - t0
    verdict(capsys, "C10a mixing estimator", ok, detail, mixing_clock["elapsed"], 3600)


def test_c10_recurrence(lab, mixing_clock, capsys):
    t0 = time.perf_counter()
    U, Up = lab.stationary
    rec = mx.run_recurrence(U[:500], Up[:500], lab.h, lab.basis, lab.coupling_params(), 40, seed=lab.seed)
    f = rec.fits.get("survival")
    detail = f"tail rate {f.rate:.4g} R2 {f.r2:.4f}, censored {rec.meta['censored']}" if f else rec.meta.get("note", "")
    mixing_clock["elapsed"] += time.perf_counter() - t0
    verdict(capsys, "C10b recurrence", rec.verdicts["geometric_tail"], detail, mixing_clock["elapsed"], 3600)


def test_c10_squeezing(lab, mixing_clock, capsys):
    t0 = time.perf_counter()
    g = lab.grid
    U, _ = lab.stationary
    n = 500
    params = lab.coupling_params()
    rng = lab.rng(6)
    dirs = np.array([SpectralVelocity.random(g, rng).to_real() for _ in range(n)])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    fr = np.asarray(lab.config["experiment"]["squeeze_fractions"])
    lev = params.d * fr[np.arange(n) * fr.size // n]
    rec = mx.run_squeezing(U[:n], U[:n] + g.from_real(dirs * lev[:, None]), lab.h, lab.basis, params, 12, seed=lab.seed)
    mixing_clock["elapsed"] += time.perf_counter() - t0
    verdict(capsys, "C10c squeezing", rec.verdicts["tail_bounded"],
            f"P(sigma=inf) ~ {rec.meta['p_sigma_inf']:.3f}, C2 {rec.meta['C2']:.3g}, tail escapes {rec.meta['tail_observed']} "
            f"vs {rec.meta['tail_expected']:.3g} allowed (p {rec.meta['tail_p_value']:.3g})",
            mixing_clock["elapsed"], 3600)


REPRO = """
[physics]
K = 4
[noise]
J = 16
[control]
N = 4
m = 8
delta = 1e-2
certify = false
[experiment]
near_d = 0.05
burn_in = 2
coupling_samples = 200
event_chains = 4
event_steps = 3
recurrence_chains = 24
recurrence_horizon = 8
mix_chains = 16
k_max = 6
"""


@pytest.mark.parametrize("command, files", [
    ("couple", ["coupling_inequality.csv", "coupling_events.csv"]),
    ("recurrence", ["recurrence.csv"]),
    ("mix", ["mixing.csv"]),
])
def test_c11_reproducibility(command, files, tmp_path, capsys):
    t0 = time.perf_counter()
    cfg = tmp_path / "repro.ini"
    cfg.write_text(REPRO)
    runs = []
    for name in ("a", "b"):
        main([command, "--config", str(cfg), "--out", str(tmp_path / name)])
        runs.append([(tmp_path / name / f).read_bytes() for f in files])
    ok = runs[0] == runs[1] and all(len(b) > 0 for b in runs[0])
    verdict(capsys, f"C11 reproducibility ({command})", ok, f"{', '.join(files)} bit-identical: {runs[0] == runs[1]}",
            time.perf_counter() - t0, 600)
