"""Command-line entry point ``nsmix``.

Exit codes: 0 success, 1 verdict failure, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from . import control as ctl
from . import coupling as cpl
from . import mixing as mx
from .config import LabConfig, parse_config
from .exceptions import ConfigurationError, GridMismatchError, NumericalFailure
from .noise import noise_csv, rng_stream, sample_noise
from .solver import ForcingProfile, integrate, time_one_map
from .spectral import SpectralVelocity

__all__ = ["COMMANDS", "Lab", "dispatch", "main", "load_fixtures"]

EXIT_OK, EXIT_VERDICT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def load_fixtures(name: str) -> dict:
    return json.loads(resources.files("nsmix").joinpath("data", name).read_text())


@dataclass
class Lab:
    """Resolved config plus the derived physical objects, shared by all commands."""

    config: LabConfig
    out: Path
    threads: int = 1

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def stamp(self) -> str:
        return f"# config_digest={self.config.digest()} seed={self.seed}\n"

    @cached_property
    def grid(self):
        return self.config.grid()

    @cached_property
    def basis(self):
        return self.config.basis(self.grid)

    @cached_property
    def h(self):
        return self.config.forcing(self.grid)

    @property
    def nu(self) -> float:
        return self.config["physics"]["nu"]

    @property
    def dt(self) -> float:
        return self.config["physics"]["dt"]

    @property
    def mc_dt(self) -> float:
        return self.config["physics"]["mc_dt"]

    def rng(self, *keys: int) -> np.random.Generator:
        return rng_stream(self.seed, 100, *keys)

    def periodic_state(self, dt: float, tol: float = 1e-12, max_periods: int = 2000) -> SpectralVelocity:
        """Attracting periodic state of the unforced-by-noise flow at ``t = 0 mod 1``."""
        g = self.grid
        f = ForcingProfile(g, self.h).mesh(dt)
        a = np.zeros(g.M, complex)
        for _ in range(max_periods):
            nxt = integrate(g, a, f, self.nu, dt)
            if np.linalg.norm(g.to_real(nxt - a)) <= tol:
                return SpectralVelocity(g, nxt)
            a = nxt
        return SpectralVelocity(g, a)

    def write(self, name: str, text: str, stamp: bool = True) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        p.write_text((self.stamp if stamp else "") + text)
        return p

    def write_json(self, name: str, obj) -> Path:
        obj = dict(obj)
        obj.setdefault("config_digest", self.config.digest())
        obj.setdefault("seed", self.seed)
        return self.write(name, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", stamp=False)

    def save(self, rec: mx.ExperimentRecord):
        rec.digest, rec.seed = self.config.digest(), self.seed
        return rec.save(self.out)

    # -- control ------------------------------------------------------------------------

    @cached_property
    def certified(self):
        """Operator around the periodic state at ``physics.dt`` (sweep when ``certify``)."""
        c = self.config["control"]
        uhat0 = self.periodic_state(self.dt)
        if c["certify"]:
            res = ctl.parameter_sweep(self.h, uhat0, self.basis, self.nu, self.dt, q=c["q"])
            op = res.operator
        else:
            res = None
            op = ctl.build_phi(self.h, uhat0, self.basis, c["N"], c["delta"], c["m"], self.nu, self.dt, c["q"])
        if op is not None:
            op.seed = self.seed
        return uhat0, res, op

    def calibrated_d(self, op, uhat0) -> float:
        d = self.config["control"]["d"]
        if d != "auto":
            return float(d)
        return ctl.calibrate_d(op, self.h, uhat0, self.basis, self.nu, self.dt, rng=self.rng(1))

    def coupling_params(self) -> cpl.CouplingParams:
        c, e = self.config["control"], self.config["experiment"]
        phi = None
        if c["policy"] == "reference":
            uhat = self.periodic_state(self.mc_dt)
            phi = ctl.phi_batch(self.h, uhat.coeffs[None], self.basis, c["N"], c["delta"], c["m"], self.nu, self.mc_dt)[0]
        return cpl.CouplingParams(
            nu=self.nu, dt=self.mc_dt, d=e["near_d"], N=c["N"], delta=c["delta"], m=c["m"],
            mode=c["mode"], policy=c["policy"], phi=phi,
        )

    @cached_property
    def stationary(self):
        """Burn-in pool shared by the chain experiments."""
        e = self.config["experiment"]
        n = max(e["recurrence_chains"], e["squeeze_chains"], e["mix_chains"])
        return mx.stationary_pairs(n, self.h, self.basis, self.nu, self.mc_dt, e["burn_in"], self.seed, self.threads)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, mx.FitResult):
        return {"rate": v.rate, "intercept": v.intercept, "r2": v.r2, "n": v.n}
    return str(v)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x)


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


# -- commands ----------------------------------------------------------------------------------


def cmd_basis(lab: Lab) -> bool:
    b = lab.basis
    lab.write("basis.csv", noise_csv(b))
    rows = [(j + 1, *t, float(b.l2_norms[j]), float(b.h1_norms[j])) for j, t in enumerate(b.triples)]
    lab.write("basis_triples.csv", _rows_csv(["j", "n", "p", "q", "polarization", "l2_norm", "h1_norm"], rows))
    lab.write_json("basis_summary.json", {"J": b.J, "B": b.B, "gram_condition": b.gram_condition})
    print(f"basis: J={b.J} B={b.B:.6g} gram condition {b.gram_condition:.4g}")
    return bool(np.isfinite(b.gram_condition))


def cmd_simulate(lab: Lab) -> bool:
    e = lab.config["experiment"]
    g, rng = lab.grid, lab.rng(2)
    u = SpectralVelocity.random(g, rng)
    u = u * (e["u0_amplitude"] / u.norm())
    lab.out.mkdir(parents=True, exist_ok=True)
    energies = [u.energy()]
    for k in range(e["simulate_periods"]):
        f = ForcingProfile.from_noise(lab.h, lab.basis, sample_noise(lab.basis, rng)) if e["simulate_noise"] else ForcingProfile(g, lab.h)
        traj = time_one_map(u, f, lab.nu, lab.dt, return_trajectory=True)
        traj.export(lab.out, f"trajectory_{k}", header=lab.stamp[2:].strip())
        energies.extend(traj.energies()[1:])
        u = traj.final
    en = np.asarray(energies)
    ok = bool(np.all(np.isfinite(en)))
    unforced = lab.h is None and not e["simulate_noise"]
    if unforced:
        ok = ok and bool(np.all(np.diff(en) < 0))
    print(f"simulate: {len(en) - 1} steps, energy {en[0]:.6g} -> {en[-1]:.6g}" + (" (strictly decreasing)" if unforced and ok else ""))
    return ok


def cmd_control_build(lab: Lab) -> bool:
    uhat0, res, op = lab.certified
    if res is not None:
        lab.write("sweep.csv", res.table_csv())
        if not res.success:
            lab.write("obstruction_report.txt", res.report + "\n")
            print(res.report)
            return False
        print(res.report)
    lab.write("control_operator.csv", op.to_csv(), stamp=False)
    print(f"control-build: N={op.N} m={op.m} delta={op.delta:g} ||L + A Phi|| = {op.closed_loop_norm:.6g}")
    return op.closed_loop_norm <= op.q / 2


def cmd_verify_contraction(lab: Lab) -> bool:
    uhat0, res, op = lab.certified
    if op is None:
        lab.write("obstruction_report.txt", res.report + "\n")
        print(res.report)
        return False
    d = lab.calibrated_d(op, uhat0)
    op.d = d
    rep = ctl.verify_contraction(op, lab.h, uhat0, lab.basis, lab.nu, lab.dt, d=d,
                                 n_pairs=lab.config["experiment"]["contraction_pairs"], rng=lab.rng(3))
    rows = [(i, float(r), float(x)) for i, (r, x) in enumerate(zip(rep.distances, rep.ratios))]
    lab.write("contraction.csv", _rows_csv(["pair", "distance", "ratio"], rows))
    ok = rep.passed and rep.remainder_slope is not None and abs(rep.remainder_slope - 2.0) <= 0.2
    lab.write_json("contraction_summary.json", {
        "d": d, "q": rep.q, "success_rate": rep.success_rate, "worst_ratio": rep.worst_ratio,
        "remainder_slope": rep.remainder_slope, "remainder_r2": rep.remainder_r2, "remainder_C4": rep.remainder_C4,
        "passed": ok,
    })
    print(f"verify-contraction: d={d:.4g} success {rep.success_rate:.3f} worst ratio {rep.worst_ratio:.4g} "
          f"remainder slope {rep.remainder_slope:.4g}")
    return ok


def cmd_observability(lab: Lab) -> bool:
    uhat0 = lab.periodic_state(lab.dt)
    ref = ctl.reference_flow(lab.h, uhat0, lab.nu, lab.dt)
    N = lab.config["control"]["N"]
    rows, Cs, ranks = [], [], []
    for m in lab.config["experiment"]["observability_m"]:
        rep = ctl.observability_check(ref, lab.basis, N, m)
        rows.append((m, rep.rank, int(rep.full_rank), float(rep.C_obs)))
        Cs.append(rep.C_obs)
        ranks.append(rep.full_rank)
        print(f"observability: N={N} m={m} rank {rep.rank}/{2 * N} C_obs={rep.C_obs:.6g}")
    lab.write("observability.csv", _rows_csv(["m", "rank", "full_rank", "C_obs"], rows))
    return all(ranks) and all(b <= a * (1 + 1e-12) for a, b in zip(Cs, Cs[1:]))


def cmd_couple(lab: Lab) -> bool:
    e = lab.config["experiment"]
    g = lab.grid
    params = lab.coupling_params()
    frozen = cpl.CouplingParams(**{**params.__dict__, "mode": "frozen"})
    # inequality pairs sit around the periodic state, where the reference Phi is Phi(h, u)
    u = lab.periodic_state(lab.mc_dt)
    direction = _unit(SpectralVelocity.random(g, lab.rng(4)).to_real())
    rec = mx.run_coupling_inequality(u, direction, lab.h, lab.basis, frozen, e["coupling_distances"], e["coupling_samples"],
                                     seed=lab.seed, threads=lab.threads)
    lab.save(rec)
    # event log of short extension chains in the configured mode
    n = e["event_chains"]
    rng = lab.rng(8)
    a = np.repeat(u.coeffs[None], n, axis=0)
    ap = a + g.from_real(np.array([_unit(SpectralVelocity.random(g, rng).to_real()) for _ in range(n)]) * 0.5 * params.d)
    rngs = [rng_stream(lab.seed, 200, i) for i in range(n)]
    events = []
    for k in range(e["event_steps"]):
        V, Vp, info = cpl.coupled_kernel_batch(a, ap, lab.h, lab.basis, params, rngs)
        for i in range(n):
            events.append(dict(k=k, distance=info["distance"][i], branch="near" if info["near"][i] else "far",
                               same_noise=info["same"][i], tv_estimate=info["tv"][i]))
        a, ap = V, Vp
    lab.write("coupling_events.csv", cpl.event_log_csv(events))
    for row in rec.rows:
        print("couple: r={:.0e} P(fail)={:.4f}+-{:.4f} TV={:.4f}".format(row[0], row[1], row[2], row[3]))
    return rec.passed


def cmd_tv_check(lab: Lab) -> bool:
    fx = load_fixtures("tv_fixtures.json")
    rows, ok = [], True
    for f in fx["fixtures"]:
        rep = cpl.tv_shift_experiment(f["direction"], fx["kappas"])
        axis = np.count_nonzero(f["direction"]) == 1
        for k, tv in zip(rep.kappas, rep.tv):
            closed = cpl.tv_shift_1d(k) if axis else float("nan")
            rows.append((f["name"], float(k), float(tv), closed))
            if axis:
                ok &= abs(tv - closed) <= 1e-6
        ok &= rep.r2 >= 0.99
        print(f"tv-check: {f['name']} slope {rep.slope:.6g} R^2 {rep.r2:.6f}")
    lab.write("tv_check.csv", _rows_csv(["fixture", "kappa", "tv_quadrature", "tv_closed_form"], rows))
    return bool(ok)


def cmd_ot_oracle(lab: Lab) -> bool:
    fx = load_fixtures("ot_fixtures.json")["transport"]
    rows, ok = [], True
    for f in fx:
        mu1 = cpl.DiscreteMeasure(np.array(f["points1"]), np.array(f["weights1"]))
        mu2 = cpl.DiscreteMeasure(np.array(f["points2"]), np.array(f["weights2"]))
        for eps in f["eps"]:
            res = cpl.epsilon_optimal_cost(mu1, mu2, eps)
            brute = cpl.brute_force_cost(mu1, mu2, eps)
            good = abs(res.cost - brute) <= 1e-9 and res.gap <= 1e-9
            ok &= good
            rows.append((f["name"], float(eps), res.cost, brute, res.dual, int(good)))
    lab.write("ot_oracle.csv", _rows_csv(["fixture", "eps", "lp_primal", "brute_force", "lp_dual", "agree"], rows))
    print(f"ot-oracle: {len(rows)} instances, all agree: {bool(ok)}")
    return bool(ok)


def cmd_stabilize(lab: Lab) -> bool:
    uhat0, res, op = lab.certified
    if op is None:
        print(res.report)
        return False
    d = lab.calibrated_d(op, uhat0)
    v = _unit(SpectralVelocity.random(lab.grid, lab.rng(5)).to_real()) * d
    u0 = uhat0 + SpectralVelocity.from_real(lab.grid, v)
    rec = mx.run_stabilization(uhat0, u0, lab.h, lab.basis, N=op.N, delta=op.delta, m=op.m, nu=lab.nu, dt=lab.dt,
                               steps=lab.config["experiment"]["stabilize_steps"], q=op.q, seed=lab.seed)
    lab.save(rec)
    f = rec.fits.get("distance")
    if f is not None:
        print(f"stabilize: distance rate {f.rate:.4g} (target >= ln 4 - 0.1), cost rate {rec.fits['control_cost'].rate:.4g}")
    return rec.passed


def cmd_recurrence(lab: Lab) -> bool:
    e = lab.config["experiment"]
    U, Up = lab.stationary
    n = e["recurrence_chains"]
    rec = mx.run_recurrence(U[:n], Up[:n], lab.h, lab.basis, lab.coupling_params(), e["recurrence_horizon"],
                            seed=lab.seed, threads=lab.threads)
    lab.save(rec)
    if "survival" in rec.fits:
        print(f"recurrence: tail rate {rec.fits['survival'].rate:.4g} R^2 {rec.fits['survival'].r2:.4f}")
    return rec.passed


def cmd_squeeze(lab: Lab) -> bool:
    e = lab.config["experiment"]
    g = lab.grid
    U, _ = lab.stationary
    n = e["squeeze_chains"]
    params = lab.coupling_params()
    rng = lab.rng(6)
    dirs = np.array([_unit(SpectralVelocity.random(g, rng).to_real()) for _ in range(n)])
    fr = np.asarray(e["squeeze_fractions"], dtype=float)
    lev = params.d * fr[np.arange(n) * fr.size // n]
    Up = U[:n] + g.from_real(dirs * lev[:, None])
    rec = mx.run_squeezing(U[:n], Up, lab.h, lab.basis, params, e["squeeze_horizon"], seed=lab.seed, threads=lab.threads)
    lab.save(rec)
    print(f"squeeze: P(sigma=inf) ~ {rec.meta['p_sigma_inf']:.3f}, tail bounded: {rec.verdicts['tail_bounded']}")
    return rec.passed


def cmd_mix(lab: Lab) -> bool:
    e = lab.config["experiment"]
    U, Up = lab.stationary
    n = e["mix_chains"]
    rec = mx.run_mixing(U[:n], Up[:n], lab.h, lab.basis, lab.coupling_params(), e["k_max"], n,
                        seed=lab.seed, threads=lab.threads)
    lab.save(rec)
    f = rec.fits.get("coupling_estimator")
    if f is not None:
        print(f"mix: gamma {f.rate:.4g} R^2 {f.r2:.4f}; W1 at k_max {rec.meta['w1_at_kmax']:.4g}")
    return rec.passed


def cmd_check_h2(lab: Lab) -> bool:
    e = lab.config["experiment"]
    g, rng = lab.grid, lab.rng(7)
    pts = []
    for _ in range(e["h2_points"]):
        v = _unit(SpectralVelocity.random(g, rng).to_real()) * e["h2_radius"] * rng.uniform()
        pts.append(g.from_real(v))
    rec = mx.check_H2(np.array(pts), lab.h, g, lab.nu, lab.mc_dt, e["h2_eps"], e["h2_lmax"], seed=lab.seed)
    lab.save(rec)
    print(f"check-h2: l = {rec.meta['l']}")
    return rec.passed


COMMANDS = {
    "basis": cmd_basis,
    "simulate": cmd_simulate,
    "control-build": cmd_control_build,
    "verify-contraction": cmd_verify_contraction,
    "observability": cmd_observability,
    "couple": cmd_couple,
    "tv-check": cmd_tv_check,
    "ot-oracle": cmd_ot_oracle,
    "stabilize": cmd_stabilize,
    "recurrence": cmd_recurrence,
    "squeeze": cmd_squeeze,
    "mix": cmd_mix,
    "check-h2": cmd_check_h2,
}


def dispatch(command: str, config: LabConfig, out: str | Path | None = None, threads: int = 1) -> int:
    """Run one command; returns the exit status."""
    if command not in COMMANDS:
        print(f"unknown command {command!r}; choose from: {', '.join(COMMANDS)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        lab = Lab(config, Path(out or config["output"]["dir"]), max(1, int(threads)))
        lab.write("config_resolved.ini", config.dumps())
        ok = COMMANDS[command](lab)
    except (ConfigurationError, GridMismatchError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if ok else EXIT_VERDICT


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsmix", description="Navier-Stokes mixing laboratory")
    p.add_argument("command", choices=sorted(COMMANDS), help="operation to run")
    p.add_argument("--config", type=str, default=None, help="configuration file (INI sections)")
    p.add_argument("--seed", type=int, default=None, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", type=str, default=None, help="output directory")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads (1 = single-threaded)")
    p.add_argument("--mode", choices=("frozen", "exact"), default=None, help="shift map mode")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = parse_config(args.config)
        over = {}
        if args.seed is not None:
            over["run"] = {"seed": args.seed}
        if args.mode is not None:
            over["control"] = {"mode": args.mode}
        if over:
            cfg = cfg.with_overrides(**over)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return dispatch(args.command, cfg, args.out, args.threads)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
