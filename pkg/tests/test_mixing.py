import json
import math

import numpy as np
import pytest

from nsmix.control import phi_batch
from nsmix.coupling import CouplingParams
from nsmix.exceptions import ConfigurationError
from nsmix.mixing import (
    ExperimentRecord,
    burn_in,
    check_H2,
    fit_exponential,
    run_blocks,
    run_coupling_inequality,
    run_mixing,
    run_recurrence,
    squeeze_tail_test,
    run_squeezing,
    run_stabilization,
    stationary_pairs,
)
from nsmix.spectral import SpectralVelocity

NU, DT = 0.5, 1e-2


def test_fit_exponential_recovers_rate():
    k = np.arange(10)
    f = fit_exponential(3.0 * np.exp(-0.4 * k))
    assert f.rate == pytest.approx(0.4, abs=1e-12)
    assert f.intercept == pytest.approx(3.0, rel=1e-12)
    assert f.r2 == pytest.approx(1.0) and f.stderr < 1e-12


def test_fit_exponential_noise_and_censoring():
    rng = np.random.default_rng(0)
    k = np.arange(30)
    y = np.exp(-0.2 * k + 0.05 * rng.standard_normal(30))
    f = fit_exponential(y, k)
    lo, hi = f.ci95
    assert lo < 0.2 < hi and f.r2 > 0.95
    y[3] = 0.0
    cens = np.zeros(30, bool)
    cens[3] = True
    assert fit_exponential(y, k, censored=cens).n == 29
    with pytest.raises(ConfigurationError):
        fit_exponential(y, k)
    with pytest.raises(ConfigurationError):
        fit_exponential([1.0, 0.5, 0.2])


def test_record_csv_and_save(tmp_path):
    rec = ExperimentRecord("demo", "abc", 7, ["k", "x"], [(0, 1.5), (1, 0.25)], verdicts={"ok": True})
    text = rec.to_csv()
    assert text.splitlines()[0] == "# kind=demo config_digest=abc seed=7"
    assert text.splitlines()[2] == "0,1.5"
    p_csv, p_json = rec.save(tmp_path)
    assert json.loads(p_json.read_text())["passed"] is True
    assert p_csv.read_text() == text


def test_run_blocks_order_independent_of_threads():
    def fn(idx):
        return idx * 2

    a = run_blocks(fn, 200, threads=1, block=16)
    b = run_blocks(fn, 200, threads=4, block=16)
    np.testing.assert_array_equal(np.concatenate(a), np.concatenate(b))


def test_burn_in_is_thread_invariant(grid4, h4, basis4):
    starts = np.zeros((10, grid4.M), complex)
    a = burn_in(starts, h4, basis4, NU, DT, 2, seed=3, threads=1)
    b = burn_in(starts, h4, basis4, NU, DT, 2, seed=3, threads=3)
    np.testing.assert_array_equal(a, b)


def test_check_H2_heat_decay_oracle(grid4):
    # unforced single shear modes decay like exp(-nu l) in L2
    eps = 1e-3
    radii = np.array([0.5, 1.0, 2.0])
    V = np.array([SpectralVelocity.mode(grid4, (0, 1), r / math.sqrt(2)).coeffs for r in radii])
    rec = check_H2(V, None, grid4, NU, DT, eps, l_max=40)
    expect = math.ceil(math.log(radii.max() / eps) / NU)
    assert rec.meta["l"] == expect
    per_point = [math.ceil(math.log(r / eps) / NU) for r in radii]
    assert rec.meta["l_per_point"] == per_point
    assert rec.passed
    short = check_H2(V, None, grid4, NU, DT, eps, l_max=5)
    assert short.meta["l"] is None and not short.passed


def test_stabilization_drives_distance_down(grid4, h4, uhat4, basis4):
    e = SpectralVelocity.random(grid4, np.random.default_rng(4))
    u0 = uhat4 + e * (1e-3 / e.norm())
    rec = run_stabilization(uhat4, u0, h4, basis4, N=8, delta=1e-4, m=16, nu=NU, dt=DT, steps=6, q=0.95)
    d = np.array([r[1] for r in rec.rows])
    assert np.all(np.diff(d) < 0)
    assert rec.fits["distance"].rate > 0
    assert rec.verdicts["distance_rate"]
    same = run_stabilization(uhat4, uhat4, h4, basis4, N=8, delta=1e-4, m=16, nu=NU, dt=DT, steps=3, q=0.95)
    assert same.verdicts == {"identical_start": True}


@pytest.fixture(scope="module")
def params4(h4, uhat4, basis4):
    phi = phi_batch(h4, uhat4.coeffs[None], basis4, 4, 1e-2, 8, NU, DT)[0]
    return CouplingParams(nu=NU, dt=DT, d=0.05, N=4, delta=1e-2, m=8, policy="reference", phi=phi)


@pytest.fixture(scope="module")
def pairs4(h4, basis4):
    return stationary_pairs(24, h4, basis4, NU, DT, 2, seed=1)


def test_recurrence_reproducible(h4, basis4, params4, pairs4):
    U, Up = pairs4
    a = run_recurrence(U, Up, h4, basis4, params4, horizon=8, seed=5)
    b = run_recurrence(U, Up, h4, basis4, params4, horizon=8, seed=5, threads=2)
    assert a.to_csv() == b.to_csv()
    assert a.columns[0] == "chain"


def test_squeezing_from_near_pairs(grid4, h4, uhat4, basis4, params4):
    n = 24
    rng = np.random.default_rng(0)
    U = np.repeat(uhat4.coeffs[None], n, axis=0)
    dirs = np.array([SpectralVelocity.random(grid4, rng).to_real() for _ in range(n)])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lev = params4.d * np.repeat([0.125, 0.25, 0.5], n // 3)
    Up = U + grid4.from_real(dirs * lev[:, None])
    rec = run_squeezing(U, Up, h4, basis4, params4, horizon=6, seed=2)
    assert 0 <= rec.meta["p_sigma_inf"] <= 1
    assert len(rec.meta["tail_ratio"]) == 6
    with pytest.raises(ConfigurationError):
        run_squeezing(U, U + 1.0, h4, basis4, params4, horizon=6)


def test_mixing_small(h4, basis4, params4, pairs4):
    U, Up = pairs4
    rec = run_mixing(U, Up, h4, basis4, params4, k_max=6, chains=24, seed=3, reference_seeds=4, reference_steps=6,
                     reference_pool=2, ensemble=8, w1_every=3)
    est = np.array([r[1] for r in rec.rows])
    assert est[0] > 0 and np.all(est <= 1.0)
    assert "w1_at_kmax" in rec.meta


def test_coupling_inequality_small(grid4, h4, uhat4, basis4, params4):
    e = SpectralVelocity.random(grid4, np.random.default_rng(8)).to_real()
    rec = run_coupling_inequality(uhat4, e, h4, basis4, params4, distances=(1e-3, 3e-3, 1e-2, 3e-2), samples=300,
                                  tv_samples=20000, seed=1)
    P = np.array([r[1] for r in rec.rows])
    TV = np.array([r[3] for r in rec.rows])
    SE = np.array([r[2] for r in rec.rows])
    assert np.all(P <= 2 * TV + 3 * SE)
    assert np.all(np.diff(TV) > 0)


def test_squeeze_tail_test_separates_geometric_from_flat():
    rng = np.random.default_rng(3)
    n = 2000
    # geometric: P{sigma = k} = 0.3 * 2^-k, remainder survives
    p = 0.3 * 2.0 ** -np.arange(1, 13)
    geo = rng.choice(np.r_[np.arange(1, 13), -1], size=n, p=np.r_[p, 1 - p.sum()])
    c2, obs, exp, pv = squeeze_tail_test(geo, 12)
    assert c2 == pytest.approx(0.3, rel=0.3) and pv > 0.01
    # flat tail: the ratio grows like 2^n
    flat = rng.choice(np.r_[np.arange(1, 13), -1], size=n, p=np.r_[np.full(12, 0.02), 0.76])
    assert squeeze_tail_test(flat, 12)[3] < 1e-6
    assert squeeze_tail_test(np.full(50, -1), 12) == (0.0, 0, 0.0, 1.0)
