import csv

import pytest

from nsmix.cli import COMMANDS, load_fixtures, main

SMALL = """
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
burn_in = 1
coupling_samples = 40
coupling_distances = [1e-3, 3e-3, 1e-2, 3e-2]
event_chains = 2
event_steps = 2
recurrence_chains = 8
recurrence_horizon = 5
squeeze_chains = 8
squeeze_horizon = 5
mix_chains = 8
k_max = 5
h2_points = 5
observability_m = [4, 8, 16]
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return p


def test_command_table():
    assert len(COMMANDS) == 13
    assert {"basis", "couple", "ot-oracle", "check-h2"} <= set(COMMANDS)


def test_unknown_command_exits_nonzero(capsys):
    assert main(["frobnicate"]) != 0
    assert "usage" in capsys.readouterr().err


def test_missing_config_exit_code(tmp_path):
    assert main(["basis", "--config", str(tmp_path / "absent.ini"), "--out", str(tmp_path)]) == 2


def test_bad_config_exit_code(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[noise]\nb0 = 0\n")
    assert main(["basis", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_basis_command_outputs(small_cfg, tmp_path):
    out = tmp_path / "o"
    assert main(["basis", "--config", str(small_cfg), "--out", str(out), "--seed", "4"]) == 0
    text = (out / "basis.csv").read_text()
    head = text.splitlines()[0]
    assert head.startswith("# config_digest=") and head.endswith("seed=4")
    rows = list(csv.reader(text.splitlines()[1:]))
    assert rows[0] == ["j", "b_j", "xi_j"] and len(rows) == 17
    assert "seed = 4" in (out / "config_resolved.ini").read_text()


def test_tv_check_and_fixtures(tmp_path):
    fx = load_fixtures("tv_fixtures.json")
    assert len(fx["kappas"]) == 5
    assert main(["tv-check", "--out", str(tmp_path)]) == 0


def test_simulate_unforced_energy(tmp_path):
    cfg = tmp_path / "z.ini"
    cfg.write_text("[physics]\nK = 4\ndt = 0.01\n[noise]\nJ = 16\n[control]\nm = 8\n[forcing]\nkind = 'zero'\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "trajectory_0.nsmx").stat().st_size > 0


@pytest.mark.parametrize("cmd", ["observability", "check-h2", "recurrence", "squeeze"])
def test_small_experiments_run(cmd, small_cfg, tmp_path):
    code = main([cmd, "--config", str(small_cfg), "--out", str(tmp_path), "--threads", "1"])
    assert code in (0, 1)
    assert (tmp_path / "config_resolved.ini").exists()


def test_rerun_is_bit_identical(small_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["recurrence", "--config", str(small_cfg), "--out", str(a), "--threads", "1"])
    main(["recurrence", "--config", str(small_cfg), "--out", str(b), "--threads", "2"])
    assert (a / "recurrence.csv").read_bytes() == (b / "recurrence.csv").read_bytes()
