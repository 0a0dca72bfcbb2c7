import csv
import json

import numpy as np
import pytest

from hjbmlp import cli
from hjbmlp.cli import ConfigError, ExperimentConfig


def run(tmp_path, command, name="out", threads=1, **cfg):
    conf = tmp_path / f"{name}.json"
    conf.write_text(ExperimentConfig(command=command, **cfg).to_json())
    out = tmp_path / name
    code = cli.main([command, "--config", str(conf), "--out", str(out), "--threads", str(threads)])
    return code, out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_config_round_trip():
    cfg = ExperimentConfig(command="convergence", N_list=(1, 2), M_list=(1, 1), Q=(-1.0, 1.0, 4),
                           points=((0.0, 1.0), (2.0, 3.0)), seed=2**64 - 1)
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg
    assert json.loads(cfg.to_json())["N_list"] == [1, 2]


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(command="nope").validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(Q=(1.0, -1.0, 3)).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(oracle="magic").validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(N_list=(1, 2), M_list=(1,)).validate()


def test_bad_config_exits_2(tmp_path):
    code, _ = run(tmp_path, "solve", problem="missing.json")
    assert code == 2


def test_hamiltonian_check_pass_and_corrupt_fail(tmp_path):
    code, out = run(tmp_path, "hamiltonian-check", name="good", families=("no_gain", "p1"), samples=200)
    assert code == 0
    assert all(r["status"] == "PASS" for r in read_rows(out / "hamiltonian-check.csv"))
    code, out = run(tmp_path, "hamiltonian-check", name="bad", families=("p1",), samples=200,
                    corrupt_gamma=1.5)
    assert code == 1
    assert any(r["status"] == "FAIL" for r in read_rows(out / "hamiltonian-check.csv"))


def test_blocks_check_passes(tmp_path):
    code, out = run(tmp_path, "blocks-check")
    assert code == 0
    rows = read_rows(out / "blocks-check.csv")
    assert rows and all(r["status"] == "PASS" for r in rows)


def test_solve_n0_gives_zeros(tmp_path):
    code, out = run(tmp_path, "solve", N=0, points=((0.1, 0.2), (0.3, -0.4)))
    assert code == 0
    rows = read_rows(out / "solve.csv")
    assert len(rows) == 2
    assert all(float(r["value"]) == 0.0 and float(r["grad1"]) == 0.0 for r in rows)


def test_solve_heat_with_oracle(tmp_path):
    code, out = run(tmp_path, "solve", problem="builtin:heat", d=3, N=3, M=3, Q=(-1.0, 1.0, 8),
                    oracle="heat", oracle_samples=20_000, tol=0.5)
    assert code == 0
    summary = read_rows(out / "solve-summary.csv")
    assert summary[0]["status"] == "PASS"
    vals = np.array([float(r["value"]) for r in read_rows(out / "solve.csv")])
    assert np.all(np.isfinite(vals))


def test_solve_and_freeze_are_byte_deterministic(tmp_path):
    common = dict(problem="builtin:p1", d=2, N=2, M=2, Q=(-1.0, 1.0, 6), seed=17)
    outs = [run(tmp_path, "solve", name=f"s{k}", threads=k, **common) for k in (1, 2, 8)]
    assert all(code == 0 for code, _ in outs)
    first = (outs[0][1] / "solve.csv").read_bytes()
    assert "wall_ms" in first.decode().splitlines()[0]
    for _, out in outs[1:]:
        assert (out / "solve.csv").read_bytes() == first
    frz = [run(tmp_path, "freeze", name=f"f{k}", threads=k, delta=1e-1, **common) for k in (1, 8)]
    assert all(code == 0 for code, _ in frz)
    assert (frz[0][1] / "frozen_net.json").read_bytes() == (frz[1][1] / "frozen_net.json").read_bytes()
    assert (frz[0][1] / "freeze.csv").read_bytes() == (frz[1][1] / "freeze.csv").read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(ExperimentConfig(command="solve", N=2, M=2, Q=(-1.0, 1.0, 3)).to_json())
    cli.main(["solve", "--config", str(conf), "--out", str(tmp_path / "a"), "--seed", "5"])
    cli.main(["solve", "--config", str(conf), "--out", str(tmp_path / "b"), "--seed", "6"])
    a = read_rows(tmp_path / "a" / "solve.csv")
    b = read_rows(tmp_path / "b" / "solve.csv")
    assert a[0]["seed"] == "5" and b[0]["seed"] == "6"
    assert a[0]["value"] != b[0]["value"]


def test_scaling_and_convergence_small(tmp_path):
    code, out = run(tmp_path, "scaling", d_list=(1, 2, 4), N=1, M=1)
    assert code == 0
    assert len(read_rows(out / "scaling.csv")) == 3
    code, out = run(tmp_path, "convergence", name="conv", problem="builtin:heat", d=2,
                    N_list=(1, 2, 3), seeds=3, Q=(-1.0, 1.0, 4), oracle="heat", oracle_samples=5000)
    assert code in (0, 1)
    assert read_rows(out / "convergence.csv")
