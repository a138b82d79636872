import math
import subprocess
import sys

import numpy as np
import pytest

from twistedsmc.harness import experiments
from twistedsmc.harness.cli import main
from twistedsmc.harness.config import ConfigError, ExperimentConfig, config_from_dict, load_config
from twistedsmc.harness.experiments import (
    RECORD_COLUMNS,
    read_records,
    read_series,
    records_to_csv,
    run_experiment,
    size_baselines,
)
from twistedsmc.harness.summarize import SUMMARY_COLUMNS, quantile, summarize

SMALL = """
[experiment]
model = "lgssm"
repetitions = 2
seed = 11

[filter]
N = 30
n_tilde = 3

[learning]
iterations = 2
alpha_min = [0.05, 0.02]

[data]
n = 6

[lgssm]
d = 2
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "cfg.toml"
    p.write_text(SMALL)
    return p


def test_size_baselines():
    assert size_baselines(200, 1.0, 25) == (20600, 225)
    assert size_baselines(200, 1.25, 25, rejection_factor=2) == (20500, 225)
    assert size_baselines(10, 1.0, 0) == (30, 10)
    with pytest.raises(ValueError):
        size_baselines(200, None, 25)
    with pytest.raises(ValueError):
        size_baselines(200, float("nan"), 25)


@pytest.mark.parametrize("doc, key", [
    ({"filter": {"M": 3}}, "filter.M"),
    ({"filter": {"N": 0}}, "N"),
    ({"learning": {"alpha_min": [0.5, 2.0]}}, "alpha_min"),
    ({"lgssm": {"dim": 2}}, "lgssm.dim"),
    ({"sv": {"filter": {"phi4": 1.0}}, "experiment": {"model": "sv"}}, "sv.filter.phi4"),
    ({"bogus": {}}, "bogus"),
    ({"experiment": {"model": "sv", "methods": ["tpf-opt"]}}, "methods"),
    ({"experiment": {"methods": ["pf"]}}, "methods"),
])
def test_config_errors_name_key(doc, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        config_from_dict(doc)


def test_config_defaults(small_cfg):
    cfg = load_config(small_cfg)
    assert cfg.N == 30 and cfg.alpha_min == (0.05, 0.02) and cfg.lgssm["d"] == 2
    assert cfg.lgssm["a"] == 0.42 and cfg.horizon() == 6
    sv = ExperimentConfig.for_model("sv")
    assert sv.partial_twist and sv.floor == 0.002 and "tpf-opt" not in sv.methods


def test_quantile_hand_values():
    v = [5.0, 1.0, 4.0, 2.0, 3.0]
    assert quantile(v, 0.5) == 3.0
    assert quantile(v, 0.0) == 1.0 and quantile(v, 1.0) == 5.0
    assert quantile(v, 0.1) == pytest.approx(1.4)
    assert quantile(v, 0.975) == pytest.approx(4.9)
    with pytest.raises(ValueError):
        quantile([], 0.5)


def _rec(method, rep, log_z, status="ok"):
    return dict(method=method, rep=rep, seed=0, N=10, log_z=log_z, kernel_sims=5, learn_sims=0,
                mean_trials=1.0, min_acceptance=1.0, frac_steps_ok=1.0, resample_count=0,
                status=status, wall_ms=0.0)


def test_summarize_hand_values():
    errs = [0.1, -0.2, 0.3]
    recs = [_rec("a", i, 2.0 + e) for i, e in enumerate(errs)]
    recs += [_rec("b", i, 2.0 + e) for i, e in enumerate(errs)]
    recs.append(_rec("b", 3, float("nan"), status="error: boom"))
    rows = {r["method"]: r for r in summarize(recs, 2.0, baseline="a")}
    assert rows["a"]["mse"] == pytest.approx(np.mean(np.square(errs)))
    assert rows["b"]["rel_mse"] == pytest.approx(1.0)
    assert rows["b"]["failed"] == 1 and rows["b"]["reps"] == 3
    assert rows["a"]["abs_err_median"] == pytest.approx(0.2)
    assert rows["a"]["ratio_mean"] == pytest.approx(np.mean(np.exp(errs)))


def _strip_wall(path):
    recs = read_records(path)
    return records_to_csv(recs, include_wall=False)


def test_run_is_deterministic(small_cfg, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", "--config", str(small_cfg), "--out", str(a)]) == 0
    assert main(["run", "--config", str(small_cfg), "--out", str(b)]) == 0
    assert _strip_wall(a) == _strip_wall(b)
    recs = read_records(a)
    assert list(recs[0].keys()) == list(RECORD_COLUMNS)
    assert recs[0]["method"] == "reference" and recs[0]["status"] == "kalman"
    assert len(recs) == 1 + 2 * 5
    assert all(r["status"] == "ok" for r in recs[1:])
    assert not (tmp_path / "a.csv.partial").exists()


def test_worker_pool_matches_serial(small_cfg, tmp_path, monkeypatch):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", "--config", str(small_cfg), "--out", str(a)]) == 0
    monkeypatch.setenv(experiments.WORKERS_ENV, "2")
    assert main(["run", "--config", str(small_cfg), "--out", str(b)]) == 0
    assert _strip_wall(a) == _strip_wall(b)


def test_failures_are_recorded(small_cfg, tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise FloatingPointError("learning diverged")

    monkeypatch.setattr(experiments, "learn_schedule", broken)
    recs = run_experiment(load_config(small_cfg), str(tmp_path / "r.csv"))
    status = {r["method"]: r["status"] for r in recs if r["rep"] == 0}
    assert status["tpf-learn"].startswith("error: FloatingPointError")
    assert status["bpf-c"].startswith("error:")
    assert status["bpf"] == "ok" and status["tpf-opt"] == "ok"


def test_summarize_cli(small_cfg, tmp_path, capsys):
    rec = tmp_path / "r.csv"
    main(["run", "--config", str(small_cfg), "--out", str(rec)])
    s1, s2, plot = tmp_path / "s1.csv", tmp_path / "s2.csv", tmp_path / "p.csv"
    assert main(["summarize", "--records", str(rec), "--reference", "kalman",
                 "--out", str(s1), "--plot-out", str(plot)]) == 0
    assert main(["summarize", "--records", str(rec), "--out", str(s2)]) == 0
    assert s1.read_text() == s2.read_text()
    lines = s1.read_text().splitlines()
    assert lines[0] == ",".join(SUMMARY_COLUMNS)
    assert len(lines) == 6
    row = dict(zip(SUMMARY_COLUMNS, [l for l in lines if l.startswith("tpf-opt,")][0].split(",")))
    assert float(row["rel_mse"]) == 1.0
    assert len(plot.read_text().splitlines()) == 1 + 10
    assert main(["summarize", "--records", str(rec), "--reference", "bpf-20000"]) == 1


def test_simulate_cli(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert main(["simulate", "--model", "sv", "--seed", "4", "--n", "30", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    r = read_series(a)
    assert r.shape == (30, 1)
    params = tmp_path / "p.toml"
    params.write_text("d = 2\nn = 7\n")
    assert main(["simulate", "--model", "lgssm", "--params", str(params), "--out", str(a)]) == 0
    assert read_series(a).shape == (8, 2)  # observations at t = 0..n
    params.write_text("dimension = 2\n")
    assert main(["simulate", "--model", "lgssm", "--params", str(params), "--out", str(a)]) == 2


def test_learn_cli(small_cfg, tmp_path):
    out, rep = tmp_path / "s.toml", tmp_path / "rep.csv"
    assert main(["learn", "--config", str(small_cfg), "--out", str(out), "--report", str(rep)]) == 0
    assert out.read_text().strip()
    assert rep.read_text().startswith("iteration,p,beta")


def test_oracle_check_cli():
    assert main(["oracle-check", "--cases", "10"]) == 0


def test_exit_codes():
    r = subprocess.run([sys.executable, "-m", "twistedsmc", "run", "--nope"], capture_output=True)
    assert r.returncode == 2
    r = subprocess.run([sys.executable, "-m", "twistedsmc", "run", "--config", "/nonexistent.toml"],
                       capture_output=True)
    assert r.returncode == 1
