import json
from dataclasses import replace

import numpy as np
import pytest
from click.testing import CliRunner

from pfin_fed.cli import main
from pfin_fed.experiment import (METHODS, ExperimentConfig, TableRow, build_data, compare,
                                 config_from_mapping, dumps_config, expand_matrix, format_table,
                                 load_config, load_sweep, loads_config, parse_overrides,
                                 result_table, run_experiment, verify_manifest)
from pfin_fed.mathcore import ConfigError, ParamSet

# small enough to run in a few seconds, big enough that every client has data
TINY = dict(n_samples=400, rounds=2, local_epochs=1, n_layers=1, lr=1e-3, K=4, ratio="2:2")


def tiny(**kw):
    return config_from_mapping({**TINY, **kw})


# ---------------------------------------------------------------- config

def test_default_hyperparameters():
    cfg = ExperimentConfig()
    assert (cfg.rounds, cfg.local_epochs, cfg.batch_size, cfg.lr) == (20, 4, 32, 1e-4)
    assert (cfg.alpha, cfg.T, cfg.beta, cfg.alpha_dir, cfg.K, cfg.ratio) == (0.6, 0.2, 0.5, 0.5, 10, "8:2")


def test_config_round_trip():
    cfg = tiny(seed=7, method="fin_fedavg", s_max=1.25, unimodal_shift=0.5)
    assert loads_config(dumps_config(cfg)) == cfg


def test_overrides_are_typed():
    got = parse_overrides(["--lr=3e-3", "rounds=5", "--method=zero", "--ratio=6:4", "seeds=[0,1]"])
    assert got == {"lr": 3e-3, "rounds": 5, "method": "zero", "ratio": "6:4", "seeds": [0, 1]}


def test_load_config_with_overrides(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(dumps_config(tiny(seed=3)))
    cfg = load_config(path, ["--seed=4", "--alpha=0.25"])
    assert cfg.seed == 4 and cfg.alpha == 0.25 and cfg.n_samples == 400


@pytest.mark.parametrize("bad", [dict(method="median"), dict(ratio="7:2"), dict(ratio="10:0"),
                                 dict(ratio="x"), dict(unknown_key=1), dict(rounds=1.5)])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        config_from_mapping({**TINY, **bad})


def test_held_out_splits_are_disjoint_from_clients():
    data = build_data(tiny())
    train = {s.uid for c in data.clients for s in c.samples}
    assert len(train) + len(data.test[0]) + len(data.val[0]) == 400
    assert len(data.test[0]) == 80 and len(data.val[0]) == 40
    assert sum(c.modality == "multimodal" for c in data.clients) == 2


# ---------------------------------------------------------------- runs

def test_run_writes_artifacts_and_is_deterministic(tmp_path):
    cfg = tiny(seed=1)
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b", client_order=[3, 1, 0, 2])
    for name in ("summary.json", "final.json", "final.bin", "rounds.csv", "round_summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    for name in ("reliability.csv", "deciles.csv", "calibration.json"):
        assert (tmp_path / "a" / "calibration" / name).exists()
    assert verify_manifest(tmp_path / "a") == []
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["checkpoint_sha256"] == ParamSet.load(tmp_path / "a" / "final").digest()
    assert a.summary["test_auc"] == b.summary["test_auc"]


def test_rerun_into_same_directory_is_verified(tmp_path):
    cfg = tiny(seed=2, method="zero")
    first = run_experiment(cfg, tmp_path / "r")
    assert first.rerun_mismatches is None
    again = run_experiment(cfg, tmp_path / "r")
    assert again.rerun_mismatches == []


def test_manifest_detects_tampering(tmp_path):
    run_experiment(tiny(method="zero"), tmp_path / "m")
    (tmp_path / "m" / "rounds.csv").write_text("t\n")
    assert verify_manifest(tmp_path / "m") == ["rounds.csv"]


def test_alpha_zero_reduces_to_fedavg():
    a = run_experiment(tiny(seed=4, method="pfin_feduq", alpha=0.0))
    b = run_experiment(tiny(seed=4, method="pfin_fedavg"))
    assert a.summary["test_auc"] == b.summary["test_auc"]
    assert a.theta.bitwise_equal(b.theta)


@pytest.mark.parametrize("method", METHODS)
def test_every_method_runs(method):
    res = run_experiment(tiny(method=method))
    assert 0.0 <= res.summary["test_auc"] <= 1.0
    assert len(res.records) == 2


def test_failed_run_removes_partial_output(tmp_path, monkeypatch):
    import pfin_fed.experiment as ex

    def boom(*a, **k):
        raise RuntimeError("disk full")
    monkeypatch.setattr(ex, "write_round_csv", boom)
    with pytest.raises(RuntimeError):
        run_experiment(tiny(method="zero"), tmp_path / "gone")
    assert not (tmp_path / "gone").exists()


# ---------------------------------------------------------------- tables

def _summary(method, ratio, seed, auc):
    return {"method": method, "ratio": ratio, "seed": seed, "test_auc": auc}


def test_result_table_std_needs_two_seeds():
    rows = result_table([_summary("zero", "8:2", 0, 0.6), _summary("zero", "8:2", 1, 0.8),
                         _summary("uniform", "8:2", 0, 0.7)])
    by = {r.method: r for r in rows}
    assert by["zero"].mean_auc == pytest.approx(0.7)
    assert by["zero"].std_auc == pytest.approx(np.std([0.6, 0.8], ddof=1))
    assert by["uniform"].std_auc is None
    assert "70.00" in format_table(rows)


def test_compare_reports_ties_and_missing():
    table = [TableRow("pfin_feduq", "8:2", 0.8, None, 1), TableRow("fin_fedavg", "8:2", 0.7, None, 1),
             TableRow("zero", "8:2", 0.7, None, 1)]
    rep = compare(table)["8:2"]
    # the fixed method order breaks the tie
    assert rep["ranking"] == ["pfin_feduq", "zero", "fin_fedavg"]
    assert rep["ties"] == [["zero", "fin_fedavg"]]
    assert rep["missing"] == ["uniform", "pfin_fedavg"]
    assert rep["gaps"]["pfin_feduq-pfin_fedavg"] is None
    assert rep["gaps"]["pfin_feduq-fin_fedavg"] == pytest.approx(0.1)


def test_matrix_expansion():
    cfgs = expand_matrix(ExperimentConfig(), METHODS, ["8:2", "6:4", "4:6"], [0, 1, 2, 3, 4])
    assert len(cfgs) == 75
    assert len({(c.method, c.ratio, c.seed) for c in cfgs}) == 75


def test_sweep_file(tmp_path):
    path = tmp_path / "sweep.toml"
    path.write_text('methods = ["zero", "uniform"]\nratios = ["2:2"]\nseeds = [0, 1]\n'
                    'K = 4\nn_samples = 400\n')
    cfgs = load_sweep(path, ["--rounds=1"])
    assert [(c.method, c.seed) for c in cfgs] == [("zero", 0), ("zero", 1), ("uniform", 0), ("uniform", 1)]
    assert all(c.rounds == 1 for c in cfgs)


# ---------------------------------------------------------------- command line

def _args(**kw):
    return [f"--{k}={v}" for k, v in {**TINY, **kw}.items()]


def test_cli_run_and_compare(tmp_path):
    runner = CliRunner()
    for m in ("zero", "uniform"):
        res = runner.invoke(main, ["run", "--out", str(tmp_path / m)] + _args(method=m))
        assert res.exit_code == 0, res.output
        assert "test_auc=" in res.output
    res = runner.invoke(main, ["compare", str(tmp_path), "--json", str(tmp_path / "cmp.json")])
    assert res.exit_code == 0, res.output
    assert "ranking:" in res.output and "unavailable" in res.output
    assert set(json.loads((tmp_path / "cmp.json").read_text())["2:2"]["missing"]) == \
        {"fin_fedavg", "pfin_fedavg", "pfin_feduq"}


def test_cli_invalid_config_names_the_error(tmp_path):
    res = CliRunner().invoke(main, ["run", "--out", str(tmp_path / "x")] + _args(ratio="3:2"))
    assert res.exit_code == 2
    assert "ConfigError" in res.output
    assert not (tmp_path / "x").exists()


def test_cli_matrix(tmp_path):
    sweep = tmp_path / "sweep.toml"
    sweep.write_text('methods = ["zero", "pfin_feduq"]\nseeds = [0, 1]\n')
    res = CliRunner().invoke(main, ["matrix", str(sweep), "--out", str(tmp_path / "runs")] + _args())
    assert res.exit_code == 0, res.output
    assert (tmp_path / "runs" / "table.csv").read_text().splitlines()[0] == \
        "method,ratio,mean_auc,std_auc,n_seeds"
    assert json.loads((tmp_path / "runs" / "compare.json").read_text())["2:2"]["ranking"]


def test_cli_calibrate(tmp_path):
    run_experiment(tiny(method="pfin_feduq"), tmp_path / "p")
    res = CliRunner().invoke(main, ["calibrate", str(tmp_path / "p" / "final"), "--samples", "200",
                                    "--out", str(tmp_path / "cal")])
    assert res.exit_code == 0, res.output
    assert "ECE=" in res.output
    assert (tmp_path / "cal" / "reliability.csv").exists()


def test_cli_calibrate_rejects_point_imputer(tmp_path):
    run_experiment(tiny(method="fin_fedavg"), tmp_path / "f")
    res = CliRunner().invoke(main, ["calibrate", str(tmp_path / "f" / "final")])
    assert res.exit_code == 2 and "ConfigError" in res.output


def test_cli_selftest():
    res = CliRunner().invoke(main, ["selftest", "--points", "2"])
    assert res.exit_code == 0, res.output
    assert "FAIL" not in res.output and "checks passed" in res.output
