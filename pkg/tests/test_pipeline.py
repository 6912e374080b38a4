"""End-to-end behaviour of the commands on a deliberately tiny configuration."""

import hashlib
import json
import os

import numpy as np
import pandas as pd
import pytest

from coherentcast import cli, pipeline
from coherentcast.config import RunConfig, load_config, parse_config, write_config
from coherentcast.data import FEATURE_NAMES
from coherentcast.errors import ConfigurationError
from coherentcast.io import (load_model, load_reconciler, read_scenarios, save_model, save_reconciler,
                             write_scenarios)
from coherentcast.metrics import QL_LEVELS, WS_LEVELS
from coherentcast.models import Dataset, MlpQuantileForecaster, TrainConfig, select_mlp, train_mlp
from coherentcast.reconcile import ReconcilerParams, coef_weight


def tiny_config(base):
    cfg_path = os.path.join(base, "run.cfg")
    assert cli.main(["synth", "--config", cfg_path, "-q"]) == 0
    cfg = load_config(cfg_path).replace(
        context=24, lstm_hidden=4, picnn_hidden=4, max_epochs=2, patience=2, train_stride=12,
        train_samples=8, val_samples=8, scenarios=40, val_origin_stride=12, dcl_epochs=3,
        dcl_train_scenarios=16, dcl_val_scenarios=40, sweep_depths="2", sweep_max_epochs=1)
    write_config(cfg, cfg_path)
    return cfg_path, cfg


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    base = str(tmp_path_factory.mktemp("tiny"))
    cfg_path, cfg = tiny_config(base)
    for cmd in ("ingest", "train-base", "forecast"):
        assert cli.main([cmd, "--config", cfg_path, "-q"]) == 0
    for mode in ("id", "coef", "dcl"):
        assert cli.main(["train-reconciler", "--config", cfg_path, "--weight-mode", mode, "-q"]) == 0
    assert cli.main(["evaluate", "--config", cfg_path, "-q"]) == 0
    return cfg_path, cfg


def sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# --- config --------------------------------------------------------------------


def test_config_parsing():
    cfg = parse_config("# comment\nhorizon = 48\nuse_future_calendar = no\nlr = 0.01\n")
    assert cfg.horizon == 48 and cfg.use_future_calendar is False and cfg.lr == 0.01
    with pytest.raises(ConfigurationError, match="unknown key"):
        parse_config("colour = red")
    with pytest.raises(ConfigurationError, match="cannot parse"):
        parse_config("horizon = soon")
    with pytest.raises(ConfigurationError):
        parse_config("horizon")


@pytest.mark.parametrize("change", [{"horizon": 12}, {"weight_mode": "x"}, {"scenarios": 0}, {"beta": 2.0},
                                    {"activations": "rs"}, {"pairing": "zip"}])
def test_config_validation(change):
    with pytest.raises(ConfigurationError):
        RunConfig().replace(**change)


def test_config_round_trip(tmp_path):
    cfg = RunConfig(horizon=72, activations="grg", use_future_calendar=False, lr=3e-4)
    write_config(cfg, tmp_path / "c.cfg")
    assert load_config(tmp_path / "c.cfg") == cfg
    assert load_config(tmp_path / "c.cfg", {"seed": 5, "horizon": None}).seed == 5


def test_config_defaults_follow_reference_setup():
    cfg = RunConfig()
    assert (cfg.lstm_layers, cfg.lstm_hidden, cfg.picnn_hidden, cfg.activations) == (2, 100, 40, "rg")
    assert (cfg.context, cfg.horizon, cfg.batch_size, cfg.lr, cfg.max_epochs, cfg.scenarios) == \
        (168, 24, 64, 0.001, 200, 1000)


# --- commands --------------------------------------------------------------------


def test_ingest_outputs(run):
    _, cfg = run
    hourly = pd.read_csv(os.path.join(cfg.out_dir, "hourly.csv"))
    stations = [c for c in hourly.columns if c not in ("timestamp", "total")]
    np.testing.assert_allclose(hourly["total"], hourly[stations].sum(axis=1), atol=1e-12)
    feats = pd.read_csv(os.path.join(cfg.out_dir, "features.csv"))
    assert list(feats.columns[1:]) == list(FEATURE_NAMES)
    assert len(hourly) == 60 * 24


def test_training_history(run):
    _, cfg = run
    for name in ("total", "s1", "s2", "s3"):
        model, doc = load_model(os.path.join(cfg.out_dir, "models", f"{name}.json"))
        hist = model.history
        assert 2 <= len(hist) <= cfg.max_epochs + 1
        best = min(h["val"] for h in hist)
        assert best <= hist[1]["val"]
        assert doc["series"] == name


def test_scenario_files(run):
    _, cfg = run
    files = sorted(os.listdir(os.path.join(cfg.out_dir, "scenarios", "test")))
    samples, header = read_scenarios(os.path.join(cfg.out_dir, "scenarios", "test", files[0]))
    assert header["shape"] == [cfg.scenarios, 4, cfg.horizon]
    assert header["series"] == ["total", "s1", "s2", "s3"]
    assert samples.shape == (cfg.scenarios, 4, cfg.horizon)
    assert samples.min() >= 0.0


def test_reconciler_artifacts(run):
    _, cfg = run
    p_id, doc = load_reconciler(os.path.join(cfg.out_dir, "reconciler", "id.json"))
    np.testing.assert_array_equal(p_id.Q_r, np.eye(4))
    assert doc["history"] == []
    p_dcl, doc = load_reconciler(os.path.join(cfg.out_dir, "reconciler", "dcl.json"))
    assert doc["config"]["dcl_val_energy"] <= doc["config"]["dcl_val_energy_identity"]
    assert doc["history"][0]["epoch"] == 0
    Q = pd.read_csv(os.path.join(cfg.out_dir, "reconciler", "Q_dcl.csv"), index_col=0)
    np.testing.assert_array_equal(Q.to_numpy(), p_dcl.Q)


def test_coef_weight_from_validation_errors(run):
    _, cfg = run
    prep = pipeline.prepare(cfg)
    scen, actual, _ = pipeline.load_partition_scenarios(cfg, prep, "base_val")
    err = (scen.mean(axis=1) - actual).transpose(0, 2, 1).reshape(-1, 4)
    p, _ = load_reconciler(os.path.join(cfg.out_dir, "reconciler", "coef.json"))
    np.testing.assert_allclose(p.Q, coef_weight(err), rtol=1e-10, atol=1e-10)


def test_report(run):
    _, cfg = run
    doc = json.loads(open(os.path.join(cfg.out_dir, "report.json")).read())
    assert set(doc["energy"]) == {"original", "id", "coef", "dcl"}
    for label in ("id", "coef", "dcl"):
        assert doc["coherency"][label] <= 1e-8
    row = doc["rows"][0]
    for lvl in QL_LEVELS:
        assert f"QL({lvl:g})" in row
    for lvl in WS_LEVELS:
        assert f"WS({lvl:g})" in row
    per_step = pd.read_csv(os.path.join(cfg.out_dir, "per_step.csv"))
    assert set(per_step["method"]) == {"original", "id", "coef", "dcl"}
    assert os.path.exists(os.path.join(cfg.out_dir, "report.csv"))


def test_sweep_depth_two(run):
    _, cfg = run
    rows, curves = pipeline.cmd_sweep_activations(cfg)
    assert [r["combination"] for r in rows] == ["gg", "gr", "rg", "rr"]
    for alphas, q in curves.values():
        assert len(alphas) == 99 and np.all(np.diff(q) >= 0)
    sweep = pd.read_csv(os.path.join(cfg.out_dir, "sweep.csv"))
    assert len(sweep) == 4
    cdf = pd.read_csv(os.path.join(cfg.out_dir, "cdf.csv"))
    assert cdf.groupby("combination").size().tolist() == [99] * 4


def test_activation_enumeration():
    combos = pipeline.activation_combinations()
    assert len(combos) == 28 and len(set(combos)) == 28
    assert pipeline.activation_combinations((2,)) == ["gg", "gr", "rg", "rr"]


# --- artifacts -------------------------------------------------------------------


def test_model_round_trip_bitwise(run, tmp_path):
    _, cfg = run
    prep = pipeline.prepare(cfg)
    model, doc = load_model(os.path.join(cfg.out_dir, "models", "s2.json"))
    data = prep.dataset(2, prep.forecast_index("test"))
    save_model(model, tmp_path / "m.json", "s2", doc["config"], doc["extra"])
    again, _ = load_model(tmp_path / "m.json")
    a = model.sample(data, 30, 9)
    b = again.sample(data, 30, 9)
    assert a.tobytes() == b.tobytes()
    for k in model.params:
        assert model.params[k].tobytes() == again.params[k].tobytes()


def test_reconciler_round_trip(tmp_path):
    p = ReconcilerParams(np.tril(np.random.default_rng(0).normal(size=(4, 4))))
    save_reconciler(p, tmp_path / "r.json", "dcl")
    q, doc = load_reconciler(tmp_path / "r.json")
    assert q.Q_r.tobytes() == p.Q_r.tobytes() and doc["mode"] == "dcl"


def test_scenario_file_round_trip(tmp_path):
    s = np.random.default_rng(1).uniform(0, 10, size=(5, 2, 3))
    write_scenarios(tmp_path / "s.csv", s, pd.Timestamp("2024-01-01 00:00"), 3, ["total", "a"], "test")
    back, header = read_scenarios(tmp_path / "s.csv")
    np.testing.assert_allclose(back, s, rtol=1e-7)
    assert header["seed"] == 3 and header["origin"].startswith("2024-01-01")


def test_wrong_artifact_kind(tmp_path):
    save_reconciler(ReconcilerParams.identity(2), tmp_path / "r.json", "id")
    with pytest.raises(ConfigurationError):
        load_model(tmp_path / "r.json")


# --- MLP baseline ----------------------------------------------------------------------


def _mlp_data(rng, n):
    ctx = rng.uniform(size=(n, 6, 2))
    fut = rng.uniform(size=(n, 3, 1))
    target = ctx[:, -1, :1] + 0.1 * rng.normal(size=(n, 3))
    return Dataset(ctx, fut, target)


def test_mlp_baseline_trains_and_samples():
    from coherentcast.data import MinMaxScaler
    rng = np.random.default_rng(0)
    train, val = _mlp_data(rng, 200), _mlp_data(rng, 50)
    cfg = TrainConfig(max_epochs=5, lr=0.01, batch_size=32)
    scaler = MinMaxScaler(np.zeros(1), np.ones(1))
    model = select_mlp(train, val, 3, scaler, cfg, grid=((8, 8), (16, 16)))
    assert model.widths in ((8, 8), (16, 16))
    assert model.history[-1]["val"] <= model.history[0]["val"] or min(h["val"] for h in model.history[1:]) <= \
        model.history[0]["val"]
    s = model.sample(val, 25, 3)
    assert s.shape == (50, 25, 3)
    assert s.tobytes() == model.sample(val, 25, 3).tobytes()
    q = np.sort(model.quantiles_scaled(val), axis=-1)
    assert np.all(s >= q[..., 0][:, None] - 1e-12) and np.all(s <= q[..., -1][:, None] + 1e-12)


def test_mlp_round_trip(tmp_path):
    from coherentcast.data import MinMaxScaler
    rng = np.random.default_rng(1)
    data = _mlp_data(rng, 20)
    model = MlpQuantileForecaster.build(15, 3, (4, 4), MinMaxScaler(np.zeros(1), np.ones(1) * 2), seed=1)
    train_mlp(model, data, data, TrainConfig(max_epochs=1))
    save_model(model, tmp_path / "m.json", "x")
    again, _ = load_model(tmp_path / "m.json")
    assert again.sample(data, 5, 0).tobytes() == model.sample(data, 5, 0).tobytes()


# --- CLI error paths -------------------------------------------------------------------


def test_missing_config_exit_code(tmp_path, capsys):
    assert cli.main(["ingest", "--config", str(tmp_path / "nope.cfg")]) == 2
    assert "nope.cfg" in capsys.readouterr().err


def test_missing_sessions_exit_code(tmp_path, capsys):
    cfg = RunConfig(sessions=str(tmp_path / "missing.csv"), weather=str(tmp_path / "w.csv"), out_dir=str(tmp_path))
    write_config(cfg, tmp_path / "c.cfg")
    assert cli.main(["ingest", "--config", str(tmp_path / "c.cfg")]) == 2
    assert "missing.csv" in capsys.readouterr().err


def test_empty_sessions_exit_code(tmp_path, capsys):
    (tmp_path / "s.csv").write_text("station_id,connect_time,disconnect_time,energy_kwh\n")
    (tmp_path / "w.csv").write_text("timestamp,temp_c,dewpoint_c,precip_mm\n2024-01-01T00:00,1,1,0\n")
    cfg = RunConfig(sessions=str(tmp_path / "s.csv"), weather=str(tmp_path / "w.csv"), out_dir=str(tmp_path))
    write_config(cfg, tmp_path / "c.cfg")
    assert cli.main(["ingest", "--config", str(tmp_path / "c.cfg")]) == 2
    assert "no sessions" in capsys.readouterr().err


def test_zero_scenarios_is_usage_error(run):
    cfg_path, _ = run
    assert cli.main(["forecast", "--config", cfg_path, "--scenarios", "0", "-q"]) == 2


def test_bad_flag_values_exit_two(run):
    cfg_path, _ = run
    for argv in (["forecast", "--config", cfg_path, "--horizon", "12"],
                 ["train-reconciler", "--config", cfg_path, "--weight-mode", "mint"],
                 ["plot", "--config", cfg_path]):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 2


def test_scenario_shape_mismatch_exit_three(run, tmp_path, capsys):
    cfg_path, cfg = run
    out = tmp_path / "out"
    import shutil
    shutil.copytree(cfg.out_dir, out)
    folder = out / "scenarios" / "test"
    first = sorted(os.listdir(folder))[0]
    samples, header = read_scenarios(folder / first)
    write_scenarios(folder / first, samples[:, :, :12], pd.Timestamp(header["origin"]), header["seed"],
                    header["series"], "test")
    assert cli.main(["evaluate", "--config", cfg_path, "--out", str(out), "-q"]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_forecast_is_deterministic(run, tmp_path):
    cfg_path, cfg = run
    folder = os.path.join(cfg.out_dir, "scenarios", "test")
    before = {f: sha(os.path.join(folder, f)) for f in os.listdir(folder)}
    assert cli.main(["forecast", "--config", cfg_path, "-q"]) == 0
    assert {f: sha(os.path.join(folder, f)) for f in os.listdir(folder)} == before
