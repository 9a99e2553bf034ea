import json

import numpy as np
import pytest

from fvsim import harness
from fvsim.cli import main
from fvsim.harness import ExperimentConfig, Report, Statistic


def test_defaults_cover_every_experiment():
    assert set(harness.DEFAULTS) == set(harness.EXPERIMENTS)
    for name in harness.EXPERIMENTS:
        cfg = ExperimentConfig.default(name)
        assert cfg.seed == 1
        assert ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


def test_config_overrides_and_validation(tmp_path):
    cfg = ExperimentConfig.default("spine-marginal", N=50, params={"bins": 10})
    assert cfg.N == 50 and cfg.params["bins"] == 10 and cfg.params["tail_dt"] == 1e-2
    with pytest.raises(ValueError):
        ExperimentConfig.default("nope")
    with pytest.raises(ValueError):
        ExperimentConfig(name="qsd", N=1)
    with pytest.raises(ValueError):
        ExperimentConfig(name="qsd", replicates=0)
    with pytest.raises(ValueError):
        ExperimentConfig(name="qsd", field={"dim": 1, "box": {"lo": [0.0], "hi": [1.0]}, "kappa": {"name": "bogus", "params": {}}})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"name": "neff-compare", "N": 20}))
    assert ExperimentConfig.load(p).N == 20


def test_thread_count(monkeypatch):
    monkeypatch.setenv("FV_THREADS", "1")
    assert harness.thread_count() == 1
    monkeypatch.setenv("FV_THREADS", "100000")
    assert 1 <= harness.thread_count() <= 100000
    monkeypatch.setenv("FV_THREADS", "x")
    with pytest.raises(ValueError):
        harness.thread_count()
    monkeypatch.setenv("FV_THREADS", "1")
    assert harness.farm(lambda a, b: a + b, [(1, 2), (3, 4)]) == [3, 7]


def test_statistic_modes():
    assert Statistic("a", 1.05, 1.0, 0.1, "abs", "").passed
    assert not Statistic("a", 1.2, 1.0, 0.1, "abs", "").passed
    assert Statistic("r", 2.1, 2.0, 0.1, "rel", "").passed
    assert not Statistic("r", 2.3, 2.0, 0.1, "rel", "").passed
    assert Statistic("b", 0.01, 0.0, 0.05, "below", "").passed
    assert not Statistic("n", float("nan"), 0.0, 0.05, "below", "").passed
    with pytest.raises(ValueError):
        Statistic("x", 0.0, 0.0, 1.0, "odd", "").passed
    assert Statistic("b", 0.01, 0.0, 0.05, "below", "").line().startswith("PASS b:")


def test_plot_is_byte_stable(tmp_path):
    cfg = ExperimentConfig.default("eigen-toy")
    series = [harness._series("s", [0, 1, 2], [1.0, 0.5, 0.25])]
    r1 = Report(cfg, [], series, runtime=1.0)
    r2 = Report(cfg, [], series, runtime=9.0, version="other")
    harness.emit_plot(r1, tmp_path / "a.svg")
    harness.emit_plot(r2, tmp_path / "b.svg")
    a = (tmp_path / "a.svg").read_bytes()
    assert a == (tmp_path / "b.svg").read_bytes()
    assert a.startswith(b"<svg") and b"polyline" in a
    harness.emit_plot(Report(cfg, []), tmp_path / "e.svg")
    e = (tmp_path / "e.svg").read_bytes()
    assert b"polyline" not in e and e.count(b"<rect") == 2


def test_eigen_toy_experiment_saves(tmp_path):
    cfg = ExperimentConfig.default("eigen-toy", out=str(tmp_path / "eig"))
    rep = harness.run_experiment(cfg)
    assert rep.passed, rep.summary()
    d = json.loads((tmp_path / "eig" / "report.json").read_text())
    assert d["passed"] and d["experiment"] == "eigen-toy"
    assert (tmp_path / "eig" / "plot.svg").exists()


def test_small_experiments_run():
    rep = harness.run_experiment(ExperimentConfig.default("metrics-selftest", replicates=20))
    assert rep.passed, rep.summary()
    rep = harness.run_experiment(ExperimentConfig.default("neff-compare", N=50, replicates=20))
    assert len(rep.statistics) >= 1 and np.isfinite(rep.statistics[0].observed)


def test_cli_round_trip(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--N", "6", "--horizon", "3", "--dt", "1e-2", "--store-paths", "--out", str(out)]) == 0
    assert (out / "summary.json").exists()
    code = main(["spine", "--run", str(out), "--T", "0.5", "--out", str(tmp_path / "spine.csv"),
                 "--tree", str(tmp_path / "tree.json")])
    assert code in (0, 3)
    if code == 0:
        rows = (tmp_path / "spine.csv").read_text().splitlines()
        assert rows[0] == "time,index,x0" and len(rows) == 52
        assert json.loads((tmp_path / "tree.json").read_text())["label"] == ""
    assert main(["eigen", "--n", "128"]) == 0
    assert "lambda = 1.9999" in capsys.readouterr().out
    assert main(["wf", "--replicates", "20", "--dt", "1e-3", "--out", str(tmp_path / "wf.csv")]) == 0
    assert len((tmp_path / "wf.csv").read_text().splitlines()) == 21
    (tmp_path / "a.csv").write_text("x,mass\n0.0,1\n")
    (tmp_path / "b.csv").write_text("x,mass\n0.5,1\n")
    assert main(["metrics", "--a", str(tmp_path / "a.csv"), "--b", str(tmp_path / "b.csv"), "--metric", "w1"]) == 0
    assert float(capsys.readouterr().out.split()[-1]) == pytest.approx(0.5)
    assert main(["experiment", "eigen-toy"]) == 0
    assert main(["spine", "--run", str(tmp_path / "missing"), "--T", "1"]) == 2
    assert main(["experiment"]) == 2
