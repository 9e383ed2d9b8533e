import json

import numpy as np
import pytest

from odenet.cli import cmd_compare, cmd_fit, load_config, load_model, main
from odenet.data import read_csv
from odenet.systems import make_lorenz, make_lv


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _small_fit(tmp_path, **extra):
    cfg = {
        "dataset": {"generator": {"system": "lv", "regime": "limit_cycle", "eps": 0.01, "horizon": 5}},
        "basis": {"d": 2, "p": 2},
        "train": {"iterations": 30, "m": 4, "n": 5, "init": "regression_warm_start"},
        "seed": 1,
    }
    cfg.update(extra)
    return cfg


def test_generate_lv(tmp_path):
    cfg = _write(tmp_path / "g.json", {"system": "lv", "regime": "limit_cycle", "eps": 0.01, "dt": 0.01,
                                       "horizon": 30})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "4"]) == 0
    names, t, v = read_csv(tmp_path / "a" / "traj_000.csv")
    assert names == ["x1", "x2"] and t.size == 3001
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 4 and man["generator"]["eps"] == 0.01
    main(["generate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "4"])
    for f in ("traj_000.csv", "clean_000.csv", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_generate_actin_hides_p(tmp_path):
    cfg = _write(tmp_path / "g.json", {"system": "actin", "kind": "physical", "salt": "MgCl2"})
    main(["generate", "--config", cfg, "--out", str(tmp_path / "a")])
    names, _, _ = read_csv(tmp_path / "a" / "traj_000.csv")
    assert names == ["M", "m"]
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["hidden"] == ["P"]


def test_config_errors(tmp_path, capsys):
    bad = _small_fit(tmp_path)
    bad["train"]["learning_rate"] = 1.0
    assert main(["fit", "--config", _write(tmp_path / "c.json", bad)]) == 1
    assert "learning_rate" in capsys.readouterr().err
    worse = _small_fit(tmp_path)
    worse["train"]["m"] = 0
    assert main(["fit", "--config", _write(tmp_path / "c.json", worse)]) == 1
    assert main(["fit", "--config", str(tmp_path / "missing.json")]) == 1
    gen = _write(tmp_path / "g.json", {"system": "lv", "regime": "chaotic"})
    assert main(["generate", "--config", gen, "--out", str(tmp_path / "g")]) == 1


def test_fit_outputs_and_determinism(tmp_path):
    cfg = _write(tmp_path / "c.json", _small_fit(tmp_path))
    assert main(["fit", "--config", cfg, "--out", str(tmp_path / "r1")]) == 0
    assert main(["fit", "--config", cfg, "--out", str(tmp_path / "r2")]) == 0
    for f in ("model.json", "sidecar.json", "train.log", "equations.txt", "data/traj_000.csv"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
    assert (tmp_path / "r1" / "equations.txt").read_text().startswith("dx1/dt =")
    assert not (tmp_path / "r1" / "noise_report.csv").exists()


def test_fit_noise_and_sindy_modes(tmp_path):
    noisy = _small_fit(tmp_path)
    noisy["train"].update(learn_noise=True, noise_eps=0.01)
    res = cmd_fit(load_config(noisy), tmp_path / "n")
    assert (tmp_path / "n" / "noise_report.csv").exists() and res.fitted.noise is not None
    res = cmd_fit(load_config(_small_fit(tmp_path)), tmp_path / "s", mode="sindy")
    assert (tmp_path / "s" / "sindy.json").exists() and res.fitted is None


def test_training_divergence_exit_code(tmp_path):
    cfg = _small_fit(tmp_path)
    cfg["train"] = {"iterations": 100, "m": 2, "n": 100, "lr": 1e-12}
    cfg["initial_coefficients"] = [{"equation": "x1", "term": "x1^2", "value": 5.0}]
    assert main(["fit", "--config", _write(tmp_path / "c.json", cfg), "--out", str(tmp_path / "d")]) == 2


def test_simulate(tmp_path):
    zero = tmp_path / "zero.json"
    model = make_lv("limit_cycle").model
    model.theta.values[:] = 0.0
    zero.write_text(model.to_json())
    assert main(["simulate", "--model", str(zero), "--x0", "1,2", "--horizon", "1", "--dt", "0.1",
                 "--out", str(tmp_path / "z")]) == 0
    _, t, v = read_csv(tmp_path / "z" / "trajectory.csv")
    assert t.size == 11 and np.all(v == [1.0, 2.0])
    lz = tmp_path / "lorenz.json"
    lz.write_text(make_lorenz().model.to_json())
    main(["simulate", "--model", str(lz), "--x0=-8,7,27", "--horizon", "25", "--dt", "0.01",
          "--out", str(tmp_path / "l")])
    _, _, v = read_csv(tmp_path / "l" / "trajectory.csv")
    assert np.abs(v[:, :2]).max() < 25 and 0 < v[:, 2].min() and v[:, 2].max() < 50


def test_simulate_divergence_writes_partial_output(tmp_path):
    from odenet.basis import build_basis
    from odenet.model import ODEModel

    blow = tmp_path / "blow.json"
    blow.write_text(ODEModel(build_basis(1, 2), np.array([[0.0, 0.0, 1.0]])).to_json())
    code = main(["simulate", "--model", str(blow), "--x0", "1", "--horizon", "2", "--dt", "0.1",
                 "--out", str(tmp_path / "b")])
    assert code == 3
    _, t, v = read_csv(tmp_path / "b" / "trajectory.csv")
    assert 1 <= t.size < 21 and t[-1] < 1.0 + 1e-9 and np.all(np.isfinite(v))


def test_compare(tmp_path, capsys):
    truth = make_lv("limit_cycle").model
    m = cmd_compare(truth, truth, tmp_path / "c")
    assert m["max_relative_error"] == 0.0 and m["precision"] == 1.0
    assert json.loads((tmp_path / "c" / "metrics.json").read_text())["recall"] == 1.0
    spur = truth.copy()
    spur.theta.values[0, 0] = 0.5
    spur.theta.active[0, 0] = True
    p = tmp_path / "spur.json"
    p.write_text(spur.to_json())
    t = tmp_path / "truth.json"
    t.write_text(truth.to_json())
    assert main(["compare", "--truth", str(t), "--fitted", str(p)]) == 0
    assert "precision 0.800 < 1" in capsys.readouterr().out
    lz = tmp_path / "lz.json"
    lz.write_text(make_lorenz().model.to_json())
    assert main(["compare", "--truth", str(t), "--fitted", str(lz)]) == 1


def test_manifest_loads_as_truth(tmp_path):
    cfg = _write(tmp_path / "g.json", {"system": "lorenz", "horizon": 1})
    main(["generate", "--config", cfg, "--out", str(tmp_path / "g")])
    model = load_model(tmp_path / "g" / "manifest.json")
    assert model.to_json() == make_lorenz().model.to_json()


def test_report_list(capsys):
    assert main(["report", "--list"]) == 0
    out = capsys.readouterr().out
    assert "table1-limitcycle-1pct" in out and "determinism" in out
