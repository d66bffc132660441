import json

import numpy as np
import pytest

from qprojfilter import harness
from qprojfilter.cli import main
from qprojfilter.config import ConfigError, ExperimentConfig, load_config, parse_config, preset
from qprojfilter.exact import exact_vs_filter
from qprojfilter.linalg import bloch_to_density
from qprojfilter.model import spin_half_model
from qprojfilter.rng import wiener_increments


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def small(**kw):
    base = {"preset": "spin-half-qnd", "T": 1.0, "steps": 128, "n_traj": 6, "chunk_size": 2}
    base.update(kw)
    return base


def test_preset_has_full_parameter_set():
    cfg = load_config("spin-half-qnd")
    assert cfg.model == {"preset": "spin-half", "omega": 1.0, "M": 1.0, "eta": 0.5}
    assert (cfg.T, cfg.steps) == (5.0, 4096)
    assert cfg.rho0 == {"bloch": [-1.0, 0.0, 0.0]}
    assert (cfg.alpha, cfg.beta, cfg.gamma) == (7.61, 5.0, 10.0)
    np.testing.assert_allclose(cfg.build_model().L, spin_half_model().L)


def test_eta_out_of_range(tmp_path):
    p = write(tmp_path, {"preset": "spin-half-qnd", "model": {"preset": "spin-half", "eta": 1.5}})
    with pytest.raises(ConfigError, match="detector efficiency out of range"):
        load_config(p)


def test_missing_generators_with_projection(tmp_path):
    p = write(tmp_path, {"experiment": "filter", "generators": None, "projection": True})
    with pytest.raises(ConfigError, match="no family generators"):
        load_config(p)


def test_all_failures_are_collected(tmp_path):
    data = {
        "experiment": "filter",
        "model": {"H": [[0, 1], [0, 0]], "L": [[0.5, 0], [0, -0.5]], "eta": 0.5},
        "steps": 0,
        "measure": "Q",
    }
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, data))
    text = " | ".join(info.value.errors)
    assert "not Hermitian" in text and "steps" in text and "measure" in text
    data["model"]["H"] = [[0, 0], [0, 0]]
    data["model"]["eta"] = 0.0
    with pytest.raises(ConfigError, match="detector efficiency"):
        load_config(write(tmp_path, data))


def test_parse_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="parse error"):
        load_config(p)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        parse_config({"experimnt": "fig1"})


def test_round_trip_is_lossless():
    cfg = preset("spin-half-qnd")
    cfg.model = {"H": [[[0.1, 0.0], [0.0, 0.3]], [[0.0, -0.3], [0.2, 0.0]]], "L": [[1 / 3, 0], [0, -1 / 7]], "eta": 0.123456789}
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg


def test_single_trajectory_matches_direct_call(tmp_path):
    cfg = parse_config(small(experiment="exact", n_traj=1, scheme="euler"))
    out = harness.run_experiment(cfg, tmp_path / "run")
    table = np.genfromtxt(out / "exact.csv", delimiter=",", names=True)
    grid = cfg.grid
    direct = exact_vs_filter(
        spin_half_model(), bloch_to_density((-1, 0, 0)), grid,
        dW=wiener_increments(grid.seed, [0], grid.n_steps, grid.dt), scheme="euler",
    )
    np.testing.assert_array_equal(table["gap_mean"], direct.gap[0])


@pytest.mark.parametrize("experiment", ["fig1", "fig2", "bound", "filter"])
def test_threads_match_sequential(tmp_path, experiment):
    cfg = parse_config(small(experiment=experiment))
    a = harness.run_experiment(cfg, tmp_path / "seq", workers=1)
    b = harness.run_experiment(cfg, tmp_path / "par", workers=3)
    for f in a.glob("*.csv"):
        assert f.read_bytes() == (b / f.name).read_bytes()
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["outputs"] == mb["outputs"]


def test_manifest_contents(tmp_path):
    cfg = parse_config(small(experiment="fig3"))
    out = harness.run_experiment(cfg, tmp_path / "m")
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"] == cfg.to_dict()
    assert man["seeds"]["master"] == 0 and man["seeds"]["trajectories"] == [0, 6]
    assert man["software"]["qprojfilter"]
    assert man["wall_time_s"] >= 0
    assert set(man["outputs"]) == {"fig3.csv"}
    assert not (out / harness.MARKER).exists()


def test_interrupted_run_leaves_marker_and_no_csv(tmp_path, monkeypatch):
    def boom(cfg, workers=1):
        raise KeyboardInterrupt

    monkeypatch.setitem(harness.RUNNERS, "fig1", boom)
    cfg = parse_config(small(experiment="fig1"))
    with pytest.raises(KeyboardInterrupt):
        harness.run_experiment(cfg, tmp_path / "x")
    assert (tmp_path / "x" / harness.MARKER).exists()
    assert not list((tmp_path / "x").glob("*.csv"))


def test_atomic_write_replaces_whole_file(tmp_path):
    p = tmp_path / "a.csv"
    harness.atomic_write(p, "old\n")
    harness.atomic_write(p, "new\n")
    assert p.read_text() == "new\n"
    assert not list(tmp_path.glob(".*tmp"))


def test_cli_success(tmp_path, capsys):
    code = main(["bound", "--T", "1", "--steps", "64", "--traj", "4", "--out", str(tmp_path / "b")])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["bound_rhs"] == pytest.approx(0.7955, abs=1e-4)
    assert (tmp_path / "b" / "bound.csv").read_text().startswith("t,e_t,stderr,bound_rhs")


def test_cli_config_error_is_json(tmp_path, capsys):
    code = main(["fig1", "--eta", "1.5", "--out", str(tmp_path / "f")])
    assert code != 0
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config"
    assert any("detector efficiency out of range" in e for e in err["errors"])


def test_cli_overrides_reach_config(tmp_path, capsys):
    code = main(["fig1", "--eta", "0.8", "--M", "2", "--omega", "0.5", "--T", "0.5", "--steps", "32",
                 "--traj", "2", "--seed", "7", "--out", str(tmp_path / "o")])
    assert code == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["config"]["model"] == {"preset": "spin-half", "omega": 0.5, "M": 2.0, "eta": 0.8}
    assert man["config"]["seed"] == 7 and man["config"]["n_traj"] == 2


def test_cli_missing_config_file(tmp_path, capsys):
    code = main(["exact", "--config", str(tmp_path / "nope.json")])
    assert code != 0
    assert json.loads(capsys.readouterr().err)["error"] == "config"
