import json

import numpy as np
import pytest

from music_som import __version__
from music_som.cli import EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE, main
from music_som.geometry import activations
from music_som.som import PrototypeSet


@pytest.fixture(scope="module")
def trained_map(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = d / "map.json"
    rc = main(["train-som", "--gmm-dim", "3", "--gmm-samples", "600", "--rows", "4", "--cols", "4",
               "--epochs", "2", "--seed", "1", "--out", str(path)])
    assert rc == EXIT_OK
    return path


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert __version__ in capsys.readouterr().out


def test_train_som_output(trained_map):
    W = PrototypeSet.load(trained_map)
    assert W.weights.shape == (16, 3) and W.topology == "rectangular"


def test_train_som_from_csv_with_config(tmp_path):
    X = np.random.default_rng(0).normal(size=(100, 2))
    np.savetxt(tmp_path / "x.csv", X, delimiter=",")
    (tmp_path / "cfg.json").write_text(json.dumps({"som": {"epochs": 1, "seed": 4}}))
    rc = main(["train-som", "--data", str(tmp_path / "x.csv"), "--rows", "2", "--cols", "3",
               "--topology", "toroidal", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "m.json")])
    assert rc == EXIT_OK
    assert PrototypeSet.load(tmp_path / "m.json").topology == "toroidal"


def test_invert_recovers_points(trained_map, tmp_path):
    W = PrototypeSet.load(trained_map)
    Z = np.random.default_rng(2).normal(size=(4, 3))
    np.savetxt(tmp_path / "a.csv", activations(Z, W.weights), delimiter=",")
    out = tmp_path / "z.jsonl"
    rc = main(["invert", "--map", str(trained_map), "--activations", str(tmp_path / "a.csv"),
               "--sigma", "1e-3", "--out", str(out)])
    assert rc == EXIT_OK
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) == 4
    np.testing.assert_allclose([r["z_hat"] for r in recs], Z, atol=1e-9)
    assert all(r["lipschitz_bound"] > 0 and not r["rank_deficient"] for r in recs)


def test_trajectory_and_metrics(trained_map, tmp_path, capsys):
    out = tmp_path / "t.csv"
    rc = main(["trajectory", "--map", str(trained_map), "--z0", "0.1,0.2,0.3", "--mode", "informed",
               "--target", "5", "--steps", "15", "--lam", "0.1", "--out", str(out)])
    assert rc == EXIT_OK
    man = json.loads(out.with_suffix(".manifest.json").read_text())
    assert man["version"] == __version__ and man["config"]["lam"] == 0.1
    capsys.readouterr()
    assert main(["metrics", str(out)]) == EXIT_OK
    single = json.loads(capsys.readouterr().out)
    assert "transition_rate" in single
    assert main(["metrics", str(out), str(out), "--out", str(tmp_path / "agg.json")]) == EXIT_OK
    agg = json.loads((tmp_path / "agg.json").read_text())
    assert agg["n_trajectories"] == 2


def test_trajectory_usage_errors(trained_map, tmp_path, capsys):
    base = ["trajectory", "--map", str(trained_map), "--out", str(tmp_path / "t.csv")]
    assert main(base + ["--z0", "0,0"]) == EXIT_USAGE
    assert main(base + ["--z0", "0,0,0"]) == EXIT_USAGE
    assert main(base + ["--z0", "0,0,0", "--target", "99"]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_experiment_inversion_check(tmp_path, capsys):
    rc = main(["experiment", "inversion-vs-n", "--points", "40", "--out-dir", str(tmp_path), "--check"])
    assert rc == EXIT_OK
    assert "[PASS]" in capsys.readouterr().out
    assert (tmp_path / "inversion_vs_n.csv").exists()


def test_experiment_check_failure_exit(tmp_path, capsys):
    # long steps make first-order radial drift smaller than the second-order MUSIC drift
    rc = main(["experiment", "baseline-compare", "--step-len", "0.2", "--n-seeds", "10",
               "--out-dir", str(tmp_path), "--check"])
    assert rc == EXIT_CHECK_FAILED
    assert "[FAIL]" in capsys.readouterr().out
    assert json.loads((tmp_path / "baseline_drift.json").read_text())["n_seeds"] == 10


def test_experiment_mnist_missing(tmp_path, monkeypatch):
    monkeypatch.delenv("MUSIC_SOM_DATA", raising=False)
    rc = main(["experiment", "mnist-transition", "--data-dir", str(tmp_path), "--out-dir", str(tmp_path)])
    assert rc == EXIT_USAGE
