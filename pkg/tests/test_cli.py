"""End-to-end command-line runs on a small synthetic data set."""

import json

import numpy as np
import pytest

from ember.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from ember.core import RunConfig, load_grid, save_grid, save_samples
from ember.embedding import envelope_at, load_model, train_ember
from ember.experiments import default_grid, gen_example1


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    grid = default_grid(40)
    _, secondary, samples = gen_example1(grid, n_samples=60, seed=2)
    save_grid(secondary, root / "S.asc", "S")
    save_samples(samples, root / "data.csv")
    (root / "cfg.yaml").write_text(
        "samples: data.csv\n"
        "secondary: {S: S.asc}\n"
        "model: trained/model.zip\n"
        "run: {n_trees: 15, seed: 4, min_leaf: 3}\n"
        "outputs: [mean, q10, q90, 'prob_gt:3']\n"
        "simulation: {correlation: {kind: exponential, essential_range: 12}}\n"
        "variogram: {n_bins: 8}\n"
    )
    assert main(["train", "--config", str(root / "cfg.yaml"), "--out", str(root / "trained")]) == 0
    return root, samples


def _write(path, text):
    path.write_text(text)
    return str(path)


class TestTrain:
    def test_outputs(self, workspace):
        root, _ = workspace
        assert (root / "trained" / "model.zip").exists()
        report = json.loads((root / "trained" / "train_report.json").read_text())
        assert set(report["importance"]) == {"S", "x", "y", "long_range", "short_range"}
        assert set(report["loo"]) == {"long_range", "short_range"}
        assert report["config"]["run"]["n_trees"] == 15

    def test_loaded_model_matches_fresh_training(self, workspace):
        root, samples = workspace
        loaded = load_model(root / "trained" / "model.zip")
        fresh = train_ember(samples, None, RunConfig(n_trees=15, seed=4, min_leaf=3))
        rng = np.random.default_rng(0)
        for _ in range(5):
            loc, y = rng.uniform(0, 40, 2), rng.normal(size=1)
            a, b = envelope_at(loaded, loc, y), envelope_at(fresh, loc, y)
            np.testing.assert_array_equal(a.values, b.values)
            np.testing.assert_array_equal(a.weights, b.weights)

    def test_seed_flag_and_determinism(self, workspace, tmp_path):
        root, _ = workspace
        cfg = str(root / "cfg.yaml")
        assert main(["--seed", "4", "train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["--threads", "2", "train", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        ref = (root / "trained" / "model.zip").read_bytes()
        assert (tmp_path / "a" / "model.zip").read_bytes() == ref
        assert (tmp_path / "b" / "model.zip").read_bytes() == ref

    def test_missing_sample_file(self, tmp_path, capsys):
        cfg = _write(tmp_path / "c.yaml", "samples: nowhere.csv\n")
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "nowhere.csv" in err and len(err.strip().splitlines()) == 1

    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "x.yaml"), "--out", "o"]) == EXIT_CONFIG
        assert "x.yaml" in capsys.readouterr().err

    def test_bad_yaml(self, tmp_path):
        cfg = _write(tmp_path / "c.yaml", "samples: [unclosed\n")
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_unknown_keys(self, workspace, tmp_path, capsys):
        root, _ = workspace
        cfg = _write(tmp_path / "c.yaml", f"samples: {root / 'data.csv'}\nrun: {{n_tree: 3}}\n")
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "n_tree" in capsys.readouterr().err


class TestEstimate:
    def test_four_layers(self, workspace, tmp_path):
        root, _ = workspace
        out = tmp_path / "est"
        assert main(["estimate", "--config", str(root / "cfg.yaml"), "--out", str(out)]) == EXIT_OK
        assert sorted(p.name for p in out.glob("*.asc")) == [
            "mean.asc", "prob_gt_3.asc", "q10.asc", "q90.asc"]
        g = load_grid(out / "q10.asc")
        assert g.shape == (40, 40)
        assert np.all(g.layers["q10"] <= load_grid(out / "q90.asc").layers["q90"])

    def test_byte_identical(self, workspace, tmp_path):
        root, _ = workspace
        cfg = str(root / "cfg.yaml")
        main(["estimate", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["estimate", "--config", cfg, "--out", str(tmp_path / "b")])
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_bad_output_name(self, workspace, tmp_path):
        root, _ = workspace
        cfg = _write(tmp_path / "c.yaml",
                     f"model: {root / 'trained' / 'model.zip'}\nsecondary: {{S: {root / 'S.asc'}}}\n"
                     "outputs: [median]\n")
        assert main(["estimate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_images(self, workspace, tmp_path):
        root, _ = workspace
        cfg = _write(tmp_path / "c.yaml",
                     f"model: {root / 'trained' / 'model.zip'}\nsecondary: {{S: {root / 'S.asc'}}}\n"
                     "outputs: [std]\nimages: true\n")
        assert main(["estimate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
        assert (tmp_path / "o" / "std.pgm").read_bytes().startswith(b"P5")


class TestSimulate:
    def test_three_realizations(self, workspace, tmp_path):
        root, samples = workspace
        out = tmp_path / "sim"
        args = ["simulate", "--config", str(root / "cfg.yaml"), "--out", str(out), "--n-real", "3"]
        assert main(args) == EXIT_OK
        assert sorted(p.name for p in out.glob("sim_*.asc")) == ["sim_0.asc", "sim_1.asc", "sim_2.asc"]
        report = (out / "simulate_report.txt").read_text()
        assert "realizations 3" in report and "essential_range" in report
        sim = load_grid(out / "sim_1.asc").layers["sim_1"]
        assert np.isin(sim, samples.z).all()

    def test_byte_identical(self, workspace, tmp_path):
        root, _ = workspace
        for d in ("a", "b"):
            main(["simulate", "--config", str(root / "cfg.yaml"), "--out", str(tmp_path / d),
                  "--n-real", "1"])
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


class TestVariogram:
    def test_outputs(self, workspace, tmp_path):
        root, _ = workspace
        out = tmp_path / "vg"
        assert main(["variogram", "--config", str(root / "cfg.yaml"), "--out", str(out)]) == EXIT_OK
        assert len((out / "variogram.csv").read_text().splitlines()) == 9
        assert json.loads((out / "variogram_model.json").read_text())["kind"] in (
            "spherical", "exponential", "gaussian", "nugget")

    def test_runtime_failure(self, tmp_path, capsys):
        _write(tmp_path / "one.csv", "x,y,value\n0,0,1\n")
        cfg = _write(tmp_path / "c.yaml", "samples: one.csv\n")
        assert main(["variogram", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
        assert "ember: error:" in capsys.readouterr().err


class TestExperiment:
    def test_report_keys(self, tmp_path):
        cfg = _write(tmp_path / "c.yaml", "run: {n_trees: 10}\n")
        out = tmp_path / "exp"
        args = ["experiment", "example1_800", "--config", cfg, "--out", str(out), "--no-simulation"]
        assert main(args) == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        for method in ("ember", "ensemble", "baseline"):
            assert report["methods"][method]["estimation_mse"] > 0
        assert report["config"]["mtry"] == 2
        assert (out / "runtime.json").exists()

    def test_unknown_name(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["experiment", "nope", "--out", str(tmp_path)])
        assert info.value.code == 2
