"""
End-to-end tests of the command line workflows:
generate -> train -> solve -> verify -> export, plus error exits.
"""

import json

import pandas as pd
import pytest

from src.api.cli import EXIT_OK, EXIT_TARGET_MISSED, EXIT_USAGE, EXIT_VERIFY_FAILED, main


def run(*args):
    return main(["--log-level", "WARNING", *[str(a) for a in args]])


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "d2"
    out.mkdir()
    code = run("generate", "--case", "d2", "--alphas", "1,2", "--fine", 6, "--parts", 2, "--output", out)
    assert code == EXIT_OK
    return out


class TestGenerate:
    """Tests for generate and coarsen."""

    def test_writes_dataset(self, dataset):
        names = {p.name for p in dataset.iterdir()}
        assert {"fine_complex.json", "coarse_complex.json", "coarse_map.json", "manifest.json"} <= names
        assert {"sample_000.json", "sample_001.json", "heldout_000.json", "fine_profile.csv"} <= names
        manifest = json.loads((dataset / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["case"]["alphas"] == [1.0, 2.0]
        assert manifest["case"]["held_out"] == [3.0]
        assert len(manifest["samples"]) == 2
        assert [e["path"] for e in manifest["held_out"]] == ["heldout_000.json"]

    def test_fine_profile_table(self, dataset):
        table = pd.read_csv(dataset / "fine_profile.csv")
        assert list(table.columns) == ["alpha", "field", "x", "y", "index", "value"]
        assert set(table.alpha) == {1.0, 2.0}
        assert set(table.field) == {"w", "u"}

    def test_held_out_can_be_disabled(self, tmp_path):
        code = run("generate", "--case", "d2", "--alphas", "1", "--held-out", "", "--fine", 4, "--parts", 2,
                   "--output", tmp_path)
        assert code == EXIT_OK
        manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["held_out"] == []
        assert not (tmp_path / "heldout_000.json").exists()

    def test_configured_sweep(self, tmp_path):
        assert run("generate", "--case", "d1", "--sweep", "--fine", 4, "--parts", 2, "--output", tmp_path) == EXIT_OK
        manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["case"]["alphas"] == [0.1, 1.0, 10.0]
        assert len(manifest["samples"]) == 3

    def test_byte_identical_reruns(self, dataset, tmp_path):
        again = tmp_path / "again"
        again.mkdir()
        run("generate", "--case", "d2", "--alphas", "1,2", "--fine", 6, "--parts", 2, "--output", again)
        for name in ("manifest.json", "coarse_complex.json", "sample_001.json"):
            assert (dataset / name).read_bytes() == (again / name).read_bytes()

    def test_coarsen_reports(self, tmp_path, capsys):
        assert run("coarsen", "--fine", 6, "--parts", 3, "--output", tmp_path) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["passed"] is True
        assert (tmp_path / "coarse_map.json").exists()

    def test_output_dir_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DDEC_OUTPUT_DIR", str(tmp_path))
        assert run("coarsen", "--fine", 4, "--parts", 2) == EXIT_OK
        assert (tmp_path / "fine_complex.json").exists()


class TestTrainSolveVerify:
    """Tests for the full pipeline."""

    def test_pipeline(self, dataset, capsys):
        code = run("train", "--dataset", dataset, "--epochs", 2, "--lr", 0.01,
                   "--target-loss", 1e10, "--output", dataset)
        assert code == EXIT_OK
        history = pd.read_csv(dataset / "history.csv")
        assert list(history.columns[:3]) == ["epoch", "sample", "loss"]
        assert history.epoch.max() == 1

        model, complex_path = dataset / "model.json", dataset / "coarse_complex.json"
        assert run("verify", "--model", model, "--complex", complex_path) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["passed"] is True

        code = run("solve", "--model", model, "--complex", complex_path,
                   "--problem", dataset / "sample_000.json", "--output", dataset)
        assert code == EXIT_OK
        state = json.loads((dataset / "state.json").read_text(encoding="utf-8"))
        assert state["converged"] is True
        assert len(state["u"]) == 4
        profile = pd.read_csv(dataset / "profile.csv")
        assert set(profile.field) == {"w", "u"}
        held_out = pd.read_csv(dataset / "held_out.csv")
        assert list(held_out.label) == ["alpha=3"]
        assert bool(held_out.converged.iloc[0]) is True

        code = run("export", "--state", dataset / "state.json", "--complex", complex_path, "--output", dataset)
        assert code == EXIT_OK
        cells = pd.read_csv(dataset / "u_level2.csv")
        assert list(cells.columns) == ["index", "x", "y", "value"]
        assert len(cells) == 4
        assert (dataset / "w_level1.csv").exists()

    def test_training_is_reproducible(self, dataset, tmp_path):
        for name in ("a", "b"):
            (tmp_path / name).mkdir()
            run("train", "--dataset", dataset, "--epochs", 2, "--lr", 0.01, "--output", tmp_path / name)
        assert (tmp_path / "a" / "model.json").read_bytes() == (tmp_path / "b" / "model.json").read_bytes()
        assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()

    def test_target_not_reached(self, dataset):
        code = run("train", "--dataset", dataset, "--epochs", 1, "--target-loss", 1e-30, "--output", dataset)
        assert code == EXIT_TARGET_MISSED
        assert (dataset / "model.json").exists()

    def test_verify_failure(self, dataset):
        run("train", "--dataset", dataset, "--epochs", 0, "--output", dataset)
        model_path = dataset / "model.json"
        raw = json.loads(model_path.read_text(encoding="utf-8"))
        raw["epsilon"] = 1e6
        model_path.write_text(json.dumps(raw), encoding="utf-8")
        code = run("verify", "--model", model_path, "--complex", dataset / "coarse_complex.json")
        assert code == EXIT_VERIFY_FAILED

    def test_edited_complex_fails_exactness(self, dataset, capsys):
        run("train", "--dataset", dataset, "--epochs", 0, "--output", dataset)
        raw = json.loads((dataset / "coarse_complex.json").read_text(encoding="utf-8"))
        row, col, sign = raw["delta"][1][0]
        raw["delta"][1][0] = [row, col, -sign]
        edited = dataset / "edited_complex.json"
        edited.write_text(json.dumps(raw), encoding="utf-8")
        capsys.readouterr()
        code = run("verify", "--model", dataset / "model.json", "--complex", edited)
        assert code == EXIT_VERIFY_FAILED
        report = json.loads(capsys.readouterr().out)
        assert report["passed"] is False

    def test_run_config_written(self, dataset):
        run("train", "--dataset", dataset, "--epochs", 0, "--output", dataset)
        config = json.loads((dataset / "run_config.json").read_text(encoding="utf-8"))
        assert config["kind"] == "run_config"
        assert config["command"] == "train"
        assert config["train"]["epochs"] == 0
        assert config["case"]["case"] == "d2"


class TestErrors:
    """Usage and I/O errors exit with code 2; argparse handles --version."""

    def test_missing_output_dir(self, tmp_path):
        code = run("generate", "--case", "d1", "--fine", 4, "--parts", 2, "--output", tmp_path / "nope")
        assert code == EXIT_USAGE

    def test_missing_dataset(self, tmp_path):
        assert run("train", "--dataset", tmp_path / "absent", "--output", tmp_path) == EXIT_USAGE

    def test_invalid_partition(self, tmp_path):
        assert run("coarsen", "--fine", 2, "--parts", 3, "--output", tmp_path) == EXIT_USAGE

    def test_sweep_not_configured(self, tmp_path):
        assert run("generate", "--case", "magneto", "--sweep", "--fine", 4, "--parts", 2, "--output", tmp_path) == EXIT_USAGE

    def test_complex_mismatch(self, dataset):
        run("train", "--dataset", dataset, "--epochs", 0, "--output", dataset)
        code = run("verify", "--model", dataset / "model.json", "--complex", dataset / "fine_complex.json")
        assert code == EXIT_USAGE
        code = run("solve", "--model", dataset / "model.json", "--complex", dataset / "fine_complex.json",
                   "--problem", dataset / "sample_000.json", "--output", dataset)
        assert code == EXIT_USAGE

    def test_unknown_case(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            run("generate", "--case", "d9", "--output", tmp_path)
        assert info.value.code == 2

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            run("--version")
        assert info.value.code == 0
        assert capsys.readouterr().out.startswith("ddec 1.0.0")
