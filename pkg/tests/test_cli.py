"""Tests for the lqelab command line and run manifests."""

import json

import pandas as pd
import pytest

from src.analysis.correlation import pcc_report
from src.analysis.curves import read_curves
from src.orchestration.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from src.orchestration.experiments import compare_variants
from src.orchestration.manifest import MANIFEST_NAME, RunManifest, load_manifest, manifest_config
from src.training.checkpoint import load_checkpoint
from src.training.gradcheck import SABOTAGE_ENV
from src.training.trainer import EvalReport
from src.utils.errors import ConfigError
from src.utils.observability import RunContext


def with_sets(overrides):
    args = []
    for text in overrides:
        args += ["--set", text]
    return args


@pytest.fixture
def trained_dir(tmp_path, tiny_overrides):
    out = tmp_path / "train"
    assert main(["train", "--variant", "gflv2", "--seed", "3", "--out", str(out)] + with_sets(tiny_overrides)) == 0
    return out


class TestParsing:
    """Test argument and configuration errors."""

    def test_help(self):
        assert main(["--help"]) == EXIT_OK

    def test_missing_command(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_variant(self, tmp_path):
        assert main(["train", "--variant", "yolo", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_invalid_set_key(self, tmp_path, capsys):
        code = main(["gen", "--out", str(tmp_path), "--set", "scene.colour=3"])
        assert code == EXIT_USAGE
        assert "scene.colour" in capsys.readouterr().err

    def test_invalid_config_value(self, tmp_path, capsys):
        assert main(["train", "--k", "0", "--out", str(tmp_path)]) == EXIT_USAGE
        assert "error" in capsys.readouterr().err


class TestGen:
    """Test scene fixture generation."""

    def test_deterministic(self, tmp_path, tiny_overrides):
        for name in ("a", "b"):
            assert main(["gen", "--count", "3", "--seed", "5", "--out", str(tmp_path / name)]
                        + with_sets(tiny_overrides)) == 0
        files = sorted(p.name for p in (tmp_path / "a").glob("scene_*.json"))
        assert files == ["scene_00000.json", "scene_00001.json", "scene_00002.json"]
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_manifest_lists_scenes(self, tmp_path, tiny_overrides):
        main(["gen", "--count", "2", "--start", "10", "--out", str(tmp_path)] + with_sets(tiny_overrides))
        doc = load_manifest(tmp_path)
        assert doc["command"] == "gen"
        assert doc["artifacts"] == {"scene_00010": "scene_00010.json", "scene_00011": "scene_00011.json"}

    def test_zero_count(self, tmp_path):
        assert main(["gen", "--count", "0", "--out", str(tmp_path)]) == EXIT_OK
        assert list(tmp_path.glob("scene_*.json")) == []


class TestTrain:
    """Test the train command outputs."""

    def test_writes_artifacts(self, trained_dir):
        for name in ("checkpoint.json", "train_log.csv", MANIFEST_NAME):
            assert (trained_dir / name).exists()
        log = pd.read_csv(trained_dir / "train_log.csv")
        assert len(log) == 8
        ckpt = load_checkpoint(trained_dir / "checkpoint.json")
        assert ckpt.variant.kind.value == "gflv2_decomposed"
        assert ckpt.step == 8

    def test_manifest_reproduces_config(self, trained_dir, tiny_cfg):
        doc = load_manifest(trained_dir)
        assert doc["seed"] == 3
        assert doc["variant"] == "gflv2_decomposed"
        assert doc["source"]["kind"] == "synthetic"
        cfg = manifest_config(doc)
        assert cfg.head == tiny_cfg.head
        assert cfg.train.seed == cfg.scene.seed == 3
        assert [s["stage"] for s in doc["stages"]] == ["train"]

    def test_same_seed_same_log(self, trained_dir, tmp_path, tiny_overrides):
        again = tmp_path / "again"
        main(["train", "--variant", "gflv2", "--seed", "3", "--out", str(again)] + with_sets(tiny_overrides))
        assert (again / "train_log.csv").read_bytes() == (trained_dir / "train_log.csv").read_bytes()
        assert (again / "checkpoint.json").read_bytes() == (trained_dir / "checkpoint.json").read_bytes()

    def test_train_on_fixtures(self, tmp_path, tiny_overrides):
        scenes = tmp_path / "scenes"
        main(["gen", "--count", "2", "--out", str(scenes)] + with_sets(tiny_overrides))
        out = tmp_path / "fixture_run"
        code = main(["train", "--variant", "gflv1", "--scenes", str(scenes), "--out", str(out)]
                    + with_sets(tiny_overrides))
        assert code == EXIT_OK
        assert load_manifest(out)["source"]["kind"] == "fixture"


class TestAnalyze:
    """Test report selection and outputs."""

    def test_empty_reports_writes_manifest_only(self, trained_dir, tmp_path):
        out = tmp_path / "analysis"
        code = main(["analyze", "--checkpoint", str(trained_dir / "checkpoint.json"), "--reports", "",
                     "--out", str(out)])
        assert code == EXIT_OK
        assert [p.name for p in out.iterdir()] == [MANIFEST_NAME]

    def test_pcc_matches_recomputation(self, trained_dir, tmp_path, tiny_overrides):
        out = tmp_path / "analysis"
        code = main(["analyze", "--checkpoint", str(trained_dir / "checkpoint.json"), "--reports", "pcc,scatter",
                     "--out", str(out)] + with_sets(tiny_overrides))
        assert code == EXIT_OK
        written = pd.read_csv(out / "pcc.csv")["pcc"].iloc[0]
        report = EvalReport.load(out / "eval_report.json")
        assert written == pytest.approx(pcc_report(report).pcc, abs=1e-12)
        assert (out / "scatter_sharpness.csv").exists()
        assert (out / "scatter_dgqp_io.csv").exists()

    def test_oracle_suppression(self, trained_dir, tmp_path, tiny_overrides):
        out = tmp_path / "analysis"
        code = main(["analyze", "--checkpoint", str(trained_dir / "checkpoint.json"), "--reports", "suppression",
                     "--oracle", "--out", str(out)] + with_sets(tiny_overrides))
        assert code == EXIT_OK
        summary = json.loads((out / "suppression_summary.json").read_text())
        assert summary["oracle_retention_at_zero"] == 1.0
        assert 0.0 <= summary["random_baseline"] <= 1.0
        table = pd.read_csv(out / "suppression.csv")
        assert table["corruption"].tolist()[0] == 0.0

    def test_losscurves_needs_logs(self, trained_dir, tmp_path):
        code = main(["analyze", "--checkpoint", str(trained_dir / "checkpoint.json"), "--reports", "losscurves",
                     "--out", str(tmp_path / "analysis")])
        assert code == EXIT_USAGE

    def test_unknown_report(self, trained_dir, tmp_path):
        code = main(["analyze", "--checkpoint", str(trained_dir / "checkpoint.json"), "--reports", "pcc,heatmap",
                     "--out", str(tmp_path / "analysis")])
        assert code == EXIT_USAGE

    def test_losscurves(self, trained_dir, tmp_path, tiny_overrides):
        v1 = tmp_path / "v1"
        main(["train", "--variant", "gflv1", "--seed", "3", "--out", str(v1)] + with_sets(tiny_overrides))
        out = tmp_path / "analysis"
        code = main(["analyze", "--checkpoint", str(trained_dir / "checkpoint.json"), "--reports", "losscurves",
                     "--curve-logs", str(v1 / "train_log.csv"), str(trained_dir / "train_log.csv"),
                     "--out", str(out)])
        assert code == EXIT_OK
        summary = json.loads((out / "losscurves_summary.json").read_text())
        assert summary["column"] == "qfl_pos"
        assert summary["steps"] == 8

    def test_seed_redraws_evaluation_scenes(self, trained_dir, tmp_path, tiny_overrides):
        def run(name, extra):
            out = tmp_path / name
            code = main(["analyze", "--checkpoint", str(trained_dir / "checkpoint.json"), "--reports", "pcc",
                         "--out", str(out)] + extra + with_sets(tiny_overrides))
            assert code == EXIT_OK
            return (out / "eval_report.json").read_bytes()

        default = run("default", [])
        assert run("same", ["--seed", "3"]) == default
        assert run("other", ["--seed", "11"]) != default

    def test_missing_checkpoint(self, tmp_path):
        code = main(["analyze", "--checkpoint", str(tmp_path / "none.json"), "--reports", "pcc",
                     "--out", str(tmp_path / "analysis")])
        assert code == EXIT_FAILURE


class TestCheckgrad:
    """Test the gradient check command."""

    def test_zero_trials(self, monkeypatch, capsys):
        monkeypatch.delenv(SABOTAGE_ENV, raising=False)
        assert main(["checkgrad", "--trials", "0"]) == EXIT_OK
        assert "vacuous" in capsys.readouterr().out.lower()

    def test_sabotage_fails(self, tmp_path):
        code = main(["checkgrad", "--trials", "3", "--suites", "qfl,dfl", "--sabotage", "--out", str(tmp_path)])
        assert code == EXIT_FAILURE
        frame = pd.read_csv(tmp_path / "gradcheck.csv")
        assert set(frame["name"]) == {"qfl", "dfl"}
        assert (tmp_path / MANIFEST_NAME).exists()

    def test_unknown_suite(self):
        assert main(["checkgrad", "--trials", "1", "--suites", "nope"]) == EXIT_FAILURE


class TestCompare:
    """Test the matched-seed comparison command."""

    def test_outputs(self, tmp_path, tiny_overrides):
        code = main(["compare", "--seeds", "0", "1", "--out", str(tmp_path)] + with_sets(tiny_overrides))
        assert code == EXIT_OK
        table = pd.read_csv(tmp_path / "pcc_table.csv")
        assert len(table) == 6
        assert set(table["label"]) == {"gflv1_style", "gflv2_decomposed", "gflv2_composed"}
        summary = json.loads((tmp_path / "compare_summary.json").read_text())
        assert summary["seeds"] == [0, 1]
        assert len(summary["qfl_pos_final_gap"]) == 2
        assert (tmp_path / "losscurves_seed1.csv").exists()

    def test_curve_files_follow_their_seed(self, tmp_path, tiny_overrides, tiny_cfg):
        code = main(["compare", "--seeds", "1", "0", "1", "--out", str(tmp_path)] + with_sets(tiny_overrides))
        assert code == EXIT_OK
        assert len(pd.read_csv(tmp_path / "pcc_table.csv")) == 6
        written = read_curves(tmp_path / "losscurves_seed0.csv")
        expected = compare_variants(tiny_cfg, seeds=[0]).curves[0].frame
        pd.testing.assert_frame_equal(written, expected)
        manifest = load_manifest(tmp_path)
        assert manifest["artifacts"]["losscurves_seed0"] == "losscurves_seed0.csv"


class TestManifest:
    """Test manifest writing and loading."""

    def test_relative_artifacts(self, tmp_path, tiny_cfg):
        manifest = RunManifest.start(RunContext("train", seed=1), tiny_cfg, ["train"])
        manifest.add_artifact("log", tmp_path / "sub" / "train_log.csv", tmp_path)
        manifest.add_artifact("elsewhere", "/data/x.csv", tmp_path)
        doc = json.loads(manifest.write(tmp_path).read_text())
        assert doc["artifacts"] == {"log": "sub/train_log.csv", "elsewhere": "/data/x.csv"}
        assert doc["schema"] == "lqelab.manifest"
        assert manifest_config(doc).train == tiny_cfg.train

    def test_missing(self, tmp_path):
        with pytest.raises(ConfigError):
            load_manifest(tmp_path)
