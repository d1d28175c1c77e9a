"""CLI surface: flags, exit codes, manifests and a tiny end-to-end run."""

import json
import shutil

import pytest

from ovseg.cli import build_parser, main

SUBCOMMANDS = ("synth", "mine", "tune", "segment", "eval", "oracle")


class TestParser:
    def test_help_lists_flags_with_defaults(self, capsys):
        for sub in SUBCOMMANDS:
            with pytest.raises(SystemExit) as exc:
                build_parser().parse_args([sub, "--help"])
            assert exc.value.code == 0
            out = capsys.readouterr().out
            assert "--seed" in out and "--jobs" in out and "--out" in out
            assert "default" in out

    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["synth", "--out", "x", "--bogus"])
        assert exc.value.code == 2

    def test_missing_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([])
        assert exc.value.code == 2


class TestExitCodes:
    def test_missing_dataset_is_config_error(self, tmp_path, capsys):
        code = main(["mine", "--dataset", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "out")])
        assert code == 2
        assert "not found" in capsys.readouterr().err

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("OVSEG_SEED", "123")
        code = main(["synth", "--out", str(tmp_path / "ds"), "--count", "2"])
        assert code == 0
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        assert manifest["seed"] == 123

    def test_bad_env_seed_is_config_error(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("OVSEG_SEED", "not-a-number")
        assert main(["synth", "--out", str(tmp_path / "ds"), "--count", "2"]) == 2


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    """synth -> mine -> tune -> segment -> eval with tiny settings."""
    root = tmp_path_factory.mktemp("cli_run")
    ds = root / "ds"
    assert main(["synth", "--out", str(ds), "--count", "10", "--seed", "5",
                 "--classes", "4", "--max-shapes", "2"]) == 0
    assert main(["mine", "--dataset", str(ds), "--out", str(root / "pairs"),
                 "--seed", "5"]) == 0
    assert main(["tune", "--dataset", str(ds), "--pairs", str(root / "pairs"),
                 "--out", str(root / "tuned"), "--mode", "mpt", "--epochs", "1",
                 "--batch-size", "16", "--seed", "5"]) == 0
    assert main(["segment", "--dataset", str(ds), "--checkpoint",
                 str(root / "tuned" / "checkpoint"), "--out", str(root / "seg"),
                 "--lambda", "0.7", "--seed", "5"]) == 0
    assert main(["eval", "--dataset", str(ds), "--pred", str(root / "seg"),
                 "--out", str(root / "eval"), "--seed", "5"]) == 0
    return root


class TestEndToEnd:
    def test_manifests_written(self, pipeline_dirs):
        for sub in ("ds", "pairs", "tuned", "seg", "eval"):
            manifest = json.loads((pipeline_dirs / sub / "manifest.json").read_text())
            assert "seed" in manifest

    def test_segment_manifest_records_lambda(self, pipeline_dirs):
        manifest = json.loads((pipeline_dirs / "seg" / "manifest.json").read_text())
        assert manifest["lambda_requested"] == 0.7
        assert manifest["lambda"] == 0.7  # synthetic embeddings present, not forced
        assert manifest["forced_lambda"] is False

    def test_tune_wrote_checkpoint_and_metrics(self, pipeline_dirs):
        assert (pipeline_dirs / "tuned" / "checkpoint" / "manifest.json").is_file()
        rows = (pipeline_dirs / "tuned" / "metrics.jsonl").read_text().splitlines()
        assert len(rows) == 1
        row = json.loads(rows[0])
        assert {"epoch", "loss", "top1"} <= set(row)

    def test_eval_report_fields(self, pipeline_dirs):
        report = json.loads((pipeline_dirs / "eval" / "report.json").read_text())
        assert set(report) >= {"miou", "seen_miou", "unseen_miou", "per_class"}

    def test_eval_on_gt_as_pred_is_perfect(self, pipeline_dirs, tmp_path):
        pred = tmp_path / "pred" / "pred"
        pred.mkdir(parents=True)
        for png in (pipeline_dirs / "ds" / "gt").glob("*.png"):
            shutil.copy(png, pred / png.name)
        assert main(["eval", "--dataset", str(pipeline_dirs / "ds"),
                     "--pred", str(tmp_path / "pred"),
                     "--out", str(tmp_path / "evalgt")]) == 0
        report = json.loads((tmp_path / "evalgt" / "report.json").read_text())
        assert report["miou"] == 1.0

    def test_oracle_subcommands(self, pipeline_dirs, tmp_path):
        assert main(["oracle", "--dataset", str(pipeline_dirs / "ds"),
                     "--which", "class", "--out", str(tmp_path / "oc")]) == 0
        report = json.loads((tmp_path / "oc" / "report.json").read_text())
        assert report["miou"] is not None
        assert main(["oracle", "--dataset", str(pipeline_dirs / "ds"),
                     "--which", "mask", "--out", str(tmp_path / "om"),
                     "--seed", "5"]) == 0

    def test_seen_list_flag(self, pipeline_dirs, tmp_path):
        seen = tmp_path / "seen.txt"
        seen.write_text("circle\nsquare\n")
        assert main(["eval", "--dataset", str(pipeline_dirs / "ds"),
                     "--pred", str(pipeline_dirs / "seg"),
                     "--out", str(tmp_path / "ev"), "--seen-list", str(seen)]) == 0
