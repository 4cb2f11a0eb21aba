"""Command-line surface: verbs, exit codes, file outputs, determinism."""

import json

import numpy as np
import pytest

from spherekd.cli import main

from conftest import TOY_OVERRIDES


def run_cli(*argv):
    return main(list(argv))


def toy_args(out_dir, extra=()):
    args = []
    for item in TOY_OVERRIDES + list(extra):
        args += ["--set", item]
    args += ["--out", str(out_dir)]
    return args


class TestGenData:
    def test_writes_files_and_summary(self, tmp_path, capsys):
        out = tmp_path / "data"
        assert run_cli("gen-data", *toy_args(out)) == 0
        for name in ("dataset.bin", "verification.txt", "identification.txt",
                     "effective_config.yaml"):
            assert (out / name).exists()
        text = capsys.readouterr().out
        assert "8 train / 4 test classes" in text
        assert "20 pairs" in text

    def test_rerun_is_byte_identical(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run_cli("gen-data", *toy_args(out_a)) == 0
        assert run_cli("gen-data", *toy_args(out_b)) == 0
        for name in ("dataset.bin", "verification.txt", "identification.txt"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_conflicting_config_names_key(self, tmp_path, capsys):
        code = run_cli(
            "gen-data", *toy_args(tmp_path / "x", extra=["data.image_size=4"])
        )
        assert code == 2
        assert "image_size" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        code = run_cli("gen-data", "--set", "data.nclasses=4", "--out", str(tmp_path))
        assert code == 2
        assert "data.nclasses" in capsys.readouterr().err


class TestDistill:
    def test_kind_none_without_teacher(self, tmp_path, capsys):
        out = tmp_path / "run"
        code = run_cli("distill", *toy_args(out), "--kind", "none")
        assert code == 0
        assert (out / "student_none.ckpt").exists()
        text = capsys.readouterr().out
        assert "verification accuracy" in text and "rank-1" in text

    def test_metrics_one_record_per_step(self, tmp_path):
        out = tmp_path / "run"
        assert run_cli("train-teacher", *toy_args(out)) == 0
        code = run_cli(
            "distill", *toy_args(out), "--teacher", str(out / "teacher.ckpt"),
            "--kind", "angular",
        )
        assert code == 0
        records = [json.loads(l) for l in open(out / "student_angular_metrics.jsonl")]
        meta = records[0]
        steps = [r for r in records if r["type"] == "step"]
        assert len(steps) == meta["epochs"] * meta["steps_per_epoch"]

    def test_angular_run_reports_finite_metrics(self, tmp_path):
        out = tmp_path / "run"
        assert run_cli("train-teacher", *toy_args(out)) == 0
        assert run_cli(
            "distill", *toy_args(out), "--teacher", str(out / "teacher.ckpt"),
        ) == 0
        eval_blob = json.loads((out / "student_angular_eval.json").read_text())
        assert np.isfinite(eval_blob["verification_accuracy"])
        assert np.isfinite(eval_blob["rank1"])

    def test_missing_teacher_is_config_error(self, tmp_path, capsys):
        code = run_cli("distill", *toy_args(tmp_path / "run"), "--kind", "angular")
        assert code == 2
        assert "teacher" in capsys.readouterr().err


class TestEvaluate:
    def test_evaluates_checkpoint(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run_cli("train-teacher", *toy_args(out)) == 0
        code = run_cli(
            "evaluate", *toy_args(out), "--checkpoint", str(out / "teacher.ckpt")
        )
        assert code == 0
        blob = json.loads((out / "evaluation.json").read_text())
        assert set(blob) == {"verification_accuracy", "verification_threshold", "rank1"}

    def test_missing_checkpoint_is_io_error(self, tmp_path):
        code = run_cli(
            "evaluate", *toy_args(tmp_path / "run"),
            "--checkpoint", str(tmp_path / "missing.ckpt"),
        )
        assert code == 3


class TestCompare:
    def test_single_seed_report_shape(self, tmp_path):
        out = tmp_path / "matrix"
        code = run_cli("compare", *toy_args(out), "--seeds", "0")
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report["rows"]) == {"teacher", "self_studied", "l2", "angular"}
        for row in report["rows"].values():
            assert set(row) == {"verification_accuracy", "rank1"}

    def test_repeated_seeds_identical_report(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run_cli("compare", *toy_args(out_a), "--seeds", "1") == 0
        assert run_cli("compare", *toy_args(out_b), "--seeds", "1") == 0
        assert (out_a / "report.json").read_bytes() == (out_b / "report.json").read_bytes()

    def test_bad_seeds_rejected(self, tmp_path, capsys):
        code = run_cli("compare", *toy_args(tmp_path / "x"), "--seeds", "a,b")
        assert code == 2


class TestGradCheck:
    def test_fresh_build_passes(self, capsys):
        code = run_cli("grad-check", "--module", "all", "--instances", "1")
        assert code == 0
        text = capsys.readouterr().out
        assert "max rel err" in text
        assert "gradient checks passed" in text

    def test_module_filter(self, capsys):
        code = run_cli("grad-check", "--module", "losses", "--instances", "1")
        assert code == 0
        text = capsys.readouterr().out
        assert "angular-distill-loss" in text
        assert "matmul" not in text


class TestUsage:
    def test_unknown_verb_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("frobnicate")
        assert exc.value.code == 2

    def test_config_file_plus_override(self, tmp_path):
        cfg_file = tmp_path / "config.yaml"
        body = "\n".join(
            [
                "seed: 3",
                "data:",
                "  num_train_classes: 8",
                "  num_test_classes: 4",
                "  samples_per_class: 6",
                "  latent_dim: 8",
                "  num_distractors: 8",
                "  pairs_per_side: 10",
                "  folds: 2",
                "  image_size: 8",
                "arch:",
                "  input_size: 8",
                "  num_stages: 2",
                "  teacher_channels: [4, 6]",
                "  student_channels: [2, 3]",
                "  block_depth: 1",
                "  embedding_dim: 4",
            ]
        )
        cfg_file.write_text(body + "\n")
        out = tmp_path / "out"
        code = run_cli(
            "gen-data", "--config", str(cfg_file), "--set", "seed=5", "--out", str(out)
        )
        assert code == 0
        effective = (out / "effective_config.yaml").read_text()
        assert "seed: 5" in effective  # override wins over file
        assert cfg_file.read_text() == body + "\n"  # input untouched

    def test_effective_config_echo(self, tmp_path, capsys):
        out = tmp_path / "data"
        run_cli("gen-data", *toy_args(out))
        text = capsys.readouterr().out
        assert "effective config" in text
        assert "teacher_channels" in text
