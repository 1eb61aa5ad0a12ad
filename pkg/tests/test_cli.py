"""Command-line interface tests: subcommand behavior and exit codes."""

import os

import numpy as np
import pytest

from fuseseg import cli


def run(argv):
    return cli.main(argv)


class TestGenerate:
    def test_writes_three_files_per_subject(self, tmp_path):
        out = tmp_path / "data"
        assert run(["generate", "--seed", "0", "--dims", "32", "--count", "2", "--out", str(out)]) == cli.EXIT_OK
        files = sorted(p.name for p in out.glob("*.volb"))
        assert files == [
            "subj01_labels.volb",
            "subj01_t1.volb",
            "subj01_t2.volb",
            "subj02_labels.volb",
            "subj02_t1.volb",
            "subj02_t2.volb",
        ]
        assert (out / "config.txt").exists()

    def test_same_seed_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run(["generate", "--seed", "3", "--dims", "32", "--count", "1", "--out", str(a)])
        run(["generate", "--seed", "3", "--dims", "32", "--count", "1", "--out", str(b)])
        for name in ("subj01_t1.volb", "subj01_t2.volb", "subj01_labels.volb"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_count_10_gives_30_files(self, tmp_path):
        out = tmp_path / "data"
        run(["generate", "--seed", "0", "--dims", "32", "--count", "10", "--out", str(out)])
        assert len(list(out.glob("*.volb"))) == 30

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FUSESEG_SEED", "11")
        parser = cli.build_parser()
        # parser defaults are bound at build time, so rebuild under the env var
        args = parser.parse_args(["generate", "--out", str(tmp_path)])
        assert args.seed == 11


class TestTrainEval:
    @pytest.fixture()
    def dataset(self, tmp_path):
        out = tmp_path / "data"
        run(["generate", "--seed", "0", "--dims", "32", "--count", "2", "--out", str(out)])
        return out

    def _train_args(self, data, out, role="t1"):
        return [
            "train", "--role", role, "--data", str(data), "--out", str(out),
            "--epochs", "1", "--patches", "4", "--patch-size", "16", "--batch", "2",
            "--base-channels", "4", "--dropout", "0.0", "--seed", "0",
        ]

    def test_teacher_train_writes_outputs(self, dataset, tmp_path):
        out = tmp_path / "t1"
        assert run(self._train_args(dataset, out)) == cli.EXIT_OK
        assert (out / "checkpoint" / "manifest.json").exists()
        assert (out / "checkpoint" / "weights.bin").exists()
        assert (out / "metrics.csv").read_text().startswith("epoch,iter,model")
        assert (out / "config.txt").exists()

    def test_joint_fuse_writes_three_checkpoints(self, dataset, tmp_path):
        out = tmp_path / "fuse"
        assert run(self._train_args(dataset, out, role="fuse")) == cli.EXIT_OK
        for sub in ("checkpoint", "tm1", "tm2"):
            assert (out / sub / "weights.bin").exists(), sub

    def test_sequential_fuse_requires_both_checkpoints(self, dataset, tmp_path):
        args = self._train_args(dataset, tmp_path / "f", role="fuse") + ["--tm1", str(tmp_path / "x")]
        assert run(args) == cli.EXIT_CONFIG

    def test_eval_prints_dice_rows(self, dataset, tmp_path, capsys):
        out = tmp_path / "t1"
        run(self._train_args(dataset, out))
        code = run([
            "eval", "--checkpoint", str(out / "checkpoint"), "--data", str(dataset),
            "--patch-size", "16", "--step", "16",
        ])
        assert code == cli.EXIT_OK
        text = capsys.readouterr().out
        assert "subj01" in text and "CSF" in text and "Mean" in text

    def test_eval_step_above_patch_rejected(self, dataset, tmp_path):
        out = tmp_path / "t1"
        run(self._train_args(dataset, out))
        code = run([
            "eval", "--checkpoint", str(out / "checkpoint"), "--data", str(dataset),
            "--patch-size", "16", "--step", "17",
        ])
        assert code == cli.EXIT_CONFIG

    def test_missing_data_dir_is_io_error(self, tmp_path):
        code = run(self._train_args(tmp_path / "missing", tmp_path / "out"))
        assert code == cli.EXIT_IO

    def test_missing_checkpoint_is_io_error(self, dataset, tmp_path):
        code = run(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(dataset)])
        assert code == cli.EXIT_IO

    def test_bad_alpha_mode_is_config_error(self, dataset, tmp_path):
        args = self._train_args(dataset, tmp_path / "f", role="fuse") + ["--alpha-mode", "bogus"]
        assert run(args) == cli.EXIT_CONFIG


class TestParamcount:
    def test_runs_and_is_deterministic(self, capsys):
        assert run(["paramcount", "--base-channels", "4"]) == cli.EXIT_OK
        first = capsys.readouterr().out
        run(["paramcount", "--base-channels", "4"])
        assert capsys.readouterr().out == first

    def test_reports_published_reference(self, capsys):
        run(["paramcount"])
        out = capsys.readouterr().out
        assert "2,123,211" in out
        assert "total" in out
