import csv
import json

import numpy as np
import pytest

from lgad.cli import RunConfig, ConfigError, main
from lgad.lanedata import read_pgm

TINY = ["--set", "data.height=32", "--set", "data.width=32", "--set", "data.train_count=8",
        "--set", "data.test_count=4", "--set", "net.stage_widths=4,4,8,8", "--set", "train.epochs=1",
        "--set", "train.teacher_epochs=2", "--set", "train.teacher_lr0=0.1", "--set", "train.lr0=0.05",
        "--set", "train.batch_size=4", "--threads", "1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", str(root / "data"), *TINY]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "teacher"),
                 "--set", "train.role=teacher", *TINY]) == 0
    return root


def tree_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


class TestConfig:
    def test_parse_comments_and_types(self):
        cfg = RunConfig.parse("# run\ntrain.epochs = 3  # short\nnet.stage_widths=2,2,4,4\n\ndistill.normalize=yes\n")
        assert cfg["train.epochs"] == 3 and cfg["net.stage_widths"] == (2, 2, 4, 4) and cfg["distill.normalize"]

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="train.epoch"):
            RunConfig.parse("train.epoch=3")
        with pytest.raises(ConfigError, match=":2:"):
            RunConfig.parse("train.epochs=3\noops\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            RunConfig.parse("train.epochs=three")

    def test_resolved_text_round_trips(self):
        cfg = RunConfig.parse("train.lr0=0.1\ndistill.positions=stage1,stage4\n")
        again = RunConfig.parse(cfg.to_text())
        assert again.values == cfg.values


class TestGen:
    def test_layout(self, workspace):
        d = workspace / "data"
        assert sorted(p.name for p in (d / "train").iterdir()) == ["images", "lanes", "manifest.json", "masks"]
        assert json.loads((d / "train" / "manifest.json").read_text())["count"] == 8
        assert "data.train_count=8" in (d / "config.txt").read_text()

    def test_byte_identical_rerun(self, workspace, tmp_path):
        assert main(["gen", str(tmp_path / "again"), *TINY]) == 0
        assert tree_bytes(tmp_path / "again") == tree_bytes(workspace / "data")

    def test_empty_dataset(self, tmp_path):
        assert main(["gen", str(tmp_path / "e"), "--set", "data.train_count=0", "--set", "data.test_count=0"]) == 0
        assert json.loads((tmp_path / "e" / "train" / "manifest.json").read_text())["count"] == 0

    def test_seed_flag_changes_data(self, workspace, tmp_path):
        assert main(["gen", str(tmp_path / "s"), *TINY, "--seed", "5"]) == 0
        a = (tmp_path / "s" / "train" / "images" / "00000.ppm").read_bytes()
        assert a != (workspace / "data" / "train" / "images" / "00000.ppm").read_bytes()


class TestTrain:
    def test_teacher_artifacts(self, workspace):
        t = workspace / "teacher"
        assert {p.name for p in t.iterdir()} >= {"model.bin", "log.csv", "epochs.csv", "config.txt"}
        rows = list(csv.reader((t / "log.csv").open()))
        assert rows[0] == ["iter", "lr", "l_seg", "l_at", "total"] and len(rows) == 1 + 2 * 2

    def test_baseline_and_lgad(self, workspace):
        data, out = workspace / "data", workspace / "runs"
        assert main(["train", "--data", str(data), "--out", str(out / "none"), *TINY]) == 0
        assert main(["train", "--data", str(data), "--out", str(out / "lgad"), "--teacher",
                     str(workspace / "teacher" / "model.bin"), "--set", "distill.family=LGAD", *TINY]) == 0
        head = (out / "lgad" / "epochs.csv").read_text().splitlines()[0]
        assert "dist.stage2" in head

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        args = ["train", "--data", str(workspace / "data"), "--teacher", str(workspace / "teacher" / "model.bin"),
                "--set", "distill.family=LGAD", *TINY]
        assert main([*args, "--out", str(tmp_path / "a")]) == 0
        assert main([*args, "--out", str(tmp_path / "b")]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_rerun_from_written_config(self, workspace, tmp_path):
        base = ["train", "--data", str(workspace / "data"), "--threads", "1"]
        assert main([*base, "--out", str(tmp_path / "a"), *TINY, "--set", "distill.family=DS"]) == 0
        assert main([*base, "--out", str(tmp_path / "b"), "--config", str(tmp_path / "a" / "config.txt")]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_missing_teacher_rejected(self, workspace, tmp_path, capsys):
        code = main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "x"),
                     "--set", "distill.family=LGAD", *TINY])
        assert code == 1 and "--teacher" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()

    def test_collaborative_writes_teacher(self, workspace, tmp_path):
        assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "c"),
                     "--set", "distill.family=LGAD", "--set", "train.strategy=COLLABORATIVE", *TINY]) == 0
        assert (tmp_path / "c" / "teacher.bin").is_file() and (tmp_path / "c" / "teacher_log.csv").is_file()

    def test_numerical_failure_exit_code(self, workspace, tmp_path):
        with np.errstate(all="ignore"):
            code = main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "n"), *TINY,
                         "--set", "train.lr0=1e8", "--set", "train.epochs=3"])
        assert code == 2

    def test_dataset_left_untouched(self, workspace):
        before = tree_bytes(workspace / "data")
        assert main(["train", "--data", str(workspace / "data"), "--out", str(workspace / "runs" / "u"), *TINY]) == 0
        assert tree_bytes(workspace / "data") == before


class TestEval:
    def test_teacher_report(self, workspace, tmp_path):
        code = main(["eval", str(workspace / "teacher" / "model.bin"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "e"), "--protocol", "both", "--teacher-inputs", *TINY])
        assert code == 0
        doc = json.loads((tmp_path / "e" / "report.json").read_text())
        for k in ("accuracy", "fp_rate", "fn_rate", "precision", "recall", "f1"):
            assert doc[k] is not None
        assert "accuracy" in (tmp_path / "e" / "report.txt").read_text()

    def test_empty_test_set(self, workspace, tmp_path):
        main(["gen", str(tmp_path / "d"), *TINY, "--set", "data.test_count=0"])
        assert main(["eval", str(workspace / "teacher" / "model.bin"), "--data", str(tmp_path / "d"),
                     "--out", str(tmp_path / "e")]) == 1

    def test_structure_mismatch(self, workspace, tmp_path):
        main(["gen", str(tmp_path / "d"), *TINY, "--set", "data.max_lanes=3", "--set", "data.train_count=1"])
        assert main(["eval", str(workspace / "teacher" / "model.bin"), "--data", str(tmp_path / "d"),
                     "--out", str(tmp_path / "e")]) == 1


class TestAttention:
    def test_one_file_per_tap(self, workspace, tmp_path):
        code = main(["attention", str(workspace / "teacher" / "model.bin"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "a"), "--samples", "0,2", "--teacher-inputs"])
        assert code == 0
        names = sorted(p.name for p in (tmp_path / "a").glob("*.pgm"))
        assert len(names) == 8 and names[0] == "sample00000_stage1.pgm"
        assert read_pgm(tmp_path / "a" / "sample00002_stage2.pgm").shape == (16, 16)

    def test_bad_sample(self, workspace, tmp_path):
        assert main(["attention", str(workspace / "teacher" / "model.bin"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "a"), "--samples", "99"]) == 1


class TestAblate:
    def test_position_sweep(self, workspace, tmp_path):
        code = main(["ablate", "--data", str(workspace / "data"), "--out", str(tmp_path / "s"),
                     "--teacher", str(workspace / "teacher" / "model.bin"), "--families", "LGAD",
                     "--positions", "stage1,stage2,stage3,stage4", *TINY])
        assert code == 0
        rows = list(csv.DictReader((tmp_path / "s" / "ablation.csv").open()))
        assert [r["positions"] for r in rows] == ["stage1", "stage2", "stage3", "stage4"]
        assert all(r["status"] == "ok" for r in rows)

    def test_family_sweep_records_failures(self, workspace, tmp_path):
        code = main(["ablate", "--data", str(workspace / "data"), "--out", str(tmp_path / "f"),
                     "--families", "NONE,LGAD,DS,DML,FMD", *TINY])
        assert code == 0
        rows = {r["family"]: r for r in csv.DictReader((tmp_path / "f" / "ablation.csv").open())}
        assert list(rows) == ["NONE", "LGAD", "DS", "DML", "FMD"]
        # no teacher given: the distillation members fail, the rest run
        assert rows["LGAD"]["status"].startswith("failed") and rows["FMD"]["status"].startswith("failed")
        assert rows["NONE"]["status"] == rows["DS"]["status"] == rows["DML"]["status"] == "ok"

    def test_empty_sweep(self, workspace, tmp_path):
        assert main(["ablate", "--data", str(workspace / "data"), "--out", str(tmp_path / "z")]) == 0
        assert (tmp_path / "z" / "ablation.csv").read_text().splitlines() == [
            "name,family,positions,strategy,seed,status,accuracy,fp_rate,fn_rate,precision,recall,f1"]


def test_usage_errors(tmp_path):
    assert main([]) == 1
    assert main(["gen", str(tmp_path), "--set", "nope=1"]) == 1
    assert main(["gen", str(tmp_path), "--config", str(tmp_path / "missing.txt")]) == 1
