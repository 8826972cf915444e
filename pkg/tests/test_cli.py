import filecmp
import shutil
import subprocess
import sys

import numpy as np
import pytest

import dualcorenet.training as training_mod
from dualcorenet import make_rng, set_precision
from dualcorenet.cli import main
from dualcorenet.data import read_index, synth_background
from dualcorenet.errors import TrainingError
from dualcorenet.fileio import read_mask_pgm, write_image_pgm
from dualcorenet.metrics import MetricReport, binarize, dice

SMALL = """[training]
epochs_lpl = 2
epochs_cgl_seg = 3
epochs_cgl_cls = 2
epochs_joint = 1
[data]
augment = false
"""


@pytest.fixture(autouse=True)
def _restore_precision():
    yield
    set_precision("f32")


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.ini").write_text(SMALL)
    assert main(["--seed", "7", "synth", "--out", str(root / "data"), "--count", "20"]) == 0
    assert main(["--config", str(root / "small.ini"), "train", "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def dirs_identical(a, b):
    cmp = filecmp.dircmp(a, b, ignore=["cache"])  # ROI cache appears once training has read the data
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    return all(dirs_identical(a / d, b / d) for d in cmp.common_dirs)


class TestSynth:
    def test_twice_identical(self, work, tmp_path):
        assert main(["synth", "--seed", "7", "--out", str(tmp_path / "again"), "--count", "20"]) == 0
        assert dirs_identical(work / "data", tmp_path / "again")
        assert len(read_index(work / "data")) == 20
        assert len((work / "data" / "index.tsv").read_text().splitlines()) == 21  # header + rows

    def test_zero_count(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "d"), "--count", "0"]) == 2
        assert "--count" in capsys.readouterr().err

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("x")
        assert main(["synth", "--out", str(tmp_path / "file" / "sub"), "--count", "1"]) == 2


class TestTrain:
    def test_report_lines(self, work):
        text = (work / "run" / "report.txt").read_text()
        rep = MetricReport.parse(text)
        assert set(rep.auc) == {"fused", "lpl", "cgl"}
        for path in ("fused", "lpl", "cgl"):
            assert f"\nauc {path} " in text
        assert len(rep.dice) == len([ln for ln in (work / "run" / "split.tsv").read_text().splitlines()
                                     if ln.startswith("test")])
        for name in ("final.ckpt", "best.ckpt", "history.tsv", "roc.svg", "config.ini"):
            assert (work / "run" / name).is_file()

    def test_rerun_identical(self, work, tmp_path):
        assert main(["--config", str(work / "small.ini"), "train", "--data", str(work / "data"),
                     "--out", str(tmp_path / "again")]) == 0
        for name in ("report.txt", "final.ckpt", "history.tsv"):
            assert (tmp_path / "again" / name).read_bytes() == (work / "run" / name).read_bytes()

    def test_missing_dataset(self, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        assert main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_bad_config_exit_2(self, work, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[training]\nepochs = 3\nseg_lambda = x\n")
        assert main(["--config", str(bad), "train", "--data", str(work / "data"), "--out", str(tmp_path)]) == 2
        err = capsys.readouterr().err
        assert "epochs" in err and "seg_lambda" in err

    def test_training_never_sees_test_split(self, work, tmp_path, monkeypatch):
        seen = set()
        real = training_mod.make_batch

        def spy(samples, cfg):
            seen.update(s.id for s in samples)
            return real(samples, cfg)

        monkeypatch.setattr(training_mod, "make_batch", spy)
        assert main(["--config", str(work / "small.ini"), "train", "--data", str(work / "data"),
                     "--out", str(tmp_path / "r")]) == 0
        rows = [ln.split("\t") for ln in (tmp_path / "r" / "split.tsv").read_text().splitlines()]
        train_ids = {i for kind, i in rows if kind == "train"}
        test_ids = {i for kind, i in rows if kind == "test"}
        assert seen == train_ids and not seen & test_ids

    def test_resume_after_interrupt(self, work, tmp_path, monkeypatch, capsys):
        import dualcorenet.pipeline as pipeline_mod
        real, calls = pipeline_mod._write_history, [0]

        def crash_on_third(path, history):
            real(path, history)
            calls[0] += 1
            if calls[0] == 3:
                raise TrainingError("simulated crash")

        monkeypatch.setattr(pipeline_mod, "_write_history", crash_on_third)
        args = ["--config", str(work / "small.ini"), "train", "--data", str(work / "data"), "--out", str(tmp_path)]
        assert main(args) == 1
        assert "simulated crash" in capsys.readouterr().err
        monkeypatch.undo()
        assert main(args + ["--resume"]) == 0
        for name in ("report.txt", "final.ckpt", "history.tsv"):
            assert (tmp_path / name).read_bytes() == (work / "run" / name).read_bytes()


class TestEvalSegment:
    def test_eval(self, work, tmp_path, capsys):
        assert main(["--config", str(work / "small.ini"), "eval", "--ckpt", str(work / "run" / "final.ckpt"),
                     "--data", str(work / "data"), "--split", "train", "--out", str(tmp_path)]) == 0
        rep = MetricReport.parse((tmp_path / "report.txt").read_text())
        assert len(rep.dice) == 16 and "fused" in rep.auc
        assert "mean_dice" in capsys.readouterr().out
        assert (tmp_path / "roc.svg").read_text().startswith("<svg")

    def test_architecture_mismatch(self, work, tmp_path, capsys):
        cfg = tmp_path / "wide.ini"
        cfg.write_text("[network]\ndense_units = 64\n")
        assert main(["--config", str(cfg), "eval", "--ckpt", str(work / "run" / "final.ckpt"),
                     "--data", str(work / "data")]) == 1
        assert "lpl.fc.weight" in capsys.readouterr().err

    def test_missing_checkpoint(self, work, tmp_path):
        assert main(["eval", "--ckpt", str(tmp_path / "x.ckpt"), "--data", str(work / "data")]) == 2

    def test_segment_mask_round_trip(self, work, tmp_path):
        image = next((work / "data" / "images").glob("*.pgm"))
        truth_path = work / "data" / "masks" / image.name
        out = tmp_path / "m.pgm"
        assert main(["segment", "--ckpt", str(work / "run" / "final.ckpt"), "--image", str(image),
                     "--mask-out", str(out)]) == 0
        mask = read_mask_pgm(out)
        assert mask.shape == (32, 32) and (tmp_path / "m.soft.pgm").is_file()
        assert np.array_equal(binarize(mask), mask)
        truth = np.zeros_like(mask)
        truth[8:24, 8:24] = 1
        assert dice(binarize(mask), truth) == dice(mask, truth)
        assert truth_path.is_file()

    def test_segment_bad_box(self, work, tmp_path):
        image = next((work / "data" / "images").glob("*.pgm"))
        assert main(["segment", "--ckpt", str(work / "run" / "final.ckpt"), "--image", str(image),
                     "--mask-out", str(tmp_path / "m.pgm"), "--box", "1,2"]) == 2


class TestGlobalFlags:
    def test_flags_before_and_after_subcommand(self, tmp_path):
        assert main(["--seed", "3", "synth", "--out", str(tmp_path / "a"), "--count", "2"]) == 0
        assert main(["synth", "--seed", "3", "--out", str(tmp_path / "b"), "--count", "2"]) == 0
        assert dirs_identical(tmp_path / "a", tmp_path / "b")

    def test_bad_precision(self, tmp_path):
        assert main(["--precision", "f16", "synth", "--out", str(tmp_path), "--count", "1"]) == 2

    def test_threads_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DCN_THREADS", "0")
        assert main(["synth", "--out", str(tmp_path), "--count", "1"]) == 2
        monkeypatch.setenv("DCN_THREADS", "2")
        assert main(["synth", "--out", str(tmp_path), "--count", "1"]) == 0

    def test_console_script(self):
        proc = subprocess.run([sys.executable, "-m", "dualcorenet.cli", "verify", "--suite", "metrics"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        lines = [ln for ln in proc.stdout.splitlines() if ln.startswith(("PASS", "FAIL"))]
        assert lines and all(ln.startswith("PASS ") for ln in lines)


class TestVerify:
    @pytest.mark.parametrize("suite", ["crf", "metrics"])
    def test_suites_pass(self, suite, capsys):
        assert main(["verify", "--suite", suite]) == 0
        assert "0 failed" in capsys.readouterr().out

    def test_failing_check_gives_exit_1(self, monkeypatch):
        import dualcorenet.verify as verify_mod
        real = verify_mod.SUITES["metrics"]

        def broken(seed):
            results = list(real(seed))
            results[0].passed = False
            return results

        monkeypatch.setattr(verify_mod, "SUITES", {"crf": verify_mod.SUITES["crf"], "metrics": broken})
        assert main(["verify", "--suite", "all"]) == 1
        assert main(["verify", "--suite", "crf"]) == 0


@pytest.mark.slow
def test_background_negative_control(work, tmp_path):
    """A segmenter trained with mass-free crops leaves plain tissue mostly empty."""
    cfg = tmp_path / "neg.ini"
    cfg.write_text("[training]\nepochs_lpl = 0\nepochs_cgl_seg = 120\nepochs_cgl_cls = 0\nepochs_joint = 0\n"
                   "[data]\naugment = false\nnegative_rois = 1\n")
    assert main(["--config", str(cfg), "train", "--data", str(work / "data"), "--out", str(tmp_path / "run")]) == 0
    for k in range(3):
        image = tmp_path / f"bg{k}.pgm"
        write_image_pgm(image, synth_background(make_rng(k, 555)))
        assert main(["--config", str(cfg), "segment", "--ckpt", str(tmp_path / "run" / "final.ckpt"),
                     "--image", str(image), "--mask-out", str(tmp_path / f"bg{k}.mask.pgm")]) == 0
        assert read_mask_pgm(tmp_path / f"bg{k}.mask.pgm").mean() < 0.05
