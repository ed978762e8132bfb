import json

import numpy as np
import pytest

from protonet import data as D
from protonet import train as TR
from protonet.cli import main
from synth import digits_dataset


@pytest.fixture(scope="module")
def idx_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("idx")
    d = digits_dataset(40, seed=0)
    D.write_idx(d, root / "imgs.idx", root / "lbls.idx")
    return str(root / "imgs.idx"), str(root / "lbls.idx")


def run_train(tmp_path, idx_files, *extra):
    out = tmp_path / "run"
    code = main(["train", "--train-images", idx_files[0], "--train-labels", idx_files[1],
                 "--epochs", "1", "--batch-size", "20", "--seed", "3",
                 "--augment", "off", "--out", str(out), *extra])
    assert code == 0
    return out


class TestTrainCommand:
    def test_writes_run_artifacts_and_echoes_seed(self, tmp_path, idx_files, capsys):
        out = run_train(tmp_path, idx_files)
        captured = capsys.readouterr().out
        assert "seed=3" in captured
        assert (out / "final.ckpt").exists()
        assert (out / "metrics.csv").exists()
        config = dict(line.split("=", 1)
                      for line in (out / "config.txt").read_text().splitlines())
        assert config["seed"] == "3"
        assert config["preset"] == "mnist"

    def test_defaults_match_reference_settings(self, tmp_path, idx_files):
        out = run_train(tmp_path, idx_files)
        config = dict(line.split("=", 1)
                      for line in (out / "config.txt").read_text().splitlines())
        assert float(config["lambda"]) == 0.05
        assert float(config["lambda1"]) == 0.05
        assert float(config["lambda2"]) == 0.05
        assert float(config["lr"]) == 0.0001

    def test_flag_overrides_config_file(self, tmp_path, idx_files):
        cfg_file = tmp_path / "settings.txt"
        cfg_file.write_text("# comment line\nlr=0.5\nlambda1=0.9\n")
        out = run_train(tmp_path, idx_files, "--config", str(cfg_file), "--lr", "0.25")
        config = dict(line.split("=", 1)
                      for line in (out / "config.txt").read_text().splitlines())
        assert config["lr"] == "0.25"       # flag wins
        assert config["lambda1"] == "0.9"   # file beats default

    def test_random_seed_drawn_when_omitted(self, tmp_path, idx_files, capsys):
        out = tmp_path / "r"
        code = main(["train", "--train-images", idx_files[0], "--train-labels",
                     idx_files[1], "--epochs", "1", "--batch-size", "40",
                     "--augment", "off", "--out", str(out)])
        assert code == 0
        line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("seed=")][0]
        assert int(line.split("=")[1]) >= 0

    def test_negid_mode_sets_prototype_count(self, tmp_path, idx_files):
        out = run_train(tmp_path, idx_files, "--w-mode", "negid")
        state = TR.load_checkpoint(out / "final.ckpt")
        assert state.cfg.w_mode == "negative_identity"
        assert state.params.prototypes.data.shape[0] == 10
        np.testing.assert_array_equal(state.params.classifier.data, -np.eye(10))

    def test_ablation_lambdas(self, tmp_path, idx_files):
        out = run_train(tmp_path, idx_files, "--lambda1", "0", "--lambda2", "0")
        loss_lines = (out / "loss.csv").read_text().splitlines()
        assert loss_lines[0] == "step,E,R,R1,R2,L"
        step, e, r, r1, r2, total = map(float, loss_lines[1].split(","))
        # disabled terms are still reported but excluded from the total
        assert r1 > 0 and r2 > 0
        assert total == pytest.approx(e + 0.05 * r, abs=1e-9)

    def test_resume_flag(self, tmp_path, idx_files):
        out = run_train(tmp_path, idx_files)
        out2 = tmp_path / "resumed"
        code = main(["train", "--train-images", idx_files[0], "--train-labels",
                     idx_files[1], "--epochs", "2", "--batch-size", "20",
                     "--augment", "off", "--out", str(out2),
                     "--resume", str(out / "final.ckpt")])
        assert code == 0
        assert TR.load_checkpoint(out2 / "final.ckpt").epoch == 2

    def test_missing_dataset_rejected(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["train", "--epochs", "1", "--out", str(tmp_path / "x")])


class TestEvalCommand:
    def test_accuracy_matches_library_call(self, tmp_path, idx_files, capsys):
        out = run_train(tmp_path, idx_files)
        capsys.readouterr()
        code = main(["eval", "--checkpoint", str(out / "final.ckpt"),
                     "--images", idx_files[0], "--labels", idx_files[1]])
        assert code == 0
        line = capsys.readouterr().out.strip()
        assert line.startswith("test_acc=")
        state = TR.load_checkpoint(out / "final.ckpt")
        d = D.load_idx(*idx_files)
        assert float(line.split("=")[1]) == TR.evaluate(state.params, state.cfg, d)

    def test_missing_checkpoint_exit_2(self, idx_files, capsys):
        code = main(["eval", "--checkpoint", "/nonexistent.ckpt",
                     "--images", idx_files[0], "--labels", idx_files[1]])
        assert code == 2
        assert "no such file" in capsys.readouterr().err

    def test_missing_dataset_exit_2(self, tmp_path, idx_files):
        out = run_train(tmp_path, idx_files)
        code = main(["eval", "--checkpoint", str(out / "final.ckpt"),
                     "--images", "/missing.idx", "--labels", idx_files[1]])
        assert code == 2


class TestExplainCommand:
    def test_bundle_contents(self, tmp_path, idx_files, capsys):
        out = run_train(tmp_path, idx_files)
        xdir = tmp_path / "xp"
        code = main(["explain", "--checkpoint", str(out / "final.ckpt"),
                     "--images", idx_files[0], "--labels", idx_files[1],
                     "--index", "2", "--out", str(xdir)])
        assert code == 0
        doc = json.loads((xdir / "explanation.json").read_text())
        assert len(doc["distances"]) == 15
        assert len(doc["prototype_files"]) == 15
        assert (xdir / "prototypes" / "014.png").exists()
        assert (xdir / "input" / "000.png").exists()
        assert 0 <= doc["predicted"] <= 9

    def test_repeat_run_byte_identical(self, tmp_path, idx_files):
        out = run_train(tmp_path, idx_files)
        blobs = []
        for name in ("a", "b"):
            xdir = tmp_path / name
            main(["explain", "--checkpoint", str(out / "final.ckpt"),
                  "--images", idx_files[0], "--labels", idx_files[1],
                  "--out", str(xdir)])
            blobs.append((xdir / "explanation.json").read_bytes())
        assert blobs[0] == blobs[1]

    def test_corrupt_checkpoint_exit_1(self, tmp_path, idx_files, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"XXXXgarbage")
        code = main(["explain", "--checkpoint", str(bad),
                     "--images", idx_files[0], "--labels", idx_files[1],
                     "--out", str(tmp_path / "x")])
        assert code == 1


class TestExportAndReport:
    def test_export_prototypes(self, tmp_path, idx_files, capsys):
        out = run_train(tmp_path, idx_files)
        pdir = tmp_path / "protos"
        code = main(["export-prototypes", "--checkpoint", str(out / "final.ckpt"),
                     "--out", str(pdir)])
        assert code == 0
        assert "wrote 15 images" in capsys.readouterr().out
        assert len(list(pdir.glob("*.png"))) == 15

    def test_report_weights_stdout_and_file(self, tmp_path, idx_files, capsys):
        out = run_train(tmp_path, idx_files)
        csv_path = tmp_path / "w.csv"
        code = main(["report-weights", "--checkpoint", str(out / "final.ckpt"),
                     "--out", str(csv_path)])
        assert code == 0
        printed = capsys.readouterr().out
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("prototype,class0")
        assert len(lines) == 16
        assert csv_path.read_text() in printed

    def test_report_weights_negid_banner(self, tmp_path, idx_files, capsys):
        out = run_train(tmp_path, idx_files, "--w-mode", "negid")
        code = main(["report-weights", "--checkpoint", str(out / "final.ckpt")])
        assert code == 0
        assert "negative identity" in capsys.readouterr().out
