import json
import shutil

import pytest

from replaysub.cli import DATA_ROOT_ENV, EXIT_DATA, EXIT_OK, EXIT_USAGE, load_config, main, train_config_from
from replaysub.corpus import SubsidiaryCategory
from replaysub.training import Mode


@pytest.fixture
def workdir(tmp_path, tiny_corpus, monkeypatch):
    shutil.copytree(tiny_corpus, tmp_path / "toy")
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(DATA_ROOT_ENV, raising=False)
    (tmp_path / "exp.ini").write_text(
        "[corpus]\ntrain_protocol = toy/protocol.txt\ndev_protocol = toy/protocol.txt\n"
        "[train]\nepochs = 1\ncrop_frames = 16\noutput_dir = run\n"
        "[encoder]\npreset = toy\n"
    )
    return tmp_path


class TestConfig:
    def test_defaults_encode_training_recipe(self):
        cfg = train_config_from(load_config(None, []))
        assert cfg.mode is Mode.BASELINE and cfg.category is None and not cfg.ring
        assert (cfg.optimizer.learning_rate, cfg.optimizer.weight_decay, cfg.optimizer.batch_size) == (5e-4, 1e-4, 32)
        assert (cfg.lambda_pri, cfg.lambda_sub, cfg.schedule.proportions) == (1.0, 0.5, (3, 1, 1))
        assert cfg.encoder.stage_filters == 128

    def test_overrides(self, tmp_path):
        (tmp_path / "c.ini").write_text("[train]\nmode = can\ncategory = room_size\n[optimizer]\nbatch_size = 8\n")
        cfg = train_config_from(load_config(str(tmp_path / "c.ini"),
                                            ["mode=mtl", "category=reverberation", "ring=on",
                                             "optimizer.learning_rate=0.001", "encoder.preset=toy"]))
        assert cfg.mode is Mode.MTL and cfg.category is SubsidiaryCategory.REVERBERATION and cfg.ring
        assert cfg.optimizer.learning_rate == 0.001 and cfg.optimizer.batch_size == 8
        assert cfg.encoder.stage_filters == 16


class TestExitCodes:
    def test_baseline_without_category_accepted(self, workdir):
        assert main(["train", "--config", "exp.ini", "mode=baseline"]) == EXIT_OK

    @pytest.mark.parametrize("args", [
        ["train", "--config", "exp.ini", "mode=baseline", "category=room_size"],
        ["train", "--config", "exp.ini", "mode=modified_mtl", "category=room_size"],
        ["train", "--config", "exp.ini", "mode=mtl"],
        ["train", "--config", "exp.ini", "ring=maybe"],
        ["train", "--config", "exp.ini", "nosection.key=1"],
        ["train", "--config", "exp.ini", "justtext"],
        ["frobnicate"],
        ["score", "--checkpoint", "x.pt"],
    ])
    def test_usage_errors(self, workdir, args, capsys):
        assert main(args) == EXIT_USAGE
        err = capsys.readouterr().err.strip().splitlines()
        assert err[-1].startswith("replaysub: usage error:")

    def test_missing_protocol_is_data_error(self, workdir, capsys):
        assert main(["train", "--config", "exp.ini", "corpus.train_protocol=missing.txt"]) == EXIT_DATA
        assert "missing.txt" in capsys.readouterr().err

    def test_malformed_protocol_is_data_error(self, workdir):
        (workdir / "bad.txt").write_text("PA_0001 PA_T_0000003 aaa CB bonafide\n")
        assert main(["eer", "--scores", "bad.txt", "--protocol", "bad.txt"]) == EXIT_DATA

    def test_missing_config(self, workdir):
        assert main(["train", "--config", "nope.ini"]) == EXIT_DATA


class TestPipeline:
    def test_end_to_end(self, workdir, capsys):
        assert main(["train", "--config", "exp.ini", "mode=can", "category=replay_quality"]) == EXIT_OK
        run = workdir / "run"
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["seed"] == 0 and len(manifest["config_sha256"]) == 64
        assert (run / "checkpoints" / "epoch_000.pt").is_file()
        assert json.loads((run / "dev_eer.json").read_text())["n_spoof"] == 243

        ckpt = str(run / "checkpoints" / "epoch_000.pt")
        assert main(["score", "--checkpoint", ckpt, "--protocol", "toy/protocol.txt", "--out", "out/s.txt"]) == 0
        assert (workdir / "out" / "s.txt").read_text() == (run / "dev.scores").read_text()
        assert main(["eer", "--scores", "out/s.txt", "--protocol", "toy/protocol.txt", "--out", "out/e.json"]) == 0
        assert main(["probe", "--checkpoint", ckpt, "--protocol", "toy/protocol.txt", "--category", "room_size",
                     "--steps", "10", "--out", "out/p.csv"]) == 0
        assert main(["plot", "--csv", str(run / "losses.csv"), "--out", "out/l.png"]) == 0
        assert (workdir / "out" / "l.png").is_file()
        assert "EER" in capsys.readouterr().out

    def test_rerun_from_stored_config_reproduces_curves(self, workdir):
        assert main(["train", "--config", "exp.ini", "mode=mtl", "category=room_size", "ring=on"]) == 0
        assert main(["train", "--config", "run/config.ini", "output_dir=run2"]) == 0
        assert (workdir / "run" / "losses.csv").read_bytes() == (workdir / "run2" / "losses.csv").read_bytes()

    def test_data_root_from_environment(self, workdir, monkeypatch):
        (workdir / "proto.txt").write_text((workdir / "toy" / "protocol.txt").read_text())
        assert main(["prepare", "--protocol", "proto.txt", "--out", "prep"]) == EXIT_USAGE
        monkeypatch.setenv(DATA_ROOT_ENV, str(workdir / "toy" / "wav"))
        assert main(["prepare", "--protocol", "proto.txt", "--out", "prep"]) == EXIT_OK
        summary = json.loads((workdir / "prep" / "summary.json").read_text())
        assert (summary["n_bona_fide"], summary["n_spoof"]) == (27, 243)
        assert len((workdir / "prep" / "index.tsv").read_text().splitlines()) == 270

    def test_synth(self, workdir):
        assert main(["synth", "--out", "syn", "--splits", "train", "--n-per-cell", "1", "--duration", "0.3",
                     "--strength", "room_size=0.5"]) == 0
        assert len((workdir / "syn" / "train" / "protocol.txt").read_text().splitlines()) == 270
        assert json.loads((workdir / "syn" / "manifest.json").read_text())["config"]["strengths"]["room_size"] == 0.5
