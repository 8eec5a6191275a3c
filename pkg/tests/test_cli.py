import json

import numpy as np
import pytest

from laifusion import autodiff as ad
from laifusion import cli
from laifusion import model as M
from laifusion import train as T
from laifusion.dataio import NormStats, read_manifest

TINY_MODEL = {"enc_depth": 1, "enc_base": 2, "dec_depth": 1, "dec_base": 2, "mask_channels": 2, "season_hidden": 2}


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert cli.main(["gen-data", "--seed", "1", "--tile-size", "8", "--n-train", "6", "--n-eval", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({"epochs": 1, "batch_size": 4, "model": TINY_MODEL}))
    return path


class TestGenData:
    def test_counts(self, tmp_path):
        out = tmp_path / "d"
        assert cli.main(["gen-data", "--n-train", "8", "--n-eval", "5", "--tile-size", "32", "--out", str(out)]) == 0
        counts = {s: read_manifest(out / s)["sample_count"] for s in ("train", "non_cloudy", "cloudy", "unique_areas")}
        assert counts == {"train": 8, "non_cloudy": 5, "cloudy": 5, "unique_areas": 5}
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "gen-data" and manifest["seed"] == 0

    def test_byte_identical(self, tmp_path):
        args = ["gen-data", "--seed", "7", "--tile-size", "8", "--n-train", "4", "--n-eval", "2", "--out"]
        assert cli.main(args + [str(tmp_path / "a")]) == 0
        assert cli.main(args + [str(tmp_path / "b")]) == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.bin"))
        assert len(files) == 16
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_bad_fraction(self, tmp_path, capsys):
        assert cli.main(["gen-data", "--cloud-fraction", "1.5", "--out", str(tmp_path / "x")]) == 2
        assert "outside [0, 1]" in capsys.readouterr().err
        assert cli.main(["gen-data", "--drift", "-0.1", "--out", str(tmp_path / "x")]) == 2

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert cli.main(["gen-data", "--n-train", "1", "--n-eval", "1", "--out", str(blocker / "sub")]) == 2


class TestGradcheck:
    def test_passes(self, capsys):
        assert cli.main(["gradcheck", "--seeds", "1"]) == 0
        lines = capsys.readouterr().out.splitlines()
        names = [line.split()[0] for line in lines]
        assert len(names) == len(set(names)) and "conv2d" in names and "model_combined_loss" in names
        assert all(line.endswith("ok") for line in lines)

    def test_corrupted_conv_backward(self, capsys, monkeypatch):
        real = ad._conv2d_backward

        def corrupted(*args):
            gx, gw, gb = real(*args)
            return gx, None if gw is None else gw * 1.01, gb

        monkeypatch.setattr(ad, "_conv2d_backward", corrupted)
        assert cli.main(["gradcheck", "--seeds", "1"]) == 1
        out = capsys.readouterr().out
        assert "gradcheck failed" in out and "conv2d" in out.splitlines()[-1]


def _oracle_checkpoint(path):
    """enc2 wired to copy the most recent past LAI frame straight to its head."""
    cfg = M.ModelConfig(**TINY_MODEL)
    params = M.init_params(cfg, parts=("enc2",))
    for p in params.values():
        p.data[...] = 0
    base = cfg.enc_base
    params["enc2.unet.down0.conv1.w"].data[0, 1, 1, 1] = 1
    params["enc2.unet.down0.conv2.w"].data[0, 0, 1, 1] = 1
    params["enc2.unet.up0.conv1.w"].data[0, base, 1, 1] = 1
    params["enc2.unet.up0.conv2.w"].data[0, 0, 1, 1] = 1
    params["enc2.head.w"].data[0, 0, 0, 0] = 1
    ckpt = T.Checkpoint("encoder", params, cfg, NormStats(), {"enc2": M.InputFlags()}, "enc2")
    return T.save_checkpoint(ckpt, path)


class TestEval:
    def test_perfect_oracle(self, tmp_path, capsys):
        data = tmp_path / "static"
        assert cli.main(["gen-data", "--tile-size", "8", "--n-train", "1", "--n-eval", "4",
                         "--cloud-fraction", "0", "--drift", "0", "--out", str(data)]) == 0
        ckpt = _oracle_checkpoint(tmp_path / "oracle")
        capsys.readouterr()
        assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--split", "non_cloudy"]) == 0
        assert capsys.readouterr().out.splitlines()[-1] == "rmse=0 r2=1"

    def test_missing_checkpoint(self, tmp_path, data_dir):
        assert cli.main(["eval", "--ckpt", str(tmp_path / "nope"), "--data", str(data_dir)]) == 3

    def test_missing_pack(self, tmp_path):
        ckpt = _oracle_checkpoint(tmp_path / "oracle")
        assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(tmp_path / "empty")]) == 3

    def test_corrupted_checkpoint(self, tmp_path, data_dir):
        ckpt = _oracle_checkpoint(tmp_path / "oracle")
        m = json.loads((ckpt / "manifest.json").read_text())
        m["params"][0]["name"] = "enc2.bogus"
        (ckpt / "manifest.json").write_text(json.dumps(m))
        assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data_dir)]) == 5


class TestPipeline:
    def test_end_to_end(self, tmp_path, data_dir, tiny_config, capsys):
        common = ["--data", str(data_dir), "--config", str(tiny_config), "--seed", "3"]
        assert cli.main(["pretrain", "--encoder", "1", "--out", str(tmp_path / "e1")] + common) == 0
        assert cli.main(["pretrain", "--encoder", "2", "--out", str(tmp_path / "e2")] + common) == 0
        assert cli.main(["train", "--enc1", str(tmp_path / "e1"), "--enc2", str(tmp_path / "e2"),
                         "--out", str(tmp_path / "full")] + common) == 0
        capsys.readouterr()
        assert cli.main(["eval", "--ckpt", str(tmp_path / "full"), "--data", str(data_dir), "--split", "cloudy"]) == 0
        last = capsys.readouterr().out.splitlines()[-1]
        assert last.startswith("rmse=") and " r2=" in last
        manifest = json.loads((tmp_path / "full" / "run_manifest.json").read_text())
        assert manifest["config"]["seed"] == 3 and manifest["config"]["model"] == TINY_MODEL
        log = (tmp_path / "full" / "train_log.jsonl").read_text().splitlines()
        assert {"loss_dec", "loss_enc1", "loss_enc2"} <= set(json.loads(log[0]))

    def test_replay_reproduces(self, tmp_path, data_dir, tiny_config):
        out = tmp_path / "e2"
        assert cli.main(["pretrain", "--encoder", "2", "--data", str(data_dir), "--config", str(tiny_config),
                         "--out", str(out)]) == 0
        first = (out / "params.bin").read_bytes()
        (out / "params.bin").unlink()
        assert cli.main(["replay", str(out / "run_manifest.json")]) == 0
        assert (out / "params.bin").read_bytes() == first

    def test_mismatched_encoders(self, tmp_path, data_dir, tiny_config):
        common = ["--data", str(data_dir), "--config", str(tiny_config)]
        assert cli.main(["pretrain", "--encoder", "1", "--out", str(tmp_path / "e1")] + common) == 0
        assert cli.main(["pretrain", "--encoder", "2", "--out", str(tmp_path / "e2")] + common) == 0
        assert cli.main(["train", "--enc1", str(tmp_path / "e2"), "--enc2", str(tmp_path / "e1"),
                         "--out", str(tmp_path / "full")] + common) == 5

    def test_bad_config(self, tmp_path, data_dir):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli.main(["pretrain", "--encoder", "1", "--data", str(data_dir), "--config", str(bad),
                         "--out", str(tmp_path / "e")]) == 4
        bad.write_text(json.dumps({"epochs": 0}))
        assert cli.main(["pretrain", "--encoder", "1", "--data", str(data_dir), "--config", str(bad),
                         "--out", str(tmp_path / "e")]) == 4

    def test_ablate_and_baseline_reports(self, tmp_path, data_dir, tiny_config):
        report = tmp_path / "ablation.csv"
        assert cli.main(["ablate", "--data", str(data_dir), "--config", str(tiny_config), "--out", str(report)]) == 0
        rows = report.read_text().splitlines()
        assert rows[0] == "variant,split,rmse,r2,n_valid_pixels" and len(rows) == 1 + 6 * 3
        assert (tmp_path / "ablation.csv.run.json").exists()
        assert cli.main(["baseline", "--data", str(data_dir), "--out", str(tmp_path / "mlr.csv")]) == 0
        assert len((tmp_path / "mlr.csv").read_text().splitlines()) == 1 + 3


def test_usage_error_exit_code():
    assert cli.main(["pretrain", "--encoder", "3"]) == 2
    assert cli.main([]) == 2
