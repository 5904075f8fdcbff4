import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from mixnet import cli, ops
from mixnet.config import ModelConfig, parse_run_config
from mixnet.errors import ConfigError
from mixnet.imageio import load_image, quantize, save_image
from mixnet.model import init_weights, param_count
from mixnet.synthetic import lowlight_pairs, offset_pairs, smooth_textures
from mixnet.training import ImagePair
from mixnet.weights import save_weights

from helpers import passthrough_weights, write_pairs, write_png

TINY = ModelConfig(num_fmb=1, channels=12, gfml_size=4, lfml_reduction=2)


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def tiny_weights(tmp_path):
    path = tmp_path / "tiny.mixw"
    w = init_weights(TINY, seed=1)
    w["fmb.0.gfml.conv_h.bias"].data[:] = np.linspace(-2, 2, 4)
    save_weights(w, path)
    return path


@pytest.fixture
def identity_weights(tmp_path):
    path = tmp_path / "identity.mixw"
    save_weights(passthrough_weights(TINY), path)
    return path


class TestRunConfig:
    def test_parse(self):
        run_cfg = parse_run_config("channels = 16  # width\nlfml_reduction=2\n\nbatch_size=4\nflips=false\n"
                                   "train_dir=/data\n")
        assert run_cfg.model.channels == 16 and run_cfg.train.batch_size == 4
        assert run_cfg.train.flips is False
        assert str(run_cfg.train_dir) == "/data"

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="chanels"):
            parse_run_config("chanels=48\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="num_fmb"):
            parse_run_config("num_fmb=eight\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_run_config("channels=8\noops\n")


class TestTrain:
    def _config(self, tmp_path, extra=""):
        write_pairs(tmp_path / "train", lowlight_pairs(8, 32, seed=0))
        text = ("num_fmb=1\nchannels=8\ngfml_size=4\nlfml_reduction=2\n"
                "total_iters=12\nbatch_size=2\ncrop=16\nlog_every=5\ncheckpoint_every=10\n"
                "train_dir=train\ncheckpoint_dir=ckpt\n" + extra)
        cfg = tmp_path / "run.cfg"
        cfg.write_text(text, encoding="utf-8")
        return cfg

    def test_fixture_run(self, tmp_path, capsys):
        cfg = self._config(tmp_path, "val_dir=train\n")
        code, out, err = run(["train", "--config", cfg], capsys)
        assert code == 0, err
        assert (tmp_path / "ckpt" / "final.mixw").exists()
        assert (tmp_path / "ckpt" / "ckpt_10.mixw").exists()
        log = (tmp_path / "ckpt" / "loss.log").read_text(encoding="utf-8").splitlines()
        assert len(log) == 12
        assert (tmp_path / "ckpt" / "val_report.tsv").read_text(encoding="utf-8").count("\n") == 10
        assert "final_loss" in out

    def test_unknown_key(self, tmp_path, capsys):
        cfg = self._config(tmp_path, "chanels=48\n")
        code, _, err = run(["train", "--config", cfg], capsys)
        assert code != 0
        assert err.startswith("error:config:") and "chanels" in err
        assert not (tmp_path / "ckpt").exists()

    def test_missing_train_dir(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"checkpoint_dir={tmp_path / 'ckpt'}\ntrain_dir={tmp_path / 'nowhere'}\n")
        code, _, err = run(["train", "--config", cfg], capsys)
        assert code != 0 and "train_dir" in err
        assert not (tmp_path / "ckpt").exists()

    def test_unmatched_pairs_abort(self, tmp_path, capsys):
        cfg = self._config(tmp_path)
        write_png(tmp_path / "train" / "degraded" / "orphan.png", np.zeros((3, 32, 32)))
        code, _, err = run(["train", "--config", cfg], capsys)
        assert code != 0 and "orphan.png" in err
        assert not (tmp_path / "ckpt").exists()


class TestInfer:
    def test_pad_and_crop_large(self, tmp_path, capsys, tiny_weights):
        src = tmp_path / "big.png"
        Image.new("RGB", (4000, 3000), (40, 90, 200)).save(src)
        code, _, err = run(["infer", "--weights", tiny_weights, "--input", src,
                            "--output", tmp_path / "out.png"], capsys)
        assert code == 0, err
        assert Image.open(tmp_path / "out.png").size == (4000, 3000)

    def test_pad_and_crop_odd(self, tmp_path, capsys, identity_weights):
        img = smooth_textures(1, 67, seed=3)[0][:, :, :51]
        write_png(tmp_path / "odd.png", img)
        code, _, err = run(["infer", "--weights", identity_weights, "--input", tmp_path / "odd.png",
                            "--output", tmp_path / "out.png"], capsys)
        assert code == 0, err
        # Pass-through weights reproduce the file exactly, so padding never leaks into the crop.
        assert np.array_equal(np.asarray(Image.open(tmp_path / "out.png")),
                              np.asarray(Image.open(tmp_path / "odd.png")))

    def test_tiled_differs_and_warns(self, tmp_path, capsys, tiny_weights):
        write_png(tmp_path / "in.png", smooth_textures(1, 64, seed=2)[0])
        args = ["infer", "--weights", tiny_weights, "--input", tmp_path / "in.png"]
        code, _, err = run(args + ["--output", tmp_path / "whole.png"], capsys)
        assert code == 0 and "warning" not in err
        code, _, err = run(args + ["--output", tmp_path / "tiled.png", "--tile", 32, "--overlap", 8], capsys)
        assert code == 0
        assert err.startswith("warning: tiled inference is approximate")
        whole = np.asarray(Image.open(tmp_path / "whole.png"))
        tiled = np.asarray(Image.open(tmp_path / "tiled.png"))
        assert not np.array_equal(whole, tiled)

    def test_tile_validation(self, tmp_path, capsys, tiny_weights):
        write_png(tmp_path / "in.png", smooth_textures(1, 32, seed=2)[0])
        code, _, err = run(["infer", "--weights", tiny_weights, "--input", tmp_path / "in.png",
                            "--output", tmp_path / "o.png", "--tile", 16, "--overlap", 16], capsys)
        assert code == cli.EXIT_CONFIG and "overlap" in err
        assert not (tmp_path / "o.png").exists()

    def test_deterministic(self, tmp_path, capsys, tiny_weights):
        write_png(tmp_path / "in.png", smooth_textures(1, 48, seed=2)[0])
        for name in ("a.png", "b.png"):
            run(["infer", "--weights", tiny_weights, "--input", tmp_path / "in.png",
                 "--output", tmp_path / name], capsys)
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_bad_weights_file(self, tmp_path, capsys):
        (tmp_path / "w.mixw").write_bytes(b"junk")
        write_png(tmp_path / "in.png", np.zeros((3, 8, 8)))
        code, _, err = run(["infer", "--weights", tmp_path / "w.mixw", "--input", tmp_path / "in.png",
                            "--output", tmp_path / "o.png"], capsys)
        assert code != 0 and err.startswith("error:weights:")

    def test_unreadable_image(self, tmp_path, capsys, tiny_weights):
        (tmp_path / "in.png").write_bytes(b"not a png")
        code, _, err = run(["infer", "--weights", tiny_weights, "--input", tmp_path / "in.png",
                            "--output", tmp_path / "o.png"], capsys)
        assert code != 0 and err.startswith("error:input:")


class TestEval:
    def test_identity_on_clean_pairs_hits_cap(self, tmp_path, capsys, identity_weights):
        imgs = smooth_textures(3, 32, seed=4)
        write_pairs(tmp_path, [ImagePair(i, i, f"im{k}") for k, i in enumerate(imgs)])
        code, out, _ = run(["eval", "--weights", identity_weights, "--degraded", tmp_path / "degraded",
                            "--clean", tmp_path / "clean", "--report", tmp_path / "r.tsv"], capsys)
        assert code == 0
        last = (tmp_path / "r.tsv").read_text(encoding="utf-8").splitlines()[-1].split("\t")
        assert last[0] == "MEAN" and float(last[1]) == 100.0 and float(last[2]) == 1.0

    def test_offset_dataset(self, tmp_path, capsys, identity_weights):
        root = tmp_path / "data"
        for sub in ("degraded", "clean"):
            (root / sub).mkdir(parents=True)
        base = (smooth_textures(2, 32, seed=6) * 200).astype(np.uint8)
        for k, img in enumerate(base):
            hwc = img.transpose(1, 2, 0)
            write_png(root / "degraded" / f"{k}.png", hwc)
            write_png(root / "clean" / f"{k}.png", hwc + np.uint8(16))
        code, out, _ = run(["eval", "--weights", identity_weights, "--degraded", root / "degraded",
                            "--clean", root / "clean", "--report", tmp_path / "r.tsv"], capsys)
        assert code == 0
        mean_psnr = float(out.split("\t")[1])
        assert abs(mean_psnr - 20 * np.log10(255 / 16)) < 1e-3

    def test_empty(self, tmp_path, capsys, identity_weights):
        (tmp_path / "d").mkdir()
        (tmp_path / "c").mkdir()
        code, _, err = run(["eval", "--weights", identity_weights, "--degraded", tmp_path / "d",
                            "--clean", tmp_path / "c", "--report", tmp_path / "r.tsv"], capsys)
        assert code != 0 and "no pairs found" in err

    def test_partial(self, tmp_path, capsys, identity_weights):
        write_pairs(tmp_path, offset_pairs(2, 16))
        write_png(tmp_path / "clean" / "extra.png", np.zeros((3, 16, 16)))
        code, _, err = run(["eval", "--weights", identity_weights, "--degraded", tmp_path / "degraded",
                            "--clean", tmp_path / "clean", "--report", tmp_path / "r.tsv"], capsys)
        assert code == cli.EXIT_PARTIAL
        assert "extra.png" in err and "error:partial:" in err
        assert len((tmp_path / "r.tsv").read_text(encoding="utf-8").splitlines()) == 4


class TestGradcheck:
    def test_pristine(self, capsys):
        code, out, _ = run(["gradcheck"], capsys)
        assert code == 0
        assert "sigmoid" in out and "model_d2" in out

    def test_corrupted_sigmoid_backward(self, capsys, monkeypatch):
        monkeypatch.setattr(ops, "_sigmoid_backward", lambda y, g: g * y)
        code, _, err = run(["gradcheck"], capsys)
        assert code != 0
        assert err.startswith("error:gradcheck:") and "sigmoid" in err


class TestParamsAndBench:
    def test_params_default(self, capsys):
        code, out, _ = run(["params"], capsys)
        assert code == 0
        rows = dict(line.split("\t") for line in out.strip().splitlines())
        assert int(rows["total"]) == param_count(ModelConfig()) == 514_076
        assert sum(int(v) for k, v in rows.items() if k != "total") == 514_076

    def test_params_from_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("num_fmb=3\nchannels=20\nlfml_reduction=5\nuse_lfml=no\n")
        code, out, _ = run(["params", "--config", cfg], capsys)
        expected = param_count(ModelConfig(num_fmb=3, channels=20, lfml_reduction=5, use_lfml=False))
        assert out.strip().splitlines()[-1] == f"total\t{expected}"

    def test_bench_smoke(self, capsys, tiny_weights):
        code, out, _ = run(["bench", "--weights", tiny_weights, "--width", 512, "--height", 512], capsys)
        assert code == 0
        rows = dict(line.split("\t") for line in out.strip().splitlines())
        assert float(rows["seconds"]) > 0
        assert int(rows["peak_rss_bytes"]) > 0 and int(rows["activation_peak_bytes"]) > 0


def test_quantize_round_trip(tmp_path, rng):
    img = rng.random((3, 9, 7)).astype(np.float32)
    save_image(tmp_path / "q.png", img)
    back = load_image(tmp_path / "q.png")
    assert np.abs(back - img).max() <= 1 / (2 * 255) + 1e-7


def test_quantize_clamps():
    q = quantize(np.array([-0.5, 0.0, 0.5, 1.0, 2.0]).reshape(1, 1, 5).repeat(3, 0))
    assert q[0, :, 0].tolist() == [0, 0, 128, 255, 255]


def test_console_script_entry():
    proc = subprocess.run([sys.executable, "-m", "mixnet", "params"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.strip().endswith("total\t514076")
