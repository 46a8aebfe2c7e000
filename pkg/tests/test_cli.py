import json
import subprocess
import sys

import numpy as np
import pytest

from liteseg.checkpoint import load_checkpoint, save_checkpoint
from liteseg.cli import main, parse_size
from liteseg.data import SyntheticShapesDataset
from liteseg.imageio import make_palette, read_image, read_label, write_image
from liteseg.model import PRESETS, build_model


@pytest.fixture
def workdir(tmp_path):
    ckpt = tmp_path / "tiny.ckpt"
    save_checkpoint(build_model(PRESETS["tiny"]), ckpt)
    ds = SyntheticShapesDataset(seed=3, num_samples=2)
    lines = []
    for i in range(2):
        s = ds[i]
        write_image(tmp_path / f"img{i}.png", (s.image.transpose(1, 2, 0) * 255).round().astype(np.uint8))
        write_image(tmp_path / f"gt{i}.png", s.label)
        lines.append(f"img{i}.png\tgt{i}.png\tgt{i}.png")
    (tmp_path / "copied.txt").write_text("\n".join(lines) + "\n")
    (tmp_path / "pairs.txt").write_text("\n".join(line.rsplit("\t", 1)[0] for line in lines) + "\n")
    return tmp_path


def _json(capsys):
    return json.loads(capsys.readouterr().out)


class TestInfer:
    def test_mask_values_in_class_range(self, workdir):
        out = workdir / "mask.png"
        assert main(["infer", "--ckpt", str(workdir / "tiny.ckpt"), "--image", str(workdir / "img0.png"),
                     "--out", str(out)]) == 0
        mask = read_label(out)
        assert mask.shape == (64, 128)
        assert mask.min() >= 0 and mask.max() <= 3

    def test_palette_output(self, workdir):
        out = workdir / "mask_rgb.png"
        assert main(["infer", "--ckpt", str(workdir / "tiny.ckpt"), "--image", str(workdir / "img0.png"),
                     "--out", str(out), "--palette"]) == 0
        colours = {tuple(c) for c in read_image(out).reshape(-1, 3)}
        assert colours <= {tuple(c) for c in make_palette(4)}

    def test_odd_sized_image_is_resized(self, workdir, rng):
        write_image(workdir / "odd.png", rng.integers(0, 256, (50, 90, 3), dtype=np.uint8))
        out = workdir / "odd_mask.png"
        assert main(["infer", "--ckpt", str(workdir / "tiny.ckpt"), "--image", str(workdir / "odd.png"),
                     "--out", str(out)]) == 0
        assert read_label(out).shape == (50, 90)


class TestEval:
    def test_copied_predictions_give_perfect_miou(self, workdir, capsys):
        assert main(["eval", "--manifest", str(workdir / "copied.txt"), "--num-classes", "4"]) == 0
        assert "mIoU 1.0000" in capsys.readouterr().out

    def test_model_against_its_own_predictions(self, workdir, capsys):
        model = load_checkpoint(workdir / "tiny.ckpt")
        lines = []
        for i in range(2):
            assert main(["infer", "--ckpt", str(workdir / "tiny.ckpt"), "--image", str(workdir / f"img{i}.png"),
                         "--out", str(workdir / f"pred{i}.png")]) == 0
            lines.append(f"img{i}.png\tpred{i}.png")
        (workdir / "self.txt").write_text("\n".join(lines) + "\n")
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(workdir / "tiny.ckpt"), "--manifest", str(workdir / "self.txt"),
                     "--json"]) == 0
        report = _json(capsys)
        assert report["metrics"]["miou"] == 1.0
        assert report["config"] == model.cfg.to_dict()

    def test_json_schema(self, workdir, capsys):
        assert main(["eval", "--ckpt", str(workdir / "tiny.ckpt"), "--manifest", str(workdir / "pairs.txt"),
                     "--workers", "2", "--json"]) == 0
        report = _json(capsys)
        assert set(report) == {"command", "config", "metrics", "timings"}
        assert report["command"] == "eval"
        assert len(report["metrics"]["per_class_iou"]) == 4
        assert report["metrics"]["pixels"] == 2 * 64 * 128
        assert isinstance(report["timings"], list)

    def test_missing_predictions_without_model_is_usage_error(self, workdir):
        assert main(["eval", "--manifest", str(workdir / "pairs.txt"), "--num-classes", "4"]) == 1


class TestBench:
    def test_echoes_resolution(self, capsys):
        assert main(["bench", "--preset", "tiny", "--size", "64x128", "--runs", "3", "--warmup", "1", "--json"]) == 0
        report = _json(capsys)
        assert report["metrics"]["resolution"] == [64, 128]
        assert report["metrics"]["timed_runs"] == 3
        assert len(report["timings"]) == 3

    def test_from_checkpoint(self, workdir, capsys):
        assert main(["bench", "--ckpt", str(workdir / "tiny.ckpt"), "--size", "32x64", "--runs", "3",
                     "--warmup", "1"]) == 0
        assert "resolution 32x64" in capsys.readouterr().out


class TestTrainCommand:
    def test_writes_checkpoint_and_curve(self, workdir, capsys):
        cfg = workdir / "c.json"
        cfg.write_text(json.dumps({"batch_size": 2, "iters": 3, "dataset": {"kind": "synthetic", "num_samples": 4}}))
        out, curve = workdir / "trained.ckpt", workdir / "curve.csv"
        assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "1", "--curve", str(curve),
                     "--json"]) == 0
        report = _json(capsys)
        assert report["config"]["seed"] == 1 and report["metrics"]["iters"] == 3
        assert load_checkpoint(out).cfg == PRESETS["tiny"]
        assert len(curve.read_text().splitlines()) == 4

    def test_bad_config_is_runtime_failure(self, workdir, capsys):
        cfg = workdir / "bad.json"
        cfg.write_text(json.dumps({"no_such_key": 1}))
        assert main(["train", "--config", str(cfg), "--out", str(workdir / "x.ckpt")]) == 2
        assert "unknown" in capsys.readouterr().err


class TestExitCodes:
    @pytest.mark.parametrize("argv", [
        [],
        ["frobnicate"],
        ["bench", "--preset", "tiny", "--size", "64by128"],
        ["bench", "--preset", "tiny", "--runs", "0"],
        ["infer", "--ckpt", "x"],
        ["gradcheck", "--case", "no-such-case"],
    ])
    def test_usage_errors(self, argv):
        assert main(argv) == 1

    def test_missing_checkpoint_is_runtime_failure(self, workdir):
        assert main(["infer", "--ckpt", str(workdir / "nope.ckpt"), "--image", str(workdir / "img0.png"),
                     "--out", str(workdir / "m.png")]) == 2

    def test_corrupt_checkpoint_is_runtime_failure(self, workdir):
        bad = workdir / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert main(["bench", "--ckpt", str(bad), "--size", "32x64", "--runs", "3", "--warmup", "1"]) == 2

    def test_gradcheck_subset(self, capsys):
        assert main(["gradcheck", "--case", "relu", "--case", "blend/spatial-alpha", "--json"]) == 0
        report = _json(capsys)
        assert report["metrics"]["failed"] == [] and report["metrics"]["cases"] == 2

    def test_gradcheck_failure_exits_nonzero(self, monkeypatch):
        from liteseg import gradcheck as gc

        failing = gc.GradCheckResult("broken", 0.5, 1, 0.0)
        monkeypatch.setattr(gc, "run_suite", lambda seed, names: [failing])
        assert main(["gradcheck"]) == 2

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "liteseg", "bench", "--size", "1x"], capture_output=True)
        assert proc.returncode == 1


@pytest.mark.parametrize("text,expected", [("512x1024", (512, 1024)), ("64X128", (64, 128))])
def test_parse_size(text, expected):
    assert parse_size(text) == expected
