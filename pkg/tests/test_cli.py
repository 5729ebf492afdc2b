import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from omnisplat.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from omnisplat.core import GaussianCloud
from omnisplat.io import load_checkpoint, load_image, save_checkpoint

IDENTITY_POSE = ["1", "0", "0", "0", "1", "0", "0", "0", "1", "0", "0", "0"]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["synth", "small", str(out)]) == EXIT_OK
    return out / "manifest.txt"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_synth_is_deterministic(tmp_path, capsys):
    assert main(["synth", "small", str(tmp_path / "a"), "--seed", "3"]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["views"] == 2 and info["gaussians"] == 10
    assert main(["synth", "small", str(tmp_path / "b"), "--seed", "3"]) == EXIT_OK
    for name in ("images/view_000.png", "points.ply", "ground_truth.ply"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert main(["synth", "huge", str(tmp_path / "c")]) == EXIT_USAGE


def test_train_writes_log_and_checkpoints(scene, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", str(scene), str(out), "--iterations", "30", "--log-every", "10",
                 "--checkpoint-every", "15", "--seed", "1", "--no-plots"])
    assert code == EXIT_OK
    rows = read_csv(out / "train_log.csv")
    assert rows[0] == ["iteration", "wall_seconds", "loss", "n_gaussians"]
    assert [int(r[0]) for r in rows[1:]] == [1, 10, 20, 30]
    assert all(float(r[2]) > 0 for r in rows[1:])
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["iter_000015.ply", "iter_000030.ply"]
    assert len(load_checkpoint(out / "final.ply")) == int(rows[-1][3])
    assert "PSNR" in capsys.readouterr().out


def test_config_file_and_flag_precedence(scene, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("iterations: 1000\nlambda_dssim: 0.0\n")
    out = tmp_path / "run"
    assert main(["train", str(scene), str(out), "--config", str(cfg), "--iterations", "5",
                 "--log-every", "1", "--no-plots"]) == EXIT_OK
    assert int(read_csv(out / "train_log.csv")[-1][0]) == 5
    cfg.write_text("learning_rate: 3\n")
    assert main(["train", str(scene), str(out), "--config", str(cfg)]) == EXIT_USAGE


def test_train_missing_manifest(tmp_path):
    assert main(["train", str(tmp_path / "nope.txt"), str(tmp_path / "out")]) == EXIT_USAGE


def test_train_malformed_manifest(scene, tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    lines = scene.read_text().splitlines()
    rows = [ln.replace(" train", " 7 train") if ln.startswith("image") else ln for ln in lines]
    bad.write_text("\n".join(rows).replace("images/", str(scene.parent / "images") + "/")
                   .replace("pointcloud points.ply", f"pointcloud {scene.parent / 'points.ply'}"))
    assert main(["train", str(bad), str(tmp_path / "out")]) == EXIT_USAGE
    assert "bad.txt:" in capsys.readouterr().err


def test_max_minutes_budget(scene, tmp_path):
    out = tmp_path / "run"
    start = time.perf_counter()
    code = main(["train", str(scene), str(out), "--iterations", "100000000", "--max-minutes", "0.1",
                 "--log-every", "1000", "--no-plots"])
    elapsed = time.perf_counter() - start
    assert code == EXIT_OK
    last = read_csv(out / "train_log.csv")[-1]
    assert 1 < int(last[0]) < 100000000
    # 6 s budget plus 10 %
    assert float(last[1]) <= 6.6
    assert elapsed <= 6.6 + 2.0


def test_gradcheck_default_passes(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "gradcheck passed" in out and "means" in out


@pytest.mark.parametrize("k", [0, 7])
def test_gradcheck_mutation_fails(k, capsys):
    assert main(["gradcheck", "--scenes", "3", "--mutate", str(k)]) == EXIT_FAIL
    assert "FAILED" in capsys.readouterr().out


def test_gradcheck_no_gaussians_passes_vacuously(tmp_path):
    assert main(["gradcheck", "--n-gaussians", "0", "--out", str(tmp_path)]) == EXIT_OK
    assert read_csv(tmp_path / "gradcheck.csv")[0] == ["group", "max_rel_error", "tolerance"]


def test_gradcheck_usage_errors():
    assert main(["gradcheck", "--mutate", "12"]) == EXIT_USAGE
    assert main(["gradcheck", "--width", "21"]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["gradcheck", "--scenes", "many"])
    assert exc.value.code == EXIT_USAGE


def test_render_empty_checkpoint_is_black(tmp_path, capsys):
    save_checkpoint(GaussianCloud.empty(), tmp_path / "empty.ply")
    out = tmp_path / "img.png"
    assert main(["render", str(tmp_path / "empty.ply"), str(out), "--pose", *IDENTITY_POSE, "--width", "64"]) == EXIT_OK
    img = load_image(out)
    assert img.shape == (32, 64, 3) and not img.any()
    assert "rendered 0 Gaussians" in capsys.readouterr().out


def test_render_malformed_pose(tmp_path):
    save_checkpoint(GaussianCloud.empty(), tmp_path / "empty.ply")
    args = ["render", str(tmp_path / "empty.ply"), str(tmp_path / "img.png"), "--width", "64", "--pose"]
    assert main(args + IDENTITY_POSE[:11]) == EXIT_USAGE
    assert main(args + ["2"] + IDENTITY_POSE[1:]) == EXIT_USAGE
    assert main(args + IDENTITY_POSE[:-1] + ["nan"]) == EXIT_USAGE


def test_render_reproduces_training_view(scene, tmp_path):
    text = [ln for ln in scene.read_text().splitlines() if ln.startswith("image")][0].split()
    out = tmp_path / "view.png"
    gt = scene.parent / "ground_truth.ply"
    assert main(["render", str(gt), str(out), "--pose", *text[4:16], "--width", text[2]]) == EXIT_OK
    # the ground truth re-rendered matches the stored view up to 8-bit rounding
    diff = np.abs(load_image(out) - load_image(scene.parent / text[1]))
    assert diff.max() <= 1 / 255 + 1e-6


def test_eval_writes_mean_row(scene, tmp_path):
    gt = scene.parent / "ground_truth.ply"
    assert main(["eval", str(gt), str(scene), "--split", "test"]) == EXIT_USAGE
    assert main(["eval", str(gt), str(scene), "--split", "train", "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "eval.csv")
    assert rows[0] == ["image", "psnr", "ssim"]
    assert [r[0] for r in rows[1:]] == ["view_000.png", "view_001.png", "mean"]
    assert float(rows[-1][1]) > 40 and float(rows[-1][2]) > 0.99
    assert (tmp_path / "eval.png").exists()


def test_newer_checkpoint_is_usage_error(tmp_path):
    save_checkpoint(GaussianCloud.empty(), tmp_path / "c.ply")
    path = tmp_path / "c.ply"
    path.write_bytes(path.read_bytes().replace(b"checkpoint_version 1", b"checkpoint_version 2"))
    assert main(["render", str(path), str(tmp_path / "o.png"), "--pose", *IDENTITY_POSE, "--width", "64"]) == EXIT_USAGE


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "omnisplat", "synth", "small", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["views"] == 2
    proc = subprocess.run([sys.executable, "-m", "omnisplat", "train", str(tmp_path / "missing.txt"), str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "error" in proc.stderr
