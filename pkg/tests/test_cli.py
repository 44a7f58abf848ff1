import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from tridf.cli import main

TINY_RUN = {
    "total_iters": 6, "depth_stage_iters": 3, "ray_batch": 32, "n_samples": 8,
    "anchors_per_iter": 8, "patch_size": 4, "patch_stride": 2, "learning_rate": 0.005,
    "field": {"plane_res": 8, "plane_channels": 2, "density_depth": 2, "density_width": 16,
              "base_depth": 2, "base_width": 16, "base_out": 4, "color_depth": 2,
              "color_width": 16, "fm_dim": 3, "pe_freqs": 2, "ref_channels": 16},
}


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "scene"), "--seed", "3", "--resolution", "24"]) == 0
    (root / "run.json").write_text(json.dumps(TINY_RUN))
    assert main(["train", "--scene", str(root / "scene"), "--config", str(root / "run.json"),
                 "--out", str(root / "model")]) == 0
    return root


def test_synth_writes_views_and_is_deterministic(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), "--seed", "7", "--views", "5",
                 "--resolution", "24"]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), "--seed", "7", "--views", "5",
                 "--resolution", "24"]) == 0
    assert len(list((tmp_path / "a" / "images").glob("*.png"))) == 5
    assert (tmp_path / "a" / "points.csv").is_file() and (tmp_path / "a" / "depths").is_dir()
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_synth_bad_resolution_is_usage_error(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "x"), "--resolution", "1024"]) == 2
    assert main(["synth"]) == 2


def test_train_outputs(trained):
    out = trained / "model"
    assert (out / "model.npz").is_file() and (out / "metrics.csv").is_file()
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["total_iters"] == 6 and echoed["field"]["plane_res"] == 8


def test_train_missing_cameras_names_file(tmp_path, capsys, trained):
    scene = tmp_path / "scene"
    main(["synth", "--out", str(scene), "--resolution", "16"])
    (scene / "cameras.json").unlink()
    assert main(["train", "--scene", str(scene), "--config", str(trained / "run.json"),
                 "--out", str(tmp_path / "m")]) == 1
    assert "cameras.json" in capsys.readouterr().err


def test_train_unknown_config_key(tmp_path, trained):
    (tmp_path / "bad.json").write_text(json.dumps({**TINY_RUN, "momentum": 0.9}))
    assert main(["train", "--scene", str(trained / "scene"), "--config", str(tmp_path / "bad.json"),
                 "--out", str(tmp_path / "m")]) == 2
    (tmp_path / "bad2.json").write_text(json.dumps({"field": {"wings": 1}}))
    assert main(["train", "--scene", str(trained / "scene"), "--config", str(tmp_path / "bad2.json"),
                 "--out", str(tmp_path / "m")]) == 2


def pose_file(trained, tmp_path, view=0):
    entry = json.loads((trained / "scene" / "cameras.json").read_text())["cameras"][view]
    path = tmp_path / "pose.json"
    path.write_text(json.dumps(entry))
    return path


def test_render_is_deterministic_with_depth(trained, tmp_path):
    pose = pose_file(trained, tmp_path)
    for name in ("a", "b"):
        assert main(["render", "--model", str(trained / "model"), "--pose", str(pose),
                     "--out", str(tmp_path / f"{name}.png"), "--depth", str(tmp_path / f"{name}_d.png")]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert (tmp_path / "a_d.png").read_bytes() == (tmp_path / "b_d.png").read_bytes()
    with Image.open(tmp_path / "a.png") as im:
        assert im.mode == "RGB" and im.size == (24, 24)
    with Image.open(tmp_path / "a_d.png") as im:
        assert np.asarray(im).dtype in (np.uint16, np.int32)
    side = json.loads((tmp_path / "a_d.png.json").read_text())
    assert side["min"] <= side["max"]


def test_render_malformed_pose(trained, tmp_path):
    (tmp_path / "pose.json").write_text('{"fx": 1}')
    assert main(["render", "--model", str(trained / "model"), "--pose", str(tmp_path / "pose.json"),
                 "--out", str(tmp_path / "x.png")]) == 1
    assert main(["render", "--model", str(tmp_path / "nope"), "--pose", str(tmp_path / "pose.json"),
                 "--out", str(tmp_path / "x.png")]) == 1


def test_eval_report_layout(trained, tmp_path):
    report = tmp_path / "r.csv"
    assert main(["eval", "--model", str(trained / "model"), "--scene", str(trained / "scene"),
                 "--report", str(report)]) == 0
    rows = list(csv.reader(open(report)))
    assert rows[0] == ["view", "psnr", "ssim"]
    assert len(rows) - 1 == 1 + 1  # one test view plus the mean row
    assert rows[-1][0] == "mean"


def test_eval_resolution_mismatch(trained, tmp_path):
    main(["synth", "--out", str(tmp_path / "big"), "--seed", "3", "--resolution", "32"])
    assert main(["eval", "--model", str(trained / "model"), "--scene", str(tmp_path / "big"),
                 "--report", str(tmp_path / "r.csv")]) == 1


def test_threads_flag_and_env(tmp_path, monkeypatch):
    assert main(["--threads", "0", "synth", "--out", str(tmp_path / "a")]) == 2
    monkeypatch.setenv("TRIDF_THREADS", "abc")
    assert main(["synth", "--out", str(tmp_path / "a"), "--resolution", "16"]) == 2
    assert main(["--threads", "1", "synth", "--out", str(tmp_path / "a"), "--resolution", "16"]) == 0


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "tridf", "synth", "--out", str(tmp_path / "s"),
                          "--resolution", "16"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
