import json

import numpy as np
import pytest

from unimlvg import container
from unimlvg.cli import main
from unimlvg.sampling import load_video

TINY = """
model: {hidden: 16, depth: 1, heads: 2, adapter_levels: 1, injection_sites: [0], ray_hidden: 8, adapter_hidden: 8}
data: {scenes: 1, horizon: 13, n_actors: 2, attributes: [[day, sunny]]}
train: {stage_steps: {0: 2, 1: 2, 2: 2, 3: 2}, image_batch: 2}
sample: {steps: 2}
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.yaml").write_text(TINY)
    cfg = str(d / "tiny.yaml")
    assert main(["gen-data", "--config", cfg, "--out", str(d / "data")]) == 0
    return d, cfg


@pytest.fixture(scope="module")
def ckpt(work):
    d, cfg = work
    data = str(d / "data")
    assert main(["train", "--config", cfg, "--data", data, "--stage", "0", "--out", str(d / "s0.bin")]) == 0
    assert main(["train", "--config", cfg, "--set", "data.views=[0]", "--data", data, "--stage", "1",
                 "--init", str(d / "s0.bin"), "--out", str(d / "s1.bin")]) == 0
    assert main(["train", "--config", cfg, "--data", data, "--stage", "2", "--init", str(d / "s1.bin"), "--out", str(d / "s2.bin")]) == 0
    assert main(["train", "--config", cfg, "--data", data, "--stage", "3", "--init", str(d / "s2.bin"), "--out", str(d / "s3.bin")]) == 0
    return str(d / "s3.bin")


def test_gen_data_refuses_to_overwrite(work, capsys):
    d, cfg = work
    assert main(["gen-data", "--config", cfg, "--out", str(d / "data")]) == 2
    assert "--force" in capsys.readouterr().err
    manifest = json.loads((d / "data" / "manifest.json").read_text())
    assert manifest["attributes"] == [["day", "sunny"]]


def test_stage_one_needs_single_view_clips(work, ckpt, capsys):
    d, cfg = work
    assert main(["train", "--config", cfg, "--data", str(d / "data"), "--stage", "1", "--out", str(d / "x.bin")]) == 2
    assert "single-view" in capsys.readouterr().err


def test_train_writes_loss_log_and_hash(work, ckpt, capsys):
    d, _ = work
    lines = (d / "s3.loss.txt").read_text().splitlines()
    assert lines[0] == "# step stage task loss" and len(lines) == 3
    meta = json.loads(container.load(ckpt)["meta"].tobytes().decode())
    assert meta["stage"] == 3 and len(meta["config_hash"]) == 64


def test_resume_checks_hash(work, ckpt, capsys):
    d, cfg = work
    args = ["train", "--config", cfg, "--data", str(d / "data"), "--stage", "3", "--resume", ckpt, "--steps", "3", "--out", str(d / "r.bin")]
    assert main(args + ["--set", "train.lr=0.5"]) == 2
    assert "hash" in capsys.readouterr().err
    assert main(args) == 0
    meta = json.loads(container.load(d / "r.bin")["meta"].tobytes().decode())
    assert meta["step"] == 3


def test_sample_rollout_and_eval(work, ckpt, capsys):
    d, _ = work
    data = str(d / "data")
    assert main(["sample", "--ckpt", ckpt, "--data", data, "--out", str(d / "s"), "--refs", "gt", "--seed", "5"]) == 0
    video, meta = load_video(d / "s" / "video.bin")
    assert video.shape == (8, 6, 48, 80, 3) and meta["seed"] == 5
    assert len(list((d / "s" / "frames").glob("*.ppm"))) == 48
    gt, _ = load_video(d / "s" / "gt.bin")
    assert np.allclose(video[:3], gt[:3], atol=1e-6)  # the references come back unchanged

    assert main(["rollout", "--ckpt", ckpt, "--data", data, "--out", str(d / "r"), "--windows", "2", "--seed", "5"]) == 0
    roll, rmeta = load_video(d / "r" / "video.bin")
    assert roll.shape[0] == 13 and rmeta["window_starts"] == [0, 5]
    assert main(["rollout", "--ckpt", ckpt, "--data", data, "--out", str(d / "r3"), "--windows", "3"]) == 2

    capsys.readouterr()
    assert main(["eval", "--gen", str(d / "s" / "gt.bin"), "--gt", str(d / "s" / "gt.bin"), "--data", data]) == 0
    assert "psnr_mean: 99.000000" in capsys.readouterr().out
    assert main(["eval", "--gen", str(d / "s" / "video.bin"), "--gt", str(d / "s" / "gt.bin"), "--out", str(d / "rep.txt")]) == 4
    assert (d / "rep.txt").read_text().startswith("psnr_mean:")


def test_one_window_rollout_equals_sample(work, ckpt):
    d, _ = work
    data = str(d / "data")
    assert main(["sample", "--ckpt", ckpt, "--data", data, "--out", str(d / "a"), "--seed", "2"]) == 0
    assert main(["rollout", "--ckpt", ckpt, "--data", data, "--out", str(d / "b"), "--windows", "1", "--seed", "2"]) == 0
    assert np.array_equal(load_video(d / "a" / "video.bin")[0], load_video(d / "b" / "video.bin")[0])


def test_edit_reports_ratio(work, ckpt, capsys):
    d, _ = work
    assert main(["edit", "--ckpt", ckpt, "--data", str(d / "data"), "--out", str(d / "e"), "--attr-override", "night"]) == 0
    out = capsys.readouterr().out
    assert "attribute_luminance_ratio:" in out
    meta = json.loads((d / "e" / "edited" / "meta.json").read_text())
    assert meta["attr_override"] == {"time": "night"}
    assert main(["edit", "--ckpt", ckpt, "--data", str(d / "data"), "--out", str(d / "e2"), "--attr-override", "dusk"]) == 2


def test_dump_conds(work):
    d, cfg = work
    assert main(["dump-conds", "--config", cfg, "--data", str(d / "data"), "--out", str(d / "c"), "--length", "2"]) == 0
    assert len(list((d / "c" / "boxes").glob("*.ppm"))) == 12
    assert (d / "c" / "tokens.txt").read_text().startswith("t000_v0: front day sunny vehicles_")
    rays = container.load(d / "c" / "rays.bin")
    assert rays["origins"].shape == (2, 6, 48, 80, 3)


def test_bad_scene_index(work, ckpt):
    d, _ = work
    assert main(["sample", "--ckpt", ckpt, "--data", str(d / "data"), "--scene", "4", "--out", str(d / "z")]) == 2
