"""Command-line interface and config-file tests."""

import json
import os

import pytest

from nmf.cli import main
from nmf.config import load_config


# ---------------------------------------------------------------------------
# config loading


def test_config_defaults_without_file():
    cfg = load_config(None)
    assert cfg.scene.resolution == 32
    assert cfg.train.n_steps == 30000
    assert cfg.render.max_secondary == 128


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('[scene]\nresolution = 16\n\n[train]\nbatch_rays = 64\n')
    cfg = load_config(str(p), ["train.batch_rays=32", "data.root=/tmp/x", "render.near=1.5"])
    assert cfg.scene.resolution == 16
    assert cfg.train.batch_rays == 32  # override wins over the file
    assert cfg.data.root == "/tmp/x"
    assert cfg.render.near == 1.5


def test_config_rejects_unknown_sections_and_keys(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[nosuch]\nx = 1\n")
    with pytest.raises(ValueError, match="unknown config section"):
        load_config(str(p))
    p.write_text("[scene]\nnosuch = 1\n")
    with pytest.raises(ValueError, match="unknown key"):
        load_config(str(p))
    with pytest.raises(ValueError, match="section.key"):
        load_config(None, ["badoverride"])


def test_config_list_override_becomes_tuple():
    cfg = load_config(None, ["train.upsample_steps=[2, 4]"])
    assert cfg.train.upsample_steps == (2, 4)


# ---------------------------------------------------------------------------
# CLI commands (tiny end-to-end pipeline)


TINY = [
    "--set", "synthetic.image_size=16",
    "--set", "synthetic.n_train=2",
    "--set", "synthetic.n_test=1",
]

FAST_RENDER = [
    "--set", "render.max_secondary=4",
    "--set", "render.retrace_budget=0",
    "--set", "render.samples_per_ray=24",
    "--set", "render.secondary_samples_per_ray=16",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run make-synthetic -> train -> eval -> relight once, sharing outputs."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = str(root / "data")
    run_dir = str(root / "run")

    assert main(["make-synthetic", "--out", data_dir] + TINY) == 0

    train_args = [
        "train", "--out", run_dir,
        "--set", f"data.root={data_dir}",
        "--set", "scene.resolution=8",
        "--set", "scene.env_height=16",
        "--set", "scene.env_width=32",
        "--set", "train.n_steps=6",
        "--set", "train.schedule_scale=1.0",
        "--set", "train.upsample_steps=[3]",
        "--set", "train.base_resolution=8",
        "--set", "train.final_resolution=10",
        "--set", "train.batch_rays=32",
        "--set", "train.checkpoint_every=0",
        "--set", "train.log_every=2",
    ] + FAST_RENDER
    assert main(train_args) == 0
    return data_dir, run_dir


def test_make_synthetic_outputs(pipeline):
    data_dir, _ = pipeline
    assert os.path.isfile(os.path.join(data_dir, "transforms_train.json"))
    assert os.path.isfile(os.path.join(data_dir, "transforms_test.json"))
    assert os.path.isfile(os.path.join(data_dir, "train", "r_0.png"))
    assert os.path.isfile(os.path.join(data_dir, "train", "r_0_normal.png"))
    assert os.path.isfile(os.path.join(data_dir, "env.pfm"))


def test_train_outputs(pipeline):
    _, run_dir = pipeline
    assert os.path.isfile(os.path.join(run_dir, "checkpoint.nmf"))
    assert os.path.isfile(os.path.join(run_dir, "train_log.csv"))
    assert os.path.isfile(os.path.join(run_dir, "config.toml"))


def test_eval_writes_metrics(pipeline, tmp_path):
    data_dir, run_dir = pipeline
    out = str(tmp_path / "eval")
    args = [
        "eval", "--out", out,
        "--checkpoint", os.path.join(run_dir, "checkpoint.nmf"),
        "--set", f"data.root={data_dir}",
    ] + FAST_RENDER
    assert main(args) == 0
    report = json.load(open(os.path.join(out, "metrics.json")))
    assert len(report["per_view"]) == 1
    assert {"psnr", "ssim", "mae_normals_deg"} <= set(report["mean"])


def test_render_and_relight(pipeline, tmp_path):
    data_dir, run_dir = pipeline
    ckpt = os.path.join(run_dir, "checkpoint.nmf")
    out_r = str(tmp_path / "render")
    args = ["render", "--out", out_r, "--checkpoint", ckpt,
            "--set", f"data.root={data_dir}"] + FAST_RENDER
    assert main(args) == 0
    assert os.path.isfile(os.path.join(out_r, "r_0.png"))
    assert os.path.isfile(os.path.join(out_r, "r_0_normal.png"))

    out_l = str(tmp_path / "relight")
    args = ["relight", "--out", out_l, "--checkpoint", ckpt,
            "--env", os.path.join(data_dir, "env.pfm"),
            "--set", f"data.root={data_dir}"] + FAST_RENDER
    assert main(args) == 0
    assert os.path.isfile(os.path.join(out_l, "r_0.png"))


# ---------------------------------------------------------------------------
# error handling


def test_errors_exit_nonzero(tmp_path):
    # train without data.root
    assert main(["train", "--out", str(tmp_path / "a")]) == 1
    # missing checkpoint file
    assert main([
        "render", "--out", str(tmp_path / "b"),
        "--checkpoint", str(tmp_path / "nope.nmf"),
        "--set", f"data.root={tmp_path}",
    ]) == 1
    # malformed override
    assert main(["train", "--out", str(tmp_path / "c"), "--set", "garbage"]) == 1


def test_unknown_command_rejected():
    with pytest.raises(SystemExit):
        main(["frobnicate", "--out", "/tmp/x"])
