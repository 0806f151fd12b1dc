"""Checkpoint round-trip and validation tests."""

import struct

import pytest
import torch

from nmf.checkpoint import MAGIC, VERSION, load_checkpoint, save_checkpoint
from nmf.model import SceneModel
from nmf.render import Camera, RenderConfig, render_image
from nmf.synth import look_at_pose

import numpy as np


def _tiny_model(seed=7):
    return SceneModel.create(
        resolution=(12, 12, 12),
        density_rank=4,
        feature_rank=6,
        feature_dim=8,
        env_height=16,
        env_width=32,
        gain_mode="neural",
        seed=seed,
    )


def test_round_trip_preserves_every_parameter(tmp_path):
    model = _tiny_model()
    path = str(tmp_path / "m.nmf")
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    sd_a = model.state_dict()
    sd_b = loaded.state_dict()
    assert set(sd_a) == set(sd_b)
    for k in sd_a:
        assert torch.equal(sd_a[k].float(), sd_b[k].float()), k


def test_round_trip_renders_bitwise_identically(tmp_path):
    model = _tiny_model()
    path = str(tmp_path / "m.nmf")
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    pose = torch.from_numpy(look_at_pose(np.array([0.0, 0.0, 3.5]), np.zeros(3), up=(0, 1, 0))).float()
    cam = Camera(8, 8, 0.7, pose)
    cfg = RenderConfig(max_secondary=8, retrace_budget=0, samples_per_ray=32, seed=5)
    a = render_image(model, cam, cfg)
    b = render_image(loaded, cam, cfg)
    assert torch.equal(a, b)


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.nmf"
    path.write_bytes(b"NOTACKPT" + struct.pack("<II", VERSION, 0))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(str(path))


def test_rejects_unknown_version(tmp_path):
    path = tmp_path / "vers.nmf"
    path.write_bytes(MAGIC + struct.pack("<II", VERSION + 1, 0))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(str(path))


def test_rejects_truncated_file(tmp_path):
    model = _tiny_model()
    path = str(tmp_path / "t.nmf")
    save_checkpoint(path, model)
    data = open(path, "rb").read()
    open(path, "wb").write(data[: len(data) // 2])
    with pytest.raises(ValueError):
        load_checkpoint(path)
