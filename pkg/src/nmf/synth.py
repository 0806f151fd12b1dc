"""Synthetic ground-truth scene: a soft-edged sphere with known materials.

Used to exercise the full pipeline end to end: `make_synthetic` renders a
posed dataset with the production renderer driven by analytic density,
normals, and materials, and writes ground-truth normal maps, opacity, and
the environment map alongside the images.
"""

from __future__ import annotations

import json
import math
import os

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .envmap import EnvironmentMap, env_from_image, write_pfm
from .materials import GainNetwork, MaterialSample
from .render import Camera, RenderConfig, render_image


def make_env_image(height: int = 128, width: int = 256) -> np.ndarray:
    """Low-frequency colorful environment with distinct directional lobes."""
    th = (np.arange(height) + 0.5) / height * math.pi
    ph = (np.arange(width) + 0.5) / width * 2.0 * math.pi
    theta, phi = np.meshgrid(th, ph, indexing="ij")
    d = np.stack(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], -1
    )

    img = np.full((height, width, 3), 0.15, dtype=np.float64)
    lobes = [
        (np.array([0.0, 0.0, 1.0]), np.array([1.6, 1.5, 1.2]), 8.0),      # warm sky
        (np.array([1.0, 0.3, 0.2]), np.array([2.5, 0.4, 0.3]), 24.0),     # red
        (np.array([-0.6, 0.8, 0.1]), np.array([0.3, 0.6, 2.4]), 24.0),    # blue
        (np.array([0.1, -1.0, -0.2]), np.array([0.4, 2.0, 0.5]), 16.0),   # green
    ]
    for axis, color, sharp in lobes:
        axis = axis / np.linalg.norm(axis)
        lobe = np.exp(sharp * ((d @ axis) - 1.0))
        img += lobe[..., None] * color
    return img.astype(np.float32)


class AnalyticScene:
    """Sphere with a smooth density shell and constant microfacet material."""

    def __init__(
        self,
        env: EnvironmentMap,
        radius: float = 0.8,
        edge: float = 0.04,
        sigma0: float = 60.0,
        alpha: float = 0.25,
        albedo: tuple[float, float, float] = (0.65, 0.35, 0.2),
        f0: tuple[float, float, float] = (0.3, 0.3, 0.3),
    ):
        self.env = env
        self.radius = radius
        self.edge = edge
        self.sigma0 = sigma0
        self.alpha_v = alpha
        self.albedo_v = torch.tensor(albedo)
        self.f0_v = torch.tensor(f0)
        self.gain_net = GainNetwork(feature_dim=4, mode="identity")

    def density(self, p: Tensor) -> Tensor:
        r = p.norm(dim=-1)
        return self.sigma0 * torch.sigmoid((self.radius - r) / self.edge)

    def normal(self, p: Tensor) -> tuple[Tensor, Tensor]:
        r = p.norm(dim=-1, keepdim=True)
        valid = r.squeeze(-1) > 1e-9
        n = torch.where(valid.unsqueeze(-1), p / r.clamp_min(1e-12), torch.zeros_like(p))
        return n, valid

    def material(self, p: Tensor) -> MaterialSample:
        k = p.shape[0]
        return MaterialSample(
            alpha=torch.full((k,), self.alpha_v, dtype=p.dtype),
            albedo=self.albedo_v.to(p.dtype).expand(k, 3),
            f0=self.f0_v.to(p.dtype).expand(k, 3),
            feature=torch.zeros((k, 4), dtype=p.dtype),
        )


def look_at_pose(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose for a camera at ``eye`` looking at ``target``
    (camera looks along -z, y up)."""
    back = eye - target
    back = back / np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    if np.linalg.norm(right) < 1e-8:  # looking straight along the up axis
        right = np.cross(np.array([0.0, 1.0, 0.0]), back)
    right = right / np.linalg.norm(right)
    upv = np.cross(back, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = upv
    pose[:3, 2] = back
    pose[:3, 3] = eye
    return pose


def orbit_poses(n: int, radius: float = 3.5, phase: float = 0.0) -> list[np.ndarray]:
    poses = []
    for i in range(n):
        az = 2.0 * math.pi * i / n + phase
        el = math.radians(20.0 + 25.0 * math.sin(2.3 * i + phase))
        eye = radius * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )
        poses.append(look_at_pose(eye, np.zeros(3)))
    return poses


def _save_png(path: str, arr: np.ndarray) -> None:
    Image.fromarray((np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)).save(path)


def make_synthetic(
    out_dir: str,
    image_size: int = 64,
    n_train: int = 16,
    n_test: int = 4,
    angle_x: float = 0.6911112070083618,
    seed: int = 0,
    render_cfg: RenderConfig | None = None,
) -> None:
    """Render and write the sphere dataset under ``out_dir``.

    Produces transforms_{train,test}.json, RGBA images, ground-truth normal
    maps (channels n*0.5+0.5; missing pixels mid-gray), and env.pfm. Fully
    deterministic for a fixed seed.
    """
    env_img = make_env_image()
    env = env_from_image(env_img)
    scene = AnalyticScene(env)
    if render_cfg is None:
        render_cfg = RenderConfig(
            max_secondary=64,
            retrace_budget=0,
            samples_per_ray=96,
            seed=seed,
        )

    os.makedirs(out_dir, exist_ok=True)
    write_pfm(os.path.join(out_dir, "env.pfm"), env_img)

    splits = {
        "train": orbit_poses(n_train, phase=0.0),
        "test": orbit_poses(n_test, phase=0.37),
    }
    with torch.no_grad():
        for split, poses in splits.items():
            os.makedirs(os.path.join(out_dir, split), exist_ok=True)
            frames = []
            for i, pose in enumerate(poses):
                cam = Camera(image_size, image_size, angle_x, torch.from_numpy(pose).float())
                img, aux = render_image(scene, cam, render_cfg, return_aux=True)
                rgba = np.concatenate(
                    [img.numpy(), aux["opacity"].numpy()[..., None]], axis=-1
                )
                rel = f"./{split}/r_{i}"
                _save_png(os.path.join(out_dir, f"{split}/r_{i}.png"), rgba)
                _save_png(
                    os.path.join(out_dir, f"{split}/r_{i}_normal.png"),
                    aux["normal"].numpy() * 0.5 + 0.5,
                )
                frames.append(
                    {"file_path": rel, "transform_matrix": pose.tolist()}
                )
            with open(os.path.join(out_dir, f"transforms_{split}.json"), "w") as fh:
                json.dump({"camera_angle_x": angle_x, "frames": frames}, fh, indent=1)
