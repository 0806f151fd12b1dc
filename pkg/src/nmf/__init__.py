"""Hybrid volume/microfacet scene reconstruction, rendering, and relighting."""

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import SceneData, load_scene
from .envmap import EnvironmentMap, env_from_image, read_pfm, write_pfm
from .grid import FactorGrid, upsample_schedule
from .materials import GainNetwork, MaterialDecoder, MaterialSample
from .metrics import mae_normals, psnr, ssim
from .model import SceneModel
from .optim import TrainConfig, lr_multiplier, orientation_loss, photometric_loss, train
from .render import Camera, RenderConfig, gen_rays, render_image, render_rays, tonemap
from .synth import AnalyticScene, make_synthetic

__version__ = "0.1.0"

__all__ = [
    "AnalyticScene",
    "Camera",
    "EnvironmentMap",
    "FactorGrid",
    "GainNetwork",
    "MaterialDecoder",
    "MaterialSample",
    "RenderConfig",
    "SceneData",
    "SceneModel",
    "TrainConfig",
    "env_from_image",
    "gen_rays",
    "load_checkpoint",
    "load_scene",
    "lr_multiplier",
    "mae_normals",
    "make_synthetic",
    "orientation_loss",
    "photometric_loss",
    "psnr",
    "read_pfm",
    "render_image",
    "render_rays",
    "save_checkpoint",
    "ssim",
    "tonemap",
    "train",
    "upsample_schedule",
    "write_pfm",
]
