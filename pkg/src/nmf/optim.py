"""Losses, Adam with the warmup/log-linear-decay schedule, and training.

Gradients come from reverse-mode autodiff over the rendering forward pass;
sampling decisions (drawn directions, secondary counts, retrace selection)
are constants of the graph, so gradients flow through integrand values only.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .grid import upsample_schedule
from .model import SceneModel
from .render import RenderConfig, gen_rays, render_rays, tonemap

BETA1 = 0.9
BETA2 = 0.99
EPS = 1e-15

LR_SPATIAL = 0.02
LR_NETWORK = 1e-3


def lr_multiplier(
    i: int | float,
    m_w: float = 0.1,
    n_w: int = 100,
    d_w: float = 1e-3,
    n_t: int = 30000,
) -> float:
    """Warmup-then-decay multiplier:
    [m_w + (1-m_w) sin(pi/2 clip(i/n_w, 0, 1))] * d_w^(i/n_t)."""
    warm = m_w + (1.0 - m_w) * math.sin(0.5 * math.pi * min(max(i / n_w, 0.0), 1.0))
    return warm * d_w ** (i / n_t)


def orientation_loss(w: Tensor, normals: Tensor, wo: Tensor) -> Tensor:
    """Sum of w * max(0, -n . wo)^2 over samples (pre-flip normals)."""
    dot = (normals * wo).sum(-1)
    return (w * torch.relu(-dot) ** 2).sum()


def photometric_loss(rendered: Tensor, target: Tensor) -> Tensor:
    """MSE over pixels and channels of tonemapped values."""
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(rendered.shape)} vs {tuple(target.shape)}")
    return ((rendered - target) ** 2).mean()


class AdamState:
    """Adam with double-precision moments and per-group learning rates."""

    def __init__(self, groups: dict[str, list[torch.nn.Parameter]],
                 lrs: dict[str, float] | None = None):
        self.lrs = lrs or {"spatial": LR_SPATIAL, "network": LR_NETWORK}
        self.groups = groups
        self.step_count = 0
        self.m: dict[int, Tensor] = {}
        self.v: dict[int, Tensor] = {}
        for params in groups.values():
            for p in params:
                self.m[id(p)] = torch.zeros_like(p, dtype=torch.float64)
                self.v[id(p)] = torch.zeros_like(p, dtype=torch.float64)

    def reset_group(self, name: str, params: list[torch.nn.Parameter]) -> None:
        """Swap a parameter group (after grid upsampling); moments restart."""
        for p in self.groups[name]:
            self.m.pop(id(p), None)
            self.v.pop(id(p), None)
        self.groups[name] = params
        for p in params:
            self.m[id(p)] = torch.zeros_like(p, dtype=torch.float64)
            self.v[id(p)] = torch.zeros_like(p, dtype=torch.float64)


def adam_step(state: AdamState, multiplier: float = 1.0) -> None:
    """One bias-corrected Adam update from parameters' .grad fields."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    with torch.no_grad():
        for name, params in state.groups.items():
            lr = state.lrs[name] * multiplier
            for p in params:
                if p.grad is None:
                    continue
                g = p.grad.to(torch.float64)
                if not torch.isfinite(g).all():
                    raise FloatingPointError(f"non-finite gradient in group {name!r}")
                m = state.m[id(p)]
                v = state.v[id(p)]
                m.mul_(BETA1).add_(g, alpha=1.0 - BETA1)
                v.mul_(BETA2).addcmul_(g, g, value=1.0 - BETA2)
                update = (m / bc1) / ((v / bc2).sqrt() + EPS)
                p.add_((-lr * update).to(p.dtype))
                if not torch.isfinite(p).all():
                    raise FloatingPointError(f"non-finite parameter in group {name!r}")


@dataclass
class TrainConfig:
    n_steps: int = 30000
    batch_rays: int = 1024
    lambda_orientation: float = 1e-3
    warmup_steps: int = 100
    decay_total: float = 1e-3
    base_resolution: int = 32
    final_resolution: int = 300
    upsample_steps: tuple[int, ...] = (500, 1000, 2000, 3000, 4000, 5500, 7000)
    schedule_scale: float = 1.0  # scales step counts, not resolutions
    seed: int = 0
    log_every: int = 100
    snapshot_every: int = 0  # 0 disables snapshot renders
    checkpoint_every: int = 1000

    def scaled_upsample_steps(self) -> list[int]:
        return [max(1, round(s * self.schedule_scale)) for s in self.upsample_steps]

    def scaled_total(self) -> int:
        return max(1, round(self.n_steps * self.schedule_scale))


@dataclass
class TrainLogEntry:
    step: int
    loss: float
    psnr: float
    lr_mult: float


def train(
    model: SceneModel,
    dataset,
    tcfg: TrainConfig,
    rcfg: RenderConfig,
    out_dir: str | None = None,
    callback=None,
) -> list[TrainLogEntry]:
    """Optimize the scene against posed images.

    ``dataset`` provides .images (V,H,W,3 tensor of sRGB targets) and
    .cameras (list of Camera). Returns the scalar log; writes CSV, periodic
    checkpoints, and optional snapshot renders under ``out_dir``.
    """
    if len(dataset.cameras) < 1:
        raise ValueError("dataset must contain at least one posed image")
    dtype = model.env.log_values.dtype
    n_views = len(dataset.cameras)
    h, w = dataset.images.shape[1:3]

    # precompute all training rays (pixel-center jitter; marching jitter is
    # per-ray via the sample stream)
    all_origins, all_dirs, all_rgb, all_ids = [], [], [], []
    for vi, cam in enumerate(dataset.cameras):
        ys, xs = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
        px, py = xs.reshape(-1), ys.reshape(-1)
        jitter = torch.full((px.shape[0], 2), 0.5, dtype=dtype)
        o, d = gen_rays(cam, px, py, jitter)
        all_origins.append(o)
        all_dirs.append(d)
        all_rgb.append(dataset.images[vi].reshape(-1, 3).to(dtype))
        all_ids.append(np.arange(h * w, dtype=np.uint64) + np.uint64(vi * h * w))
    origins = torch.cat(all_origins)
    dirs = torch.cat(all_dirs)
    targets = torch.cat(all_rgb)
    ids = np.concatenate(all_ids)
    n_total_rays = origins.shape[0]

    gen = torch.Generator().manual_seed(tcfg.seed)
    state = AdamState(model.param_groups())

    n_steps = tcfg.scaled_total()
    up_steps = tcfg.scaled_upsample_steps()
    resolutions = upsample_schedule(
        tcfg.base_resolution, tcfg.final_resolution, len(up_steps)
    )
    upsample_at = dict(zip(up_steps, resolutions))

    log: list[TrainLogEntry] = []
    csv_writer = None
    csv_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_file = open(os.path.join(out_dir, "train_log.csv"), "w", newline="")
        csv_writer = csv.writer(csv_file)
        csv_writer.writerow(["step", "loss", "psnr", "lr_multiplier"])

    last_good = None
    try:
        for step in range(n_steps):
            if step in upsample_at:
                res = upsample_at[step]
                model.replace_grid(model.grid.upsample((res, res, res)))
                state.reset_group("spatial", model.param_groups()["spatial"])

            batch = torch.randint(0, n_total_rays, (tcfg.batch_rays,), generator=gen)
            model.env.mark_dirty()
            srgb, aux = render_rays(
                model,
                origins[batch],
                dirs[batch],
                ids[batch.numpy()],
                rcfg,
                return_aux=True,
            )
            loss = photometric_loss(srgb, targets[batch])
            if tcfg.lambda_orientation > 0 and aux["samples"] is not None:
                s = aux["samples"]
                wo = -dirs[batch][s["ray"]]
                loss = loss + tcfg.lambda_orientation * orientation_loss(
                    s["w"], s["normal"], wo
                ) / tcfg.batch_rays

            if not torch.isfinite(loss):
                raise FloatingPointError(f"loss diverged at step {step}")

            for params in state.groups.values():
                for p in params:
                    p.grad = None
            loss.backward()
            mult = lr_multiplier(
                step, n_w=max(1, round(tcfg.warmup_steps * tcfg.schedule_scale)),
                d_w=tcfg.decay_total, n_t=n_steps,
            )
            adam_step(state, mult)

            if step % tcfg.log_every == 0 or step == n_steps - 1:
                with torch.no_grad():
                    mse = photometric_loss(srgb, targets[batch]).item()
                psnr = 10.0 * math.log10(1.0 / mse) if mse > 0 else 99.0
                entry = TrainLogEntry(step, float(loss.item()), psnr, mult)
                log.append(entry)
                if csv_writer is not None:
                    csv_writer.writerow([step, entry.loss, entry.psnr, entry.lr_mult])
                    csv_file.flush()
                if callback is not None:
                    callback(step, model, entry)

            if out_dir is not None and (
                step == n_steps - 1
                or (tcfg.checkpoint_every > 0 and step % tcfg.checkpoint_every == 0)
            ):
                from .checkpoint import save_checkpoint

                path = os.path.join(out_dir, "checkpoint.nmf")
                save_checkpoint(path, model)
                last_good = path
    except FloatingPointError:
        if last_good is not None:
            raise FloatingPointError(
                f"training diverged; last good checkpoint at {last_good}"
            )
        raise
    finally:
        if csv_file is not None:
            csv_file.close()
    return log
