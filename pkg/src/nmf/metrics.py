"""Image and normal-map quality metrics."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor


def psnr(pred: Tensor, target: Tensor, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio in dB for values in [0, 1], capped."""
    mse = float(((pred - target) ** 2).mean())
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def mae_normals(
    pred: Tensor, gt: Tensor, gt_opacity: Tensor, missing_deg: float = 90.0
) -> float:
    """Opacity-weighted mean angular error of a normal map, in degrees.

    ``pred`` rows with (near-)zero norm count as ``missing_deg`` wherever the
    ground truth is opaque.
    """
    pn = pred.reshape(-1, 3).double()
    gn = gt.reshape(-1, 3).double()
    op = gt_opacity.reshape(-1).double()
    pl = pn.norm(dim=-1)
    gl = gn.norm(dim=-1).clamp_min(1e-12)
    dot = ((pn / pl.clamp_min(1e-12).unsqueeze(-1)) * (gn / gl.unsqueeze(-1))).sum(-1)
    ang = torch.rad2deg(torch.arccos(dot.clamp(-1.0, 1.0)))
    ang = torch.where(pl > 1e-6, ang, torch.full_like(ang, missing_deg))
    return float((op * ang).mean())


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter2(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # separable 'valid' convolution along both spatial axes
    from numpy.lib.stride_tricks import sliding_window_view

    n = win.size
    out = sliding_window_view(img, n, axis=0) @ win
    out = sliding_window_view(out, n, axis=1) @ win
    return out


def ssim(pred: Tensor, target: Tensor, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Channels are scored independently and averaged; inputs are (H, W, C) or
    (H, W) in [0, 1].
    """
    a = pred.detach().cpu().numpy().astype(np.float64)
    b = target.detach().cpu().numpy().astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = _gaussian_window()
    c1 = k1**2
    c2 = k2**2
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mu_x = _filter2(x, win)
        mu_y = _filter2(y, win)
        sxx = _filter2(x * x, win) - mu_x**2
        syy = _filter2(y * y, win) - mu_y**2
        sxy = _filter2(x * y, win) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
        scores.append((num / den).mean())
    return float(np.mean(scores))
