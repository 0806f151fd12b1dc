"""Far-field illumination: log-parameterized equirectangular radiance with
summed-area-table rectangle means and degree-2 spherical-harmonic irradiance.

Rows map to the polar angle theta in [0, pi], columns to azimuth phi in
[0, 2*pi); pixel (r, c) is centered at ((r+0.5)*pi/H, (c+0.5)*2*pi/W).
Radiance is exp(log_values), so it is positive by construction and the
optimizer works in log space.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor, nn

from .materials import sh_encode

# clamped-cosine convolution constants for SH bands 0..2
A_BANDS = (math.pi, 2.0 * math.pi / 3.0, math.pi / 4.0)


class EnvironmentMap(nn.Module):
    """H x W x 3 log-radiance image plus cached SAT and irradiance SH.

    The caches depend on ``log_values`` and must be rebuilt after every
    optimizer step (``rebuild``); queries check a staleness counter.
    """

    def __init__(self, height: int = 512, width: int = 1024, init_value: float = 0.5,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if height < 4 or width < 4:
            raise ValueError("environment map must be at least 4x4")
        self.height = height
        self.width = width
        self.log_values = nn.Parameter(
            torch.full((height, width, 3), math.log(init_value), dtype=dtype)
        )
        self._sat: Tensor | None = None
        self._sh: Tensor | None = None
        self._version = 0
        self._cache_version = -1

    def mark_dirty(self) -> None:
        self._version += 1

    def rebuild(self) -> None:
        """Recompute the SAT and irradiance SH from current log values."""
        rad = torch.exp(self.log_values)
        # accumulate in double so large-rectangle means stay accurate
        sat = torch.zeros(
            (self.height + 1, self.width + 1, 3), dtype=torch.float64, device=rad.device
        )
        sat[1:, 1:] = rad.to(torch.float64).cumsum(0).cumsum(1)
        self._sat = sat
        self._sh = self._project_sh(rad)
        self._cache_version = self._version

    def _require_fresh(self) -> None:
        if self._sat is None or self._cache_version != self._version:
            self.rebuild()

    @property
    def sat(self) -> Tensor:
        self._require_fresh()
        return self._sat

    @property
    def irradiance_sh(self) -> Tensor:
        """(9, 3) degree-2 SH coefficients of the radiance."""
        self._require_fresh()
        return self._sh

    def _pixel_dirs(self) -> Tensor:
        theta = (torch.arange(self.height, dtype=self.log_values.dtype) + 0.5) * (
            math.pi / self.height
        )
        phi = (torch.arange(self.width, dtype=self.log_values.dtype) + 0.5) * (
            2.0 * math.pi / self.width
        )
        t, p = torch.meshgrid(theta, phi, indexing="ij")
        st = torch.sin(t)
        return torch.stack([st * torch.cos(p), st * torch.sin(p), torch.cos(t)], -1), st

    def _project_sh(self, rad: Tensor) -> Tensor:
        dirs, sin_t = self._pixel_dirs()
        basis = sh_encode(dirs, degree=2)  # (H, W, 9)
        d_omega = (math.pi / self.height) * (2.0 * math.pi / self.width)
        return torch.einsum("hwk,hwc->kc", basis * sin_t.unsqueeze(-1), rad) * d_omega

    def radiance_at(self, theta: Tensor, phi: Tensor) -> Tensor:
        """Nearest-pixel radiance; phi wraps, theta clamps to [0, pi]."""
        theta = torch.as_tensor(theta, dtype=self.log_values.dtype)
        phi = torch.as_tensor(phi, dtype=self.log_values.dtype)
        r = (theta / math.pi * self.height).long().clamp(0, self.height - 1)
        c = torch.remainder(phi / (2.0 * math.pi) * self.width, self.width).long()
        c = c.clamp(0, self.width - 1)
        return torch.exp(self.log_values[r, c])

    def radiance_toward(self, d: Tensor) -> Tensor:
        """Nearest-pixel radiance along unit direction(s) d."""
        theta, phi = dir_to_angles(d)
        return self.radiance_at(theta, phi)

    def mean_query(self, theta: Tensor, phi: Tensor, dtheta: Tensor, dphi: Tensor) -> Tensor:
        """Mean radiance over the pixel rectangle covering
        [theta +- dtheta/2] x [phi +- dphi/2].

        Azimuth wraps across the seam (split into two SAT lookups); polar
        edges clamp at the poles. The footprint is at least one pixel.
        """
        self._require_fresh()
        dt = self.log_values.dtype
        theta = torch.as_tensor(theta, dtype=dt).reshape(-1)
        phi = torch.as_tensor(phi, dtype=dt).reshape(-1)
        dtheta = torch.as_tensor(dtheta, dtype=dt).reshape(-1).expand_as(theta)
        dphi = torch.as_tensor(dphi, dtype=dt).reshape(-1).expand_as(theta)

        h, w = self.height, self.width
        # fractional pixel bounds, rounded outward to whole pixels
        r0 = torch.floor((theta - dtheta / 2) / math.pi * h).long().clamp(0, h - 1)
        r1 = torch.ceil((theta + dtheta / 2) / math.pi * h).long().clamp(1, h)
        r1 = torch.maximum(r1, r0 + 1)

        phi = torch.remainder(phi, 2.0 * math.pi)
        c0f = torch.floor((phi - dphi / 2) / (2.0 * math.pi) * w).long()
        c1f = torch.ceil((phi + dphi / 2) / (2.0 * math.pi) * w).long()
        c1f = torch.minimum(torch.maximum(c1f, c0f + 1), c0f + w)

        n_rows = (r1 - r0).to(dt)
        n_cols = (c1f - c0f).to(dt)

        sat = self._sat

        def col_sum(c0: Tensor, c1: Tensor) -> Tensor:
            # column range [c0, c1) with wraparound, c1 - c0 in [0, w]
            c0m = torch.remainder(c0, w)
            c1m = c0m + (c1 - c0)
            wrap = c1m > w
            c1a = torch.where(wrap, torch.full_like(c1m, w), c1m)
            s = _sat_rect(sat, r0, r1, c0m, c1a)
            s_wrap = _sat_rect(sat, r0, r1, torch.zeros_like(c0m), c1m - w)
            return s + torch.where(wrap.unsqueeze(-1), s_wrap, torch.zeros_like(s_wrap))

        total = col_sum(c0f, c1f)
        return (total / (n_rows * n_cols).to(total.dtype).unsqueeze(-1)).to(dt)

    def to_image(self) -> Tensor:
        return torch.exp(self.log_values.detach())


def _sat_rect(sat: Tensor, r0: Tensor, r1: Tensor, c0: Tensor, c1: Tensor) -> Tensor:
    """Sum of radiance over rows [r0, r1) and columns [c0, c1)."""
    empty = (c1 <= c0).unsqueeze(-1)
    c1 = torch.maximum(c1, c0)
    s = sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]
    return torch.where(empty, torch.zeros_like(s), s)


def dir_to_angles(d: Tensor) -> tuple[Tensor, Tensor]:
    """Unit direction -> (theta, phi) with theta in [0, pi], phi in [0, 2*pi)."""
    theta = torch.acos(d[..., 2].clamp(-1.0, 1.0))
    phi = torch.remainder(torch.atan2(d[..., 1], d[..., 0]), 2.0 * math.pi)
    return theta, phi


def rect_size(pdf: Tensor, theta: Tensor, n_samples: Tensor | float, height: int,
              width: int) -> tuple[Tensor, Tensor]:
    """Prefilter footprint for one importance sample.

    dphi = sqrt(2*pi^2 * (N / (H*W)) * p), dtheta = dphi * sin(theta); the
    rectangle then covers N*p / d pixels where d = HW / (2*pi^2 sin(theta))
    is the pixel density.
    """
    pdf = torch.as_tensor(pdf)
    theta = torch.as_tensor(theta, dtype=pdf.dtype)
    n = torch.as_tensor(n_samples, dtype=pdf.dtype)
    sin_t = torch.sin(theta).clamp_min(1e-4)
    dphi = torch.sqrt(2.0 * math.pi**2 * (n / (height * width)) * pdf)
    return dphi * sin_t, dphi


def irradiance(shc: Tensor, n: Tensor) -> Tensor:
    """Clamped-cosine irradiance E(n) from degree-2 SH coefficients (9, 3)."""
    basis = sh_encode(n, degree=2)  # (..., 9)
    a = torch.tensor(
        [A_BANDS[0]] + [A_BANDS[1]] * 3 + [A_BANDS[2]] * 5,
        dtype=basis.dtype,
        device=basis.device,
    )
    e = torch.einsum("...k,kc->...c", basis * a, shc.to(basis.dtype))
    return e.clamp_min(0.0)


def project_sh(env: EnvironmentMap) -> Tensor:
    return env.irradiance_sh


# ---------------------------------------------------------------------------
# PFM import/export ("PF\n{W} {H}\n-1.0\n" + bottom-up little-endian floats)


def write_pfm(path: str, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an HxWx3 image")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(b"PF\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(image[::-1].astype("<f4").tobytes())


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"PF":
            raise ValueError(f"{path}: not a color PFM file")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        data = np.frombuffer(fh.read(w * h * 3 * 4), dtype="<f4" if scale < 0 else ">f4")
    return data.reshape(h, w, 3)[::-1].copy()


def env_from_image(image: np.ndarray, dtype: torch.dtype = torch.float32) -> EnvironmentMap:
    h, w, _ = image.shape
    env = EnvironmentMap(h, w, dtype=dtype)
    with torch.no_grad():
        env.log_values.copy_(torch.log(torch.as_tensor(image.copy(), dtype=dtype).clamp_min(1e-8)))
    env.mark_dirty()
    return env
