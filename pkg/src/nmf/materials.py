"""Material decoding and BRDF terms.

Per-point materials (roughness, albedo, normal-incidence reflectance) come
from a single sigmoid linear layer over the field features; the specular
lobe is Trowbridge-Reitz times Smith G1 times a learned RGB gain network
evaluated on spherical-harmonic encodings of the half/difference vectors.

All functions are batched over leading tensor dimensions and are pure given
fixed weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

ALPHA_MIN = 0.01


@dataclass
class MaterialSample:
    """Decoded material at a batch of points; tensors share leading shape."""

    alpha: Tensor  # (..., )
    albedo: Tensor  # (..., 3)
    f0: Tensor  # (..., 3)
    feature: Tensor  # (..., feature_dim)


class MaterialDecoder(nn.Module):
    """Single linear layer with sigmoid heads for (alpha, albedo, F0)."""

    def __init__(self, feature_dim: int, alpha_min: float = ALPHA_MIN):
        super().__init__()
        self.alpha_min = alpha_min
        self.linear = nn.Linear(feature_dim, 7)

    def forward(self, x: Tensor) -> MaterialSample:
        out = torch.sigmoid(self.linear(x))
        alpha = self.alpha_min + (1.0 - self.alpha_min) * out[..., 0]
        return MaterialSample(alpha=alpha, albedo=out[..., 1:4], f0=out[..., 4:7], feature=x)


def decode_material(x: Tensor, decoder: MaterialDecoder) -> MaterialSample:
    return decoder(x)


def fresnel_schlick(f0: Tensor, cos_oh: Tensor) -> Tensor:
    """Schlick reflectance F0 + (1-F0)(1-cos)^5, broadcast over RGB."""
    cos_oh = cos_oh.clamp(0.0, 1.0)
    return f0 + (1.0 - f0) * (1.0 - cos_oh.unsqueeze(-1)) ** 5


def tr_distribution(cos_nh: Tensor, alpha: Tensor | float) -> Tensor:
    """Trowbridge-Reitz NDF; zero below the horizon."""
    alpha = torch.as_tensor(alpha, dtype=cos_nh.dtype, device=cos_nh.device)
    if torch.any(alpha <= 0):
        raise ValueError("roughness must be positive")
    a2 = alpha * alpha
    denom = cos_nh * cos_nh * (a2 - 1.0) + 1.0
    d = a2 / (math.pi * denom * denom)
    return torch.where(cos_nh > 0, d, torch.zeros_like(d))


def smith_g1(cos_nv: Tensor, alpha: Tensor | float) -> Tensor:
    """Smith masking for Trowbridge-Reitz: 2c / (c + sqrt(a^2 + (1-a^2)c^2))."""
    alpha = torch.as_tensor(alpha, dtype=cos_nv.dtype, device=cos_nv.device)
    a2 = alpha * alpha
    g = 2.0 * cos_nv / (cos_nv + torch.sqrt(a2 + (1.0 - a2) * cos_nv * cos_nv))
    return torch.where(cos_nv > 0, g, torch.zeros_like(g))


def shading_frame(n: Tensor) -> Tensor:
    """Rows (T, B, n) of the local frame with T = normalize(z_hat x n).

    Falls back to the x axis when n is parallel to z. Returns (..., 3, 3);
    multiplying a world vector by this matrix expresses it locally with the
    normal along +z.
    """
    if torch.any(n.norm(dim=-1) < 1e-8):
        raise ValueError("zero normal has no shading frame")
    z = torch.zeros_like(n)
    z[..., 2] = 1.0
    t = torch.linalg.cross(z, n)
    tlen = t.norm(dim=-1, keepdim=True)
    x = torch.zeros_like(n)
    x[..., 0] = 1.0
    t_fallback = torch.linalg.cross(x, n)
    t = torch.where(tlen < 1e-6, t_fallback, t)
    t = t / t.norm(dim=-1, keepdim=True)
    b = torch.linalg.cross(n, t)
    return torch.stack([t, b, n], dim=-2)


def half_diff_encode(wo: Tensor, wi: Tensor, n: Tensor) -> tuple[Tensor, Tensor]:
    """Rusinkiewicz half/difference vectors in the local shading frame."""
    s = wo + wi
    slen = s.norm(dim=-1, keepdim=True)
    if torch.any(slen < 1e-8):
        raise ValueError("antiparallel directions have no half vector")
    h_world = s / slen
    fn = shading_frame(n)
    h_local = torch.einsum("...ij,...j->...i", fn, h_world)
    fh = shading_frame(h_world)
    d_local = torch.einsum("...ij,...j->...i", fh, wi)
    return h_local, d_local


# real orthonormal spherical harmonics, degrees 0..4 (25 values)
_SH_C = {
    "c1": 0.4886025119029199,
    "c2a": 1.0925484305920792,
    "c2b": 0.31539156525252005,
    "c2c": 0.5462742152960396,
    "c3a": 0.5900435899266435,
    "c3b": 2.890611442640554,
    "c3c": 0.4570457994644658,
    "c3d": 0.3731763325901154,
    "c3e": 1.445305721320277,
    "c4a": 2.5033429417967046,
    "c4b": 1.7701307697799304,
    "c4c": 0.9461746957575601,
    "c4d": 0.6690465435572892,
    "c4e": 0.10578554691520431,
    "c4f": 0.47308734787878004,
    "c4g": 0.6258357354491761,
}


def sh_encode(v: Tensor, degree: int = 4) -> Tensor:
    """Real spherical harmonic basis values Y_l^m(v), l = 0..degree,
    ordered (l, m) with m = -l..l; (degree+1)^2 outputs."""
    if degree > 4:
        raise ValueError("encodings above degree 4 are not implemented")
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    x2, y2, z2 = x * x, y * y, z * z
    c = _SH_C
    out = [torch.full_like(x, 0.28209479177387814)]
    if degree >= 1:
        out += [c["c1"] * y, c["c1"] * z, c["c1"] * x]
    if degree >= 2:
        out += [
            c["c2a"] * x * y,
            c["c2a"] * y * z,
            c["c2b"] * (3.0 * z2 - 1.0),
            c["c2a"] * x * z,
            c["c2c"] * (x2 - y2),
        ]
    if degree >= 3:
        out += [
            c["c3a"] * y * (3.0 * x2 - y2),
            c["c3b"] * x * y * z,
            c["c3c"] * y * (5.0 * z2 - 1.0),
            c["c3d"] * z * (5.0 * z2 - 3.0),
            c["c3c"] * x * (5.0 * z2 - 1.0),
            c["c3e"] * z * (x2 - y2),
            c["c3a"] * x * (x2 - 3.0 * y2),
        ]
    if degree >= 4:
        out += [
            c["c4a"] * x * y * (x2 - y2),
            c["c4b"] * y * z * (3.0 * x2 - y2),
            c["c4c"] * x * y * (7.0 * z2 - 1.0),
            c["c4d"] * y * z * (7.0 * z2 - 3.0),
            c["c4e"] * (35.0 * z2 * z2 - 30.0 * z2 + 3.0),
            c["c4d"] * x * z * (7.0 * z2 - 3.0),
            c["c4f"] * (x2 - y2) * (7.0 * z2 - 1.0),
            c["c4b"] * x * z * (x2 - 3.0 * y2),
            c["c4g"] * (x2 * x2 - 6.0 * x2 * y2 + y2 * y2),
        ]
    return torch.stack(out, dim=-1)


class GainNetwork(nn.Module):
    """RGB gain over the analytic specular lobe.

    Input: degree-4 SH encodings of the local half and difference vectors
    concatenated with the field feature. Two hidden layers of width 64,
    sigmoid output. ``identity`` mode returns (1,1,1) (the analytic-only
    ablation).
    """

    def __init__(self, feature_dim: int, hidden: int = 64, mode: str = "neural"):
        super().__init__()
        if mode not in ("neural", "identity"):
            raise ValueError(f"unknown gain mode {mode!r}")
        self.mode = mode
        self.feature_dim = feature_dim
        in_dim = 50 + feature_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 3),
        )

    def forward(self, x: Tensor, wo: Tensor, wi: Tensor, n: Tensor) -> Tensor:
        if self.mode == "identity":
            shape = x.shape[:-1] + (3,)
            return torch.ones(shape, dtype=x.dtype, device=x.device)
        h_local, d_local = half_diff_encode(wo, wi, n)
        inp = torch.cat([sh_encode(h_local), sh_encode(d_local), x], dim=-1)
        return torch.sigmoid(self.net(inp))

    def from_locals(self, x: Tensor, h_local: Tensor, d_local: Tensor) -> Tensor:
        """Same as forward but with precomputed local half/difference vectors."""
        if self.mode == "identity":
            shape = x.shape[:-1] + (3,)
            return torch.ones(shape, dtype=x.dtype, device=x.device)
        inp = torch.cat([sh_encode(h_local), sh_encode(d_local), x], dim=-1)
        return torch.sigmoid(self.net(inp))


def gain(x: Tensor, wo: Tensor, wi: Tensor, n: Tensor, net: GainNetwork) -> Tensor:
    return net(x, wo, wi, n)


def specular_brdf(
    wo: Tensor, wi: Tensor, n: Tensor, m: MaterialSample, net: GainNetwork
) -> Tensor:
    """Reference specular lobe D * G1(wo) * g / (4 cosNV cosNL).

    Test/oracle path; the production renderer importance-samples the same
    terms instead of evaluating this density directly.
    """
    cos_nv = (n * wo).sum(-1)
    cos_nl = (n * wi).sum(-1)
    h = wo + wi
    h = h / h.norm(dim=-1, keepdim=True)
    cos_nh = (n * h).sum(-1)
    d = tr_distribution(cos_nh, m.alpha)
    g1 = smith_g1(cos_nv, m.alpha)
    g = net(m.feature, wo, wi, n)
    denom = (4.0 * cos_nv * cos_nl).clamp_min(1e-7)
    return d.unsqueeze(-1) * g1.unsqueeze(-1) * g / denom.unsqueeze(-1)


def full_brdf(
    wo: Tensor, wi: Tensor, n: Tensor, m: MaterialSample, net: GainNetwork
) -> Tensor:
    """Diffuse + Fresnel-weighted specular: (rho/pi)(1-Fr) + Fr*fs."""
    h = wo + wi
    h = h / h.norm(dim=-1, keepdim=True)
    fr = fresnel_schlick(m.f0, (h * wo).sum(-1))
    fs = specular_brdf(wo, wi, n, m, net)
    return m.albedo / math.pi * (1.0 - fr) + fr * fs
