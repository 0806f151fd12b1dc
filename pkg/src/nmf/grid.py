"""Low-rank vector-matrix factored density/feature field.

The field follows the TensoRF-style VM decomposition: three plane factors
(XY, XZ, YZ) paired with line factors along the complementary axis (Z, Y,
X). The raw density at a point is the rank-sum of plane*line products over
all three pairs, passed through softplus; features are the concatenated
per-rank products mapped through a learned linear basis.

Queries outside the bounding box return density 0 and the zero feature.
Normals are the negative normalized gradient of the activated density,
estimated with a Gaussian-smoothed central-difference stencil on the voxel
lattice and trilinearly interpolated to the query point.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

# plane axes and the complementary line axis for the three VM pairs
MAT_MODE = ((0, 1), (0, 2), (1, 2))
VEC_MODE = (2, 1, 0)

_GAUSS = (0.25, 0.5, 0.25)  # 3-tap Gaussian, sigma = 1, normalized


class FactorGrid(nn.Module):
    def __init__(
        self,
        resolution: tuple[int, int, int] = (32, 32, 32),
        density_rank: int = 8,
        feature_rank: int = 24,
        feature_dim: int = 16,
        bbox: tuple[tuple[float, float, float], tuple[float, float, float]] = (
            (-1.4, -1.4, -1.4),
            (1.4, 1.4, 1.4),
        ),
        init_scale: float = 0.1,
        dtype: torch.dtype = torch.float32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if any(r < 2 for r in resolution):
            raise ValueError("resolution must be >= 2 on every axis")
        if density_rank < 1 or feature_rank < 1:
            raise ValueError("ranks must be >= 1")
        self.resolution = tuple(int(r) for r in resolution)
        self.density_rank = density_rank
        self.feature_rank = feature_rank
        self.feature_dim = feature_dim
        lo, hi = bbox
        self.register_buffer("bbox_lo", torch.tensor(lo, dtype=dtype))
        self.register_buffer("bbox_hi", torch.tensor(hi, dtype=dtype))

        def init(*shape):
            t = torch.empty(*shape, dtype=dtype)
            t.uniform_(-init_scale, init_scale, generator=generator)
            return nn.Parameter(t)

        res = self.resolution
        self.density_planes = nn.ParameterList(
            init(density_rank, res[a], res[b]) for a, b in MAT_MODE
        )
        self.density_lines = nn.ParameterList(
            init(density_rank, res[c]) for c in VEC_MODE
        )
        self.feature_planes = nn.ParameterList(
            init(feature_rank, res[a], res[b]) for a, b in MAT_MODE
        )
        self.feature_lines = nn.ParameterList(
            init(feature_rank, res[c]) for c in VEC_MODE
        )
        basis = torch.empty(3 * feature_rank, feature_dim, dtype=dtype)
        basis.uniform_(-init_scale, init_scale, generator=generator)
        self.feature_basis = nn.Parameter(basis)

    @property
    def dtype(self) -> torch.dtype:
        return self.bbox_lo.dtype

    def voxel_size(self) -> Tensor:
        res = torch.tensor(
            self.resolution, dtype=self.dtype, device=self.bbox_lo.device
        )
        return (self.bbox_hi - self.bbox_lo) / (res - 1)

    def _to_grid(self, p: Tensor) -> tuple[Tensor, Tensor]:
        """World points -> continuous voxel coordinates and inside mask."""
        inside = ((p >= self.bbox_lo) & (p <= self.bbox_hi)).all(-1)
        res = torch.tensor(self.resolution, dtype=p.dtype, device=p.device)
        u = (p - self.bbox_lo) / (self.bbox_hi - self.bbox_lo) * (res - 1)
        return u.clamp(torch.zeros_like(res), res - 1), inside

    def _raw_density(self, u: Tensor) -> Tensor:
        """Pre-activation density at continuous voxel coordinates (P, 3)."""
        total = torch.zeros(u.shape[:-1], dtype=u.dtype, device=u.device)
        for i, (a, b) in enumerate(MAT_MODE):
            pl = _interp_plane(self.density_planes[i], u[..., a], u[..., b])
            ln = _interp_line(self.density_lines[i], u[..., VEC_MODE[i]])
            total = total + (pl * ln).sum(-1)
        return total

    def sample_density(self, p: Tensor) -> Tensor:
        """Activated density softplus(raw); zero outside the bounding box."""
        u, inside = self._to_grid(p)
        sigma = F.softplus(self._raw_density(u))
        return torch.where(inside, sigma, torch.zeros_like(sigma))

    def sample_feature(self, p: Tensor) -> Tensor:
        u, inside = self._to_grid(p)
        prods = []
        for i, (a, b) in enumerate(MAT_MODE):
            pl = _interp_plane(self.feature_planes[i], u[..., a], u[..., b])
            ln = _interp_line(self.feature_lines[i], u[..., VEC_MODE[i]])
            prods.append(pl * ln)
        x = torch.cat(prods, dim=-1) @ self.feature_basis
        return torch.where(inside.unsqueeze(-1), x, torch.zeros_like(x))

    def _lattice_density(self, idx: Tensor) -> Tensor:
        """Activated density at integer lattice coordinates (..., 3), with
        replicate clamping at the borders."""
        res = torch.tensor(self.resolution, device=idx.device)
        idx = idx.clamp(torch.zeros_like(res), res - 1)
        total = torch.zeros(idx.shape[:-1], dtype=self.dtype, device=idx.device)
        for i, (a, b) in enumerate(MAT_MODE):
            pl = self.density_planes[i][:, idx[..., a], idx[..., b]]
            ln = self.density_lines[i][:, idx[..., VEC_MODE[i]]]
            total = total + (pl * ln).sum(0)
        return F.softplus(total)

    def normal_at(self, p: Tensor) -> tuple[Tensor, Tensor]:
        """Unit outward normals -grad(sigma)/|grad(sigma)| at points inside
        the bounding box.

        Returns (normals, valid); where ``valid`` is False the gradient
        vanished and the normal is the zero vector.
        """
        u, inside = self._to_grid(p)
        if not bool(inside.all()):
            raise ValueError("normal query outside the bounding box")
        res = torch.tensor(self.resolution, device=p.device)
        base = u.floor().long().clamp(torch.zeros_like(res), res - 2)
        frac = (u - base).to(self.dtype)

        corner_off = _corner_offsets(p.device)  # (8, 3)
        stencil_off, stencil_w = _stencil(self.dtype, p.device)  # (27,3), (3,27)
        # lattice sites: corners of the containing cell + the 27-point
        # stencil. Neighboring sites overlap heavily (each point touches only
        # a 4^3 block), so evaluate unique sites once and scatter back. Keys
        # live on a one-voxel-padded virtual lattice so they stay separable
        # (base key + offset key); padding collapses to border replication.
        off = (corner_off[:, None, :] + stencil_off[None, :, :]).reshape(-1, 3)  # (216,3)
        vr1, vr2 = res[1] + 2, res[2] + 2
        key_base = ((base[..., 0] + 1) * vr1 + (base[..., 1] + 1)) * vr2 + (base[..., 2] + 1)
        key_off = (off[:, 0] * vr1 + off[:, 1]) * vr2 + off[:, 2]
        key = (key_base.reshape(-1, 1) + key_off).reshape(-1)
        uniq, inv = _unique_keys(key, int((res[0] + 2) * vr1 * vr2))
        coords = torch.stack(
            [uniq // (vr1 * vr2), (uniq // vr2) % vr1, uniq % vr2], -1
        ) - 1
        sigma = self._lattice_density(coords)[inv].reshape(*base.shape[:-1], 8, 27)
        h = self.voxel_size()
        grad_corner = torch.einsum("...ck,dk->...cd", sigma, stencil_w) / h  # (..., 8, 3)

        w = _trilinear_weights(frac)  # (..., 8)
        grad = (grad_corner * w.unsqueeze(-1)).sum(-2)
        norm = grad.norm(dim=-1, keepdim=True)
        valid = norm.squeeze(-1) > 1e-12
        n = torch.where(valid.unsqueeze(-1), -grad / norm.clamp_min(1e-30), torch.zeros_like(grad))
        return n, valid

    def upsample(self, new_resolution: tuple[int, int, int]) -> "FactorGrid":
        """Linearly resample all factors to a finer lattice.

        Returns a new grid; optimizer moments for its parameters start from
        zero by construction.
        """
        new_resolution = tuple(int(r) for r in new_resolution)
        if any(n < o for n, o in zip(new_resolution, self.resolution)):
            raise ValueError("upsample cannot reduce resolution")
        out = FactorGrid.__new__(FactorGrid)
        nn.Module.__init__(out)
        out.resolution = new_resolution
        out.density_rank = self.density_rank
        out.feature_rank = self.feature_rank
        out.feature_dim = self.feature_dim
        out.register_buffer("bbox_lo", self.bbox_lo.clone())
        out.register_buffer("bbox_hi", self.bbox_hi.clone())

        def up_plane(plane: Tensor, a: int, b: int) -> nn.Parameter:
            resized = F.interpolate(
                plane.detach()[None],
                size=(new_resolution[a], new_resolution[b]),
                mode="bilinear",
                align_corners=True,
            )[0]
            return nn.Parameter(resized)

        def up_line(line: Tensor, c: int) -> nn.Parameter:
            resized = F.interpolate(
                line.detach()[None],
                size=new_resolution[c],
                mode="linear",
                align_corners=True,
            )[0]
            return nn.Parameter(resized)

        out.density_planes = nn.ParameterList(
            up_plane(self.density_planes[i], a, b) for i, (a, b) in enumerate(MAT_MODE)
        )
        out.density_lines = nn.ParameterList(
            up_line(self.density_lines[i], c) for i, c in enumerate(VEC_MODE)
        )
        out.feature_planes = nn.ParameterList(
            up_plane(self.feature_planes[i], a, b) for i, (a, b) in enumerate(MAT_MODE)
        )
        out.feature_lines = nn.ParameterList(
            up_line(self.feature_lines[i], c) for i, c in enumerate(VEC_MODE)
        )
        out.feature_basis = nn.Parameter(self.feature_basis.detach().clone())
        return out


def upsample_schedule(base: int, final: int, n_events: int) -> list[int]:
    """Per-event target resolutions, linear in resolution from base to final."""
    return [round(base + (final - base) * k / n_events) for k in range(1, n_events + 1)]


def _interp_plane(plane: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """Bilinear interpolation of a (R, Ha, Wb) factor plane; returns (..., R)."""
    ha, wb = plane.shape[1], plane.shape[2]
    a0 = a.floor().long().clamp(0, ha - 2)
    b0 = b.floor().long().clamp(0, wb - 2)
    fa = (a - a0).to(plane.dtype).unsqueeze(-1)
    fb = (b - b0).to(plane.dtype).unsqueeze(-1)
    v00 = plane[:, a0, b0].movedim(0, -1)
    v01 = plane[:, a0, b0 + 1].movedim(0, -1)
    v10 = plane[:, a0 + 1, b0].movedim(0, -1)
    v11 = plane[:, a0 + 1, b0 + 1].movedim(0, -1)
    return (
        v00 * (1 - fa) * (1 - fb)
        + v01 * (1 - fa) * fb
        + v10 * fa * (1 - fb)
        + v11 * fa * fb
    )


def _interp_line(line: Tensor, c: Tensor) -> Tensor:
    """Linear interpolation of a (R, Hc) factor line; returns (..., R)."""
    hc = line.shape[1]
    c0 = c.floor().long().clamp(0, hc - 2)
    fc = (c - c0).to(line.dtype).unsqueeze(-1)
    v0 = line[:, c0].movedim(0, -1)
    v1 = line[:, c0 + 1].movedim(0, -1)
    return v0 * (1 - fc) + v1 * fc


def _unique_keys(key: Tensor, n_cells: int) -> tuple[Tensor, Tensor]:
    """Unique values and inverse indices for bounded non-negative int keys.

    Uses a dense occupancy table (no sort) when the key space is small
    enough; falls back to torch.unique for very fine lattices.
    """
    if n_cells <= 1 << 25:
        mark = torch.zeros(n_cells, dtype=torch.bool, device=key.device)
        mark[key] = True
        uniq = mark.nonzero(as_tuple=False).squeeze(-1)
        lut = torch.zeros(n_cells, dtype=torch.long, device=key.device)
        lut[uniq] = torch.arange(uniq.shape[0], device=key.device)
        return uniq, lut[key]
    return torch.unique(key, return_inverse=True)


def _corner_offsets(device) -> Tensor:
    o = torch.tensor(
        [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], device=device
    )
    return o


def _trilinear_weights(frac: Tensor) -> Tensor:
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    w = []
    for i in (0, 1):
        for j in (0, 1):
            for k in (0, 1):
                w.append(
                    (fx if i else 1 - fx) * (fy if j else 1 - fy) * (fz if k else 1 - fz)
                )
    return torch.stack(w, dim=-1)


_STENCIL_CACHE: dict = {}


def _stencil(dtype: torch.dtype, device) -> tuple[Tensor, Tensor]:
    """27-point offsets and per-axis derivative weights (3, 27).

    For axis d: central difference along d (spacing one voxel) smoothed by
    the normalized 3-tap Gaussian along the two orthogonal axes.
    """
    key = (dtype, device)
    if key in _STENCIL_CACHE:
        return _STENCIL_CACHE[key]
    offs = []
    weights = [[], [], []]
    for i in (-1, 0, 1):
        for j in (-1, 0, 1):
            for k in (-1, 0, 1):
                offs.append((i, j, k))
                o = (i, j, k)
                for d in range(3):
                    od = o[d]
                    if od == 0:
                        weights[d].append(0.0)
                        continue
                    others = [o[a] for a in range(3) if a != d]
                    g = _GAUSS[others[0] + 1] * _GAUSS[others[1] + 1]
                    weights[d].append(od * g / 2.0)
    result = (
        torch.tensor(offs, device=device),
        torch.tensor(weights, dtype=dtype, device=device),
    )
    _STENCIL_CACHE[key] = result
    return result
