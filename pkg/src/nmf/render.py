"""Forward rendering pipeline.

Primary rays march through the density field with stratified quadrature;
each sample is shaded by Monte Carlo integration over visible-normal half
vectors, with a per-sample secondary-ray budget floor(w * M), selective
retracing of the highest-contribution secondaries, prefiltered environment
lookups for the rest, and sRGB tonemapping at the end.

All stages are batched over rays; randomness is a pure function of
(seed, ray id, bounce, sample index), so images are bitwise reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from . import qmc
from .envmap import dir_to_angles, irradiance, rect_size
from .materials import fresnel_schlick, full_brdf, shading_frame

_MARCH_TAG = 0x4D41
_NOISE_TAG = 0x4E4F


@dataclass
class Camera:
    """Pinhole camera, NeRF-Blender convention: looks along -z, y up."""

    width: int
    height: int
    angle_x: float
    pose: Tensor  # (4, 4) camera-to-world

    def __post_init__(self):
        if not (0.0 < self.angle_x < math.pi):
            raise ValueError("horizontal field of view must be in (0, pi)")
        rot = self.pose[:3, :3]
        err = (rot @ rot.T - torch.eye(3, dtype=rot.dtype)).abs().max().item()
        if err > 1e-4:
            raise ValueError(f"camera rotation is not orthonormal (err {err:.2e})")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(0.5 * self.angle_x)


@dataclass
class RenderConfig:
    max_secondary: int = 128  # M, per primary ray
    retrace_budget: int = 16  # R <= M
    max_bounces: int = 2
    samples_per_ray: int = 128
    near: float = 2.0
    far: float = 6.0
    early_stop: float = 1e-4  # transmittance threshold
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    secondary_samples_per_ray: int = 48
    secondary_near: float = 0.05
    secondary_far: float = 4.0
    weight_cutoff: float = 1e-4  # samples below this contribute diffuse-free zero
    retrace_noise_frac: float = 0.1  # x median multiplier
    prefilter_max_phi: float = 0.5  # cap on the light-lookup footprint (radians)
    chunk: int = 4096

    def __post_init__(self):
        if self.retrace_budget > self.max_secondary:
            raise ValueError("retrace budget cannot exceed the secondary budget")
        if min(self.max_secondary, self.retrace_budget, self.max_bounces) < 0:
            raise ValueError("budgets must be nonnegative")


class RenderStats:
    """Diagnostic counters (non-finite shading terms converted to zero)."""

    def __init__(self):
        self.nonfinite_terms = 0


def gen_rays(
    camera: Camera, px: Tensor, py: Tensor, jitter: Tensor
) -> tuple[Tensor, Tensor]:
    """Rays through jittered pixel positions (px + u, py + v).

    Returns (origins, directions), both (N, 3), directions unit length.
    The shading view direction is the negated ray direction.
    """
    dtype = camera.pose.dtype
    f = camera.focal
    x = (px.to(dtype) + jitter[..., 0].to(dtype) - 0.5 * camera.width) / f
    y = -(py.to(dtype) + jitter[..., 1].to(dtype) - 0.5 * camera.height) / f
    d_cam = torch.stack([x, y, -torch.ones_like(x)], dim=-1)
    d_cam = d_cam / d_cam.norm(dim=-1, keepdim=True)
    rot = camera.pose[:3, :3]
    d_world = d_cam @ rot.T
    origins = camera.pose[:3, 3].expand_as(d_world)
    return origins, d_world


def tonemap(linear: Tensor) -> Tensor:
    """Linear radiance -> sRGB in [0, 1] (standard transfer, then clip)."""
    x = linear.clamp_min(0.0)
    low = 12.92 * x
    high = 1.055 * x.clamp_min(1e-8) ** (1.0 / 2.4) - 0.055
    return torch.where(x <= 0.0031308, low, high).clamp(0.0, 1.0)


def march(
    origins: Tensor,
    dirs: Tensor,
    scene,
    n_samples: int,
    near: float,
    far: float,
    jitter: Tensor,
    early_stop: float = 0.0,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Stratified quadrature along rays.

    One jitter value per ray offsets all strata. Returns
    (t (N,S), positions (N,S,3), weights (N,S), residual transmittance (N,)).
    Weights after the transmittance drops below ``early_stop`` are zeroed.
    """
    n = origins.shape[0]
    dt = (far - near) / n_samples
    steps = torch.arange(n_samples, dtype=origins.dtype, device=origins.device)
    t = near + (steps[None, :] + jitter[:, None]) * dt
    p = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    sigma = scene.density(p.reshape(-1, 3)).reshape(n, n_samples)
    tau = sigma * dt
    # exclusive prefix transmittance
    cum = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(cum[:, :1]), cum[:, :-1]], dim=-1))
    w = trans * (1.0 - torch.exp(-tau))
    t_res = torch.exp(-cum[:, -1])
    if early_stop > 0.0:
        alive = trans > early_stop
        w = torch.where(alive, w, torch.zeros_like(w))
        t_res = torch.maximum(t_res, torch.full_like(t_res, 0.0))
        # residual includes everything not emitted
        t_res = 1.0 - w.sum(-1)
    return t, p, w, t_res


def _ray_uniform(seed: int, tag: int, ids: np.ndarray) -> np.ndarray:
    return qmc.hash_combine(np.uint64(seed), np.uint64(tag), ids.astype(np.uint64)).astype(
        np.float64
    ) * (2.0 ** -64)


def _segment_mean(values: Tensor, seg: Tensor, n_seg: int) -> Tensor:
    out = torch.zeros((n_seg,) + values.shape[1:], dtype=values.dtype, device=values.device)
    out.index_add_(0, seg, values)
    cnt = torch.zeros(n_seg, dtype=values.dtype, device=values.device)
    cnt.index_add_(0, seg, torch.ones(values.shape[0], dtype=values.dtype))
    return out / cnt.clamp_min(1.0).reshape((-1,) + (1,) * (values.dim() - 1))


def shade_points(
    scene,
    p: Tensor,
    wo: Tensor,
    w: Tensor,
    ray_index: Tensor,
    ray_ids: np.ndarray,
    n_rays: int,
    cfg: RenderConfig,
    depth: int,
    stats: RenderStats | None = None,
    override_n: int | None = None,
) -> Tensor:
    """Outgoing radiance at a batch of marching samples.

    ``ray_index`` maps each point to its row in the ray batch; ``ray_ids``
    are the global ids used to key the sample stream. ``override_n`` forces
    the secondary count per point (test/oracle use) instead of floor(w*M).
    """
    dtype = p.dtype
    n_pts = p.shape[0]
    out = torch.zeros((n_pts, 3), dtype=dtype)
    if n_pts == 0:
        return out

    normals, valid = scene.normal(p)
    # flip toward the camera; keep pre-flip normals for the orientation loss
    flip = torch.sign((normals * wo).sum(-1, keepdim=True))
    flip = torch.where(flip == 0, torch.ones_like(flip), flip)
    normals = normals * flip

    mat = scene.material(p)
    env = scene.env
    e_irr = irradiance(env.irradiance_sh, normals)

    # zero-flag normals: no specular, ambient-band diffuse only
    if bool((~valid).any()):
        sh0 = env.irradiance_sh[0].to(dtype)
        e_amb = (math.pi * 0.28209479177387814 * sh0).clamp_min(0.0)
        diff_flat = (1.0 - mat.f0) * mat.albedo / math.pi * e_amb
        out = torch.where(valid.unsqueeze(-1), out, diff_flat)

    active = valid.clone()
    if override_n is None:
        n_sec = (w.detach() * cfg.max_secondary).floor().long()
    else:
        n_sec = torch.full((n_pts,), override_n, dtype=torch.long)
    n_sec = torch.where(active, n_sec, torch.zeros_like(n_sec))

    # floor(w M) == 0: diffuse-only fallback with the Fresnel factor at h = n
    fallback = active & (n_sec == 0)
    if bool(fallback.any()):
        fr_n = mat.f0  # cos(n, wo->h=n) = 1 -> Fr = F0
        diff = (1.0 - fr_n) * mat.albedo / math.pi * e_irr
        out = torch.where(fallback.unsqueeze(-1), diff, out)

    shaded = active & (n_sec > 0)
    if not bool(shaded.any()):
        return out

    sel = torch.nonzero(shaded, as_tuple=False).squeeze(-1)
    counts = n_sec[sel]
    idx_pt = torch.repeat_interleave(sel, counts)  # (K,) point of each secondary
    k_total = int(idx_pt.shape[0])

    # rank of each secondary within its primary ray (the Sobol index)
    r_of_k = ray_index[idx_pt]
    counts_per_ray = torch.zeros(n_rays, dtype=torch.long)
    counts_per_ray.index_add_(0, r_of_k, torch.ones_like(r_of_k))
    ray_start = torch.cumsum(counts_per_ray, 0) - counts_per_ray
    rank = torch.arange(k_total) - ray_start[r_of_k]

    # low-discrepancy 2D points, Cranley-Patterson shifted per (ray id, bounce)
    dims = np.array([2 * depth, 2 * depth + 1], dtype=np.uint64)
    ids_k = ray_ids[r_of_k.numpy()]
    u = qmc.sobol_owen(rank.numpy().astype(np.uint64)[:, None], dims[None, :].astype(np.int64), cfg.seed)
    off = np.stack(
        [
            qmc.hash_combine(np.uint64(cfg.seed), ids_k, np.uint64(depth), d).astype(np.float64)
            * 2.0**-64
            for d in dims
        ],
        axis=-1,
    )
    u = qmc.cp_rotate(u, off)

    # sampling decisions are detached: directions come from numpy
    n_k = normals[idx_pt]
    frame = shading_frame(n_k.detach())
    wo_k = wo[idx_pt]
    wo_local = torch.einsum("kij,kj->ki", frame, wo_k.detach())
    wo_local_np = wo_local.numpy().copy()
    wo_local_np[:, 2] = np.maximum(wo_local_np[:, 2], 1e-6)
    alpha_np = mat.alpha.detach()[idx_pt].numpy()
    h_local_np, pdf_h_np = qmc.sample_vndf(u[:, 0], u[:, 1], wo_local_np, alpha_np)

    h_local = torch.from_numpy(h_local_np).to(dtype)
    h_world = torch.einsum("kij,ki->kj", frame, h_local)
    wi, jac = qmc.reflect(wo_k.detach().numpy(), h_world.numpy())
    wi_t = torch.from_numpy(wi).to(dtype)
    pdf_wi_np = pdf_h_np / np.maximum(jac, 1e-9)

    # differentiable shading terms
    cos_oh = (h_world * wo_k).sum(-1)
    fr = fresnel_schlick(mat.f0[idx_pt], cos_oh)
    d_frame = shading_frame(h_world)
    d_local = torch.einsum("kij,kj->ki", d_frame, wi_t)
    g = scene.gain_net.from_locals(mat.feature[idx_pt], h_local, d_local)

    # reflected directions below the surface carry no specular energy
    # (truncated cosine); their diffuse term still counts
    above = torch.from_numpy((wi * n_k.detach().numpy()).sum(-1) > 0.0)

    # incoming light: prefiltered environment lookup by default
    theta, phi = dir_to_angles(wi_t)
    n_for_rect = counts.to(dtype)[torch.repeat_interleave(torch.arange(sel.shape[0]), counts)]
    dth, dph = rect_size(
        torch.from_numpy(pdf_wi_np).to(dtype), theta, n_for_rect, env.height, env.width
    )
    # very peaked densities ask for footprints wider than the light itself
    # varies; cap the lookup window so sharp lobes keep their local radiance
    dph = dph.clamp_max(cfg.prefilter_max_phi)
    dth = dph * torch.sin(theta).clamp_min(1e-4)
    li = env.mean_query(theta, phi, dth, dph)

    # selective retracing of the highest-contribution secondaries
    if depth < cfg.max_bounces and cfg.retrace_budget > 0:
        w_k = w.detach()[idx_pt]
        mult = (w_k.unsqueeze(-1) * g.detach()).max(dim=-1).values.numpy()
        noise_scale = cfg.retrace_noise_frac * float(np.median(mult)) if k_total else 0.0
        noise = _ray_uniform(cfg.seed, _NOISE_TAG + depth, ids_k * np.uint64(1315423911) + rank.numpy().astype(np.uint64))
        key = mult + noise * noise_scale
        key[~above.numpy()] = -np.inf  # below-horizon rays carry no light
        retrace = _select_topk_per_segment(key, r_of_k.numpy(), n_rays, cfg.retrace_budget)
        if retrace.any():
            ridx = torch.from_numpy(np.nonzero(retrace)[0])
            sub_ids = qmc.hash_combine(
                ids_k[retrace], np.uint64(depth + 1), rank.numpy().astype(np.uint64)[retrace]
            )
            li_traced = _radiance_along_rays(
                scene,
                p[idx_pt[ridx]].detach(),
                wi_t[ridx],
                sub_ids,
                cfg,
                depth + 1,
                env_footprint=(dth[ridx], dph[ridx]),
                stats=stats,
            )
            li = li.index_put((ridx,), li_traced)

    above_f = above.unsqueeze(-1).to(dtype)
    spec = fr * g * li * above_f
    # diffuse Fresnel factor averaged over realizable (above-horizon) half
    # vectors only; below-horizon reflections have no matching incident
    # direction in the surface integral
    diff_num = (1.0 - fr) * above_f
    bad = ~torch.isfinite(spec)
    if bool(bad.any()):
        if stats is not None:
            stats.nonfinite_terms += int(bad.sum())
        spec = torch.where(bad, torch.zeros_like(spec), spec)

    spec_pt = _segment_mean(spec, idx_pt, n_pts)
    above_sum = torch.zeros(n_pts, dtype=dtype)
    above_sum.index_add_(0, idx_pt, above.to(dtype))
    diff_sum = torch.zeros((n_pts, 3), dtype=dtype)
    diff_sum.index_add_(0, idx_pt, diff_num)
    one_minus_fr = torch.where(
        (above_sum > 0).unsqueeze(-1),
        diff_sum / above_sum.clamp_min(1.0).unsqueeze(-1),
        1.0 - mat.f0,  # no realizable sample: Fresnel at h = n
    )
    per_point = spec_pt + one_minus_fr * (mat.albedo / math.pi) * e_irr
    out = torch.where(shaded.unsqueeze(-1), per_point, out)
    return out


def _select_topk_per_segment(
    key: np.ndarray, seg: np.ndarray, n_seg: int, k: int
) -> np.ndarray:
    """Boolean mask selecting the k largest keys within each segment."""
    if key.size == 0:
        return np.zeros(0, dtype=bool)
    order = np.lexsort((-key, seg))
    seg_sorted = seg[order]
    starts = np.searchsorted(seg_sorted, np.arange(n_seg))
    rank_in_seg = np.arange(key.size) - starts[seg_sorted]
    mask = np.zeros(key.size, dtype=bool)
    mask[order] = rank_in_seg < k
    return mask


def _radiance_along_rays(
    scene,
    origins: Tensor,
    dirs: Tensor,
    ids: np.ndarray,
    cfg: RenderConfig,
    depth: int,
    env_footprint: tuple[Tensor, Tensor] | None = None,
    stats: RenderStats | None = None,
) -> Tensor:
    """Volume-rendered radiance of secondary rays.

    Escaped energy (residual transmittance) picks up the environment along
    the ray direction, using the caller's prefilter footprint when given.
    """
    n = origins.shape[0]
    jitter = torch.from_numpy(_ray_uniform(cfg.seed, _MARCH_TAG + depth, ids)).to(origins.dtype)
    t, p, w, t_res = march(
        origins,
        dirs,
        scene,
        cfg.secondary_samples_per_ray,
        cfg.secondary_near,
        cfg.secondary_far,
        jitter,
        cfg.early_stop,
    )
    ray_index = (
        torch.arange(n).unsqueeze(-1).expand(-1, cfg.secondary_samples_per_ray)
    )
    keep = w > cfg.weight_cutoff
    flat_keep = keep.reshape(-1)
    colors = torch.zeros((n, 3), dtype=origins.dtype)
    if bool(flat_keep.any()):
        p_f = p.reshape(-1, 3)[flat_keep]
        w_f = w.reshape(-1)[flat_keep]
        r_f = ray_index.reshape(-1)[flat_keep]
        wo = -dirs[r_f]
        shade = shade_points(
            scene, p_f, wo, w_f, r_f, ids, n, cfg, depth, stats=stats
        )
        colors.index_add_(0, r_f, w_f.unsqueeze(-1) * shade)

    theta, phi = dir_to_angles(dirs)
    if env_footprint is not None:
        bg = scene.env.mean_query(theta, phi, env_footprint[0], env_footprint[1])
    else:
        bg = scene.env.radiance_at(theta, phi)
    return colors + t_res.unsqueeze(-1) * bg


def render_rays(
    scene,
    origins: Tensor,
    dirs: Tensor,
    ray_ids: np.ndarray,
    cfg: RenderConfig,
    stats: RenderStats | None = None,
    return_aux: bool = False,
):
    """Tonemapped colors for a batch of primary rays.

    With ``return_aux`` also returns linear radiance, accumulated opacity,
    the normal map numerator, and the orientation-loss ingredients
    (pre-flip normals are recomputed by the loss from sample positions).
    """
    n = origins.shape[0]
    jitter = torch.from_numpy(_ray_uniform(cfg.seed, _MARCH_TAG, ray_ids)).to(origins.dtype)
    t, p, w, _ = march(
        origins, dirs, scene, cfg.samples_per_ray, cfg.near, cfg.far, jitter, cfg.early_stop
    )
    s = cfg.samples_per_ray
    ray_index = torch.arange(n).unsqueeze(-1).expand(-1, s)
    keep = w > cfg.weight_cutoff
    flat_keep = keep.reshape(-1)

    linear = torch.zeros((n, 3), dtype=origins.dtype)
    normal_acc = torch.zeros((n, 3), dtype=origins.dtype)
    aux_samples = None
    if bool(flat_keep.any()):
        p_f = p.reshape(-1, 3)[flat_keep]
        w_f = w.reshape(-1)[flat_keep]
        r_f = ray_index.reshape(-1)[flat_keep]
        wo = -dirs[r_f]
        shade = shade_points(
            scene, p_f, wo, w_f, r_f, ray_ids, n, cfg, depth=0, stats=stats
        )
        linear.index_add_(0, r_f, w_f.unsqueeze(-1) * shade)
        if return_aux:
            n_f, valid_f = scene.normal(p_f)
            normal_acc.index_add_(0, r_f, w_f.unsqueeze(-1) * n_f)
            aux_samples = {"p": p_f, "w": w_f, "ray": r_f, "normal": n_f, "valid": valid_f}

    opacity = w.sum(-1)
    bg = torch.tensor(cfg.background, dtype=origins.dtype)
    composited = linear + (1.0 - opacity).unsqueeze(-1) * bg
    srgb = tonemap(composited)
    if not return_aux:
        return srgb
    return srgb, {
        "linear": composited,
        "opacity": opacity,
        "normal_acc": normal_acc,
        "samples": aux_samples,
    }


def render_image(scene, camera: Camera, cfg: RenderConfig, return_aux: bool = False):
    """Full-frame render; pixels are chunked, ids are pixel indices."""
    h, w = camera.height, camera.width
    ys, xs = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    px = xs.reshape(-1)
    py = ys.reshape(-1)
    ids = (py * w + px).numpy().astype(np.uint64)
    jitter = torch.full((px.shape[0], 2), 0.5, dtype=camera.pose.dtype)
    origins, dirs = gen_rays(camera, px, py, jitter)

    srgb = torch.zeros((h * w, 3), dtype=camera.pose.dtype)
    aux_lin = torch.zeros_like(srgb)
    aux_op = torch.zeros(h * w, dtype=camera.pose.dtype)
    aux_nrm = torch.zeros_like(srgb)
    with torch.no_grad():
        for i in range(0, h * w, cfg.chunk):
            sl = slice(i, min(i + cfg.chunk, h * w))
            if return_aux:
                out, aux = render_rays(
                    scene, origins[sl], dirs[sl], ids[sl], cfg, return_aux=True
                )
                aux_lin[sl] = aux["linear"]
                aux_op[sl] = aux["opacity"]
                acc = aux["normal_acc"]
                aux_nrm[sl] = acc
            else:
                out = render_rays(scene, origins[sl], dirs[sl], ids[sl], cfg)
            srgb[sl] = out
    img = srgb.reshape(h, w, 3)
    if not return_aux:
        return img
    nrm = aux_nrm.reshape(h, w, 3)
    nlen = nrm.norm(dim=-1, keepdim=True)
    nrm = torch.where(nlen > 1e-6, nrm / nlen.clamp_min(1e-30), torch.zeros_like(nrm))
    return img, {
        "linear": aux_lin.reshape(h, w, 3),
        "opacity": aux_op.reshape(h, w),
        "normal": nrm,
    }


def brute_force_shade(
    p: Tensor,
    n: Tensor,
    mat,
    env,
    gain_net,
    wo: Tensor,
    resolution: tuple[int, int] = (128, 256),
) -> Tensor:
    """Quadrature oracle for single-point surface shading.

    Integrates BRDF * incident radiance * clamped cosine over the sphere on
    an equirectangular node grid; incident light is the raw environment
    (no prefiltering, no occlusion). Test-only path.
    """
    ht, wd = resolution
    if ht < 64 or wd < 128:
        raise ValueError("quadrature grid must be at least 64x128")
    dtype = p.dtype
    th = (torch.arange(ht, dtype=dtype) + 0.5) * (math.pi / ht)
    ph = (torch.arange(wd, dtype=dtype) + 0.5) * (2.0 * math.pi / wd)
    t, f = torch.meshgrid(th, ph, indexing="ij")
    st = torch.sin(t)
    wi = torch.stack([st * torch.cos(f), st * torch.sin(f), torch.cos(t)], -1).reshape(-1, 3)
    cos = (wi * n).sum(-1).clamp_min(0.0)
    used = cos > 0
    wi_u = wi[used]
    li = env.radiance_at(*dir_to_angles(wi_u))
    m = wi_u.shape[0]

    from .materials import MaterialSample

    mat_b = MaterialSample(
        alpha=mat.alpha.expand(m),
        albedo=mat.albedo.expand(m, 3),
        f0=mat.f0.expand(m, 3),
        feature=mat.feature.expand(m, mat.feature.shape[-1]),
    )
    f_val = full_brdf(wo.expand(m, 3), wi_u, n.expand(m, 3), mat_b, gain_net)
    d_omega = (math.pi / ht) * (2.0 * math.pi / wd)
    integrand = f_val * li * cos[used].unsqueeze(-1) * st.reshape(-1)[used].unsqueeze(-1)
    return integrand.sum(0) * d_omega
