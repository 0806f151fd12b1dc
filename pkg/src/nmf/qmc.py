"""Deterministic low-discrepancy sampling and microfacet direction sampling.

Sobol points (32-bit, Joe-Kuo direction numbers) with hash-based
nested-uniform Owen scrambling and Cranley-Patterson rotation, plus
visible-normal (Trowbridge-Reitz) half-vector sampling and the mirror
reflection map with its Jacobian.

Everything here is a pure function of (seed, id, bounce, index, dim), so
renders are bitwise reproducible across machines and worker counts.
"""

from __future__ import annotations

import numpy as np

from ._sobol_data import POLY, VINIT

_BITS = 32
_N_DIMS = len(POLY)


def _build_direction_vectors() -> np.ndarray:
    """32-bit Sobol direction vectors, shape (dims, 32)."""
    v = np.zeros((_N_DIMS, _BITS), dtype=np.uint64)
    for j in range(_N_DIMS):
        if j == 0:
            for k in range(_BITS):
                v[0, k] = 1 << (_BITS - 1 - k)
            continue
        p = POLY[j]
        s = p.bit_length() - 1
        m = list(VINIT[j])
        assert len(m) == s, (j, p, m)
        for k in range(s, _BITS):
            new = m[k - s] ^ (m[k - s] << s)
            for i in range(1, s):
                a_i = (p >> (s - i)) & 1
                if a_i:
                    new ^= m[k - i] << i
            m.append(new)
        for k in range(_BITS):
            v[j, k] = m[k] << (_BITS - 1 - k)
    return v


_V = _build_direction_vectors()


def _sobol_int(index: np.ndarray, dim: np.ndarray) -> np.ndarray:
    """Raw (unscrambled) Sobol integers in [0, 2^32)."""
    index = np.asarray(index, dtype=np.uint64)
    dim = np.asarray(dim, dtype=np.int64)
    # Gray-code construction: xor direction vectors of the set bits of
    # gray(index).  Vectorized over a batch of indices.
    gray = index ^ (index >> np.uint64(1))
    out = np.zeros(np.broadcast(index, dim).shape, dtype=np.uint64)
    vd = _V[dim]  # (..., 32)
    for k in range(_BITS):
        bit = (gray >> np.uint64(k)) & np.uint64(1)
        out ^= bit * vd[..., k]
    return out


def _mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer; the documented hash behind all stream seeding."""
    x = np.asarray(x, dtype=np.uint64).copy()
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def hash_combine(*values: int | np.ndarray) -> np.ndarray:
    """Order-sensitive 64-bit hash of integer values."""
    h = np.uint64(0x9E3779B97F4A7C15)
    for val in values:
        h = _mix64(h ^ np.asarray(val, dtype=np.uint64))
    return h


def _reverse_bits32(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint32)
    x = ((x & np.uint32(0x55555555)) << np.uint32(1)) | ((x >> np.uint32(1)) & np.uint32(0x55555555))
    x = ((x & np.uint32(0x33333333)) << np.uint32(2)) | ((x >> np.uint32(2)) & np.uint32(0x33333333))
    x = ((x & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | ((x >> np.uint32(4)) & np.uint32(0x0F0F0F0F))
    x = ((x & np.uint32(0x00FF00FF)) << np.uint32(8)) | ((x >> np.uint32(8)) & np.uint32(0x00FF00FF))
    return (x << np.uint32(16)) | (x >> np.uint32(16))


def _laine_karras(x: np.ndarray, seed: np.ndarray) -> np.ndarray:
    """Hash whose avalanching only travels toward high bits; applied on
    reversed bits this permutes each dyadic interval independently of the
    bits below it, which is exactly the nested-uniform (Owen) property."""
    x = np.asarray(x, dtype=np.uint32).copy()
    x += np.asarray(seed, dtype=np.uint64).astype(np.uint32)
    x ^= x * np.uint32(0x6C50B47C)
    x ^= x * np.uint32(0xB82F1E52)
    x ^= x * np.uint32(0xC7AFE638)
    x ^= x * np.uint32(0x8D22F6E6)
    return x


def _owen_scramble32(x: np.ndarray, seed: np.ndarray) -> np.ndarray:
    return _reverse_bits32(_laine_karras(_reverse_bits32(x), seed))


def sobol_owen(index, dim, seed: int) -> np.ndarray | float:
    """Owen-scrambled Sobol point(s) in [0, 1).

    ``index`` and ``dim`` broadcast; the scramble tree is keyed on
    (seed, dim) so dimensions stay mutually unpredictable.
    """
    scalar = np.isscalar(index) and np.isscalar(dim)
    index = np.atleast_1d(np.asarray(index, dtype=np.uint64))
    dim = np.atleast_1d(np.asarray(dim, dtype=np.int64))
    if np.any(dim >= _N_DIMS):
        raise ValueError(f"sobol dimension must be < {_N_DIMS}")
    raw = _sobol_int(index, dim).astype(np.uint32)
    tree_seed = hash_combine(np.uint64(seed), dim.astype(np.uint64))
    scrambled = _owen_scramble32(raw, tree_seed)
    u = scrambled.astype(np.float64) * (2.0 ** -32)
    return float(u[0]) if scalar else u


def cp_rotate(u, offset):
    """Cranley-Patterson rotation: (u + offset) mod 1."""
    return np.mod(np.asarray(u, dtype=np.float64) + offset, 1.0)


class SampleStream:
    """Reproducible per-(id, bounce) 2D sample allocator.

    Each (primary_sample_id, bounce) pair owns Sobol dimensions
    (2*bounce, 2*bounce+1) and consumes indices 0..n-1, decorrelated across
    ids by a hashed Cranley-Patterson offset so no sample is reused.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def allocate(self, primary_sample_id: int, bounce: int, n: int) -> np.ndarray:
        """``n`` 2D points in [0,1)^2, shape (n, 2)."""
        if n < 0:
            raise ValueError("sample count must be >= 0")
        if n == 0:
            return np.zeros((0, 2), dtype=np.float64)
        dims = np.array([2 * bounce, 2 * bounce + 1], dtype=np.int64)
        idx = np.arange(n, dtype=np.uint64)[:, None]
        u = sobol_owen(idx, dims[None, :], self.seed)
        off = hash_combine(
            np.uint64(self.seed),
            np.uint64(primary_sample_id),
            np.uint64(bounce),
            dims.astype(np.uint64),
        ).astype(np.float64) * (2.0 ** -64)
        return cp_rotate(u, off[None, :])

    def uniform(self, tag: int, n: int) -> np.ndarray:
        """``n`` scalar hash-based uniforms for auxiliary decisions
        (retrace noise); pure in (seed, tag, index)."""
        idx = np.arange(n, dtype=np.uint64)
        return hash_combine(np.uint64(self.seed), np.uint64(tag), idx).astype(
            np.float64
        ) * (2.0 ** -64)


def reflect(wo: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror ``wo`` about half vector ``h``: wi = 2(wo.h)h - wo.

    Returns (wi, jacobian) with jacobian = 4(wo.h), the half-vector to
    incident-direction density conversion factor.
    """
    wo = np.asarray(wo, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    d = np.sum(wo * h, axis=-1, keepdims=True)
    wi = 2.0 * d * h - wo
    return wi, 4.0 * d[..., 0]


def smith_g1_scalar(cos_nv, alpha):
    cos_nv = np.asarray(cos_nv, dtype=np.float64)
    a2 = alpha * alpha
    g = 2.0 * cos_nv / (cos_nv + np.sqrt(a2 + (1.0 - a2) * cos_nv * cos_nv))
    return np.where(cos_nv > 0.0, g, 0.0)


def tr_d_scalar(cos_nh, alpha):
    cos_nh = np.asarray(cos_nh, dtype=np.float64)
    a2 = alpha * alpha
    denom = cos_nh * cos_nh * (a2 - 1.0) + 1.0
    return np.where(cos_nh > 0.0, a2 / (np.pi * denom * denom), 0.0)


def vndf_pdf_local(h: np.ndarray, wo: np.ndarray, alpha) -> np.ndarray:
    """Solid-angle density of the visible-normal distribution in the local
    frame (n = +z): G1(wo) max(0, wo.h) D(h) / wo.z; 0 below the horizon
    and for microfacets facing away from the view direction."""
    h = np.asarray(h, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    cos_nh = h[..., 2]
    cos_nv = wo[..., 2]
    woh = np.maximum(np.sum(wo * h, axis=-1), 0.0)
    d = tr_d_scalar(cos_nh, alpha)
    g1 = smith_g1_scalar(cos_nv, alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        pdf = g1 * woh * d / np.abs(cos_nv)
    return np.where((cos_nh > 0.0) & (cos_nv > 0.0), pdf, 0.0)


def sample_vndf(u1, u2, wo_local: np.ndarray, alpha) -> tuple[np.ndarray, np.ndarray]:
    """Sample visible Trowbridge-Reitz normals (Heitz's construction).

    ``wo_local`` must be in the shading frame with z > 0. Returns
    (h_local, pdf), vectorized over leading axes.
    """
    wo = np.asarray(wo_local, dtype=np.float64)
    if np.any(wo[..., 2] <= 0.0):
        raise ValueError("view direction must be in the upper hemisphere")
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)

    # stretch the view vector so the problem becomes alpha = 1
    vh = np.stack([alpha * wo[..., 0], alpha * wo[..., 1], wo[..., 2]], axis=-1)
    vh /= np.linalg.norm(vh, axis=-1, keepdims=True)

    lensq = vh[..., 0] ** 2 + vh[..., 1] ** 2
    safe = np.sqrt(np.maximum(lensq, 1e-20))
    t1 = np.where(
        (lensq > 1e-14)[..., None],
        np.stack([-vh[..., 1] / safe, vh[..., 0] / safe, np.zeros_like(safe)], axis=-1),
        np.broadcast_to(np.array([1.0, 0.0, 0.0]), vh.shape),
    )
    t2 = np.cross(vh, t1)

    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    p1 = r * np.cos(phi)
    p2 = r * np.sin(phi)
    s = 0.5 * (1.0 + vh[..., 2])
    p2 = (1.0 - s) * np.sqrt(np.maximum(0.0, 1.0 - p1 * p1)) + s * p2
    p3 = np.sqrt(np.maximum(0.0, 1.0 - p1 * p1 - p2 * p2))
    nh = p1[..., None] * t1 + p2[..., None] * t2 + p3[..., None] * vh

    # unstretch
    h = np.stack(
        [alpha * nh[..., 0], alpha * nh[..., 1], np.maximum(nh[..., 2], 1e-9)], axis=-1
    )
    h /= np.linalg.norm(h, axis=-1, keepdims=True)
    return h, vndf_pdf_local(h, wo, alpha)
