import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmf import qmc


def test_sobol_matches_reference_generator_bitwise():
    scipy_qmc = pytest.importorskip("scipy.stats.qmc")
    n, d = 256, 16
    ref = scipy_qmc.Sobol(d, scramble=False, bits=32).random(n)
    idx = np.arange(n, dtype=np.uint64)[:, None]
    dims = np.arange(d, dtype=np.int64)[None, :]
    ours = qmc._sobol_int(idx, dims)
    assert np.array_equal(ours.astype(np.float64) * 2.0**-32, ref)


def test_owen_scrambling_preserves_stratification():
    # scrambled points remain a (0,2)-net: every dyadic interval of size
    # 1/256 in each dimension receives exactly one of 256 points
    idx = np.arange(256, dtype=np.uint64)[:, None]
    dims = np.array([[0, 1]], dtype=np.int64)
    for seed in (1, 7, 1234):
        pts = qmc.sobol_owen(idx, dims, seed)
        for d in range(2):
            cells = np.floor(pts[:, d] * 256).astype(int)
            assert sorted(cells) == list(range(256))


def test_owen_scrambling_differs_by_seed_and_dim():
    idx = np.arange(64, dtype=np.uint64)[:, None]
    a = qmc.sobol_owen(idx, np.array([[0]], dtype=np.int64), 1)
    b = qmc.sobol_owen(idx, np.array([[0]], dtype=np.int64), 2)
    c = qmc.sobol_owen(idx, np.array([[1]], dtype=np.int64), 1)
    assert not np.allclose(a, b)
    assert not np.allclose(a, c)


def test_hash_combine_is_deterministic_and_sensitive():
    a = qmc.hash_combine(np.uint64(1), np.uint64(2), np.uint64(3))
    b = qmc.hash_combine(np.uint64(1), np.uint64(2), np.uint64(3))
    c = qmc.hash_combine(np.uint64(1), np.uint64(2), np.uint64(4))
    assert a == b
    assert a != c


@given(st.floats(0, 1, exclude_max=True), st.floats(0, 1, exclude_max=True))
def test_cp_rotation_wraps_into_unit_interval(u, off):
    r = qmc.cp_rotate(np.array([u]), np.array([off]))
    assert 0.0 <= r[0] < 1.0
    assert math.isclose((u + off) % 1.0, r[0], abs_tol=1e-12)


def test_reflect_reverses_to_mirror_direction():
    rng = np.random.default_rng(0)
    wo = rng.normal(size=(100, 3))
    wo /= np.linalg.norm(wo, axis=-1, keepdims=True)
    h = rng.normal(size=(100, 3))
    h /= np.linalg.norm(h, axis=-1, keepdims=True)
    h *= np.sign((wo * h).sum(-1, keepdims=True))  # sampled h faces the viewer
    wi, jac = qmc.reflect(wo, h)
    assert np.allclose(np.linalg.norm(wi, axis=-1), 1.0, atol=1e-12)
    # incident and outgoing make equal angles with the half vector
    assert np.allclose((wi * h).sum(-1), (wo * h).sum(-1), atol=1e-12)
    assert np.allclose(jac, 4.0 * (wo * h).sum(-1), atol=1e-12)


def _hemisphere_quadrature(f, n_theta=512, n_phi=1024):
    th = (np.arange(n_theta) + 0.5) / n_theta * (math.pi / 2)
    ph = (np.arange(n_phi) + 0.5) / n_phi * (2 * math.pi)
    theta, phi = np.meshgrid(th, ph, indexing="ij")
    d = np.stack(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)],
        axis=-1,
    ).reshape(-1, 3)
    w = (np.sin(theta) * (math.pi / 2 / n_theta) * (2 * math.pi / n_phi)).reshape(-1)
    return (f(d) * w).sum()


@pytest.mark.parametrize("alpha", [0.1, 0.5, 1.0])
@pytest.mark.parametrize("cos_v", [1.0, 0.7, 0.3])
def test_visible_normal_density_integrates_to_one(alpha, cos_v):
    wo = np.array([math.sqrt(1 - cos_v**2), 0.0, cos_v])

    def pdf(h):
        return qmc.vndf_pdf_local(h, np.broadcast_to(wo, h.shape), np.full(len(h), alpha))

    total = _hemisphere_quadrature(pdf)
    assert abs(total - 1.0) < 1e-2


def test_sampled_half_vectors_match_their_density():
    # histogram of cos(theta_h) from sampling vs integral of the pdf
    alpha, cos_v = 0.4, 0.8
    wo = np.array([math.sqrt(1 - cos_v**2), 0.0, cos_v])
    n = 1 << 14
    idx = np.arange(n, dtype=np.uint64)[:, None]
    u = qmc.sobol_owen(idx, np.array([[0, 1]], dtype=np.int64), 9)
    h, pdf = qmc.sample_vndf(
        u[:, 0], u[:, 1], np.broadcast_to(wo, (n, 3)).copy(), np.full(n, alpha)
    )
    assert np.all(h[:, 2] > 0)
    assert np.allclose(np.linalg.norm(h, axis=-1), 1.0, atol=1e-6)
    assert np.allclose(pdf, qmc.vndf_pdf_local(h, np.broadcast_to(wo, (n, 3)), np.full(n, alpha)), rtol=1e-4)
    # MC estimate of hemisphere area weighted by 1/pdf recovers 2*pi region
    # covered by the lobe: E[1/pdf] = area measure of support
    est = (1.0 / pdf).mean()
    direct = _hemisphere_quadrature(lambda d: np.ones(len(d)))  # = 2*pi
    assert est <= direct + 1e-6


def test_stream_points_are_reproducible_and_distinct_per_bounce():
    s1 = qmc.SampleStream(seed=5)
    s2 = qmc.SampleStream(seed=5)
    a = s1.allocate(3, bounce=0, n=4)
    b = s2.allocate(3, bounce=0, n=4)
    c = s2.allocate(3, bounce=1, n=4)
    d = s2.allocate(9, bounce=0, n=4)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)
    assert not np.allclose(a, d)
    assert a.shape == (4, 2)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_bit_reversal_is_an_involution(x):
    assert qmc._reverse_bits32(np.uint32(qmc._reverse_bits32(np.uint32(x)))) == x
