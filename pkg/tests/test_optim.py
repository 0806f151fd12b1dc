"""Optimizer, schedule, and loss tests."""

import math

import pytest
import torch

from nmf.optim import (
    BETA1,
    BETA2,
    EPS,
    AdamState,
    TrainConfig,
    adam_step,
    lr_multiplier,
    orientation_loss,
    photometric_loss,
)


def test_lr_multiplier_reference_values():
    assert lr_multiplier(0) == pytest.approx(0.1, rel=1e-4)
    assert lr_multiplier(100) == pytest.approx(0.97724, rel=1e-4)
    assert lr_multiplier(30000) == pytest.approx(1e-3, rel=1e-4)


def test_lr_multiplier_warmup_is_sine_shaped():
    # halfway through warmup: 0.1 + 0.9 sin(pi/4), times the decay factor
    i = 50
    expected = (0.1 + 0.9 * math.sin(math.pi / 4)) * (1e-3) ** (i / 30000)
    assert lr_multiplier(i) == pytest.approx(expected, rel=1e-12)


def test_lr_multiplier_monotone_decay_after_warmup():
    vals = [lr_multiplier(i) for i in range(100, 2000, 100)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_orientation_loss_penalizes_backfacing_only():
    wo = torch.tensor([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    normals = torch.tensor([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    w = torch.tensor([0.5, 0.5])
    loss = orientation_loss(w, normals, wo)
    # only the backfacing normal contributes: 0.5 * (1)^2
    assert float(loss) == pytest.approx(0.5, abs=1e-7)


def test_photometric_loss_is_mse_and_checks_shapes():
    a = torch.zeros(4, 3)
    b = torch.full((4, 3), 0.5)
    assert float(photometric_loss(a, b)) == pytest.approx(0.25, abs=1e-7)
    with pytest.raises(ValueError):
        photometric_loss(torch.zeros(4, 3), torch.zeros(3, 4))


def _quadratic_problem(seed=0):
    gen = torch.Generator().manual_seed(seed)
    p = torch.nn.Parameter(torch.randn(8, generator=gen, dtype=torch.float64))
    target = torch.randn(8, generator=gen, dtype=torch.float64)
    return p, target


def test_adam_matches_torch_reference():
    p_ours, target = _quadratic_problem()
    p_ref = torch.nn.Parameter(p_ours.detach().clone())
    state = AdamState({"spatial": [p_ours], "network": []}, lrs={"spatial": 0.02, "network": 1e-3})
    opt = torch.optim.Adam([p_ref], lr=0.02, betas=(BETA1, BETA2), eps=EPS)
    for _ in range(50):
        for p in (p_ours, p_ref):
            if p.grad is not None:
                p.grad = None
        ((p_ours - target) ** 2).sum().backward()
        ((p_ref - target) ** 2).sum().backward()
        adam_step(state)
        opt.step()
    # torch computes moments in parameter dtype (float64 here), so the two
    # implementations should agree almost exactly
    assert torch.allclose(p_ours.detach(), p_ref.detach(), atol=1e-10)


def test_adam_applies_lr_multiplier():
    p, target = _quadratic_problem(1)
    before = p.detach().clone()
    state = AdamState({"spatial": [p], "network": []})
    ((p - target) ** 2).sum().backward()
    adam_step(state, multiplier=0.0)
    assert torch.equal(p.detach(), before)


def test_adam_rejects_nonfinite_gradient():
    p = torch.nn.Parameter(torch.zeros(3))
    p.grad = torch.tensor([0.0, float("nan"), 0.0])
    state = AdamState({"spatial": [p], "network": []})
    with pytest.raises(FloatingPointError):
        adam_step(state)


def test_reset_group_restarts_moments():
    p, target = _quadratic_problem(2)
    state = AdamState({"spatial": [p], "network": []})
    ((p - target) ** 2).sum().backward()
    adam_step(state)
    q = torch.nn.Parameter(p.detach().clone())
    state.reset_group("spatial", [q])
    assert id(p) not in state.m
    assert torch.count_nonzero(state.m[id(q)]) == 0


def test_upsample_step_scaling():
    cfg = TrainConfig(schedule_scale=0.5)
    assert cfg.scaled_total() == 15000
    assert cfg.scaled_upsample_steps() == [250, 500, 1000, 1500, 2000, 2750, 3500]
