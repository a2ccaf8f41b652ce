import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffadv.schedule import (
    Condition,
    GridTimeError,
    GuidanceConfig,
    NoiseSchedule,
    cfg_combine,
    forward_noise,
    strength_to_time,
)

SCHED = NoiseSchedule()


def test_grid_endpoints_and_monotonicity():
    g = SCHED.grid
    assert float(g[0]) == 0.0
    assert float(g[-1]) == SCHED.terminal_time
    assert torch.all(g[1:] > g[:-1])
    alphas = [SCHED.alpha(float(t)) for t in g]
    sigmas = [SCHED.sigma(float(t)) for t in g]
    assert all(a2 <= a1 for a1, a2 in zip(alphas, alphas[1:]))
    assert all(s2 >= s1 for s1, s2 in zip(sigmas, sigmas[1:]))
    assert alphas[0] >= 1 - 1e-6
    assert sigmas[0] <= 1e-3


def test_forward_noise_zero_time_is_identity():
    z = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    z_t, eps = forward_noise(z, 0.0, SCHED, seed=3)
    assert torch.equal(z_t, z * SCHED.alpha(0.0))
    assert SCHED.alpha(0.0) == 1.0 and SCHED.sigma(0.0) == 0.0
    assert torch.equal(z_t, z)


def test_forward_noise_zero_tensor_matches_raw_draw():
    z = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    t = SCHED.time_at(20)
    z_t, eps = forward_noise(z, t, SCHED, seed=11)
    gen = torch.Generator().manual_seed(11)
    raw = torch.randn(z.shape, generator=gen, dtype=torch.float64)
    assert torch.equal(eps, raw)
    assert torch.equal(z_t, SCHED.sigma(t) * raw)


def test_forward_noise_deterministic_and_rejections():
    z = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    t = SCHED.time_at(10)
    a = forward_noise(z, t, SCHED, seed=7)
    b = forward_noise(z, t, SCHED, seed=7)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    with pytest.raises(GridTimeError):
        forward_noise(z, 0.01234, SCHED, seed=0)
    with pytest.raises(ValueError):
        forward_noise(torch.tensor([[float("nan")]]), 0.0, SCHED, seed=0)


def test_forward_noise_moments_at_terminal_time():
    # Monte-Carlo moment check against the stated Gaussian, fixed seeds
    z = torch.tensor([[0.4, -0.2], [1.1, 0.0]], dtype=torch.float64)
    t = SCHED.terminal_time
    draws = torch.stack([forward_noise(z, t, SCHED, seed=s)[0] for s in range(10_000)])
    a, sg = SCHED.alpha(t), SCHED.sigma(t)
    mean_err = (draws.mean(dim=0) - a * z).abs().max()
    assert float(mean_err) <= 3.0 * sg / 100.0
    var = draws.var(dim=0, unbiased=True).mean()
    assert abs(float(var) - sg * sg) <= 0.05 * sg * sg


def test_cfg_combine_examples():
    e = torch.randn(2, 3, dtype=torch.float64)
    assert torch.allclose(cfg_combine(e, e, 7.5), e)
    e_u = torch.randn(2, 3, dtype=torch.float64)
    assert torch.equal(cfg_combine(e, e_u, 0.0), e)
    ones = torch.ones(4, dtype=torch.float64)
    zeros = torch.zeros(4, dtype=torch.float64)
    assert torch.equal(cfg_combine(ones, zeros, 2.0), 3.0 * ones)
    with pytest.raises(ValueError):
        cfg_combine(ones, torch.zeros(3, dtype=torch.float64), 1.0)


@settings(deadline=None, max_examples=50)
@given(
    omega=st.floats(0.0, 10.0),
    scale=st.floats(-3.0, 3.0),
    seed=st.integers(0, 2**16),
)
def test_cfg_combine_affine_in_scale(omega, scale, seed):
    gen = torch.Generator().manual_seed(seed)
    e_c = torch.randn(8, generator=gen, dtype=torch.float64)
    e_u = torch.randn(8, generator=gen, dtype=torch.float64)
    lhs = cfg_combine(scale * e_c, scale * e_u, omega)
    rhs = scale * cfg_combine(e_c, e_u, omega)
    assert torch.allclose(lhs, rhs, rtol=1e-6, atol=1e-12)


def test_strength_to_time_endpoints_and_example():
    assert strength_to_time(0.0, SCHED) == SCHED.time_at(1)
    assert strength_to_time(1.0, SCHED) == SCHED.time_at(SCHED.num_steps)
    # nearest grid point to 0.05 on the uniform 50-point grid is index 3 (1-based)
    grid = SCHED.grid
    expected_idx = int(torch.argmin(torch.abs(grid - 0.05))) + 1
    assert expected_idx == 3
    assert strength_to_time(0.05, SCHED) == SCHED.time_at(3)
    with pytest.raises(ValueError):
        strength_to_time(-0.1, SCHED)
    with pytest.raises(ValueError):
        strength_to_time(1.5, SCHED)


@settings(deadline=None, max_examples=60)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_strength_to_time_monotone(s1, s2):
    lo, hi = min(s1, s2), max(s1, s2)
    assert strength_to_time(lo, SCHED) <= strength_to_time(hi, SCHED)


def test_condition_and_guidance_validation():
    Condition.null()
    Condition.class_label(2)
    Condition.from_embedding(torch.zeros(16, dtype=torch.float64))
    with pytest.raises(ValueError):
        Condition("class_label")
    with pytest.raises(ValueError):
        Condition("null", label=1)
    with pytest.raises(ValueError):
        Condition("embedding", embedding=torch.tensor([float("inf")]))
    with pytest.raises(ValueError):
        GuidanceConfig(-1.0)


def test_time_index_lookup():
    assert SCHED.time_index(0.0) == 1
    assert SCHED.time_index(SCHED.terminal_time) == SCHED.num_steps
    with pytest.raises(GridTimeError):
        SCHED.time_index(0.5001)
    with pytest.raises(GridTimeError):
        SCHED.time_at(0)
