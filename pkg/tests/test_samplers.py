import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffadv.schedule import Condition, GuidanceConfig, NoiseSchedule, forward_noise
from diffadv.samplers import SolverStepSpec, inverse_step, invert_plain, sample_recursive, solver_step

from oracles import directional_derivative, gaussian_eps_star, gaussian_flow_endpoint

SCHED = NoiseSchedule()
NULL = Condition.null()
G0 = GuidanceConfig()

MU0 = torch.tensor([[0.7, -0.3, 1.2, 0.1], [0.0, 0.5, -0.9, 0.4], [1.0, -1.0, 0.2, 0.8], [-0.4, 0.6, 0.3, -0.2]],
                   dtype=torch.float64).reshape(1, 1, 4, 4)
SIGMA0 = 1.0


def _spec(i, j):
    return SolverStepSpec(SCHED.time_at(i), SCHED.time_at(j))


def test_solver_step_zero_eps_rescales():
    z = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    t_from, t_to = SCHED.time_at(30), SCHED.time_at(29)
    out = solver_step(z, _spec(30, 29), torch.zeros_like(z), SCHED)
    expected = SCHED.alpha(t_to) / SCHED.alpha(t_from) * z
    assert torch.allclose(out, expected, rtol=1e-12)


def test_solver_step_rejects_wrong_ordering():
    z = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    with pytest.raises(ValueError):
        solver_step(z, _spec(10, 11), torch.zeros_like(z), SCHED)
    with pytest.raises(ValueError):
        solver_step(z, _spec(10, 10), torch.zeros_like(z), SCHED)
    with pytest.raises(ValueError):
        solver_step(z, _spec(10, 9), torch.zeros(1, 1, 2, 2, dtype=torch.float64), SCHED)


def test_inverse_step_zero_eps():
    z = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    t_from, t_to = SCHED.time_at(21), SCHED.time_at(20)
    out = inverse_step(z, _spec(21, 20), torch.zeros_like(z), SCHED)
    assert torch.allclose(out, SCHED.alpha(t_from) / SCHED.alpha(t_to) * z, rtol=1e-12)


@settings(deadline=None, max_examples=40)
@given(st.integers(2, 50), st.integers(0, 2**16))
def test_round_trip_property(idx, seed):
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    spec = _spec(idx, idx - 1)
    z_rec = inverse_step(solver_step(z, spec, eps, SCHED), spec, eps, SCHED)
    rel = (z_rec - z).abs().max() / z.abs().max()
    assert float(rel) <= 1e-6


def test_oracle_endpoint_and_convergence_order():
    predictor_T = gaussian_eps_star(MU0, SIGMA0, SCHED)
    gen = torch.Generator().manual_seed(7)
    z_T = SCHED.sigma(SCHED.terminal_time) * torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    z_star = gaussian_flow_endpoint(z_T, MU0, SIGMA0, SCHED)
    errs = {}
    for n in (50, 100):
        sched = NoiseSchedule(num_steps=n)
        pred = gaussian_eps_star(MU0, SIGMA0, sched)
        out = sample_recursive(z_T, n, NULL, G0, pred, sched)
        errs[n] = float((out - z_star).norm() / z_star.norm())
    assert errs[50] <= 1e-2
    assert errs[100] < errs[50]


def test_oracle_invert_then_sample_back():
    # invert with the oracle up to t_tau recording the noise sequence, then
    # solve back down reusing it: the chain is an exact algebraic inverse
    pred = gaussian_eps_star(MU0, SIGMA0, SCHED)
    gen = torch.Generator().manual_seed(21)
    z0 = MU0 + SIGMA0 * torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    tau = 10
    z = z0
    eps_used = []
    for n in range(1, tau):
        t_lo, t_hi = SCHED.time_at(n), SCHED.time_at(n + 1)
        eps = pred(z, t_lo, NULL)
        eps_used.append(eps)
        z = inverse_step(z, SolverStepSpec(t_hi, t_lo), eps, SCHED)
    for n in range(tau, 1, -1):
        t_hi, t_lo = SCHED.time_at(n), SCHED.time_at(n - 1)
        z = solver_step(z, SolverStepSpec(t_hi, t_lo), eps_used[n - 2], SCHED)
    rel = float((z - z0).norm() / z0.norm())
    assert rel <= 1e-4


def test_sample_recursive_trivial_and_composition():
    z = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    pred = gaussian_eps_star(MU0, SIGMA0, SCHED)
    assert torch.equal(sample_recursive(z, 1, NULL, G0, pred, SCHED), z)
    tau = 7
    composed = sample_recursive(z, tau, NULL, G0, pred, SCHED)
    manual = z
    for n in range(tau, 1, -1):
        spec = SolverStepSpec(SCHED.time_at(n), SCHED.time_at(n - 1))
        manual = solver_step(manual, spec, pred(manual, spec.t_from, NULL), SCHED)
    assert torch.equal(composed, manual)


def test_sample_recursive_rejects_nonfinite_predictor():
    z = torch.randn(1, 1, 4, 4, dtype=torch.float64)

    def bad(zz, t, cond):
        return torch.full_like(zz, float("nan"))

    with pytest.raises(ValueError, match="grid index"):
        sample_recursive(z, 5, NULL, G0, bad, SCHED)


def test_sample_recursive_jvp_matches_finite_differences():
    pred = gaussian_eps_star(MU0, SIGMA0, SCHED)
    tau = 6

    def fn(z):
        return sample_recursive(z, tau, NULL, G0, pred, SCHED)

    gen = torch.Generator().manual_seed(5)
    z = MU0 + torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    v = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    _, jvp = torch.autograd.functional.jvp(fn, (z,), (v,))
    fd = directional_derivative(fn, z, v, h=1e-3)
    rel = float((jvp - fd).norm() / fd.norm())
    assert rel <= 1e-3


def test_invert_plain_matches_manual_chain():
    pred = gaussian_eps_star(MU0, SIGMA0, SCHED)
    z = MU0 + torch.randn(1, 1, 4, 4, dtype=torch.float64)
    out = invert_plain(z, 1, 5, NULL, G0, pred, SCHED)
    manual = z
    for n in range(1, 5):
        t_lo, t_hi = SCHED.time_at(n), SCHED.time_at(n + 1)
        manual = inverse_step(manual, SolverStepSpec(t_hi, t_lo), pred(manual, t_lo, NULL), SCHED)
    assert torch.equal(out, manual)
