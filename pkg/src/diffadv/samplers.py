"""Deterministic one-step solver, its algebraic inverse, and recursive sampling.

The solver step is the first-order exponential-integrator (deterministic DDIM)
form: from state ``z_t`` at ``t_from`` with noise estimate ``eps``,

    z0_hat = (z_t - sigma(t_from) eps) / alpha(t_from)
    z_to   = alpha(t_to) z0_hat + sigma(t_to) eps.

The inverse step is the exact algebraic inverse under a shared ``eps``, so the
round trip is a testable identity rather than an approximation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .schedule import (
    Condition,
    GuidanceConfig,
    GridTimeError,
    NoiseSchedule,
    NULL_CONDITION,
    cfg_combine,
    check_finite,
)

# predictor protocol: (z, t, condition) -> noise estimate of z's shape
Predictor = Callable[[torch.Tensor, float, Condition], torch.Tensor]


@dataclass(frozen=True)
class SolverStepSpec:
    """One denoising step ``t_from -> t_to`` with its conditioning context."""

    t_from: float
    t_to: float
    condition: Condition = NULL_CONDITION
    guidance: GuidanceConfig = GuidanceConfig()

    def validate(self, schedule: NoiseSchedule) -> None:
        for t in (self.t_from, self.t_to):
            if not schedule.is_grid_time(t):
                raise GridTimeError(f"step time {t!r} is not on the schedule grid")
        if self.t_from == self.t_to:
            raise ValueError("step endpoints must differ")


def _coeffs(spec: SolverStepSpec, schedule: NoiseSchedule):
    a_from = schedule.alpha(spec.t_from)
    a_to = schedule.alpha(spec.t_to)
    s_from = schedule.sigma(spec.t_from)
    s_to = schedule.sigma(spec.t_to)
    if a_from == 0.0 or a_to == 0.0:
        raise ZeroDivisionError("schedule alpha vanishes at a step endpoint")
    return a_from, a_to, s_from, s_to


def solver_step(
    z_t: torch.Tensor, spec: SolverStepSpec, eps_hat: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Deterministic denoising step from ``spec.t_from`` down to ``spec.t_to``."""
    spec.validate(schedule)
    if spec.t_from <= spec.t_to:
        raise ValueError("solver_step runs in the denoising direction (t_from > t_to)")
    if eps_hat.shape != z_t.shape:
        raise ValueError("noise estimate shape does not match the state")
    a_from, a_to, s_from, s_to = _coeffs(spec, schedule)
    z0_hat = (z_t - s_from * eps_hat) / a_from
    return a_to * z0_hat + s_to * eps_hat


def inverse_step(
    z_prev: torch.Tensor, spec: SolverStepSpec, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Exact inverse of :func:`solver_step` given the same ``eps``.

    ``z_prev`` is the state at ``spec.t_to``; the return value is the state at
    ``spec.t_from`` such that ``solver_step`` maps it back onto ``z_prev``.
    """
    spec.validate(schedule)
    if spec.t_from <= spec.t_to:
        raise ValueError("inverse_step uses the same orientation as solver_step (t_from > t_to)")
    if eps.shape != z_prev.shape:
        raise ValueError("noise estimate shape does not match the state")
    a_from, a_to, s_from, s_to = _coeffs(spec, schedule)
    z0_hat = (z_prev - s_to * eps) / a_to
    return a_from * z0_hat + s_from * eps


def guided_eps(
    predictor: Predictor,
    z: torch.Tensor,
    t: float,
    condition: Condition,
    guidance: GuidanceConfig,
) -> torch.Tensor:
    """Query the predictor, applying guidance when a condition is present."""
    if condition.is_null:
        return predictor(z, t, NULL_CONDITION)
    eps_cond = predictor(z, t, condition)
    if guidance.omega == 0.0:
        return eps_cond
    eps_uncond = predictor(z, t, NULL_CONDITION)
    return cfg_combine(eps_cond, eps_uncond, guidance.omega)


def sample_recursive(
    z_tau: torch.Tensor,
    tau_index: int,
    condition: Condition,
    guidance: GuidanceConfig,
    predictor: Predictor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Compose solver steps from grid index ``tau_index`` down to the clean end.

    ``tau_index`` is 1-based; 1 means the empty composition. The predictor is
    queried once per visited time (twice under guidance).
    """
    if not 1 <= tau_index <= schedule.num_steps:
        raise GridTimeError(f"tau_index {tau_index} outside [1, {schedule.num_steps}]")
    z = z_tau
    for n in range(tau_index, 1, -1):
        t_from = schedule.time_at(n)
        t_to = schedule.time_at(n - 1)
        eps = guided_eps(predictor, z, t_from, condition, guidance)
        if not torch.isfinite(eps).all():
            raise ValueError(f"predictor returned non-finite values at grid index {n} (t={t_from:g})")
        z = solver_step(z, SolverStepSpec(t_from, t_to, condition, guidance), eps, schedule)
    return z


def invert_plain(
    z_start: torch.Tensor,
    from_index: int,
    to_index: int,
    condition: Condition,
    guidance: GuidanceConfig,
    predictor: Predictor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Plain inversion chain from grid index ``from_index`` up to ``to_index``.

    Each link renoises with the prediction queried at the link's lower time,
    the standard first-order inversion approximation.
    """
    if to_index < from_index:
        raise ValueError("inversion runs upward in time")
    z = z_start
    for n in range(from_index, to_index):
        t_lo = schedule.time_at(n)
        t_hi = schedule.time_at(n + 1)
        eps = guided_eps(predictor, z, t_lo, condition, guidance)
        check_finite("inversion noise estimate", eps)
        z = inverse_step(z, SolverStepSpec(t_hi, t_lo, condition, guidance), eps, schedule)
    return z
