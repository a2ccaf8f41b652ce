"""Precision-optimized inversion: regularized, averaged noise-prediction refinement.

The inverter refines the latent estimate one time-pair at a time. For a pair
``(t_lo, t_hi)`` it runs a fixed-point loop: query the predictor at the current
iterate, push the prediction toward white-noise statistics with the editability
losses, fold it into a running average, and renoise the *fixed* lower-time
latent with the regularized prediction. After ``L`` iterations one extra
renoising with the regularized running average produces the final estimate.

The editability losses measure how far a noise map is from i.i.d. standard
normal: ``pair_loss`` penalizes correlations between shifted copies at several
pooling scales, ``patch_kl_loss`` the Gaussian KL between per-patch moments and
N(0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .samplers import Predictor, SolverStepSpec, guided_eps, inverse_step
from .schedule import Condition, GuidanceConfig, NoiseSchedule, check_finite

# correlation terms with fewer valid pairs than this are skipped: a 2-point
# empirical correlation is +-1 identically and would swamp the white-noise null
MIN_PAIRS = 12

VAR_FLOOR = 1e-8

DIVERGENCE_NORM = 1e6


@dataclass(frozen=True)
class EditLossConfig:
    lambda_pair: float = 10.0
    lambda_patch_kl: float = 0.055
    patch_sizes: tuple[int, ...] = (1, 2, 4)  # partitions per axis; 1 = global
    shift_offsets: tuple[int, ...] = (1, 2)
    reg_step_size: float = 1e-2

    def __post_init__(self):
        if self.lambda_pair < 0 or self.lambda_patch_kl < 0:
            raise ValueError("loss weights must be non-negative")
        if self.reg_step_size <= 0:
            raise ValueError("reg_step_size must be positive")
        if any(s < 1 for s in self.patch_sizes) or any(o < 1 for o in self.shift_offsets):
            raise ValueError("patch sizes and offsets must be positive")


@dataclass(frozen=True)
class RegWeightSchedule:
    """Per-iteration regularization weights ``alpha_l``, one per precision step."""

    alphas: tuple[float, ...]

    def __post_init__(self):
        if len(self.alphas) == 0:
            raise ValueError("need at least one weight")
        if any(a < 0 for a in self.alphas):
            raise ValueError("weights must be non-negative")

    @staticmethod
    def constant(value: float, length: int) -> "RegWeightSchedule":
        return RegWeightSchedule(tuple(float(value) for _ in range(length)))


def _spatial(eps: torch.Tensor) -> torch.Tensor:
    """View ``eps`` as (batch, H, W), folding leading dims into the batch."""
    if eps.dim() < 2:
        raise ValueError("editability losses need a spatial (H, W) layout")
    h, w = eps.shape[-2], eps.shape[-1]
    return eps.reshape(-1, h, w)


def _avg_pool(maps: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return maps
    b, h, w = maps.shape
    if h % factor or w % factor:
        return maps.new_empty((b, 0, 0))  # scale does not tile; caller skips
    return maps.reshape(b, h // factor, factor, w // factor, factor).mean(dim=(2, 4))


def _corr_sq(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared Pearson correlation of paired values, per batch entry."""
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    a = a - a.mean(dim=1, keepdim=True)
    b = b - b.mean(dim=1, keepdim=True)
    va = (a * a).mean(dim=1)
    vb = (b * b).mean(dim=1)
    cov = (a * b).mean(dim=1)
    denom = va * vb
    # zero-variance guard: constant inputs define the correlation as zero
    safe = denom > VAR_FLOOR * VAR_FLOOR
    return torch.where(
        safe, cov * cov / torch.where(safe, denom, torch.ones_like(denom)), torch.zeros_like(denom)
    )


def pair_correlations(
    eps: torch.Tensor, config: EditLossConfig
) -> dict[tuple[int, int, int], torch.Tensor]:
    """Per-(scale, offset, axis) squared shift correlations, batch-averaged."""
    maps = _spatial(eps)
    h, w = maps.shape[-2], maps.shape[-1]
    if min(h, w) < max(config.shift_offsets):
        raise ValueError(f"spatial size {h}x{w} smaller than the largest offset")
    terms: dict[tuple[int, int, int], torch.Tensor] = {}
    for scale in config.patch_sizes:
        pooled = _avg_pool(maps, scale)
        if pooled.shape[-1] == 0:
            continue
        ph, pw = pooled.shape[-2], pooled.shape[-1]
        for offset in config.shift_offsets:
            for axis, size, other in ((0, ph, pw), (1, pw, ph)):
                if size - offset < 1 or (size - offset) * other < MIN_PAIRS:
                    continue
                if axis == 0:
                    a, b = pooled[:, offset:, :], pooled[:, :-offset, :]
                else:
                    a, b = pooled[:, :, offset:], pooled[:, :, :-offset]
                terms[(scale, offset, axis)] = _corr_sq(a, b).mean()
    return terms


def pair_loss(eps: torch.Tensor, config: EditLossConfig) -> torch.Tensor:
    """Mean squared shift-correlation across scales, offsets, and axes.

    Zero iff every measured correlation is zero; constant inputs hit the
    zero-variance guard and contribute zero.
    """
    terms = pair_correlations(eps, config)
    if not terms:
        return eps.new_zeros(())
    return torch.stack(list(terms.values())).mean()


def patch_kl_loss(eps: torch.Tensor, config: EditLossConfig) -> torch.Tensor:
    """Average Gaussian KL between per-patch moments and the standard normal.

    Size ``s`` partitions each axis into ``s`` equal patches (1 = global); per
    patch ``KL = (v + mu^2 - 1 - log v) / 2`` with population variance floored
    at 1e-8.
    """
    maps = _spatial(eps)
    h, w = maps.shape[-2], maps.shape[-1]
    kls = []
    for s in config.patch_sizes:
        if h % s or w % s:
            raise ValueError(f"patch partition {s} does not divide spatial size {h}x{w}")
        patches = maps.reshape(maps.shape[0], s, h // s, s, w // s).permute(0, 1, 3, 2, 4)
        patches = patches.reshape(maps.shape[0], s * s, -1)
        mu = patches.mean(dim=2)
        var = patches.var(dim=2, unbiased=False)
        var = torch.clamp(var, min=VAR_FLOOR)
        kls.append(0.5 * (var + mu * mu - 1.0 - torch.log(var)))
    return torch.cat([k.reshape(-1) for k in kls]).mean()


def edit_loss(eps: torch.Tensor, config: EditLossConfig) -> torch.Tensor:
    return config.lambda_patch_kl * patch_kl_loss(eps, config) + config.lambda_pair * pair_loss(
        eps, config
    )


def regularize_noise(eps: torch.Tensor, alpha_l: float, config: EditLossConfig) -> torch.Tensor:
    """One gradient-descent correction of the editability loss on ``eps``.

    ``alpha_l = 0`` returns ``eps`` unchanged (bit-identical). Otherwise the
    correction is ``- reg_step_size * alpha_l * grad``, with the gradient taken
    through autograd so attack gradients can flow through the correction.
    """
    check_finite("eps", eps)
    if alpha_l < 0:
        raise ValueError("regularization weight must be non-negative")
    if alpha_l == 0.0:
        return eps
    if eps.requires_grad and torch.is_grad_enabled():
        loss = edit_loss(eps, config)
        (grad,) = torch.autograd.grad(loss, eps, create_graph=True)
    else:
        # local gradient only (also works inside no_grad inference contexts)
        with torch.enable_grad():
            leaf = eps.detach().requires_grad_(True)
            loss = edit_loss(leaf, config)
            (grad,) = torch.autograd.grad(loss, leaf)
        grad = grad.detach()
    if not torch.isfinite(grad).all():
        raise ValueError("editability loss produced a non-finite gradient")
    return eps - config.reg_step_size * alpha_l * grad


def average_noise(l: int, eps_bar_prev: torch.Tensor, eps_reg: torch.Tensor) -> torch.Tensor:
    """Running-average recurrence ``(l * eps_bar_prev + eps_reg) / (l + 1)``."""
    if l < 1:
        raise ValueError("averaging index starts at 1")
    if eps_bar_prev.shape != eps_reg.shape:
        raise ValueError("shape mismatch in noise averaging")
    return (l * eps_bar_prev + eps_reg) / (l + 1)


def precise_invert(
    z_lo: torch.Tensor,
    t_from: float,
    t_to: float,
    L: int,
    predictor: Predictor,
    condition: Condition,
    guidance: GuidanceConfig,
    weights: RegWeightSchedule,
    config: EditLossConfig,
    schedule: NoiseSchedule,
    history: list | None = None,
) -> torch.Tensor:
    """Precision-optimized inversion of one time pair ``t_from -> t_to``.

    ``z_lo`` is the latent at the lower time ``t_from``; the return value
    estimates the latent at ``t_to > t_from`` whose solver step lands back on
    ``z_lo``. With ``L=1`` and a zero weight this is exactly one plain inverse
    step seeded with the prediction at ``t_from``.

    ``history``, when given a list, collects the successive iterates.
    """
    if t_to <= t_from:
        raise ValueError("inversion runs upward in time (t_to > t_from)")
    if L < 1:
        raise ValueError("need at least one precision step")
    if len(weights.alphas) < L:
        raise ValueError(f"weight schedule has {len(weights.alphas)} entries, need {L}")
    spec = SolverStepSpec(t_to, t_from, condition, guidance)

    def query(z: torch.Tensor, t: float, step: int) -> torch.Tensor:
        eps = guided_eps(predictor, z, t, condition, guidance)
        if not torch.isfinite(eps).all():
            raise ValueError(f"predictor failed (non-finite output) at precision step {step}")
        return eps

    eps0 = query(z_lo, t_from, 0)
    eps_reg = regularize_noise(eps0, weights.alphas[0], config)
    eps_bar = eps_reg
    iterate = inverse_step(z_lo, spec, eps_reg, schedule)
    if history is not None:
        history.append(iterate)
    for l in range(1, L):
        eps_l = query(iterate, t_to, l)
        eps_reg = regularize_noise(eps_l, weights.alphas[l], config)
        eps_bar = average_noise(l, eps_bar, eps_reg)
        iterate = inverse_step(z_lo, spec, eps_reg, schedule)
        if iterate.detach().abs().max() > DIVERGENCE_NORM:
            raise FloatingPointError(f"precision inversion diverged at step {l}")
        if history is not None:
            history.append(iterate)
    eps_bar_reg = regularize_noise(eps_bar, weights.alphas[L - 1], config)
    z_hat = inverse_step(z_lo, spec, eps_bar_reg, schedule)
    if z_hat.detach().abs().max() > DIVERGENCE_NORM:
        raise FloatingPointError("precision inversion diverged at the final step")
    if history is not None:
        history.append(z_hat)
    return z_hat


def precise_invert_chain(
    z_start: torch.Tensor,
    times: list[float],
    L: int,
    predictor: Predictor,
    condition: Condition,
    guidance: GuidanceConfig,
    weights: RegWeightSchedule,
    config: EditLossConfig,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Chain :func:`precise_invert` over consecutive entries of ``times``."""
    if len(times) < 1:
        raise ValueError("empty time chain")
    z = z_start
    for t_lo, t_hi in zip(times[:-1], times[1:]):
        z = precise_invert(z, t_lo, t_hi, L, predictor, condition, guidance, weights, config, schedule)
    return z
