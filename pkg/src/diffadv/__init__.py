"""Latent-diffusion adversarial attacks, purification defenses, and evaluation."""

from .schedule import Condition, GuidanceConfig, NoiseSchedule, cfg_combine, forward_noise, strength_to_time
from .samplers import SolverStepSpec, inverse_step, sample_recursive, solver_step
from .inversion import (
    EditLossConfig,
    RegWeightSchedule,
    average_noise,
    pair_loss,
    patch_kl_loss,
    precise_invert,
    regularize_noise,
)
from .attacks import AttackConfig, PerturbationState, attack, pgd_step, project_linf, purify, region_attack

__version__ = "0.1.0"
