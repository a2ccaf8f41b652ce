"""L-infinity PGD attacks driven through diffusion reconstructions.

The attack maximizes the classifier loss on the *reconstruction* of the
perturbed image, so gradients flow end to end through the autoencoder, the
(possibly precision-optimized) inversion, and the denoiser. Reconstruction
tiers:

* ``identity``       — no reconstruction (plain pixel PGD baseline);
* ``autoencoder``    — encoder/decoder round trip, no diffusion;
* ``teacher_chain``  — noise to the strength time, multi-step solver chain;
* ``student``        — noise, plain single-link inversion to the student's
                       entry time, one clean prediction (the fast path);
* ``student_precise``— same route with the precision-optimized inverter.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

from .distill import StudentModel, TeacherModel, predict_clean
from .inversion import EditLossConfig, RegWeightSchedule, precise_invert_chain
from .models import Autoencoder
from .samplers import sample_recursive
from .schedule import (
    Condition,
    GuidanceConfig,
    NoiseSchedule,
    NULL_CONDITION,
    check_finite,
    forward_noise,
    strength_to_time,
)

UPDATE_RULES = ("sign", "raw")


class AttackAborted(RuntimeError):
    """Attack stopped on non-finite model output; carries the trace so far."""

    def __init__(self, msg: str, trace: list):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16 / 255
    eta: float = 2 / 255
    iterations: int = 10
    tau: int = 4  # student timestep count
    L: int = 10  # precision steps
    strength_attack: float = 0.05
    strength_final: float = 0.1
    update_rule: str = "sign"
    loss_kind: str = "cross_entropy"
    resample_noise: bool = False  # fresh forward noise every PGD iteration

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must be in (0, 1]")
        if self.eta <= 0 or self.eta > self.epsilon:
            raise ValueError("eta must be positive and at most epsilon")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not 1 <= self.tau <= 4:
            raise ValueError("tau must be in {1, 2, 3, 4}")
        if self.L < 1:
            raise ValueError("L must be at least 1")
        for name in ("strength_attack", "strength_final"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"update_rule must be one of {UPDATE_RULES}")
        if self.loss_kind != "cross_entropy":
            raise ValueError("only cross_entropy loss is supported")


@dataclass(frozen=True)
class PerturbationState:
    x: torch.Tensor
    delta: torch.Tensor
    iteration: int = 0


def project_linf(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Element-wise clip onto the epsilon ball; idempotent, total on finite input."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return torch.clamp(delta, -epsilon, epsilon)


def pgd_step(state: PerturbationState, grad: torch.Tensor, config: AttackConfig) -> PerturbationState:
    """Ascent step, ball projection, then image-range clamp of x + delta."""
    check_finite("gradient", grad)
    if grad.shape != state.delta.shape:
        raise ValueError("gradient shape does not match the perturbation")
    step = torch.sign(grad) if config.update_rule == "sign" else grad
    delta = project_linf(state.delta + config.eta * step, config.epsilon)
    delta = torch.clamp(state.x + delta, 0.0, 1.0) - state.x
    return PerturbationState(state.x, delta.detach(), state.iteration + 1)


def derive_seed(seed: int, *salts: int) -> int:
    s = int(seed) & 0x7FFFFFFFFFFFFFFF
    for salt in salts:
        s = (s * 1_000_003 + int(salt) + 0x9E3779B9) & 0x7FFFFFFFFFFFFFFF
    return s


# ---------------------------------------------------------------------------
# reconstruction pipelines


def _latents_to_image(ae: Autoencoder, z: torch.Tensor) -> torch.Tensor:
    x = ae.decode(z)
    check_finite("reconstruction", x)
    return x


@dataclass
class IdentityPipeline:
    """No reconstruction: the classifier sees x + delta directly."""

    def reconstruct(self, x: torch.Tensor, seed: int) -> torch.Tensor:
        return x


@dataclass
class AutoencoderPipeline:
    """Latent round trip without diffusion (the plain latent PGD baseline)."""

    autoencoder: Autoencoder

    def reconstruct(self, x: torch.Tensor, seed: int) -> torch.Tensor:
        check_finite("image", x)
        return _latents_to_image(self.autoencoder, self.autoencoder.encode(x))


@dataclass
class TeacherChainPipeline:
    """Noise to the strength time, then the full multi-step solver chain down."""

    teacher: TeacherModel
    autoencoder: Autoencoder
    strength: float
    condition: Condition = NULL_CONDITION
    guidance: GuidanceConfig = GuidanceConfig()

    def reconstruct(self, x: torch.Tensor, seed: int) -> torch.Tensor:
        check_finite("image", x)
        schedule = self.teacher.schedule
        z = self.autoencoder.encode(x)
        if self.strength == 0.0:
            return _latents_to_image(self.autoencoder, z)
        t_s = strength_to_time(self.strength, schedule)
        idx = schedule.time_index(t_s)
        if idx == 1:
            return _latents_to_image(self.autoencoder, z)
        z_t, _ = forward_noise(z, t_s, schedule, seed)
        z_rec = sample_recursive(z_t, idx, self.condition, self.guidance, self.teacher.predict, schedule)
        return _latents_to_image(self.autoencoder, z_rec)


@dataclass
class StudentPipeline:
    """Noise, invert one link up to the student entry time, predict clean, decode.

    ``precision_steps=1`` with a zero weight schedule is the plain fast path;
    larger values engage the precision-optimized inverter on the same route.
    """

    student: StudentModel
    autoencoder: Autoencoder
    strength: float
    precision_steps: int = 1
    weights: RegWeightSchedule | None = None
    edit_config: EditLossConfig = field(default_factory=EditLossConfig)
    condition: Condition = NULL_CONDITION
    guidance: GuidanceConfig = GuidanceConfig()

    def __post_init__(self):
        if self.weights is None:
            self.weights = RegWeightSchedule.constant(0.0, self.precision_steps)

    def invert_to_entry(self, z_t: torch.Tensor, t_s: float) -> tuple[torch.Tensor, float]:
        entry = self.student.entry_time(t_s)
        if entry > t_s:
            z_hat = precise_invert_chain(
                z_t,
                [t_s, entry],
                self.precision_steps,
                self.student.predict,
                self.condition,
                self.guidance,
                self.weights,
                self.edit_config,
                self.student.schedule,
            )
        else:
            z_hat = z_t
        return z_hat, entry

    def reconstruct_latent(self, z: torch.Tensor, seed: int) -> torch.Tensor:
        schedule = self.student.schedule
        t_s = strength_to_time(self.strength, schedule)
        if schedule.time_index(t_s) == 1:
            return z
        z_t, _ = forward_noise(z, t_s, schedule, seed)
        z_hat, entry = self.invert_to_entry(z_t, t_s)
        return predict_clean(self.student, z_hat, self.guidance.omega, self.condition, entry)

    def reconstruct(self, x: torch.Tensor, seed: int) -> torch.Tensor:
        check_finite("image", x)
        z = self.autoencoder.encode(x)
        if self.strength == 0.0:
            return _latents_to_image(self.autoencoder, z)
        return _latents_to_image(self.autoencoder, self.reconstruct_latent(z, seed))


def make_pipeline(
    method: str,
    config: AttackConfig,
    autoencoder: Autoencoder,
    teacher: TeacherModel | None = None,
    student: StudentModel | None = None,
    condition: Condition = NULL_CONDITION,
    guidance: GuidanceConfig = GuidanceConfig(),
    edit_config: EditLossConfig | None = None,
    strength: float | None = None,
):
    """Wire a reconstruction pipeline for one of the attack method ids."""
    edit_config = edit_config or EditLossConfig()
    strength = config.strength_attack if strength is None else strength
    if method == "pgd":
        return IdentityPipeline()
    if method == "latent_pgd":
        return AutoencoderPipeline(autoencoder)
    if method == "teacher_chain":
        if teacher is None:
            raise ValueError("teacher_chain needs a teacher model")
        return TeacherChainPipeline(teacher, autoencoder, strength, condition, guidance)
    if method in ("student", "student_precise"):
        if student is None:
            raise ValueError(f"{method} needs a student model")
        if method == "student":
            return StudentPipeline(student, autoencoder, strength, 1, None, edit_config, condition, guidance)
        return StudentPipeline(
            student,
            autoencoder,
            strength,
            config.L,
            RegWeightSchedule.constant(1.0, config.L),
            edit_config,
            condition,
            guidance,
        )
    raise ValueError(f"unknown attack method {method!r}")


ATTACK_METHODS = ("pgd", "latent_pgd", "teacher_chain", "student", "student_precise")


# ---------------------------------------------------------------------------
# the attack loop


def attack(
    x: torch.Tensor,
    y: torch.Tensor,
    classifier,
    config: AttackConfig,
    pipeline,
    seed: int = 0,
) -> tuple[torch.Tensor, list[dict]]:
    """Iterated ascent on the classifier loss through the reconstruction.

    Returns ``(x_adv, trace)`` with one trace record per iteration (loss and the
    prediction on the reconstructed perturbed input). Deterministic given
    ``(x, y, seed, config)``.
    """
    check_finite("image", x)
    if x.min() < 0 or x.max() > 1:
        raise ValueError("attack input must lie in [0, 1]")
    if y.dim() != 1 or len(y) != len(x):
        raise ValueError("labels must be a vector matching the batch")
    state = PerturbationState(x, torch.zeros_like(x))
    trace: list[dict] = []
    for i in range(config.iterations):
        noise_seed = derive_seed(seed, i if config.resample_noise else 0)
        delta = state.delta.clone().requires_grad_(True)
        x_tilde = pipeline.reconstruct(x + delta, noise_seed)
        logits = classifier(x_tilde)
        if not torch.isfinite(logits).all():
            raise AttackAborted(f"classifier produced non-finite logits at iteration {i}", trace)
        loss = F.cross_entropy(logits, y)
        (grad,) = torch.autograd.grad(loss, delta)
        trace.append(
            {
                "iteration": i,
                "loss": float(loss.detach()),
                "predictions": logits.detach().argmax(dim=1).tolist(),
            }
        )
        state = pgd_step(state, grad, config)
    return (x + state.delta).detach(), trace


def purify(
    x: torch.Tensor,
    strength: float,
    student: StudentModel,
    autoencoder: Autoencoder,
    condition: Condition = NULL_CONDITION,
    guidance: GuidanceConfig = GuidanceConfig(),
    weights: RegWeightSchedule | None = None,
    edit_config: EditLossConfig | None = None,
    L: int = 10,
    seed: int = 0,
) -> torch.Tensor:
    """Purification pass: noise to the strength time, precision-denoise, decode.

    Output is clamped into [0, 1]; used both as the defense primitive and for
    attacker-side hardening.
    """
    if not 0 <= strength <= 1:
        raise ValueError("strength must be in [0, 1]")
    weights = weights or RegWeightSchedule.constant(1.0, L)
    pipe = StudentPipeline(
        student, autoencoder, strength, L, weights, edit_config or EditLossConfig(), condition, guidance
    )
    with torch.no_grad():
        out = pipe.reconstruct(x, seed)
    return torch.clamp(out, 0.0, 1.0)


def teacher_purify(
    x: torch.Tensor,
    strength: float,
    teacher: TeacherModel,
    autoencoder: Autoencoder,
    condition: Condition = NULL_CONDITION,
    guidance: GuidanceConfig = GuidanceConfig(),
    seed: int = 0,
) -> torch.Tensor:
    """Multi-step purification through the teacher chain (the p1-style wrapper)."""
    pipe = TeacherChainPipeline(teacher, autoencoder, strength, condition, guidance)
    with torch.no_grad():
        out = pipe.reconstruct(x, seed)
    return torch.clamp(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# region-masked attack


def _latent_mask(mask: torch.Tensor, latent_hw: int) -> torch.Tensor:
    if mask.shape[-1] == latent_hw:
        return mask
    k = mask.shape[-1] // latent_hw
    return F.max_pool2d(mask, kernel_size=k)


def region_reconstruct(x: torch.Tensor, mask: torch.Tensor, pipeline, seed: int) -> torch.Tensor:
    """Regenerate only the masked region: blend known clean latents back in."""
    if isinstance(pipeline, (IdentityPipeline, AutoencoderPipeline)):
        return pipeline.reconstruct(x, seed)
    ae = pipeline.autoencoder
    z = ae.encode(x)
    mz = _latent_mask(mask, z.shape[-1])
    if isinstance(pipeline, TeacherChainPipeline):
        schedule = pipeline.teacher.schedule
        t_s = strength_to_time(pipeline.strength, schedule)
        idx = schedule.time_index(t_s)
        if idx == 1:
            return _latents_to_image(ae, z)
        z_t, _ = forward_noise(z, t_s, schedule, seed)
        z_rec = sample_recursive(z_t, idx, pipeline.condition, pipeline.guidance, pipeline.teacher.predict, schedule)
    else:
        z_rec = pipeline.reconstruct_latent(z, seed)
    blended = mz * z_rec + (1.0 - mz) * z
    return _latents_to_image(ae, blended)


def region_attack(
    x: torch.Tensor,
    mask: torch.Tensor,
    y: torch.Tensor,
    classifier,
    config: AttackConfig,
    pipeline,
    seed: int = 0,
    inpaint: bool = False,
) -> torch.Tensor:
    """Masked attack: one reconstruction, then PGD on the composite inside the mask.

    The perturbation is masked, so the output equals ``x`` outside the mask
    bit-exactly. ``inpaint=True`` regenerates only the masked region during the
    initial reconstruction.
    """
    check_finite("image", x)
    if mask.shape[-2:] != x.shape[-2:]:
        raise ValueError("mask spatial shape must match the image")
    if not torch.logical_or(mask == 0, mask == 1).all():
        raise ValueError("mask must be binary")
    if mask.sum() == 0:
        raise ValueError("all-zero mask leaves no attack surface")
    mask = mask.to(x.dtype)
    with torch.no_grad():
        if inpaint:
            x_rec = region_reconstruct(x, mask, pipeline, seed)
        else:
            x_rec = pipeline.reconstruct(x, seed)
    x_rec = torch.clamp(x_rec.detach(), 0.0, 1.0)
    delta = torch.zeros_like(x)
    for i in range(config.iterations):
        d = delta.clone().requires_grad_(True)
        composite = mask * (x_rec + mask * d) + (1.0 - mask) * x
        logits = classifier(composite)
        if not torch.isfinite(logits).all():
            raise AttackAborted(f"classifier produced non-finite logits at iteration {i}", [])
        loss = F.cross_entropy(logits, y)
        (grad,) = torch.autograd.grad(loss, d)
        step = torch.sign(grad) if config.update_rule == "sign" else grad
        delta = project_linf(delta + config.eta * step, config.epsilon)
        delta = (torch.clamp(x_rec + delta, 0.0, 1.0) - x_rec) * mask
        delta = delta.detach()
    return (mask * (x_rec + delta) + (1.0 - mask) * x).detach()
