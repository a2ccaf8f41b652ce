"""Teacher training and adversarial distillation of a few-step student.

The teacher is a standard denoising noise predictor trained by score matching.
The student shares the architecture (and starts from the teacher's weights) but
is trained so that its *one-step* clean prediction at a small set of timesteps
matches the data manifold: a hinge-GAN discriminator term plus a distillation
term that further-diffuses the student output and asks the (frozen) teacher's
one-step denoise of it to agree, teacher gradients stopped.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import torch

from .models import Discriminator, EpsNet, TrainingDiverged, TrainingGateError
from .schedule import Condition, GuidanceConfig, NoiseSchedule, NULL_CONDITION, strength_to_time
from .samplers import guided_eps

log = logging.getLogger(__name__)


def student_times(schedule: NoiseSchedule, n: int) -> tuple[float, ...]:
    """The student's timestep set: a near-zero anchor plus a halving ladder from T.

    n=4 gives {t_2, T/4, T/2, T} (snapped to the grid); shallow steps are dense
    where few-step reconstruction quality is decided.
    """
    if not 1 <= n <= 4:
        raise ValueError("student timestep count must be in {1, 2, 3, 4}")
    if n == 1:
        return (schedule.terminal_time,)
    times = [schedule.time_at(2)]
    times += [strength_to_time(0.5 ** (n - 1 - j), schedule) for j in range(1, n)]
    return tuple(dict.fromkeys(sorted(times)))


@dataclass
class TeacherModel:
    """Frozen-after-training noise predictor with its schedule."""

    net: EpsNet
    schedule: NoiseSchedule

    def predict(self, z: torch.Tensor, t: float, condition: Condition = NULL_CONDITION) -> torch.Tensor:
        return self.net(z, t, condition)

    __call__ = predict

    def eval_(self) -> "TeacherModel":
        self.net.eval()
        return self

    def freeze(self) -> "TeacherModel":
        for p in self.net.parameters():
            p.requires_grad_(False)
        return self.eval_()

    def denoise_one_step(self, z_t: torch.Tensor, t: float, condition: Condition = NULL_CONDITION) -> torch.Tensor:
        a, s = self.schedule.alpha(t), self.schedule.sigma(t)
        return (z_t - s * self.predict(z_t, t, condition)) / a


@dataclass
class StudentModel:
    """Few-step predictor of the clean latent, restricted to its timestep set."""

    net: EpsNet
    schedule: NoiseSchedule
    t_student: tuple[float, ...]

    def __post_init__(self):
        if not 1 <= len(self.t_student) <= 4:
            raise ValueError("student timestep set must have 1-4 entries")
        for t in self.t_student:
            if not self.schedule.is_grid_time(t):
                raise ValueError(f"student time {t!r} is off the teacher grid")

    def predict(self, z: torch.Tensor, t: float, condition: Condition = NULL_CONDITION) -> torch.Tensor:
        """Raw noise estimate; usable at any grid time (the inverter queries off-set times)."""
        return self.net(z, t, condition)

    __call__ = predict

    def eval_(self) -> "StudentModel":
        self.net.eval()
        return self

    def require_student_time(self, t: float) -> None:
        if not any(abs(t - ts) <= 1e-12 for ts in self.t_student):
            raise ValueError(f"t={t!r} is not in the student timestep set {self.t_student}")

    def entry_time(self, t: float) -> float:
        """Smallest student time >= t (generation entry point for a noised latent)."""
        candidates = [ts for ts in self.t_student if ts >= t - 1e-12]
        if not candidates:
            return max(self.t_student)
        return min(candidates)


def predict_clean(
    student: StudentModel,
    z_t: torch.Tensor,
    omega: float,
    condition: Condition,
    t: float,
) -> torch.Tensor:
    """Single-query estimate of the clean latent at a student timestep.

    Differentiable with respect to ``z_t``; rejects times outside the student set.
    """
    student.require_student_time(t)
    if z_t.dim() != 4 or z_t.shape[1] != 1:
        raise ValueError("expected (B, 1, H, W) latents")
    eps = guided_eps(student.predict, z_t, t, condition, GuidanceConfig(omega))
    a, s = student.schedule.alpha(t), student.schedule.sigma(t)
    return (z_t - s * eps) / a


def generate_student(
    student: StudentModel,
    z_top: torch.Tensor,
    condition: Condition,
    omega: float,
    seed: int,
) -> torch.Tensor:
    """Few-step generation: predict clean, renoise to the next lower student time."""
    times = sorted(student.t_student, reverse=True)
    gen = torch.Generator().manual_seed(int(seed))
    z = z_top
    x0 = None
    for i, t in enumerate(times):
        x0 = predict_clean(student, z, omega, condition, t)
        if i + 1 < len(times):
            t_next = times[i + 1]
            a, s = student.schedule.alpha(t_next), student.schedule.sigma(t_next)
            noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
            z = a * x0 + s * noise
    return x0


@dataclass(frozen=True)
class TeacherTrainConfig:
    epochs: int = 300
    batch_size: int = 256
    lr: float = 2e-3
    channels: int = 48
    cond_dropout: float = 0.1
    seed: int = 0
    min_improvement: float = 0.5  # vs the untrained baseline on held-out data


def _dsm_eval_mse(net: EpsNet, latents: torch.Tensor, labels: torch.Tensor | None, schedule: NoiseSchedule, seed: int) -> float:
    """Held-out denoising MSE over the deep-noise half of the grid.

    Shallow times are excluded: there the Bayes floor is ~E||eps||^2 (the noise
    is unrecoverable), so improvement over an untrained net is not measurable.
    """
    gen = torch.Generator().manual_seed(seed)
    n = len(latents)
    grid = schedule.grid[schedule.num_steps // 2 :]
    t = grid[torch.randint(0, len(grid), (n,), generator=gen)]
    eps = torch.randn(latents.shape, generator=gen, dtype=latents.dtype)
    a, s = schedule.alpha_sigma_t(t, dtype=latents.dtype)
    z_t = a[:, None, None, None] * latents + s[:, None, None, None] * eps
    cond_idx = labels if labels is not None else torch.full((n,), net.num_classes, dtype=torch.long)
    with torch.no_grad():
        pred = net.forward_batched(z_t, t, cond_idx)
    return torch.mean((pred - eps) ** 2).item()


def train_teacher(
    latents: torch.Tensor,
    schedule: NoiseSchedule,
    config: TeacherTrainConfig = TeacherTrainConfig(),
    labels: torch.Tensor | None = None,
    num_classes: int = 4,
    holdout: torch.Tensor | None = None,
    holdout_labels: torch.Tensor | None = None,
) -> TeacherModel:
    """Denoising score matching on latent samples; enforces the improvement gate."""
    if len(latents) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(config.seed)
    net = EpsNet(channels=config.channels, num_classes=num_classes)
    ref = holdout if holdout is not None else latents
    ref_labels = holdout_labels if holdout is not None else labels
    baseline = _dsm_eval_mse(net, ref, ref_labels, schedule, seed=config.seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    grid = schedule.grid[1:]
    last_finite = copy.deepcopy(net.state_dict())
    n = len(latents)
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, config.batch_size):
            idx = perm[i : i + config.batch_size]
            z0 = latents[idx]
            b = len(idx)
            t = grid[torch.randint(0, len(grid), (b,), generator=gen)]
            eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
            a, s = schedule.alpha_sigma_t(t, dtype=z0.dtype)
            z_t = a[:, None, None, None] * z0 + s[:, None, None, None] * eps
            if labels is not None:
                cond_idx = labels[idx].clone()
                drop = torch.rand(b, generator=gen) < config.cond_dropout
                cond_idx[drop] = net.num_classes
            else:
                cond_idx = torch.full((b,), net.num_classes, dtype=torch.long)
            loss = torch.mean((net.forward_batched(z_t, t, cond_idx) - eps) ** 2)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"teacher loss went non-finite at epoch {epoch}", last_finite)
            opt.zero_grad()
            loss.backward()
            opt.step()
        last_finite = copy.deepcopy(net.state_dict())
    net.eval()
    final = _dsm_eval_mse(net, ref, ref_labels, schedule, seed=config.seed + 1)
    if final > (1.0 - config.min_improvement) * baseline:
        raise TrainingGateError(
            f"teacher held-out MSE {final:.4f} not {config.min_improvement:.0%} below baseline {baseline:.4f}"
        )
    return TeacherModel(net, schedule).freeze()


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 160
    batch_size: int = 256
    lr_student: float = 1e-3
    lr_disc: float = 2e-3
    lambda_weight: float = 2.5
    num_student_times: int = 4
    adv_weight: float = 1.0  # 0 freezes the adversarial term (pure distillation)
    distill_chain_steps: int = 6  # teacher-denoise chain length for the target
    distill_max_strength: float = 0.5  # cap on the further-diffusion depth
    cond_dropout: float = 0.15
    seed: int = 0
    collapse_patience: int = 5


def _chain_denoise(
    teacher: TeacherModel,
    z_t: torch.Tensor,
    t_index: int,
    cond_idx: torch.Tensor,
    k: int,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Denoise with at most ``k`` evenly thinned solver steps down to t=0."""
    import torch as _torch

    idxs = sorted({int(round(v)) for v in _torch.linspace(t_index, 1, min(k, t_index - 1) + 1).tolist()}, reverse=True)
    z = z_t
    b = len(z_t)
    for i_from, i_to in zip(idxs[:-1], idxs[1:]):
        t_from, t_to = schedule.time_at(i_from), schedule.time_at(i_to)
        t_vec = _torch.full((b,), t_from, dtype=_torch.float64)
        eps_hat = teacher.net.forward_batched(z, t_vec, cond_idx)
        a_f, s_f = schedule.alpha(t_from), schedule.sigma(t_from)
        a_t, s_t = schedule.alpha(t_to), schedule.sigma(t_to)
        z = a_t * (z - s_f * eps_hat) / a_f + s_t * eps_hat
    return z


@dataclass
class DistillResult:
    student: StudentModel
    discriminator: Discriminator
    history: list = field(default_factory=list)  # per-step dicts: total/adv/distill
    collapsed_early: bool = False


def distill_student(
    teacher: TeacherModel,
    latents: torch.Tensor,
    config: DistillConfig = DistillConfig(),
    labels: torch.Tensor | None = None,
    student: StudentModel | None = None,
    disc: Discriminator | None = None,
) -> DistillResult:
    """Alternating hinge-GAN / distillation training of the few-step student.

    The logged objective decomposes exactly: total = adv_weight * adv + lambda * distill.
    Teacher parameters are never touched (asserted frozen on entry).
    """
    if len(latents) == 0:
        raise ValueError("empty dataset")
    if config.lambda_weight <= 0:
        raise ValueError("distillation weight must be positive")
    torch.manual_seed(config.seed)
    schedule = teacher.schedule
    t_set = student_times(schedule, config.num_student_times)
    if student is None:
        net = copy.deepcopy(teacher.net)
        for p in net.parameters():
            p.requires_grad_(True)
        student = StudentModel(net, schedule, t_set)
    if disc is None:
        disc = Discriminator()
    opt_s = torch.optim.Adam(student.net.parameters(), lr=config.lr_student)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_disc)
    gen = torch.Generator().manual_seed(config.seed)
    times = torch.tensor(t_set, dtype=torch.float64)
    teach_grid = schedule.grid[1:]
    history: list[dict] = []
    n = len(latents)
    collapsed = False
    saturated_epochs = 0
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        epoch_correct = 0
        epoch_total = 0
        for i in range(0, n, config.batch_size):
            idx = perm[i : i + config.batch_size]
            z0 = latents[idx]
            b = len(idx)
            s_t = times[torch.randint(0, len(times), (b,), generator=gen)]
            eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
            a, sg = schedule.alpha_sigma_t(s_t, dtype=z0.dtype)
            z_s = a[:, None, None, None] * z0 + sg[:, None, None, None] * eps
            if labels is not None:
                cond_idx = labels[idx].clone()
                drop = torch.rand(b, generator=gen) < config.cond_dropout
                cond_idx[drop] = student.net.num_classes
            else:
                cond_idx = torch.full((b,), student.net.num_classes, dtype=torch.long)
            eps_hat = student.net.forward_batched(z_s, s_t, cond_idx)
            x_hat = (z_s - sg[:, None, None, None] * eps_hat) / a[:, None, None, None]

            # discriminator: hinge on real z0 vs detached student output
            d_real = disc(z0, cond_idx)
            d_fake = disc(x_hat.detach(), cond_idx)
            d_loss = torch.mean(torch.relu(1.0 - d_real) + torch.relu(1.0 + d_fake))
            if config.adv_weight > 0:
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
            epoch_correct += int((d_real > 0).sum() + (d_fake < 0).sum())
            epoch_total += 2 * b

            # student: adversarial term + lambda * distillation term; the target
            # further-diffuses the student output and denoises it with a short
            # teacher chain (gradient stopped)
            adv = -torch.mean(disc(x_hat, cond_idx)) if config.adv_weight > 0 else x_hat.new_zeros(())
            max_idx = max(schedule.time_index(strength_to_time(config.distill_max_strength, schedule)), 2)
            t2_idx = int(torch.randint(1, max_idx, (1,), generator=gen)) + 1
            t2 = schedule.time_at(t2_idx)
            eps2 = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
            a2, s2 = schedule.alpha(t2), schedule.sigma(t2)
            z_t2 = a2 * x_hat + s2 * eps2
            with torch.no_grad():
                target = _chain_denoise(teacher, z_t2, t2_idx, cond_idx, config.distill_chain_steps, schedule)
            distill = torch.mean((x_hat - target.detach()) ** 2)
            total = config.adv_weight * adv + config.lambda_weight * distill
            if not torch.isfinite(total):
                raise TrainingDiverged(f"distillation loss went non-finite at epoch {epoch}", student.net.state_dict())
            opt_s.zero_grad()
            total.backward()
            opt_s.step()
            history.append(
                {
                    "epoch": epoch,
                    "total": total.item(),
                    "adv": adv.item(),
                    "distill": distill.item(),
                    "adv_weight": config.adv_weight,
                    "lambda": config.lambda_weight,
                }
            )
        if config.adv_weight > 0 and epoch_total and epoch_correct == epoch_total:
            saturated_epochs += 1
            if saturated_epochs >= config.collapse_patience:
                log.warning("discriminator saturated at 100%% for %d epochs; stopping early", saturated_epochs)
                collapsed = True
                break
        else:
            saturated_epochs = 0
    student.eval_()
    return DistillResult(student=student, discriminator=disc, history=history, collapsed_early=collapsed)
