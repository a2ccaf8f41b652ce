"""Variance-preserving noise schedule, forward noising, and guidance combination.

Conventions used across the package:

* time lives in ``[0, T]`` with ``t=0`` the clean end and ``t=T`` the noisy end;
* the marginal of the forward process is ``q(z_t | z) = N(alpha(t) z, sigma(t)^2 I)``;
* grid positions are 1-based in public APIs (index 1 is the clean endpoint,
  index N the terminal time), matching the usual ``0 = t_1 < ... < t_N = T``
  partition notation.

The schedule itself is the standard VP family with a linear beta ramp,
expressed in closed form so that grids of different resolution (e.g. 50 vs
100 steps) discretize the *same* underlying process:

    log abar(t) = -(ref_steps - 1) * (beta_min * s + (beta_max - beta_min) * s^2 / 2),

with ``s = t / T``, ``alpha = sqrt(abar)`` and ``sigma = sqrt(1 - abar)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

DTYPE = torch.float64  # schedule grid and analytic math
MODEL_DTYPE = torch.float32  # trainable nets and image data (single-core budget)

GRID_ATOL = 1e-12


class GridTimeError(ValueError):
    """A time that is not a member of the schedule grid."""


def check_finite(name: str, x: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    return x


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretized VP noise schedule over ``[0, T]``.

    ``ref_steps`` fixes the continuous process; ``num_steps`` only controls the
    grid resolution, so finer grids integrate the same ODE.
    """

    num_steps: int = 50
    terminal_time: float = 1.0
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    ref_steps: int = 50
    grid: torch.Tensor = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_steps < 2:
            raise ValueError("num_steps must be at least 2")
        if self.terminal_time <= 0:
            raise ValueError("terminal_time must be positive")
        if not (0 < self.beta_min <= self.beta_max < 1):
            raise ValueError("need 0 < beta_min <= beta_max < 1")
        grid = torch.linspace(0.0, self.terminal_time, self.num_steps, dtype=DTYPE)
        object.__setattr__(self, "grid", grid)
        if self.alpha(float(grid[0])) < 1.0 - 1e-6 or self.sigma(float(grid[0])) > 1e-3:
            raise ValueError("schedule is not near-identity at the clean end")

    def log_alpha_bar(self, t: float) -> float:
        s = t / self.terminal_time
        return -(self.ref_steps - 1) * (self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s * s)

    def alpha(self, t: float) -> float:
        return math.exp(0.5 * self.log_alpha_bar(t))

    def sigma(self, t: float) -> float:
        # -expm1 keeps sigma(0) == 0 exact and small-t values accurate
        return math.sqrt(-math.expm1(self.log_alpha_bar(t)))

    def alpha_sigma_t(self, t: torch.Tensor, dtype: torch.dtype | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Vectorized (alpha, sigma) for a tensor of times (training loops)."""
        s = t.to(DTYPE) / self.terminal_time
        log_ab = -(self.ref_steps - 1) * (self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s * s)
        out = dtype or (t.dtype if t.is_floating_point() else DTYPE)
        return torch.exp(0.5 * log_ab).to(out), torch.sqrt(-torch.expm1(log_ab)).to(out)

    def time_index(self, t: float) -> int:
        """1-based grid index of ``t``; raises :class:`GridTimeError` off-grid."""
        diffs = torch.abs(self.grid - t)
        idx = int(torch.argmin(diffs))
        if float(diffs[idx]) > GRID_ATOL:
            raise GridTimeError(f"t={t!r} is not on the schedule grid")
        return idx + 1

    def time_at(self, index: int) -> float:
        """Grid time at a 1-based index."""
        if not 1 <= index <= self.num_steps:
            raise GridTimeError(f"grid index {index} outside [1, {self.num_steps}]")
        return float(self.grid[index - 1])

    def is_grid_time(self, t: float) -> bool:
        return bool(torch.min(torch.abs(self.grid - t)) <= GRID_ATOL)

    def to_dict(self) -> dict:
        return {
            "num_steps": self.num_steps,
            "terminal_time": self.terminal_time,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "ref_steps": self.ref_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(**d)


@dataclass(frozen=True)
class Condition:
    """Conditioning signal: nothing, a class label, or a fixed embedding vector."""

    kind: str = "null"
    label: int | None = None
    embedding: torch.Tensor | None = None

    def __post_init__(self):
        if self.kind not in ("null", "class_label", "embedding"):
            raise ValueError(f"unknown condition kind {self.kind!r}")
        if self.kind == "null" and (self.label is not None or self.embedding is not None):
            raise ValueError("null condition carries no payload")
        if self.kind == "class_label":
            if self.label is None or self.label < 0:
                raise ValueError("class_label condition needs a non-negative label")
        if self.kind == "embedding":
            if self.embedding is None:
                raise ValueError("embedding condition needs a vector payload")
            check_finite("condition embedding", self.embedding)

    @property
    def is_null(self) -> bool:
        return self.kind == "null"

    @staticmethod
    def null() -> "Condition":
        return Condition("null")

    @staticmethod
    def class_label(label: int) -> "Condition":
        return Condition("class_label", label=int(label))

    @staticmethod
    def from_embedding(vec: torch.Tensor) -> "Condition":
        return Condition("embedding", embedding=vec)


NULL_CONDITION = Condition.null()


@dataclass(frozen=True)
class GuidanceConfig:
    """Strength of the conditional/unconditional extrapolation."""

    omega: float = 0.0

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("guidance strength must be non-negative")


def forward_noise(
    z: torch.Tensor, t: float, schedule: NoiseSchedule, seed: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Diffuse ``z`` to grid time ``t``: ``z_t = alpha(t) z + sigma(t) eps``.

    Returns ``(z_t, eps)`` with ``eps ~ N(0, I)`` drawn from a generator seeded
    with ``seed``; also handing back ``eps`` gives distillation its targets.
    Deterministic: identical arguments produce bit-identical outputs.
    """
    check_finite("z", z)
    if not schedule.is_grid_time(t):
        raise GridTimeError(f"t={t!r} is not on the schedule grid")
    gen = torch.Generator().manual_seed(int(seed))
    eps = torch.randn(z.shape, generator=gen, dtype=z.dtype)
    z_t = schedule.alpha(t) * z + schedule.sigma(t) * eps
    return z_t, eps


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, omega: float) -> torch.Tensor:
    """Guided noise prediction ``(1 + omega) eps_cond - omega eps_uncond``."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    if omega < 0:
        raise ValueError("guidance strength must be non-negative")
    return (1.0 + omega) * eps_cond - omega * eps_uncond


def strength_to_time(strength: float, schedule: NoiseSchedule) -> float:
    """Map a noising strength in [0, 1] to the nearest grid time.

    0 lands on the clean endpoint, 1 on the terminal time; monotone in between.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength {strength!r} outside [0, 1]")
    target = strength * schedule.terminal_time
    idx = int(torch.argmin(torch.abs(schedule.grid - target)))
    return float(schedule.grid[idx])
