"""Independent analytic oracles used by the tests.

These stay deliberately separate from the package code paths they check:
closed-form optimal noise predictors for Gaussian and two-mode-mixture data,
the exact deterministic-flow endpoint for the linear-Gaussian model, and exact
posteriors for mode assignment.
"""

from __future__ import annotations

import torch

from diffadv.schedule import NoiseSchedule


def gaussian_eps_star(mu0: torch.Tensor, sigma0: float, schedule: NoiseSchedule):
    """Optimal noise predictor for data ~ N(mu0, sigma0^2 I).

    eps*(z, t) = sigma(t) (z - alpha(t) mu0) / (alpha(t)^2 sigma0^2 + sigma(t)^2)
    """

    def predictor(z: torch.Tensor, t: float, condition=None) -> torch.Tensor:
        a, s = schedule.alpha(t), schedule.sigma(t)
        return s * (z - a * mu0) / (a * a * sigma0 * sigma0 + s * s)

    return predictor


def gaussian_flow_endpoint(z_T: torch.Tensor, mu0: torch.Tensor, sigma0: float, schedule: NoiseSchedule) -> torch.Tensor:
    """Exact deterministic-flow endpoint at t=0 started from z_T at t=T.

    The flow preserves the marginal quantile: z_t = alpha mu0 + s_t u with
    s_t^2 = alpha^2 sigma0^2 + sigma^2 and constant u.
    """
    T = schedule.terminal_time
    aT, sT = schedule.alpha(T), schedule.sigma(T)
    s_marg = (aT * aT * sigma0 * sigma0 + sT * sT) ** 0.5
    u = (z_T - aT * mu0) / s_marg
    return mu0 + sigma0 * u


def mixture_posterior_weights(
    z_t: torch.Tensor, modes: torch.Tensor, sigma0: float, t: float, schedule: NoiseSchedule
) -> torch.Tensor:
    """Posterior component probabilities for an equal-weight two-mode mixture.

    ``z_t`` is (B, ...), ``modes`` is (2, ...); returns (B, 2).
    """
    a, s = schedule.alpha(t), schedule.sigma(t)
    var = a * a * sigma0 * sigma0 + s * s
    flat = z_t.reshape(len(z_t), -1)
    logps = []
    for k in range(2):
        mean = (a * modes[k]).reshape(1, -1)
        logps.append(-0.5 * ((flat - mean) ** 2).sum(dim=1) / var)
    logp = torch.stack(logps, dim=1)
    return torch.softmax(logp, dim=1)


def mixture_eps_star(modes: torch.Tensor, sigma0: float, schedule: NoiseSchedule):
    """Optimal noise predictor for the equal-weight two-mode Gaussian mixture.

    E[eps | z_t] = (z_t - alpha E[z0 | z_t]) / sigma with the component-wise
    Gaussian posterior mean E[z0 | z_t, k] = (alpha sigma0^2 z_t + sigma^2 mu_k) / (alpha^2 sigma0^2 + sigma^2).
    """

    def predictor(z_t: torch.Tensor, t: float, condition=None) -> torch.Tensor:
        a, s = schedule.alpha(t), schedule.sigma(t)
        var = a * a * sigma0 * sigma0 + s * s
        w = mixture_posterior_weights(z_t, modes, sigma0, t, schedule)
        post_means = []
        for k in range(2):
            post_means.append((a * sigma0 * sigma0 * z_t + s * s * modes[k]) / var)
        ez0 = w[:, 0].reshape(-1, 1, 1, 1) * post_means[0] + w[:, 1].reshape(-1, 1, 1, 1) * post_means[1]
        return (z_t - a * ez0) / s if s > 0 else torch.zeros_like(z_t)

    return predictor


def mixture_optimal_mse(
    modes: torch.Tensor, sigma0: float, schedule: NoiseSchedule, n: int = 4000, seed: int = 99
) -> float:
    """Monte-Carlo estimate of the Bayes-optimal denoising MSE over the grid."""
    gen = torch.Generator().manual_seed(seed)
    comps = torch.randint(0, 2, (n,), generator=gen)
    z0 = modes[comps] + sigma0 * torch.randn((n,) + modes.shape[1:], generator=gen, dtype=modes.dtype)
    grid = schedule.grid[1:]
    t_idx = torch.randint(0, len(grid), (n,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=modes.dtype)
    pred = mixture_eps_star(modes, sigma0, schedule)
    total = 0.0
    for i in range(n):
        t = float(grid[t_idx[i]])
        a, s = schedule.alpha(t), schedule.sigma(t)
        z_t = a * z0[i : i + 1] + s * eps[i : i + 1]
        total += float(((pred(z_t, t) - eps[i : i + 1]) ** 2).mean())
    return total / n


def nearest_mode(z: torch.Tensor, modes: torch.Tensor) -> torch.Tensor:
    """Index of the closest mode per sample."""
    flat = z.reshape(len(z), -1)
    d = torch.stack([((flat - modes[k].reshape(1, -1)) ** 2).sum(dim=1) for k in range(2)], dim=1)
    return d.argmin(dim=1)


def directional_derivative(fn, x: torch.Tensor, v: torch.Tensor, h: float = 1e-3) -> torch.Tensor:
    """Central finite-difference directional derivative of a tensor function."""
    return (fn(x + h * v) - fn(x - h * v)) / (2.0 * h)
