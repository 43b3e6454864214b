"""Discrete noise schedules for the latent denoising process.

A schedule fixes, for every step t in [1, T]:

    beta_t   : per-step noise rate, in (0, 1]
    alpha_t  = 1 - beta_t
    abar_t   = prod_{i<=t} alpha_i          (strictly decreasing in t)
    sigma_t  = sqrt(beta_t)                 (fixed reverse-step std)

The forward marginal is  q(z_t | z_0) = N(sqrt(abar_t) z_0, (1-abar_t) I).
The reverse sampler treats sigma_t as the posterior standard deviation; the
final step (t=1) is taken noiseless by convention, but sigma_1 itself stays
sqrt(beta_1) so strength weights derived from it remain nonzero.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed schedule constants, float64 tensors of length T.

    Steps are addressed 1-based through the ``*_at`` accessors; the raw
    tensors are 0-based (entry ``i`` belongs to step ``i + 1``).
    """

    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    posterior_sigma: torch.Tensor

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")

    def beta_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.alpha_bar[t - 1])

    def sigma_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.posterior_sigma[t - 1])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a linear-beta schedule over ``T`` steps.

    ``beta`` is interpolated linearly from ``beta_start`` to ``beta_end``
    (both endpoints must lie in (0, 1] with start <= end), then alpha,
    alpha_bar and posterior_sigma are derived from it.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end <= 1.0):
        raise ValueError(
            f"beta range must satisfy 0 < start <= end <= 1, got ({beta_start}, {beta_end})"
        )
    if T == 1:
        beta = torch.tensor([beta_start], dtype=torch.float64)
    else:
        beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    posterior_sigma = torch.sqrt(beta)
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_sigma=posterior_sigma,
    )
