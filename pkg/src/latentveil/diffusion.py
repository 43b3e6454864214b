"""Forward diffusion, conditional reverse steps, and clean-latent estimation.

The reverse-step mean follows the standard epsilon parameterization

    mu(z_t, t, c) = (z_t - beta_t / sqrt(1 - abar_t) * eps(z_t, t, c)) / sqrt(alpha_t)

with a fixed posterior standard deviation sigma_t = sqrt(beta_t) supplied by
the schedule.  The clean-latent estimate deliberately pairs the state
produced at step t (i.e. z at level t-1) with the level-t constants:

    z0_est = (z - sqrt(1 - abar_t) * eps(z, t, c)) / sqrt(abar_t)

That index pairing is the contract the attack loop relies on; do not
"fix" it to abar_{t-1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .schedule import NoiseSchedule


@dataclass
class LatentCode:
    """A latent tensor (C, H, W) plus the diffusion level it sits at."""

    data: torch.Tensor
    step_index: int = 0

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ValueError(f"latent must be (C, H, W), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("latent contains non-finite values")
        if self.step_index < 0:
            raise ValueError(f"step_index must be >= 0, got {self.step_index}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape {tuple(b.shape)} does not match {tuple(a.shape)}")


def forward_diffuse(z0: LatentCode, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> LatentCode:
    """Jump straight to noise level t:  sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside [1, {sched.T}]")
    _check_same_shape(z0.data, eps, "forward_diffuse noise")
    abar = sched.alpha_bar_at(t)
    out = math.sqrt(abar) * z0.data + math.sqrt(1.0 - abar) * eps
    return LatentCode(out, step_index=t)


def reverse_step(z_t: LatentCode, t: int, c: LatentCode | None, model,
                 sched: NoiseSchedule, noise: torch.Tensor | None) -> LatentCode:
    """One denoising step from level t to t-1.

    ``model`` is called as ``model(z, t, cond)`` and must return a tensor of
    z's shape.  The final step (t == 1) is noiseless; ``noise`` may then
    be None and is ignored otherwise.
    """
    if t < 1:
        raise ValueError(f"reverse step needs t >= 1, got {t}")
    if t > sched.T:
        raise ValueError(f"step {t} outside [1, {sched.T}]")
    if z_t.step_index != t:
        raise ValueError(f"latent is at level {z_t.step_index}, expected {t}")
    if t > 1:
        if noise is None:
            raise ValueError("steps above 1 need a noise tensor")
        _check_same_shape(z_t.data, noise, "reverse_step noise")
    cond = None if c is None else c.data
    eps_hat = model(z_t.data, t, cond)
    _check_same_shape(z_t.data, eps_hat, "model output")

    alpha = sched.alpha_at(t)
    abar = sched.alpha_bar_at(t)
    mean = (z_t.data - sched.beta_at(t) / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
    if t > 1:
        mean = mean + sched.sigma_at(t) * noise
    return LatentCode(mean, step_index=t - 1)


def estimate_z0(z_prev: LatentCode, t: int, model, sched: NoiseSchedule,
                cond: LatentCode | None = None) -> LatentCode:
    """One-shot clean-latent estimate from the state produced at step t."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside [1, {sched.T}]")
    c = None if cond is None else cond.data
    eps_hat = model(z_prev.data, t, c)
    _check_same_shape(z_prev.data, eps_hat, "model output")
    abar = sched.alpha_bar_at(t)
    out = (z_prev.data - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)
    return LatentCode(out, step_index=0)


class EpsilonModel(nn.Module):
    """Small conditional denoiser: eps(z, t, cond) on (C, H, W) latents.

    The condition is concatenated channel-wise to the input; the step index
    enters through a sinusoidal embedding added as a per-channel bias.
    """

    def __init__(self, channels: int = 4, cond_channels: int = 4, hidden: int = 64,
                 time_dim: int = 16):
        super().__init__()
        self.channels = channels
        self.cond_channels = cond_channels
        self.hidden = hidden
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden)
        )
        self.conv_in = nn.Conv2d(channels + cond_channels, hidden, 3, padding=1)
        self.conv_mid1 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv_mid2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv_out = nn.Conv2d(hidden, channels, 3, padding=1)
        # start as the zero map so the initial denoising loss is ~Var(eps)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        self.double()

    def _time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        half = self.time_dim // 2
        freqs = torch.exp(
            torch.arange(half, dtype=torch.float64) * (-math.log(1000.0) / max(half - 1, 1))
        )
        ang = t.double()[:, None] * freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)

    def forward(self, z: torch.Tensor, t, cond: torch.Tensor | None) -> torch.Tensor:
        single = z.dim() == 3
        if single:
            z = z.unsqueeze(0)
            if cond is not None and cond.dim() == 3:
                cond = cond.unsqueeze(0)
        if cond is None:
            raise ValueError("conditional model needs a condition latent")
        if cond.shape[0] != z.shape[0]:
            cond = cond.expand(z.shape[0], -1, -1, -1)
        if isinstance(t, int):
            t = torch.full((z.shape[0],), t, dtype=torch.float64)
        emb = self.time_mlp(self._time_embedding(t))[:, :, None, None]
        h = F.silu(self.conv_in(torch.cat([z, cond], dim=1)) + emb)
        h = h + F.silu(self.conv_mid1(h))
        h = h + F.silu(self.conv_mid2(h))
        out = self.conv_out(h)
        return out.squeeze(0) if single else out


@dataclass
class EpsilonTrainConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    val_fraction: float = 0.1
    hidden: int = 64
    report: dict = field(default_factory=dict, repr=False)


def _fixed_val_probes(n: int, shape, T: int, gen: torch.Generator):
    ts = torch.randint(1, T + 1, (n,), generator=gen)
    eps = torch.randn((n, *shape), generator=gen, dtype=torch.float64)
    return ts, eps


def _val_loss(model, z0: torch.Tensor, cond: torch.Tensor, ts, eps, sched) -> float:
    abar = sched.alpha_bar[ts - 1][:, None, None, None]
    zt = torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps
    with torch.no_grad():
        pred = model(zt, ts.double(), cond)
    return float(torch.mean((pred - eps) ** 2))


def train_epsilon_model(latents: torch.Tensor, conds: torch.Tensor,
                        sched: NoiseSchedule, cfg: EpsilonTrainConfig) -> EpsilonModel:
    """Train the denoiser on (z0, condition) pairs with the usual
    noise-prediction objective.

    A fixed probe set on the held-out split measures the denoising loss
    before and after training; the final value must improve on the initial
    one and both are stored in ``cfg.report``.
    """
    if latents.shape[0] == 0:
        raise ValueError("empty training set")
    _check_same_shape(latents[0], conds[0], "condition latents")
    n = latents.shape[0]

    torch.manual_seed(cfg.seed)
    model = EpsilonModel(channels=latents.shape[1], cond_channels=conds.shape[1],
                         hidden=cfg.hidden)
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    n_val = max(1, int(round(n * cfg.val_fraction))) if n > 1 else 0
    perm = torch.randperm(n, generator=gen)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:  # single-sample corner: memorize it, probe it
        train_idx = perm
        val_idx = perm
    zv, cv = latents[val_idx], conds[val_idx]
    probe_ts, probe_eps = _fixed_val_probes(len(val_idx), latents.shape[1:], sched.T, gen)

    initial_val = _val_loss(model, zv, cv, probe_ts, probe_eps, sched)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    for step in range(cfg.steps):
        idx = train_idx[torch.randint(0, len(train_idx), (min(cfg.batch_size, len(train_idx)),),
                                      generator=gen)]
        z0 = latents[idx]
        ts = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
        eps = torch.randn_like(z0)
        abar = sched.alpha_bar[ts - 1][:, None, None, None]
        zt = torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps
        pred = model(zt, ts.double(), conds[idx])
        loss = torch.mean((pred - eps) ** 2)
        if not torch.isfinite(loss):
            raise RuntimeError(f"denoising loss diverged (non-finite) at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))

    final_val = _val_loss(model, zv, cv, probe_ts, probe_eps, sched)
    cfg.report.update(
        initial_val_loss=initial_val, final_val_loss=final_val,
        train_loss_head=history[: max(1, cfg.steps // 10)],
        train_loss_tail=history[-max(1, cfg.steps // 10):],
    )
    model.eval()
    return model
