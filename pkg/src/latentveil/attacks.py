"""Adversarial reverse-diffusion attack with adaptive strength, its plain
inpainting counterpart, and pixel-space signed-gradient baselines.

The main loop perturbs each intermediate latent with the gradient of the
target-identity similarity evaluated at the one-shot clean-latent estimate,
scaled by w_t = s * sigma_t so the push fades as denoising sharpens the
image.  With s = 0 the loop must reproduce the plain conditioned sampler
bit for bit, so both share the same draw order: one init noise, then one
noise tensor per step strictly above 1.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .codec import Codec, decode, encode
from .diffusion import EpsilonModel, LatentCode, estimate_z0, forward_diffuse, reverse_step
from .faces import ImageSample
from .masks import MaskOracleConfig, make_condition, masked_source, parse_mask
from .recognize import Recognizer, embed, similarity
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 45
    strength: float = 300.0
    white_box: tuple[str, ...] | None = None  # None: every recognizer passed in
    constant_strength: bool = False  # freeze w_t at its t=T value
    skip_mask: bool = False          # condition on the full source image
    seed: int = 0
    log_trajectory: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.strength < 0:
            raise ValueError(f"strength must be >= 0, got {self.strength}")
        if self.white_box is not None and len(self.white_box) == 0:
            raise ValueError("white_box, when given, needs at least one name")


@dataclass(frozen=True)
class TrajectoryPoint:
    t: int
    weight: float
    target_similarity: float


@dataclass
class AttackResult:
    image: ImageSample
    latent: LatentCode
    similarities: dict[str, float]
    trajectory: list[TrajectoryPoint] | None = None


def adaptive_weight(t: int, sched: NoiseSchedule, s: float) -> float:
    """w_t = s * sigma_t; shrinks with t because sigma does."""
    if s < 0:
        raise ValueError(f"s must be >= 0, got {s}")
    return s * float(sched.sigma_at(t))


def _target_embeddings(x_r: ImageSample, recognizers: list[Recognizer]) -> list[torch.Tensor]:
    with torch.no_grad():
        return [embed(r, x_r) for r in recognizers]


def _mean_similarity(x: ImageSample, target_embeds: list[torch.Tensor],
                     recognizers: list[Recognizer]) -> torch.Tensor:
    sims = [similarity(embed(r, x), e) for r, e in zip(recognizers, target_embeds)]
    return torch.stack(sims).mean()


def adversarial_gradient(z0_est: LatentCode, x_r: ImageSample,
                         recognizers: list[Recognizer], codec: Codec,
                         target_embeds: list[torch.Tensor] | None = None) -> torch.Tensor:
    """Gradient w.r.t. the clean-latent estimate of the mean cosine
    similarity between the decoded image and the target identity.

    The mean over recognizers is the ensemble objective; no chain rule
    runs back through the estimate itself (the caller adds the gradient
    to the current state directly).
    """
    if not recognizers:
        raise ValueError("need at least one recognizer for the gradient")
    if target_embeds is None:
        target_embeds = _target_embeddings(x_r, recognizers)
    z = z0_est.data.detach().clone().requires_grad_(True)
    x_hat = decode(codec, LatentCode(z, step_index=0))
    obj = _mean_similarity(x_hat, target_embeds, recognizers)
    (grad,) = torch.autograd.grad(obj, z)
    if not torch.isfinite(grad).all():
        raise RuntimeError(
            f"non-finite identity gradient (objective {float(obj):.6g}); aborting"
        )
    return grad.detach()


def _select_white_box(recognizers: list[Recognizer],
                      cfg: AttackConfig) -> list[Recognizer]:
    by_name = {r.name: r for r in recognizers}
    if len(by_name) != len(recognizers):
        raise ValueError("recognizer names must be unique")
    if cfg.white_box is None:
        return list(recognizers)
    missing = [n for n in cfg.white_box if n not in by_name]
    if missing:
        raise ValueError(f"unknown white-box recognizer names {missing}")
    return [by_name[n] for n in cfg.white_box]


def guided_inpaint_attack(x_s: ImageSample, x_r: ImageSample, codec: Codec,
                          eps_model: EpsilonModel, sched: NoiseSchedule,
                          recognizers: list[Recognizer],
                          mask_oracle: MaskOracleConfig,
                          cfg: AttackConfig) -> AttackResult:
    """Run the adversarial conditioned denoising loop end to end.

    Per step: one plain reverse step, a clean-latent estimate from the new
    state, and an additive identity-gradient nudge weighted by w_t.  The
    constant-strength variant freezes w_t at its initial (t = T) value;
    the mask-free variant conditions on the unmasked source image.
    """
    T = cfg.steps
    if T > sched.T:
        raise ValueError(f"steps {T} exceeds schedule length {sched.T}")
    ensemble = _select_white_box(recognizers, cfg)

    with torch.no_grad():
        z0 = encode(codec, x_s)
        oracle = replace(mask_oracle, mode="none") if cfg.skip_mask else mask_oracle
        m = parse_mask(x_s, oracle)
        c = make_condition(codec, masked_source(x_s, m))
    target_embeds = _target_embeddings(x_r, ensemble)

    gen = torch.Generator().manual_seed(cfg.seed)
    init_eps = torch.randn(z0.data.shape, generator=gen, dtype=torch.float64)
    z_hat = forward_diffuse(z0, T, init_eps, sched)

    w_init = adaptive_weight(T, sched, cfg.strength)
    trajectory: list[TrajectoryPoint] | None = [] if cfg.log_trajectory else None
    for t in range(T, 0, -1):
        try:
            noise = None
            if t > 1:
                noise = torch.randn(z0.data.shape, generator=gen, dtype=torch.float64)
            with torch.no_grad():
                z_prev = reverse_step(z_hat, t, c, eps_model, sched, noise)
                z0_est = None
                if cfg.strength > 0 or trajectory is not None:
                    z0_est = estimate_z0(z_prev, t, eps_model, sched, cond=c)
            w_t = w_init if cfg.constant_strength else adaptive_weight(t, sched, cfg.strength)
            if w_t > 0:
                g = adversarial_gradient(z0_est, x_r, ensemble, codec, target_embeds)
                z_hat = LatentCode(z_prev.data + w_t * g, step_index=t - 1)
            else:
                z_hat = z_prev
            if trajectory is not None:
                with torch.no_grad():
                    sim = _mean_similarity(decode(codec, z0_est), target_embeds, ensemble)
                trajectory.append(TrajectoryPoint(t, w_t, float(sim)))
        except Exception as e:
            raise RuntimeError(f"attack failed at step t={t}: {e}") from e

    with torch.no_grad():
        x_adv = decode(codec, z_hat)
        sims = {r.name: float(similarity(embed(r, x_adv), e))
                for r, e in zip(ensemble, target_embeds)}
    return AttackResult(image=x_adv, latent=z_hat, similarities=sims,
                        trajectory=trajectory)


def conditioned_inpaint(x_s: ImageSample, codec: Codec, eps_model: EpsilonModel,
                        sched: NoiseSchedule, mask_oracle: MaskOracleConfig,
                        steps: int, seed: int) -> ImageSample:
    """Plain conditioned denoising with no adversarial term.

    Keeps the attack loop's exact draw order so a zero-strength attack is
    bit-identical to this sampler under the same seed.
    """
    if steps < 1 or steps > sched.T:
        raise ValueError(f"steps must be in [1, {sched.T}], got {steps}")
    with torch.no_grad():
        z0 = encode(codec, x_s)
        m = parse_mask(x_s, mask_oracle)
        c = make_condition(codec, masked_source(x_s, m))
        gen = torch.Generator().manual_seed(seed)
        init_eps = torch.randn(z0.data.shape, generator=gen, dtype=torch.float64)
        z = forward_diffuse(z0, steps, init_eps, sched)
        for t in range(steps, 0, -1):
            noise = None
            if t > 1:
                noise = torch.randn(z0.data.shape, generator=gen, dtype=torch.float64)
            z = reverse_step(z, t, c, eps_model, sched, noise)
        return decode(codec, z)


def _signed_ascent(x_s: ImageSample, x_r: ImageSample,
                   recognizers: list[Recognizer], eps_bound: float,
                   step_size: float, n_iter: int,
                   momentum_decay: float) -> ImageSample:
    # Delta-space loop: project the perturbation, not the iterate, so the
    # one-step and zero-momentum reductions hold bit for bit.
    if not 0.0 <= eps_bound < 1.0:
        raise ValueError(f"eps_bound must be in [0, 1), got {eps_bound}")
    if n_iter < 1:
        raise ValueError(f"n_iter must be >= 1, got {n_iter}")
    if momentum_decay < 0:
        raise ValueError(f"momentum_decay must be >= 0, got {momentum_decay}")
    if not recognizers:
        raise ValueError("need at least one recognizer")
    target_embeds = _target_embeddings(x_r, recognizers)
    x0 = x_s.pixels.detach()
    delta = torch.zeros_like(x0)
    g_acc = torch.zeros_like(x0)
    for _ in range(n_iter):
        x = (x0 + delta).clamp(0.0, 1.0).requires_grad_(True)
        obj = _mean_similarity(ImageSample(x, x_s.identity_label),
                               target_embeds, recognizers)
        (grad,) = torch.autograd.grad(obj, x)
        # sign(grad / ||grad||_1) == sign(grad), so zero momentum decay
        # reproduces the plain projected ascent exactly
        l1 = grad.abs().sum().clamp_min(1e-12)
        g_acc = momentum_decay * g_acc + grad / l1
        delta = (delta + step_size * torch.sign(g_acc)).clamp(-eps_bound, eps_bound)
    return ImageSample((x0 + delta).clamp(0.0, 1.0), x_s.identity_label)


def fgsm_attack(x_s: ImageSample, x_r: ImageSample,
                recognizers: list[Recognizer],
                eps_bound: float = 8 / 255) -> ImageSample:
    """Single signed-gradient step toward the target identity."""
    return pgd_attack(x_s, x_r, recognizers, eps_bound,
                      step_size=eps_bound, n_iter=1)


def pgd_attack(x_s: ImageSample, x_r: ImageSample,
               recognizers: list[Recognizer], eps_bound: float = 8 / 255,
               step_size: float | None = None, n_iter: int = 10) -> ImageSample:
    """Iterative signed ascent projected onto the L-inf ball around x_s."""
    if step_size is None:
        step_size = 2.5 * eps_bound / max(n_iter, 1)
    return _signed_ascent(x_s, x_r, recognizers, eps_bound, step_size,
                          n_iter, momentum_decay=0.0)


def mifgsm_attack(x_s: ImageSample, x_r: ImageSample,
                  recognizers: list[Recognizer], eps_bound: float = 8 / 255,
                  step_size: float | None = None, n_iter: int = 10,
                  momentum_decay: float = 1.0) -> ImageSample:
    """PGD with L1-normalized gradient momentum."""
    if step_size is None:
        step_size = 2.5 * eps_bound / max(n_iter, 1)
    return _signed_ascent(x_s, x_r, recognizers, eps_bound, step_size,
                          n_iter, momentum_decay)
