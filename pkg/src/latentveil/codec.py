"""Deterministic convolutional autoencoder between pixels and latent space.

4x spatial downsampling into a 4-channel latent; the decoder ends in a
sigmoid so outputs stay inside [0, 1] for any latent while remaining smooth
enough for gradient checks against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .diffusion import LatentCode
from .faces import ImageSample


class Codec(nn.Module):
    def __init__(self, image_size: int = 32, latent_channels: int = 4, hidden: int = 48):
        super().__init__()
        if image_size % 4 != 0:
            raise ValueError(f"image size must be divisible by 4, got {image_size}")
        self.image_size = image_size
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.latent_size = image_size // 4
        self.encoder = nn.Sequential(
            nn.Conv2d(3, hidden, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden * 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden * 2, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, hidden * 2, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(hidden * 2, hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )
        self.double()

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_size, self.latent_size)

    def encode_batch(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def decode_batch(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z))


def encode(codec: Codec, x: ImageSample) -> LatentCode:
    """Map an image to its latent code (diffusion level 0)."""
    if x.pixels.shape[1] != codec.image_size or x.pixels.shape[2] != codec.image_size:
        raise ValueError(
            f"image {tuple(x.pixels.shape)} does not match codec size {codec.image_size}"
        )
    z = codec.encode_batch(x.pixels.unsqueeze(0)).squeeze(0)
    return LatentCode(z, step_index=0)


def decode(codec: Codec, z: LatentCode) -> ImageSample:
    """Map a latent back to pixel space; differentiable w.r.t. z.data."""
    if tuple(z.data.shape) != codec.latent_shape:
        raise ValueError(f"latent {z.shape} does not match codec {codec.latent_shape}")
    x = codec.decode_batch(z.data.unsqueeze(0)).squeeze(0)
    return ImageSample(x)


def psnr_db(a: torch.Tensor, b: torch.Tensor, cap: float = 100.0) -> float:
    mse = float(torch.mean((a - b) ** 2).detach())
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * torch.log10(torch.tensor(1.0 / mse)).item())


@dataclass
class CodecTrainConfig:
    steps: int = 800
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    val_fraction: float = 0.1
    hidden: int = 48
    min_dataset: int = 100
    report: dict = field(default_factory=dict, repr=False)


def train_codec(images: torch.Tensor, cfg: CodecTrainConfig) -> Codec:
    """Fit the autoencoder on a (N, 3, S, S) image stack.

    Stores validation PSNR (mean over the held-out split) in ``cfg.report``.
    ``min_dataset`` guards the production path; single-image memorization
    runs must lower it explicitly.
    """
    n = images.shape[0]
    if n < cfg.min_dataset:
        raise ValueError(f"dataset of {n} images is below the required {cfg.min_dataset}")

    torch.manual_seed(cfg.seed)
    codec = Codec(image_size=images.shape[-1], hidden=cfg.hidden)
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    n_val = max(1, int(round(n * cfg.val_fraction)))
    perm = torch.randperm(n, generator=gen)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:  # single-image corner: memorize it, probe it
        train_idx = perm
        val_idx = perm

    opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
    for step in range(cfg.steps):
        idx = train_idx[torch.randint(0, len(train_idx), (min(cfg.batch_size, len(train_idx)),),
                                      generator=gen)]
        x = images[idx]
        recon = codec.decode_batch(codec.encode_batch(x))
        loss = F.mse_loss(recon, x)
        if not torch.isfinite(loss):
            raise RuntimeError(f"reconstruction loss diverged (non-finite) at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()

    codec.eval()
    with torch.no_grad():
        xv = images[val_idx]
        rv = codec.decode_batch(codec.encode_batch(xv))
        val_psnr = sum(psnr_db(rv[i], xv[i]) for i in range(len(val_idx))) / len(val_idx)
    cfg.report.update(val_psnr=val_psnr, n_train=len(train_idx), n_val=len(val_idx))
    return codec
