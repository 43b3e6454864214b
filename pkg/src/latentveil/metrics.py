"""Evaluation battery: attack success rate at a calibrated threshold,
PSNR, windowed SSIM, and a Fréchet distance between feature clouds.

The Fréchet metric replaces the usual Inception features with a held-out
toy recognizer's penultimate layer, so its absolute scale is meaningful
only for comparisons within this codebase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .codec import psnr_db
from .faces import ImageSample
from .recognize import Recognizer, embed_batch

PSNR_CAP_DB = 100.0


@dataclass
class MetricsReport:
    asr_per_model: dict[str, float]
    psnr_mean: float
    ssim_mean: float
    frechet_distance: float
    n_samples: int
    config_fingerprint: str
    extras: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name, v in self.asr_per_model.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"asr[{name}]={v} outside [0, 1]")
        if self.frechet_distance < 0:
            raise ValueError(f"frechet_distance {self.frechet_distance} < 0")
        if self.n_samples <= 0:
            raise ValueError(f"n_samples must be positive, got {self.n_samples}")

    def to_dict(self) -> dict:
        return {
            "asr_per_model": dict(self.asr_per_model),
            "psnr_mean": self.psnr_mean,
            "ssim_mean": self.ssim_mean,
            "frechet_distance": self.frechet_distance,
            "n_samples": self.n_samples,
            "config_fingerprint": self.config_fingerprint,
            "extras": self.extras,
        }


def asr(adversarial_set: list[tuple[ImageSample, ImageSample]],
        r: Recognizer) -> float:
    """Fraction of (adversarial, target) pairs scoring above the threshold."""
    if not adversarial_set:
        raise ValueError("empty adversarial set; ASR undefined")
    if r.tau is None:
        raise ValueError(f"recognizer {r.name!r} has no calibrated threshold")
    with torch.no_grad():
        xa = torch.stack([p[0].pixels for p in adversarial_set])
        xr = torch.stack([p[1].pixels for p in adversarial_set])
        sims = (embed_batch(r, xa) * embed_batch(r, xr)).sum(dim=1)
    return float((sims > r.tau).double().mean())


def psnr(a: ImageSample, b: ImageSample) -> float:
    """10*log10(1/MSE) on the [0,1] range, capped at 100 dB for zero MSE."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"shape mismatch {tuple(a.pixels.shape)} vs {tuple(b.pixels.shape)}")
    return psnr_db(a.pixels, b.pixels, cap=PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).reshape(1, 1, size, size)


def ssim(a: ImageSample, b: ImageSample, window_size: int = 11,
         sigma: float = 1.5) -> float:
    """Mean windowed SSIM on channel-mean grayscale, valid windows only.

    Stabilizers C1 = 0.01^2 and C2 = 0.03^2 assume the [0,1] pixel range.
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"shape mismatch {tuple(a.pixels.shape)} vs {tuple(b.pixels.shape)}")
    h, w = a.pixels.shape[-2:]
    if h < window_size or w < window_size:
        raise ValueError(f"image {h}x{w} smaller than the {window_size}-pixel window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    win = _gaussian_window(window_size, sigma)
    xa = a.pixels.mean(dim=0, keepdim=True).unsqueeze(0).double()
    xb = b.pixels.mean(dim=0, keepdim=True).unsqueeze(0).double()
    mu_a = F.conv2d(xa, win)
    mu_b = F.conv2d(xb, win)
    var_a = F.conv2d(xa * xa, win) - mu_a ** 2
    var_b = F.conv2d(xb * xb, win) - mu_b ** 2
    cov = F.conv2d(xa * xb, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def _psd_sqrt_eigvals(m: np.ndarray, tol: float = -1e-8) -> np.ndarray:
    vals = np.linalg.eigvalsh(m)
    if vals.min() < tol:
        raise ValueError(f"matrix eigenvalue {vals.min():.3e} below tolerance {tol}")
    return np.sqrt(np.clip(vals, 0.0, None))


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    Tr((S_a S_b)^{1/2}) is computed as the eigenvalue-sum square root of
    sqrt(S_a) S_b sqrt(S_a), which is symmetric PSD, so plain eigh
    suffices; eigenvalues below -1e-8 signal a real failure and raise.
    """
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim == 1:
        fa = fa[:, None]
    if fb.ndim == 1:
        fb = fb[:, None]
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    d = fa.shape[1]
    for name, f_ in (("a", fa), ("b", fb)):
        if f_.shape[0] < 2 * d:
            raise ValueError(
                f"set {name} has {f_.shape[0]} samples, need >= {2 * d} for dim {d}"
            )
        if not np.isfinite(f_).all():
            raise ValueError(f"non-finite features in set {name}")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False).reshape(d, d)
    cov_b = np.cov(fb, rowvar=False).reshape(d, d)

    vals_a, vecs_a = np.linalg.eigh(cov_a)
    if vals_a.min() < -1e-8:
        raise ValueError(f"covariance eigenvalue {vals_a.min():.3e} below tolerance")
    root_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    cross = _psd_sqrt_eigvals(root_a @ cov_b @ root_a)

    fd = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b)
               - 2.0 * cross.sum())
    if fd < -1e-6:
        raise ValueError(f"negative Fréchet distance {fd}; covariance estimate broken")
    return max(fd, 0.0)


def recognizer_features(r: Recognizer, images: list[ImageSample]) -> np.ndarray:
    """Penultimate-layer features of a batch, as an (n, d) float64 array."""
    with torch.no_grad():
        x = torch.stack([im.pixels for im in images])
        return r.net.features(x).numpy()


def region_change(x_before: ImageSample, x_after: ImageSample,
                  sensitive_mask: torch.Tensor) -> tuple[float, float]:
    """Mean absolute pixel change inside and outside the sensitive region.

    ``sensitive_mask`` is (1, H, W) with 1 marking sensitive pixels.
    """
    diff = (x_after.pixels - x_before.pixels).abs()
    m = sensitive_mask.to(diff.dtype)
    inside_n = float(m.sum()) * diff.shape[0]
    outside_n = float((1 - m).sum()) * diff.shape[0]
    if inside_n == 0 or outside_n == 0:
        raise ValueError("mask must contain both region classes")
    inside = float((diff * m).sum() / inside_n)
    outside = float((diff * (1 - m)).sum() / outside_n)
    return inside, outside
