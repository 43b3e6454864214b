"""Identity masks, masked sources, and the latent condition.

Mask polarity, used everywhere in this package: value 1 marks
identity-AGNOSTIC pixels (free to edit), value 0 marks identity-SENSITIVE
pixels (preserved).  The masked source therefore keeps exactly the
sensitive pixels:

    x_m = x * (1 - M)

and its latent embedding is the condition that steers the denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .codec import Codec, encode
from .diffusion import LatentCode
from .faces import DEFAULT_SENSITIVE_LABELS, FaceDataset, ImageSample


@dataclass
class IdentityMask:
    """Binary (1, H, W) mask; 1 = agnostic/editable, 0 = sensitive/preserved."""

    mask: torch.Tensor

    def __post_init__(self):
        if self.mask.dim() != 3 or self.mask.shape[0] != 1:
            raise ValueError(f"mask must be (1, H, W), got {tuple(self.mask.shape)}")
        vals = torch.unique(self.mask)
        if not bool(torch.isin(vals, torch.tensor([0.0, 1.0], dtype=self.mask.dtype)).all()):
            raise ValueError("mask values must be exactly 0 or 1")


@dataclass
class MaskOracleConfig:
    """How parse_mask resolves masks.

    mode "dataset": look up the generator's ground-truth region map by
    identity label (requires ``dataset``); "ellipse": centered-ellipse
    heuristic for arbitrary images; "none": all-sensitive override, i.e. a
    zero mask, which turns the condition into the full source image.
    ``sensitive_labels`` picks which region labels count as sensitive in
    dataset mode.
    """

    mode: str = "dataset"
    dataset: FaceDataset | None = None
    sensitive_labels: tuple = DEFAULT_SENSITIVE_LABELS

    def __post_init__(self):
        if self.mode not in ("dataset", "ellipse", "none"):
            raise ValueError(f"unknown mask oracle mode {self.mode!r}")
        if self.mode == "dataset" and self.dataset is None:
            raise ValueError("dataset mode needs a dataset")


def ellipse_sensitive_mask(height: int, width: int) -> torch.Tensor:
    """Centered ellipse with semi-axes 0.35*W (x) and 0.45*H (y), marked
    sensitive; returns the agnostic-polarity mask."""
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ax, ay = 0.35 * width, 0.45 * height
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    inside = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
    return torch.from_numpy((~inside).astype(np.float64)).unsqueeze(0)


def parse_mask(x: ImageSample, oracle_cfg: MaskOracleConfig) -> IdentityMask:
    """Resolve the identity mask for an image; total on valid images."""
    h, w = x.pixels.shape[1], x.pixels.shape[2]
    if oracle_cfg.mode == "none":
        return IdentityMask(torch.zeros((1, h, w), dtype=torch.float64))
    if oracle_cfg.mode == "ellipse":
        return IdentityMask(ellipse_sensitive_mask(h, w))
    if x.identity_label is None or x.identity_label not in oracle_cfg.dataset.specs:
        return IdentityMask(ellipse_sensitive_mask(h, w))
    spec = oracle_cfg.dataset.specs[x.identity_label]
    sensitive = spec.sensitive_mask(oracle_cfg.sensitive_labels)
    agnostic = torch.from_numpy((~sensitive).astype(np.float64)).unsqueeze(0)
    return IdentityMask(agnostic)


def masked_source(x: ImageSample, m: IdentityMask) -> ImageSample:
    """Zero out agnostic pixels, keep sensitive ones: x * (1 - M)."""
    if m.mask.shape[1:] != x.pixels.shape[1:]:
        raise ValueError(
            f"mask {tuple(m.mask.shape)} does not match image {tuple(x.pixels.shape)}"
        )
    return ImageSample(x.pixels * (1.0 - m.mask), x.identity_label)


def make_condition(codec: Codec, x_m: ImageSample) -> LatentCode:
    """Embed the masked source; this latent conditions every reverse step."""
    return encode(codec, x_m)


def save_mask_png(m: IdentityMask, path) -> None:
    """Export as a 1-bit PNG (white = agnostic) for audit alongside outputs."""
    from PIL import Image

    arr = (m.mask.squeeze(0).numpy() > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").convert("1").save(path)
