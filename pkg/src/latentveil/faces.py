"""Procedural toy-face dataset with ground-truth region maps.

Each identity is a point in a small geometric parameter space (eye spacing,
nose length, mouth curvature, face hue, face-oval axes).  Those parameters
fully determine the face interior, so they are the only identity signal.
Per-image nuisance parameters (background hue, hair band height, speckle
jitter) touch only the surround: two images of the same identity are
pixel-identical inside the face oval.

The renderer also emits a per-identity region label map used as the
ground-truth mask oracle:

    0 = surround (background / hair band)
    1 = skin, 2 = eyes, 3 = nose, 4 = mouth
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np
import torch

REGION_SURROUND = 0
REGION_SKIN = 1
REGION_EYES = 2
REGION_NOSE = 3
REGION_MOUTH = 4

# Region labels treated as identity-sensitive unless the oracle is
# configured otherwise.
DEFAULT_SENSITIVE_LABELS = (REGION_SKIN, REGION_EYES, REGION_NOSE, REGION_MOUTH)

# Identity parameter ranges, as fractions of the image side.
_IDENTITY_RANGES = {
    "face_ax": (0.25, 0.34),
    "face_ay": (0.31, 0.41),
    "eye_spacing": (0.09, 0.20),
    "eye_row": (-0.17, -0.10),
    "nose_length": (0.06, 0.17),
    "mouth_curve": (-0.07, 0.07),
    "mouth_halfwidth": (0.09, 0.17),
    "face_hue": (0.02, 0.93),
}

_EYE_COLOR = (0.05, 0.05, 0.08)
_MOUTH_COLOR = (0.55, 0.12, 0.15)


@dataclass
class ImageSample:
    """A single image: float64 pixels (3, H, W) in [0, 1]."""

    pixels: torch.Tensor
    identity_label: int | None = None

    def __post_init__(self):
        if self.pixels.dim() != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"pixels must be (3, H, W), got {tuple(self.pixels.shape)}")
        if not torch.isfinite(self.pixels).all():
            raise ValueError("pixels contain non-finite values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixels outside [0, 1]")


@dataclass
class SyntheticFaceSpec:
    """Per-identity generation record: parameters plus region label map."""

    identity_label: int
    params: dict[str, float]
    region_labels: np.ndarray  # (H, W) uint8, labels as module constants

    def sensitive_mask(self, sensitive_labels=DEFAULT_SENSITIVE_LABELS) -> np.ndarray:
        """Boolean (H, W) map of identity-sensitive pixels."""
        return np.isin(self.region_labels, list(sensitive_labels))


@dataclass
class FaceDataset:
    images: torch.Tensor  # (N, 3, S, S) float64
    labels: torch.Tensor  # (N,) long
    specs: dict[int, SyntheticFaceSpec]
    train_identities: list[int]
    eval_identities: list[int]
    nuisances: list[dict] = field(default_factory=list, repr=False)
    image_size: int = 32
    images_per_identity: int = 0
    seed: int = 0

    def __len__(self) -> int:
        return self.images.shape[0]

    def sample(self, i: int) -> ImageSample:
        return ImageSample(self.images[i], int(self.labels[i]))

    def indices_for(self, identity: int) -> list[int]:
        return [i for i in range(len(self)) if int(self.labels[i]) == identity]

    @property
    def train_indices(self) -> list[int]:
        ids = set(self.train_identities)
        return [i for i in range(len(self)) if int(self.labels[i]) in ids]

    @property
    def eval_indices(self) -> list[int]:
        ids = set(self.eval_identities)
        return [i for i in range(len(self)) if int(self.labels[i]) in ids]


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def _identity_params(n_identities: int, seed: int) -> list[dict[str, float]]:
    """Stratified draws: each parameter is sampled on a per-identity
    permutation of equal-width bins, so identities stay spread out in
    every dimension."""
    rng = np.random.default_rng([seed, 1])
    perms = {name: rng.permutation(n_identities) for name in _IDENTITY_RANGES}
    params = []
    for i in range(n_identities):
        p = {}
        for name, (lo, hi) in _IDENTITY_RANGES.items():
            cell = perms[name][i]
            u = rng.uniform(0.2, 0.8)
            p[name] = lo + (cell + u) * (hi - lo) / n_identities
        params.append(p)
    return params


def _region_labels(p: dict[str, float], size: int) -> np.ndarray:
    s = float(size)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ax, ay = p["face_ax"] * s, p["face_ay"] * s
    oval = ((xx - c) / ax) ** 2 + ((yy - c) / ay) ** 2 <= 1.0

    labels = np.zeros((size, size), dtype=np.uint8)
    labels[oval] = REGION_SKIN

    def put(mask: np.ndarray, value: int) -> None:
        labels[mask & oval] = value

    # eyes: 2x2 blocks, symmetric about the vertical axis
    er = int(round(c + p["eye_row"] * s))
    off = p["eye_spacing"] * s
    eyes = np.zeros_like(oval)
    for ex in (int(round(c - off)), int(round(c + off))):
        eyes[max(er, 0) : er + 2, max(ex, 0) : ex + 2] = True
    put(eyes, REGION_EYES)

    # nose: one-pixel-wide vertical bar from just above center
    nose = np.zeros_like(oval)
    n0 = int(round(c)) - 1
    n1 = n0 + max(1, int(round(p["nose_length"] * s)))
    nose[n0 : n1 + 1, int(round(c))] = True
    put(nose, REGION_NOSE)

    # mouth: quadratic arc, curvature is the identity parameter
    mouth = np.zeros_like(oval)
    base = int(round(c + 0.20 * s))
    hw = max(2, int(round(p["mouth_halfwidth"] * s)))
    curve = p["mouth_curve"] * s
    for dx in range(-hw, hw + 1):
        row = base + int(round(curve * ((dx / hw) ** 2 - 0.5)))
        col = int(round(c)) + dx
        if 0 <= row < size and 0 <= col < size:
            mouth[row, col] = True
    put(mouth, REGION_MOUTH)
    return labels


def _render(p: dict[str, float], labels: np.ndarray, nuis: dict, size: int,
            rng: np.random.Generator) -> np.ndarray:
    img = np.empty((3, size, size), dtype=np.float64)
    img[:] = _hsv(nuis["bg_hue"], 0.30, nuis["bg_value"])[:, None, None]

    h = nuis["hair_height"]
    if h > 0:
        img[:, :h, :] = _hsv(nuis["hair_hue"], 0.45, nuis["hair_value"])[:, None, None]

    face_rgb = _hsv(p["face_hue"], 0.35, 0.70)
    fills = {
        REGION_SKIN: face_rgb,
        REGION_EYES: np.array(_EYE_COLOR),
        REGION_NOSE: face_rgb * 0.55,
        REGION_MOUTH: np.array(_MOUTH_COLOR),
    }
    for value, rgb in fills.items():
        img[:, labels == value] = rgb[:, None]

    # jitter is confined to the surround so the face interior stays
    # bit-identical across images of one identity
    surround = labels == REGION_SURROUND
    img[:, surround] += rng.normal(0.0, 0.035, size=(3, int(surround.sum())))
    return np.clip(img, 0.0, 1.0)


def generate_dataset(n_identities: int, images_per_identity: int, seed: int,
                     image_size: int = 32, eval_fraction: float = 0.25) -> FaceDataset:
    """Render a deterministic dataset with disjoint train/eval identities.

    The same (n_identities, images_per_identity, seed) triple always
    reproduces the dataset byte-for-byte.
    """
    if n_identities < 2:
        raise ValueError(f"need at least 2 identities, got {n_identities}")
    if images_per_identity < 1:
        raise ValueError(f"need at least 1 image per identity, got {images_per_identity}")

    all_params = _identity_params(n_identities, seed)
    specs = {
        i: SyntheticFaceSpec(i, all_params[i], _region_labels(all_params[i], image_size))
        for i in range(n_identities)
    }

    n_eval = max(2, int(round(n_identities * eval_fraction)))
    split_rng = np.random.default_rng([seed, 2])
    eval_ids = sorted(split_rng.choice(n_identities, size=n_eval, replace=False).tolist())
    train_ids = [i for i in range(n_identities) if i not in set(eval_ids)]

    images, labels, nuisances = [], [], []
    max_hair = int(round(0.12 * image_size))
    for i in range(n_identities):
        for j in range(images_per_identity):
            rng = np.random.default_rng([seed, 3, i, j])
            nuis = {
                "bg_hue": rng.uniform(0.0, 1.0),
                "bg_value": rng.uniform(0.35, 0.90),
                "hair_hue": rng.uniform(0.0, 1.0),
                "hair_value": rng.uniform(0.10, 0.50),
                "hair_height": int(rng.integers(0, max_hair + 1)),
            }
            images.append(_render(all_params[i], specs[i].region_labels, nuis, image_size, rng))
            labels.append(i)
            nuisances.append(nuis)

    return FaceDataset(
        images=torch.from_numpy(np.stack(images)),
        labels=torch.tensor(labels, dtype=torch.long),
        specs=specs,
        train_identities=train_ids,
        eval_identities=eval_ids,
        nuisances=nuisances,
        image_size=image_size,
        images_per_identity=images_per_identity,
        seed=seed,
    )
