"""Toy identity-embedding models, cosine verification, and FAR calibration.

Four small convolutional variants differing in depth, width, and pooling
stand in for a zoo of face recognizers; the verification score is the
cosine similarity of unit-norm embeddings, thresholded at a value
calibrated to a target false-acceptance rate on impostor pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .faces import FaceDataset, ImageSample


class _EmbedNet(nn.Module):
    """Conv trunk -> spatial readout -> two linear layers.

    The identity signal lives in small geometric offsets, so the readout
    must keep spatial information: "flatten" keeps the whole grid,
    "avgmax" concatenates global average and max, "max" keeps the max.
    ``features`` (the first linear layer's activation) is the penultimate
    representation used by the Fréchet metric; its width stays <= 24 so a
    50-sample batch still satisfies the n >= 2d covariance requirement.
    """

    def __init__(self, channels: list[int], strides: list[int], feat_dim: int,
                 embed_dim: int, readout: str, downsample: str = "stride",
                 image_size: int = 32):
        super().__init__()
        layers: list[nn.Module] = []
        c_in, size = 3, image_size
        for c_out, s in zip(channels, strides):
            if downsample == "stride" or s == 1:
                layers += [nn.Conv2d(c_in, c_out, 3, stride=s, padding=1)]
            else:
                layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.MaxPool2d(s)]
            layers += [nn.GroupNorm(4, c_out), nn.SiLU()]
            c_in, size = c_out, size // s
        self.trunk = nn.Sequential(*layers)
        self.readout = readout
        in_dim = {"flatten": c_in * size * size, "avgmax": 2 * c_in, "max": c_in}[readout]
        self.fc1 = nn.Linear(in_dim, feat_dim)
        self.fc2 = nn.Linear(feat_dim, embed_dim)
        self.feature_dim = feat_dim
        self.double()

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.trunk(x)
        if self.readout == "flatten":
            r = h.flatten(1)
        elif self.readout == "avgmax":
            r = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        else:
            r = h.amax(dim=(2, 3))
        return F.silu(self.fc1(r))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.features(x))


# depth / width / pooling spread across the four stand-in models
_VARIANTS = {
    "deep": dict(channels=[16, 32, 32], strides=[2, 2, 2], feat_dim=24,
                 embed_dim=24, readout="flatten"),
    "wide": dict(channels=[64, 48], strides=[2, 2], feat_dim=24,
                 embed_dim=16, readout="avgmax"),
    "pool": dict(channels=[20, 24], strides=[2, 2], feat_dim=20,
                 embed_dim=20, readout="max", downsample="maxpool"),
    "lite": dict(channels=[20, 28], strides=[2, 2], feat_dim=20,
                 embed_dim=12, readout="flatten"),
}

VARIANT_NAMES = tuple(_VARIANTS)


@dataclass
class Recognizer:
    """An embedding net plus its calibrated decision threshold.

    ``grad_queries`` counts embeddings computed with gradients enabled,
    i.e. white-box use; evaluation-only embedding runs under no_grad and
    leaves it untouched.
    """

    name: str
    net: _EmbedNet
    embed_dim: int
    tau: float | None = None
    far_level: float | None = None
    calibration_seed: int | None = None
    grad_queries: int = 0
    meta: dict = field(default_factory=dict, repr=False)


@dataclass
class VerificationPair:
    image_a: ImageSample
    image_b: ImageSample
    same_identity: bool


def build_recognizer(variant: str, seed: int) -> Recognizer:
    if variant not in _VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANT_NAMES}")
    torch.manual_seed(seed)
    spec = _VARIANTS[variant]
    net = _EmbedNet(**spec)
    return Recognizer(name=variant, net=net, embed_dim=spec["embed_dim"])


def embed(r: Recognizer, x: ImageSample) -> torch.Tensor:
    """Unit-norm embedding of one image; differentiable w.r.t. pixels."""
    if torch.is_grad_enabled() and x.pixels.requires_grad:
        r.grad_queries += 1
    e = r.net(x.pixels.unsqueeze(0)).squeeze(0)
    return e / torch.linalg.vector_norm(e)


def embed_batch(r: Recognizer, images: torch.Tensor) -> torch.Tensor:
    if torch.is_grad_enabled() and images.requires_grad:
        r.grad_queries += 1
    e = r.net(images)
    return e / torch.linalg.vector_norm(e, dim=1, keepdim=True)


def similarity(e1: torch.Tensor, e2: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two unit vectors (their dot product).

    Inputs whose norm deviates from 1 by more than 1e-4 are rejected.
    """
    for e in (e1, e2):
        n = float(torch.linalg.vector_norm(e.detach()))
        if abs(n - 1.0) > 1e-4:
            raise ValueError(f"similarity needs unit vectors, got norm {n}")
    return torch.dot(e1, e2)


def features_batch(r: Recognizer, images: torch.Tensor) -> torch.Tensor:
    """Penultimate-layer features, used by the distribution-distance metric."""
    with torch.no_grad():
        return r.net.features(images)


@dataclass
class RecognizerTrainConfig:
    steps: int = 1600
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    scale: float = 20.0
    far: float = 0.01
    n_calibration_pairs: int = 1000
    n_eval_pairs: int = 400
    min_identities: int = 20
    min_images_per_identity: int = 10
    report: dict = field(default_factory=dict, repr=False)


def sample_verification_pairs(dataset: FaceDataset, identities: list[int],
                              n_genuine: int, n_impostor: int,
                              seed: int) -> list[VerificationPair]:
    gen = torch.Generator().manual_seed(seed)
    by_id = {i: dataset.indices_for(i) for i in identities}
    pairs: list[VerificationPair] = []
    ids = list(identities)
    for _ in range(n_genuine):
        i = ids[int(torch.randint(0, len(ids), (1,), generator=gen))]
        a, b = torch.randperm(len(by_id[i]), generator=gen)[:2].tolist()
        pairs.append(VerificationPair(dataset.sample(by_id[i][a]),
                                      dataset.sample(by_id[i][b]), True))
    for _ in range(n_impostor):
        ia, ib = torch.randperm(len(ids), generator=gen)[:2].tolist()
        a = int(torch.randint(0, len(by_id[ids[ia]]), (1,), generator=gen))
        b = int(torch.randint(0, len(by_id[ids[ib]]), (1,), generator=gen))
        pairs.append(VerificationPair(dataset.sample(by_id[ids[ia]][a]),
                                      dataset.sample(by_id[ids[ib]][b]), False))
    return pairs


def _pair_similarities(r: Recognizer, pairs: list[VerificationPair]) -> torch.Tensor:
    with torch.no_grad():
        xa = torch.stack([p.image_a.pixels for p in pairs])
        xb = torch.stack([p.image_b.pixels for p in pairs])
        ea, eb = embed_batch(r, xa), embed_batch(r, xb)
        return (ea * eb).sum(dim=1)


def calibrate_far_threshold(r: Recognizer, impostor_pairs: list[VerificationPair],
                            far: float, pair_seed: int | None = None) -> float:
    """Set tau to the smallest impostor score whose acceptance fraction
    stays within the target false-acceptance rate.

    With scores sorted ascending, tau is the ceil(n*(1-far))-th order
    statistic, so #(score > tau)/n <= far and is maximal under that bound.
    """
    if len(impostor_pairs) < 1000:
        raise ValueError(f"need at least 1000 impostor pairs, got {len(impostor_pairs)}")
    if any(p.same_identity for p in impostor_pairs):
        raise ValueError("genuine pairs present in the calibration set")
    if not 0.0 < far <= 1.0:
        raise ValueError(f"far must be in (0, 1], got {far}")
    scores = torch.sort(_pair_similarities(r, impostor_pairs)).values
    n = len(scores)
    k = min(n, max(1, math.ceil(n * (1.0 - far))))
    tau = float(scores[k - 1])
    r.tau = tau
    r.far_level = far
    r.calibration_seed = pair_seed
    return tau


def verification_accuracy(r: Recognizer, pairs: list[VerificationPair], tau: float) -> float:
    sims = _pair_similarities(r, pairs)
    correct = 0
    for s, p in zip(sims.tolist(), pairs):
        accept = s > tau
        correct += int(accept == p.same_identity)
    return correct / len(pairs)


def train_recognizer(dataset: FaceDataset, cfg: RecognizerTrainConfig,
                     variant: str) -> Recognizer:
    """Train one embedding variant with a cosine-softmax classifier head,
    then calibrate its threshold on held-out impostor pairs.

    Verification accuracy on held-out identities lands in ``cfg.report``
    together with the calibrated threshold.
    """
    train_ids = dataset.train_identities
    if len(train_ids) < cfg.min_identities:
        raise ValueError(
            f"{len(train_ids)} training identities, need {cfg.min_identities}"
        )
    for i in train_ids:
        n_i = len(dataset.indices_for(i))
        if n_i < cfg.min_images_per_identity:
            raise ValueError(
                f"identity {i} has {n_i} images, need {cfg.min_images_per_identity}"
            )

    r = build_recognizer(variant, cfg.seed)
    label_of = {identity: k for k, identity in enumerate(train_ids)}
    idx = dataset.train_indices
    x_all = dataset.images[idx]
    y_all = torch.tensor([label_of[int(dataset.labels[i])] for i in idx], dtype=torch.long)

    head = nn.Parameter(torch.randn(len(train_ids), r.embed_dim, dtype=torch.float64) * 0.1)
    opt = torch.optim.Adam(list(r.net.parameters()) + [head], lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    for step in range(cfg.steps):
        sel = torch.randint(0, len(idx), (min(cfg.batch_size, len(idx)),), generator=gen)
        e = embed_batch(r, x_all[sel])
        w = head / torch.linalg.vector_norm(head, dim=1, keepdim=True)
        logits = cfg.scale * e @ w.T
        loss = F.cross_entropy(logits, y_all[sel])
        if not torch.isfinite(loss):
            raise RuntimeError(f"recognizer loss diverged (non-finite) at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    r.net.eval()

    pair_seed = cfg.seed + 7919
    impostors = sample_verification_pairs(dataset, dataset.eval_identities,
                                          0, cfg.n_calibration_pairs, pair_seed)
    calibrate_far_threshold(r, impostors, cfg.far, pair_seed)
    eval_pairs = sample_verification_pairs(dataset, dataset.eval_identities,
                                           cfg.n_eval_pairs, cfg.n_eval_pairs,
                                           pair_seed + 1)
    acc = verification_accuracy(r, eval_pairs, r.tau)
    cfg.report.update(verification_accuracy=acc, tau=r.tau, far=cfg.far, variant=variant)
    r.meta.update(cfg.report)
    return r


# Published operating thresholds for the full-scale pre-trained recognizers
# this module's toy variants stand in for.  Kept for anyone wiring those
# real models into the harness; never applied to the toy variants, whose
# thresholds are always calibrated.
REFERENCE_PRETRAINED_TAU = {
    "IRSE50": 0.241,
    "IR152": 0.167,
    "FaceNet": 0.409,
    "MobileFace": 0.302,
}
