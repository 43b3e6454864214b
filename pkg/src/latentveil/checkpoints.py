"""Checkpoint persistence: a weights blob plus a JSON sidecar per model.

The sidecar carries everything needed to rebuild the module before
loading weights (architecture sizes, and for recognizers the calibrated
threshold with its FAR level and pair seed), so a checkpoint is usable
without the training-time objects.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch

from .codec import Codec
from .diffusion import EpsilonModel
from .recognize import Recognizer, build_recognizer


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".pt"), stem.with_suffix(".json")


def _save(module: torch.nn.Module, sidecar: dict, stem: str | Path) -> tuple[Path, Path]:
    blob, meta = _paths(stem)
    blob.parent.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), blob)
    meta.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return blob, meta


def load_sidecar(stem: str | Path) -> dict:
    _, meta = _paths(stem)
    return json.loads(meta.read_text())


def save_codec(codec: Codec, stem: str | Path, extra: dict | None = None):
    sidecar = {
        "kind": "codec",
        "image_size": codec.image_size,
        "latent_channels": codec.latent_channels,
        "hidden": codec.hidden,
        "extra": extra or {},
    }
    return _save(codec, sidecar, stem)


def load_codec(stem: str | Path) -> Codec:
    blob, _ = _paths(stem)
    sc = load_sidecar(stem)
    if sc.get("kind") != "codec":
        raise ValueError(f"checkpoint {stem} is {sc.get('kind')!r}, not a codec")
    codec = Codec(sc["image_size"], sc["latent_channels"], sc["hidden"])
    codec.load_state_dict(torch.load(blob, weights_only=True))
    codec.eval()
    return codec


def save_epsilon_model(model: EpsilonModel, stem: str | Path, extra: dict | None = None):
    sidecar = {
        "kind": "epsilon_model",
        "channels": model.channels,
        "cond_channels": model.cond_channels,
        "hidden": model.hidden,
        "time_dim": model.time_dim,
        "extra": extra or {},
    }
    return _save(model, sidecar, stem)


def load_epsilon_model(stem: str | Path) -> EpsilonModel:
    blob, _ = _paths(stem)
    sc = load_sidecar(stem)
    if sc.get("kind") != "epsilon_model":
        raise ValueError(f"checkpoint {stem} is {sc.get('kind')!r}, not a denoiser")
    model = EpsilonModel(sc["channels"], sc["cond_channels"], sc["hidden"], sc["time_dim"])
    model.load_state_dict(torch.load(blob, weights_only=True))
    model.eval()
    return model


def save_recognizer(r: Recognizer, stem: str | Path, extra: dict | None = None):
    sidecar = {
        "kind": "recognizer",
        "variant": r.name,
        "embed_dim": r.embed_dim,
        "tau": r.tau,
        "far_level": r.far_level,
        "calibration_seed": r.calibration_seed,
        "meta": r.meta,
        "extra": extra or {},
    }
    return _save(r.net, sidecar, stem)


def load_recognizer(stem: str | Path) -> Recognizer:
    blob, _ = _paths(stem)
    sc = load_sidecar(stem)
    if sc.get("kind") != "recognizer":
        raise ValueError(f"checkpoint {stem} is {sc.get('kind')!r}, not a recognizer")
    r = build_recognizer(sc["variant"], seed=0)
    r.net.load_state_dict(torch.load(blob, weights_only=True))
    r.net.eval()
    r.tau = sc["tau"]
    r.far_level = sc["far_level"]
    r.calibration_seed = sc["calibration_seed"]
    r.meta = dict(sc.get("meta") or {})
    return r
