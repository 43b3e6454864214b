"""Experiment orchestration: training convenience, leave-one-out attack
runs, parameter sweeps, ablations, and reproducible persistence.

A run directory contains config.json, images/ and masks/ (lossless PNG),
reports/ (JSON per black-box split plus a flat CSV), and plots/ for
sweeps.  Everything written is a pure function of the ExperimentConfig;
wall-clock numbers go to a separate timing.json so the rest of the tree
can be compared byte for byte across replays.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import matplotlib
import numpy as np
import torch

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .attacks import (AttackConfig, fgsm_attack, guided_inpaint_attack,
                      mifgsm_attack, pgd_attack)
from .checkpoints import (load_codec, load_epsilon_model, load_recognizer,
                          save_codec, save_epsilon_model, save_recognizer)
from .codec import Codec, CodecTrainConfig, encode, train_codec
from .diffusion import EpsilonModel, EpsilonTrainConfig, train_epsilon_model
from .faces import DEFAULT_SENSITIVE_LABELS, FaceDataset, ImageSample, generate_dataset
from .masks import MaskOracleConfig, make_condition, masked_source, parse_mask, save_mask_png
from .metrics import MetricsReport, asr, frechet_distance, psnr, recognizer_features, region_change, ssim
from .recognize import (Recognizer, RecognizerTrainConfig, VARIANT_NAMES,
                        train_recognizer)
from .schedule import NoiseSchedule, make_schedule

_METHODS = ("guided", "fgsm", "pgd", "mifgsm", "clean")


@dataclass(frozen=True)
class ExperimentConfig:
    n_identities: int = 40
    images_per_identity: int = 12
    dataset_seed: int = 0
    image_size: int = 32
    schedule_steps: int = 60
    beta_start: float = 1e-4
    beta_end: float = 0.02
    codec_path: str = "checkpoints/codec"
    eps_path: str = "checkpoints/denoiser"
    recognizer_paths: dict = field(default_factory=dict)  # name -> stem
    attack: AttackConfig = field(default_factory=AttackConfig)
    method: str = "guided"
    eps_bound: float = 8 / 255
    baseline_iters: int = 10
    n_sources: int = 50
    n_targets: int = 5
    root_seed: int = 0
    out_dir: str = "runs/exp"
    sweep_T: tuple = (10, 25, 45)
    sweep_s: tuple = (0.0, 100.0, 300.0)
    mask_mode: str = "dataset"
    sensitive_labels: tuple = DEFAULT_SENSITIVE_LABELS

    def __post_init__(self):
        if self.n_identities < 2:
            raise ValueError("need at least 2 identities")
        if self.n_sources < 1 or self.n_targets < 1:
            raise ValueError("n_sources and n_targets must be positive")
        if self.method not in _METHODS:
            raise ValueError(f"method {self.method!r} not one of {_METHODS}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        a = dict(d.pop("attack", {}))
        if a.get("white_box") is not None:
            a["white_box"] = tuple(a["white_box"])
        for key in ("sweep_T", "sweep_s", "sensitive_labels"):
            if key in d:
                d[key] = tuple(d[key])
        return ExperimentConfig(attack=AttackConfig(**a), **d)

    @staticmethod
    def from_json(s: str) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(s))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


@dataclass
class ModelBundle:
    codec: Codec
    eps_model: EpsilonModel
    sched: NoiseSchedule
    recognizers: dict[str, Recognizer]


def dataset_from_config(cfg: ExperimentConfig) -> FaceDataset:
    return generate_dataset(cfg.n_identities, cfg.images_per_identity,
                            cfg.dataset_seed, image_size=cfg.image_size)


def mask_oracle_from_config(cfg: ExperimentConfig, dataset: FaceDataset) -> MaskOracleConfig:
    return MaskOracleConfig(mode=cfg.mask_mode, dataset=dataset,
                            sensitive_labels=cfg.sensitive_labels)


def diffusion_training_pairs(dataset: FaceDataset, codec: Codec,
                             oracle: MaskOracleConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Latents of the training images paired with masked-image conditions.

    The denoiser only ever sees conditions encoded from masked sources;
    full-image conditions are out of distribution for it by design.
    """
    zs, cs = [], []
    with torch.no_grad():
        for i in dataset.train_indices:
            x = dataset.sample(i)
            zs.append(encode(codec, x).data)
            cs.append(make_condition(codec, masked_source(x, parse_mask(x, oracle))).data)
    return torch.stack(zs), torch.stack(cs)


def train_models(dataset: FaceDataset, sched: NoiseSchedule,
                 oracle: MaskOracleConfig,
                 codec_cfg: CodecTrainConfig | None = None,
                 eps_cfg: EpsilonTrainConfig | None = None,
                 rec_cfg: RecognizerTrainConfig | None = None,
                 variants: tuple[str, ...] = VARIANT_NAMES) -> ModelBundle:
    codec_cfg = codec_cfg or CodecTrainConfig()
    eps_cfg = eps_cfg or EpsilonTrainConfig()
    rec_cfg = rec_cfg or RecognizerTrainConfig()
    codec = train_codec(dataset.images[dataset.train_indices], codec_cfg)
    latents, conds = diffusion_training_pairs(dataset, codec, oracle)
    eps_model = train_epsilon_model(latents, conds, sched, eps_cfg)
    recognizers = {}
    for k, variant in enumerate(variants):
        cfg_k = replace(rec_cfg, seed=rec_cfg.seed + k, report={})
        recognizers[variant] = train_recognizer(dataset, cfg_k, variant)
    return ModelBundle(codec, eps_model, sched, recognizers)


def save_bundle(bundle: ModelBundle, cfg: ExperimentConfig) -> None:
    save_codec(bundle.codec, cfg.codec_path)
    save_epsilon_model(bundle.eps_model, cfg.eps_path,
                       extra={"schedule_steps": bundle.sched.T,
                              "beta_start": cfg.beta_start,
                              "beta_end": cfg.beta_end})
    for name, r in bundle.recognizers.items():
        stem = cfg.recognizer_paths.get(name, f"checkpoints/recognizer_{name}")
        save_recognizer(r, stem)


def load_bundle(cfg: ExperimentConfig) -> ModelBundle:
    codec = load_codec(cfg.codec_path)
    eps_model = load_epsilon_model(cfg.eps_path)
    sched = make_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)
    if not cfg.recognizer_paths:
        raise ValueError("config lists no recognizer checkpoints")
    recognizers = {name: load_recognizer(stem)
                   for name, stem in sorted(cfg.recognizer_paths.items())}
    return ModelBundle(codec, eps_model, sched, recognizers)


@dataclass(frozen=True)
class AttackPair:
    index: int
    source_index: int
    target_index: int
    seed: int


def select_pairs(dataset: FaceDataset, cfg: ExperimentConfig) -> list[AttackPair]:
    """Pick target identities and partition seeded sources among them.

    Sources come from evaluation identities not chosen as targets, so a
    pair never asks an image to impersonate its own identity.
    """
    rng = np.random.default_rng([cfg.root_seed, 5])
    eval_ids = sorted(dataset.eval_identities)
    if cfg.n_targets >= len(eval_ids):
        raise ValueError(f"{cfg.n_targets} targets need more than "
                         f"{len(eval_ids)} evaluation identities")
    target_ids = sorted(rng.choice(eval_ids, size=cfg.n_targets, replace=False).tolist())
    pool = [i for i in dataset.eval_indices
            if int(dataset.labels[i]) not in set(target_ids)]
    if len(pool) < cfg.n_sources:
        raise ValueError(f"source pool has {len(pool)} images, need {cfg.n_sources}")
    sources = sorted(rng.choice(pool, size=cfg.n_sources, replace=False).tolist())
    base = cfg.root_seed * 100003
    pairs = []
    for i, src in enumerate(sources):
        tgt_identity = target_ids[i % cfg.n_targets]
        tgt = dataset.indices_for(tgt_identity)[0]
        pairs.append(AttackPair(i, src, tgt, base + i))
    return pairs


def _save_image_png(x: ImageSample, path: Path) -> None:
    from PIL import Image

    arr = (x.pixels.detach().numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def _sensitive_mask_tensor(dataset: FaceDataset, identity: int,
                           labels: tuple) -> torch.Tensor:
    m = dataset.specs[identity].sensitive_mask(labels)
    return torch.from_numpy(m.astype(np.float64)).unsqueeze(0)


def _run_one_attack(pair: AttackPair, dataset: FaceDataset, bundle: ModelBundle,
                    oracle: MaskOracleConfig, wb: list[Recognizer],
                    cfg: ExperimentConfig):
    x_s = dataset.sample(pair.source_index)
    x_r = dataset.sample(pair.target_index)
    if cfg.method == "guided":
        a_cfg = replace(cfg.attack, white_box=tuple(r.name for r in wb), seed=pair.seed)
        res = guided_inpaint_attack(x_s, x_r, bundle.codec, bundle.eps_model,
                                    bundle.sched, wb, oracle, a_cfg)
        return res.image, res.similarities
    if cfg.method == "clean":
        return x_s, {}
    fns = {"fgsm": lambda: fgsm_attack(x_s, x_r, wb, cfg.eps_bound),
           "pgd": lambda: pgd_attack(x_s, x_r, wb, cfg.eps_bound,
                                     n_iter=cfg.baseline_iters),
           "mifgsm": lambda: mifgsm_attack(x_s, x_r, wb, cfg.eps_bound,
                                           n_iter=cfg.baseline_iters)}
    return fns[cfg.method](), {}


def _clean_report(dataset: FaceDataset, bundle: ModelBundle,
                  pairs: list[AttackPair], fingerprint: str) -> MetricsReport:
    clean_pairs = [(dataset.sample(p.source_index), dataset.sample(p.target_index))
                   for p in pairs]
    asr_per_model = {name: asr(clean_pairs, r)
                     for name, r in sorted(bundle.recognizers.items())}
    any_r = next(iter(bundle.recognizers.values()))
    feats = recognizer_features(any_r, [p[0] for p in clean_pairs])
    return MetricsReport(asr_per_model=asr_per_model, psnr_mean=100.0,
                         ssim_mean=1.0,
                         frechet_distance=frechet_distance(feats, feats),
                         n_samples=len(clean_pairs),
                         config_fingerprint=fingerprint,
                         extras={"method": "clean"})


def run_attack_experiment(cfg: ExperimentConfig,
                          bundle: ModelBundle | None = None,
                          dataset: FaceDataset | None = None
                          ) -> dict[str, MetricsReport]:
    """Full leave-one-out protocol: for every recognizer, attack with the
    other three as the white-box ensemble and report metrics per black box.

    Per-pair failures are recorded and skipped, not fatal.  The black-box
    model's gradient-query counter must not move during its own split.
    """
    t_start = time.monotonic()
    dataset = dataset if dataset is not None else dataset_from_config(cfg)
    bundle = bundle if bundle is not None else load_bundle(cfg)
    oracle = mask_oracle_from_config(cfg, dataset)
    attack_oracle = replace(oracle, mode="none") if cfg.attack.skip_mask else oracle
    if cfg.attack.steps > bundle.sched.T:
        raise ValueError(f"attack steps {cfg.attack.steps} exceed schedule "
                         f"length {bundle.sched.T}")

    out = Path(cfg.out_dir)
    for sub in ("images", "masks", "reports", "plots"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    fingerprint = cfg.fingerprint()

    pairs = select_pairs(dataset, cfg)
    for p in pairs:
        x_s = dataset.sample(p.source_index)
        save_mask_png(parse_mask(x_s, attack_oracle), out / "masks" / f"pair{p.index:03d}.png")

    clean = _clean_report(dataset, bundle, pairs, fingerprint)
    (out / "reports" / "clean.json").write_text(
        json.dumps(clean.to_dict(), indent=2, sort_keys=True) + "\n")

    names = sorted(bundle.recognizers)
    reports: dict[str, MetricsReport] = {}
    for bb_name in names:
        bb = bundle.recognizers[bb_name]
        wb = [bundle.recognizers[n] for n in names if n != bb_name]
        bb_queries_before = bb.grad_queries
        wb_queries_before = {r.name: r.grad_queries for r in wb}

        adv_pairs: list[tuple[ImageSample, ImageSample]] = []
        records, failures = [], []
        psnrs, ssims, inside, outside = [], [], [], []
        for p in pairs:
            try:
                x_adv, sims = _run_one_attack(p, dataset, bundle, attack_oracle, wb, cfg)
            except Exception as e:
                failures.append({"pair": p.index, "error": str(e)})
                continue
            x_s = dataset.sample(p.source_index)
            x_r = dataset.sample(p.target_index)
            adv_pairs.append((x_adv, x_r))
            m_sens = _sensitive_mask_tensor(dataset, x_s.identity_label,
                                            cfg.sensitive_labels)
            d_in, d_out = region_change(x_s, x_adv, m_sens)
            psnrs.append(psnr(x_adv, x_s))
            ssims.append(ssim(x_adv, x_s))
            inside.append(d_in)
            outside.append(d_out)
            records.append({"pair": p.index, "seed": p.seed,
                            "source": p.source_index, "target": p.target_index,
                            "similarities": sims, "psnr": psnrs[-1],
                            "ssim": ssims[-1], "change_inside": d_in,
                            "change_outside": d_out})
            _save_image_png(x_adv, out / "images" / f"{bb_name}_pair{p.index:03d}.png")
        if not adv_pairs:
            raise RuntimeError(f"every pair failed in split {bb_name}")
        if bb.grad_queries != bb_queries_before:
            raise AssertionError(
                f"black-box recognizer {bb_name} was gradient-queried "
                f"({bb.grad_queries - bb_queries_before} times) during its own split")

        asr_per_model = {n: asr(adv_pairs, bundle.recognizers[n]) for n in names}
        ok_pairs = {r["pair"] for r in records}
        feats_adv = recognizer_features(bb, [p[0] for p in adv_pairs])
        feats_src = recognizer_features(
            bb, [dataset.sample(p.source_index) for p in pairs if p.index in ok_pairs])
        report = MetricsReport(
            asr_per_model=asr_per_model,
            psnr_mean=float(np.mean(psnrs)),
            ssim_mean=float(np.mean(ssims)),
            frechet_distance=frechet_distance(feats_adv, feats_src),
            n_samples=len(adv_pairs),
            config_fingerprint=fingerprint,
            extras={
                "blackbox": bb_name,
                "white_box": [r.name for r in wb],
                "method": cfg.method,
                "clean_asr": clean.asr_per_model,
                "change_inside_mean": float(np.mean(inside)),
                "change_outside_mean": float(np.mean(outside)),
                "white_box_queries": {r.name: r.grad_queries - wb_queries_before[r.name]
                                      for r in wb},
                "failures": failures,
                "records": records,
            },
        )
        reports[bb_name] = report
        (out / "reports" / f"{bb_name}.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")

    _write_summary_csv(out / "reports" / "summary.csv", reports, names)
    (out / "timing.json").write_text(json.dumps(
        {"wall_seconds": time.monotonic() - t_start}) + "\n")
    return reports


def _write_summary_csv(path: Path, reports: dict[str, MetricsReport],
                       names: list[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["blackbox", "asr_blackbox", "asr_whitebox_mean", "asr_clean_blackbox",
                    "psnr_mean", "ssim_mean", "frechet_distance", "n_samples"])
        for bb in names:
            rep = reports[bb]
            wb_names = rep.extras["white_box"]
            wb_mean = float(np.mean([rep.asr_per_model[n] for n in wb_names]))
            w.writerow([bb, rep.asr_per_model[bb], wb_mean,
                        rep.extras["clean_asr"][bb], rep.psnr_mean,
                        rep.ssim_mean, rep.frechet_distance, rep.n_samples])


def white_box_asr_mean(reports: dict[str, MetricsReport]) -> float:
    vals = []
    for rep in reports.values():
        vals.extend(rep.asr_per_model[n] for n in rep.extras["white_box"])
    return float(np.mean(vals))


def black_box_asr_mean(reports: dict[str, MetricsReport]) -> float:
    return float(np.mean([rep.asr_per_model[rep.extras["blackbox"]]
                          for rep in reports.values()]))


def run_sweep(cfg: ExperimentConfig, parameter: str, grid: list,
              bundle: ModelBundle | None = None,
              dataset: FaceDataset | None = None) -> list[dict]:
    """One experiment per grid value with shared seeds; emits CSV + plot."""
    if parameter not in ("T", "s"):
        raise ValueError(f"parameter must be 'T' or 's', got {parameter!r}")
    if not grid:
        raise ValueError("empty sweep grid")
    dataset = dataset if dataset is not None else dataset_from_config(cfg)
    bundle = bundle if bundle is not None else load_bundle(cfg)
    out = Path(cfg.out_dir)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    rows = []
    for v in grid:
        if parameter == "T":
            attack = replace(cfg.attack, steps=int(v))
        else:
            attack = replace(cfg.attack, strength=float(v))
        sub = replace(cfg, attack=attack,
                      out_dir=str(out / f"sweep_{parameter}_{v}"))
        reports = run_attack_experiment(sub, bundle, dataset)
        rows.append({
            "value": v,
            "asr_whitebox": white_box_asr_mean(reports),
            "asr_blackbox": black_box_asr_mean(reports),
            "psnr_mean": float(np.mean([r.psnr_mean for r in reports.values()])),
            "ssim_mean": float(np.mean([r.ssim_mean for r in reports.values()])),
            "frechet_mean": float(np.mean([r.frechet_distance for r in reports.values()])),
        })
    csv_path = out / f"sweep_{parameter}.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _plot_sweep(rows, parameter, out / "plots" / f"sweep_{parameter}.png")
    return rows


def _plot_sweep(rows: list[dict], parameter: str, path: Path) -> None:
    xs = [r["value"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(5, 3.5))
    ax1.plot(xs, [r["asr_whitebox"] for r in rows], "o-", label="white-box ASR")
    ax1.plot(xs, [r["asr_blackbox"] for r in rows], "s--", label="black-box ASR")
    ax1.set_xlabel(parameter)
    ax1.set_ylabel("ASR")
    ax1.set_ylim(-0.05, 1.05)
    ax2 = ax1.twinx()
    ax2.plot(xs, [r["psnr_mean"] for r in rows], "^:", color="tab:green", label="PSNR")
    ax2.set_ylabel("PSNR (dB)")
    lines = ax1.get_lines() + ax2.get_lines()
    ax1.legend(lines, [ln.get_label() for ln in lines], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_ablation(cfg: ExperimentConfig, bundle: ModelBundle | None = None,
                 dataset: FaceDataset | None = None) -> list[dict]:
    """Three rows under identical seeds: full, constant-strength, no-mask."""
    dataset = dataset if dataset is not None else dataset_from_config(cfg)
    bundle = bundle if bundle is not None else load_bundle(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_attack = replace(cfg.attack, constant_strength=False, skip_mask=False)
    variants = [
        ("full", base_attack),
        ("constant_strength", replace(base_attack, constant_strength=True)),
        ("no_mask", replace(base_attack, skip_mask=True)),
    ]
    rows = []
    for label, attack in variants:
        sub = replace(cfg, attack=attack, out_dir=str(out / f"ablation_{label}"))
        reports = run_attack_experiment(sub, bundle, dataset)
        rows.append({
            "variant": label,
            "asr_whitebox": white_box_asr_mean(reports),
            "asr_blackbox": black_box_asr_mean(reports),
            "psnr_mean": float(np.mean([r.psnr_mean for r in reports.values()])),
            "frechet_mean": float(np.mean([r.frechet_distance for r in reports.values()])),
        })
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows
