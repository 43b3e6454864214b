"""Command-line front end: dataset generation, the three trainers, attack
runs, re-evaluation of persisted runs, sweeps, and the ablation table.

All subcommands accept --config pointing at an ExperimentConfig JSON file;
individual flags override single fields on top of it.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .checkpoints import load_codec, save_codec, save_epsilon_model, save_recognizer
from .codec import CodecTrainConfig, train_codec
from .diffusion import EpsilonTrainConfig, train_epsilon_model
from .experiments import (ExperimentConfig, dataset_from_config,
                          diffusion_training_pairs, load_bundle,
                          mask_oracle_from_config, run_ablation,
                          run_attack_experiment, run_sweep, select_pairs)
from .faces import ImageSample
from .masks import parse_mask, save_mask_png
from .metrics import MetricsReport, asr, frechet_distance, psnr, recognizer_features, ssim
from .recognize import RecognizerTrainConfig, VARIANT_NAMES, train_recognizer
from .schedule import make_schedule


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_json(Path(args.config).read_text())
    else:
        cfg = ExperimentConfig()
    overrides = {}
    for name in ("out_dir", "root_seed", "dataset_seed", "n_sources", "n_targets",
                 "method", "codec_path", "eps_path"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if overrides:
        cfg = replace(cfg, **overrides)
    attack_overrides = {}
    if getattr(args, "steps", None) is not None:
        attack_overrides["steps"] = args.steps
    if getattr(args, "strength", None) is not None:
        attack_overrides["strength"] = args.strength
    if attack_overrides:
        cfg = replace(cfg, attack=replace(cfg.attack, **attack_overrides))
    if not cfg.recognizer_paths:
        cfg = replace(cfg, recognizer_paths={
            v: f"checkpoints/recognizer_{v}" for v in VARIANT_NAMES})
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="ExperimentConfig JSON file")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--root-seed", dest="root_seed", type=int)
    p.add_argument("--dataset-seed", dest="dataset_seed", type=int)
    p.add_argument("--codec-path", dest="codec_path")
    p.add_argument("--eps-path", dest="eps_path")


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    ds = dataset_from_config(cfg)
    out = Path(cfg.out_dir) / "dataset"
    out.mkdir(parents=True, exist_ok=True)
    oracle = mask_oracle_from_config(cfg, ds)
    from PIL import Image

    for identity in ds.train_identities[:4] + ds.eval_identities[:4]:
        i = ds.indices_for(identity)[0]
        x = ds.sample(i)
        arr = (x.pixels.numpy() * 255).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr).save(out / f"id{identity:03d}.png")
        save_mask_png(parse_mask(x, oracle), out / f"id{identity:03d}_mask.png")
    info = {"n_images": len(ds), "train_identities": ds.train_identities,
            "eval_identities": ds.eval_identities,
            "image_size": cfg.image_size, "seed": cfg.dataset_seed}
    (out / "info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(f"dataset: {len(ds)} images, {len(ds.train_identities)} train / "
          f"{len(ds.eval_identities)} eval identities -> {out}")
    return 0


def cmd_train_codec(args) -> int:
    cfg = _load_config(args)
    ds = dataset_from_config(cfg)
    tc = CodecTrainConfig(seed=cfg.root_seed)
    if args.train_steps:
        tc = replace(tc, steps=args.train_steps)
    codec = train_codec(ds.images[ds.train_indices], tc)
    save_codec(codec, cfg.codec_path, extra={"val_psnr": tc.report.get("val_psnr")})
    print(f"codec saved to {cfg.codec_path}; val PSNR "
          f"{tc.report.get('val_psnr', float('nan')):.2f} dB")
    return 0


def cmd_train_diffusion(args) -> int:
    cfg = _load_config(args)
    ds = dataset_from_config(cfg)
    codec = load_codec(cfg.codec_path)
    sched = make_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)
    oracle = mask_oracle_from_config(cfg, ds)
    latents, conds = diffusion_training_pairs(ds, codec, oracle)
    tc = EpsilonTrainConfig(seed=cfg.root_seed)
    if args.train_steps:
        tc = replace(tc, steps=args.train_steps)
    model = train_epsilon_model(latents, conds, sched, tc)
    save_epsilon_model(model, cfg.eps_path,
                       extra={"schedule_steps": cfg.schedule_steps,
                              "beta_start": cfg.beta_start, "beta_end": cfg.beta_end,
                              "final_val_loss": tc.report.get("final_val_loss")})
    print(f"denoiser saved to {cfg.eps_path}; val loss "
          f"{tc.report.get('final_val_loss', float('nan')):.4f}")
    return 0


def cmd_train_recognizers(args) -> int:
    cfg = _load_config(args)
    ds = dataset_from_config(cfg)
    for k, variant in enumerate(sorted(cfg.recognizer_paths)):
        rc = RecognizerTrainConfig(seed=cfg.root_seed + k)
        if args.train_steps:
            rc = replace(rc, steps=args.train_steps)
        r = train_recognizer(ds, rc, variant)
        save_recognizer(r, cfg.recognizer_paths[variant])
        print(f"{variant}: verification accuracy "
              f"{rc.report['verification_accuracy']:.3f}, tau {r.tau:.3f}")
    return 0


def cmd_attack(args) -> int:
    cfg = _load_config(args)
    reports = run_attack_experiment(cfg)
    for name in sorted(reports):
        rep = reports[name]
        print(f"blackbox {name}: ASR {rep.asr_per_model[name]:.3f}, "
              f"PSNR {rep.psnr_mean:.2f} dB, FD {rep.frechet_distance:.3f}")
    print(f"artifacts under {cfg.out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    """Recompute metrics from a run directory's persisted PNG images.

    Values differ from the in-run reports by 8-bit quantization; this is
    an audit path, not the primary record.
    """
    cfg = ExperimentConfig.from_json(
        (Path(args.run_dir) / "config.json").read_text())
    ds = dataset_from_config(cfg)
    bundle = load_bundle(cfg)
    pairs = select_pairs(ds, cfg)
    from PIL import Image

    names = sorted(bundle.recognizers)
    out = Path(args.run_dir) / "reports"
    for bb in names:
        adv_pairs, psnrs, ssims = [], [], []
        src_images = []
        for p in pairs:
            f = Path(args.run_dir) / "images" / f"{bb}_pair{p.index:03d}.png"
            if not f.exists():
                continue
            arr = np.asarray(Image.open(f), dtype=np.float64) / 255.0
            x_adv = ImageSample(torch.from_numpy(arr.transpose(2, 0, 1)), None)
            x_s = ds.sample(p.source_index)
            adv_pairs.append((x_adv, ds.sample(p.target_index)))
            src_images.append(x_s)
            psnrs.append(psnr(x_adv, x_s))
            ssims.append(ssim(x_adv, x_s))
        if not adv_pairs:
            print(f"no images for split {bb}, skipping")
            continue
        rep = MetricsReport(
            asr_per_model={n: asr(adv_pairs, bundle.recognizers[n]) for n in names},
            psnr_mean=float(np.mean(psnrs)), ssim_mean=float(np.mean(ssims)),
            frechet_distance=frechet_distance(
                recognizer_features(bundle.recognizers[bb], [p[0] for p in adv_pairs]),
                recognizer_features(bundle.recognizers[bb], src_images)),
            n_samples=len(adv_pairs), config_fingerprint=cfg.fingerprint(),
            extras={"blackbox": bb, "source": "reeval-from-png"})
        (out / f"reeval_{bb}.json").write_text(
            json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
        print(f"reeval {bb}: ASR {rep.asr_per_model[bb]:.3f}, "
              f"PSNR {rep.psnr_mean:.2f} dB")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    grid = list(cfg.sweep_T if args.parameter == "T" else cfg.sweep_s)
    rows = run_sweep(cfg, args.parameter, grid)
    for row in rows:
        print(f"{args.parameter}={row['value']}: white-box ASR "
              f"{row['asr_whitebox']:.3f}, PSNR {row['psnr_mean']:.2f} dB")
    return 0


def cmd_ablation(args) -> int:
    cfg = _load_config(args)
    rows = run_ablation(cfg)
    for row in rows:
        print(f"{row['variant']}: white-box ASR {row['asr_whitebox']:.3f}, "
              f"PSNR {row['psnr_mean']:.2f} dB, FD {row['frechet_mean']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="latentveil",
        description="Latent-space identity attack pipeline and evaluation harness")
    sub = ap.add_subparsers(dest="command", required=True)

    handlers = {
        "gen-data": (cmd_gen_data, "Render the synthetic dataset preview"),
        "train-codec": (cmd_train_codec, "Train and save the image autoencoder"),
        "train-diffusion": (cmd_train_diffusion, "Train and save the latent denoiser"),
        "train-recognizers": (cmd_train_recognizers, "Train and save all recognizer variants"),
        "attack": (cmd_attack, "Run the leave-one-out attack experiment"),
        "evaluate": (cmd_evaluate, "Recompute metrics from a run directory"),
        "sweep": (cmd_sweep, "Sweep T or s and plot ASR/PSNR"),
        "ablation": (cmd_ablation, "Run the three-row ablation table"),
    }
    for name, (fn, help_) in handlers.items():
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        p.set_defaults(fn=fn)
        if name.startswith("train-"):
            p.add_argument("--train-steps", type=int, default=None)
        if name in ("attack", "sweep", "ablation"):
            p.add_argument("--n-sources", dest="n_sources", type=int)
            p.add_argument("--n-targets", dest="n_targets", type=int)
            p.add_argument("--steps", type=int, help="attack steps T")
            p.add_argument("--strength", type=float, help="attack strength s")
        if name == "attack":
            p.add_argument("--method", choices=("guided", "fgsm", "pgd", "mifgsm", "clean"))
        if name == "sweep":
            p.add_argument("--parameter", choices=("T", "s"), default="T")
        if name == "evaluate":
            p.add_argument("run_dir", help="existing run directory")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
