"""Latent-space identity attack pipeline: a mask-conditioned latent
diffusion sampler whose reverse process carries adaptive-strength
adversarial guidance, plus the training and evaluation harness around it.
"""

from .attacks import (AttackConfig, AttackResult, adaptive_weight,
                      adversarial_gradient, conditioned_inpaint, fgsm_attack,
                      guided_inpaint_attack, mifgsm_attack, pgd_attack)
from .codec import Codec, CodecTrainConfig, decode, encode, train_codec
from .diffusion import (EpsilonModel, EpsilonTrainConfig, LatentCode,
                        estimate_z0, forward_diffuse, reverse_step,
                        train_epsilon_model)
from .experiments import (ExperimentConfig, ModelBundle, run_ablation,
                          run_attack_experiment, run_sweep, train_models)
from .faces import FaceDataset, ImageSample, SyntheticFaceSpec, generate_dataset
from .masks import IdentityMask, MaskOracleConfig, make_condition, masked_source, parse_mask
from .metrics import MetricsReport, asr, frechet_distance, psnr, ssim
from .recognize import (Recognizer, RecognizerTrainConfig, VerificationPair,
                        calibrate_far_threshold, embed, similarity,
                        train_recognizer)
from .schedule import NoiseSchedule, make_schedule

__all__ = [
    "AttackConfig", "AttackResult", "Codec", "CodecTrainConfig",
    "EpsilonModel", "EpsilonTrainConfig", "ExperimentConfig", "FaceDataset",
    "IdentityMask", "ImageSample", "LatentCode", "MaskOracleConfig",
    "MetricsReport", "ModelBundle", "NoiseSchedule", "Recognizer",
    "RecognizerTrainConfig", "SyntheticFaceSpec", "VerificationPair",
    "adaptive_weight", "adversarial_gradient", "asr", "calibrate_far_threshold",
    "conditioned_inpaint", "decode", "embed", "encode", "estimate_z0",
    "fgsm_attack", "forward_diffuse", "frechet_distance", "generate_dataset",
    "guided_inpaint_attack", "make_condition", "make_schedule", "masked_source",
    "mifgsm_attack", "parse_mask", "pgd_attack", "psnr", "reverse_step",
    "run_ablation", "run_attack_experiment", "run_sweep", "similarity", "ssim",
    "train_codec", "train_epsilon_model", "train_models", "train_recognizer",
]
