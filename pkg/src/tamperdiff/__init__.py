"""tamperdiff: conditional-diffusion localization of manipulated image regions.

A single shared-parameter model handles both task modes -- forged image
only, or forged + pristine original pair -- switching purely on the
input. Masks are class-embedded into a continuous latent, trained under
a direct-mask-prediction diffusion objective, and recovered at inference
by deterministic sampling with a configurable step count; per-step
prediction flips give a per-pixel uncertainty map.
"""

from .conditioner import ConditionEncoder, GuidanceCondition, TaskMode
from .config import ExperimentConfig, load_config
from .data import (
    DatasetManifest,
    ForgerySample,
    load_manifest,
    make_base_images,
    preprocess,
    save_manifest,
    synth_forgery,
    to_model_input,
)
from .evaluation import evaluate_manifest, write_report
from .losses import LossConfig, combined_loss, dice_loss, weighted_ce
from .maskcodec import MaskCodec, MaskEmbedding
from .metrics import aggregate, pixel_auc, pixel_f1, pixel_iou
from .model import Localizer, build_model, load_checkpoint, save_checkpoint
from .sampling import SamplingTrajectory, sample, sample_zero_noise, uncertainty_map
from .schedule import (
    NoiseSchedule,
    NoisyState,
    TimestepSubsequence,
    ddim_step,
    ddpm_step,
    make_schedule,
    make_subsequence,
    q_sample,
)
from .training import TrainState, train_loop, train_step

__version__ = "0.1.0"

__all__ = [
    "ConditionEncoder",
    "DatasetManifest",
    "ExperimentConfig",
    "ForgerySample",
    "GuidanceCondition",
    "Localizer",
    "LossConfig",
    "MaskCodec",
    "MaskEmbedding",
    "NoiseSchedule",
    "NoisyState",
    "SamplingTrajectory",
    "TaskMode",
    "TimestepSubsequence",
    "TrainState",
    "aggregate",
    "build_model",
    "combined_loss",
    "ddim_step",
    "ddpm_step",
    "dice_loss",
    "evaluate_manifest",
    "load_checkpoint",
    "load_config",
    "load_manifest",
    "make_base_images",
    "make_schedule",
    "make_subsequence",
    "pixel_auc",
    "pixel_f1",
    "pixel_iou",
    "preprocess",
    "q_sample",
    "sample",
    "sample_zero_noise",
    "save_checkpoint",
    "save_manifest",
    "synth_forgery",
    "to_model_input",
    "train_loop",
    "train_step",
    "uncertainty_map",
    "weighted_ce",
    "write_report",
]
