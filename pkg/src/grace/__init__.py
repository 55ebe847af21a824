"""Desk-scale robust fine-tuning with low-rank adaptation, input attacks,
layerwise adaptive low-rank adversarial weight perturbation, Gram-volume
feature alignment, and a geometric diagnostic suite."""

from .attacks import AttackConfig, fgsm, pgd, project_linf
from .awp import (
    AwpBranch,
    CurvatureState,
    allocate_ranks,
    awp_ascend,
    curvature_proxy,
    perturbed_features,
    project_awp,
    update_curvature_ema,
)
from .data import Bundle, BundleParams, DomainDataset, generate_bundle, load_checkpoint, save_checkpoint
from .gram import FeatureTriplet, GramConfig, gram_matrix, gram_volume, gram_volume_batch
from .model import EncoderModel, LoraLayer, build_encoder, cross_entropy, lora_effective_weight, relative_param_distance
from .trainer import AwpSettings, ModelSettings, RunArtifacts, StepMetrics, TrainConfig, Trainer, evaluate, harmonic_mean, run

__version__ = "0.1.0"
