"""Desk-scale multi-concept image customization.

Learn each concept separately into a small plug-and-play module (a
customized word embedding plus LoRA factors on the denoiser's
cross-attention keys/values), then compose any set of modules at
inference time by partitioning cross-attention across user-supplied
bounding boxes. Everything runs on a miniature latent-diffusion stack
over synthetic data with a from-scratch autodiff tensor core.
"""

from .concept import (ConceptModule, QFormerConfig, QFormerLite, acn,
                      build_module, extract_embedding, load_module, save_module)
from .dataset import SyntheticConcept, generate_dataset, load_dataset, save_dataset
from .denoiser import (DenoiserConfig, DenoiserNet, LoraPair, NoiseSchedule,
                       add_noise, attention, load_checkpoint, lora_project,
                       make_schedule, predict_noise, save_checkpoint)
from .encoders import ImageEncoder, LatentCoder, VisualEmbedding
from .evaluate import EvalReport, FidelityScorer, bench, evaluate
from .optim import Adam
from .rcm import (BoundingBox, Layout, RegionSpec, compose_and_denoise,
                  load_layout, regional_cross_attention, region_text_embedding,
                  save_layout)
from .rng import Rng
from .sampler import SampleConfig, guided_noise, sample, sample_latent
from .tensor import Tensor
from .training import (TrainConfig, TrainState, concept_loss, pretrain_base,
                       reconstruction_eval, train_concept, training_step)
from .vocab import PromptEmbedding, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "Adam", "BoundingBox", "ConceptModule", "DenoiserConfig", "DenoiserNet",
    "EvalReport", "FidelityScorer", "ImageEncoder", "LatentCoder", "Layout",
    "LoraPair", "NoiseSchedule", "PromptEmbedding", "QFormerConfig",
    "QFormerLite", "RegionSpec", "Rng", "SampleConfig", "SyntheticConcept",
    "Tensor", "TrainConfig", "TrainState", "VisualEmbedding", "Vocabulary",
    "acn", "add_noise", "attention", "bench", "build_module",
    "compose_and_denoise", "concept_loss", "evaluate", "extract_embedding",
    "generate_dataset", "guided_noise", "load_checkpoint", "load_dataset",
    "load_layout", "load_module", "lora_project", "make_schedule",
    "predict_noise", "pretrain_base", "reconstruction_eval",
    "region_text_embedding", "regional_cross_attention", "sample",
    "sample_latent", "save_checkpoint", "save_dataset", "save_layout",
    "save_module", "train_concept", "training_step",
]
