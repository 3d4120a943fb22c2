"""View-learnable contrastive regularisation for prototypical few-shot learning."""
from .autoview import AugmentConfig, ViewConfig, ViewModule, affine_grid, bilinear_sample, make_views, warp
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DataConfig, EvalConfig, MergeSpec, RunConfig, desk_preset, probe_preset
from .contrast import ContrastConfig, NegativeQueue, contrastive_loss
from .datasets import (Dataset, Episode, SyntheticSpec, generate_synthetic, load_image_folder, merge_classes,
                       sample_episode, split_classes)
from .encoder import Encoder, EncoderConfig, EncoderState, init_encoders, momentum_update
from .errors import ConfigError, TrainingError
from .evaluation import EvalReport, beta_sweep, evaluate, export_embeddings, fine_silhouette
from .protohead import SimilarityMetric, classify, compute_prototypes, meta_loss
from .trainer import Trainer, TrainConfig, lr_schedule

__version__ = "0.1.0"
