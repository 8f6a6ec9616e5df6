"""Contrastive pretraining with a distribution-matching loss for strongly augmented views."""
from .augment import OPS, StrongAugConfig, WeakAugConfig, apply_op, strong_augment, weak_augment
from .bank import RepresentationBank
from .config import ConfigError, TrainConfig, load_config, save_config
from .data import Dataset, load_image_folder, synth_dataset
from .encoder import ArchConfig, EncoderPair, init_pair, momentum_update
from .evaluation import (
    FeatureSet,
    ProbeConfig,
    distribution_diagnostics,
    extract_features,
    knn_eval,
    linear_probe,
)
from .losses import (
    LossConfig,
    SimilarityDistribution,
    conditional_distribution,
    contrastive_loss,
    cosine_sim,
    ddm_loss,
    total_loss,
)
from .trainer import load_checkpoint, lr_at, pretrain, save_checkpoint, train_step

__version__ = "0.1.0"
