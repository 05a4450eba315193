"""Semi-supervised GAN classification with a generator-based manifold smoothness penalty."""

from .autodiff import Tape, Tensor, gradient_check
from .config import RunConfig, load_config, parse_config, serialize_config
from .data import SplitDataset, SyntheticManifoldSpec, idx_load, make_split, synth_sample
from .errors import ConfigError, ContractViolation, DivergenceError, FormatError
from .estimator import ManifoldGANClassifier
from .losses import (discriminator_loss, feature_matching_loss, jacobian_frobenius_oracle,
                     laplacian_norm_mc, manifold_penalty_stochastic, supervised_loss,
                     unsupervised_loss)
from .models import (Discriminator, Generator, conv_large_discriminator, conv_small_discriminator,
                     dcgan_generator, load_checkpoint, save_checkpoint)
from .training import GANTrainer, run_experiment, train_run

__all__ = [
    "Tape", "Tensor", "gradient_check",
    "RunConfig", "load_config", "parse_config", "serialize_config",
    "SplitDataset", "SyntheticManifoldSpec", "idx_load", "make_split", "synth_sample",
    "ConfigError", "ContractViolation", "DivergenceError", "FormatError",
    "ManifoldGANClassifier",
    "discriminator_loss", "feature_matching_loss", "jacobian_frobenius_oracle",
    "laplacian_norm_mc", "manifold_penalty_stochastic", "supervised_loss", "unsupervised_loss",
    "Discriminator", "Generator", "conv_large_discriminator", "conv_small_discriminator",
    "dcgan_generator", "load_checkpoint", "save_checkpoint",
    "GANTrainer", "run_experiment", "train_run",
]
