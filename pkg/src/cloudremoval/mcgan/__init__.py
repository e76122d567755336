"""Multispectral conditional GAN: networks, objectives, training and inference."""

from .checkpoint import Checkpoint, load_checkpoint, load_generator, restore_state, save_checkpoint
from .inference import BandMismatch, Prediction, predict
from .losses import cgan_losses, cgan_objective, discriminator_loss, generator_adversarial_loss, l1_loss
from .networks import Discriminator, Generator, build_discriminator, build_generator, layer_shapes, parameter_count
from .spec import INPUT_MODES, LayerSpec, ModelSpec
from .training import (
    DatasetError,
    GroupDataset,
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    TrainState,
    init_state,
    train,
    train_step,
)

__all__ = [
    "BandMismatch", "Checkpoint", "DatasetError", "Discriminator", "Generator", "GroupDataset",
    "INPUT_MODES", "LayerSpec", "ModelConfig", "ModelSpec", "Prediction", "TrainConfig",
    "TrainResult", "TrainState", "TrainingDiverged", "build_discriminator", "build_generator",
    "cgan_losses", "cgan_objective", "discriminator_loss", "generator_adversarial_loss",
    "init_state", "l1_loss", "layer_shapes", "load_checkpoint", "load_generator",
    "parameter_count", "predict", "restore_state", "save_checkpoint", "train", "train_step",
]
