"""Training, generation, classification and the latent autoencoder."""

from .autoencoder import AutoencoderConfig, ConvVAE, reconstruction_mse, train_autoencoder
from .checkpoint import Checkpoint, load_autoencoder, load_checkpoint, save_autoencoder, save_checkpoint
from .config import TrainConfig, preset
from .inference import PredictionRecord, classify, classify_batch, generate
from .training import cosine_warmup_lr, train

__all__ = [
    "AutoencoderConfig",
    "Checkpoint",
    "ConvVAE",
    "PredictionRecord",
    "TrainConfig",
    "classify",
    "classify_batch",
    "cosine_warmup_lr",
    "generate",
    "load_autoencoder",
    "load_checkpoint",
    "preset",
    "reconstruction_mse",
    "save_autoencoder",
    "save_checkpoint",
    "train",
    "train_autoencoder",
]
