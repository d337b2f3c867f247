"""Generative dual-distribution alignment for semi-supervised binary segmentation."""

from .acr import convert_annotation, revert_annotation, soft_foreground
from .config import Ablations, TrainConfig
from .dataset import (BatchIterator, ImageSample, SemiSplit, SyntheticConfig, batch_iterator,
                      generate_synthetic_corpus, load_corpus, save_corpus, semi_split)
from .metrics import MetricsReport, dice_score, hd95, iou_score
from .trainer import (SemiGDA, TrainResult, build_model, evaluate, infer, load_checkpoint, run_training,
                      save_checkpoint, train_step)
from .vae import VAE, LatentGaussian, load_vae, pretrain_vae, sample_latent, save_vae

__version__ = "0.1.0"
