"""Canonical toy-scale recipes with on-disk caching.

One fixed recipe per trained artifact (diffusion model, watermark decoder,
compression autoencoder) so tests, demos, and the CLI agree on what "the
toy setup" means. Training is deterministic, so a cached checkpoint is
interchangeable with a fresh run. The cache root comes from the
``NOISEMARK_CACHE`` environment variable, defaulting to ``./artifacts``.
"""

from __future__ import annotations

import os
from pathlib import Path

import torch

from .autoencoder import AutoencoderTrainConfig, CompressionAutoencoder, train_autoencoder
from .codec import DecoderTrainConfig, WatermarkDecoder, train_decoder
from .data import make_dataset
from .diffusion import DiffusionModel, ModelConfig, TrainConfig, train_toy_model
from .attacks import default_attack_pool

TOY_RESOLUTION = 32
TOY_K = 16
TOY_DATASET_SIZE = 500
TOY_DATASET_SEED = 11
TOY_MODEL_SEED = 21
TOY_DECODER_SEED = 31
TOY_AUTOENCODER_SEED = 41

TOY_MODEL_CONFIG = ModelConfig(resolution=TOY_RESOLUTION, default_inference_steps=20)
TOY_MODEL_TRAIN = TrainConfig(steps=4000, batch_size=32, lr=2e-3)
TOY_DECODER_TRAIN = DecoderTrainConfig(steps=1800, batch_size=32, lr=1e-3)
TOY_AE_TRAIN = AutoencoderTrainConfig(steps=1500, batch_size=32, lr=1e-3)


def cache_root() -> Path:
    return Path(os.environ.get("NOISEMARK_CACHE", "artifacts"))


def toy_dataset(n: int = TOY_DATASET_SIZE, seed: int = TOY_DATASET_SEED):
    return make_dataset(n, TOY_RESOLUTION, seed=seed)


def toy_eval_images(n: int = 20):
    """Fresh images (and labels) disjoint from the training corpus."""
    images, labels = make_dataset(TOY_DATASET_SIZE + n, TOY_RESOLUTION, seed=TOY_DATASET_SEED)
    return images[-n:], labels[-n:]


def toy_diffusion_model(cache: Path | None = None, log_every: int = 0) -> DiffusionModel:
    path = (cache or cache_root()) / "toy_diffusion.pt"
    if path.exists():
        return DiffusionModel.load_checkpoint(path)
    dataset = toy_dataset()
    model, stats = train_toy_model(dataset, TOY_MODEL_CONFIG, TOY_MODEL_TRAIN,
                                   seed=TOY_MODEL_SEED, log_every=log_every)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(path, seed=TOY_MODEL_SEED, train_stats=stats)
    return model


def toy_watermark_decoder(cache: Path | None = None, log_every: int = 0) -> WatermarkDecoder:
    path = (cache or cache_root()) / "toy_decoder.pt"
    if path.exists():
        return WatermarkDecoder.load_checkpoint(path)
    images, _ = toy_dataset()
    decoder, _, stats = train_decoder(images, TOY_K, attack_pool=default_attack_pool(),
                                      config=TOY_DECODER_TRAIN, seed=TOY_DECODER_SEED,
                                      log_every=log_every)
    path.parent.mkdir(parents=True, exist_ok=True)
    decoder.save_checkpoint(path, seed=TOY_DECODER_SEED, train_stats=stats)
    return decoder


def toy_compression_autoencoder(cache: Path | None = None, log_every: int = 0) -> CompressionAutoencoder:
    path = (cache or cache_root()) / "toy_autoencoder.pt"
    if path.exists():
        return CompressionAutoencoder.load_checkpoint(path)
    images, _ = toy_dataset()
    model, stats = train_autoencoder(images, TOY_AE_TRAIN, seed=TOY_AUTOENCODER_SEED,
                                     log_every=log_every)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(path, seed=TOY_AUTOENCODER_SEED, train_stats=stats)
    return model
