"""noisemark: watermarking images by optimizing diffusion inversion noise."""

__version__ = "0.1.0"

from .attacks import (
    AttackPool,
    AttackSpec,
    AttackTemplate,
    apply,
    default_attack_pool,
    differentiable_jpeg,
    sample_and_apply,
)
from .codec import (
    BitMessage,
    WatermarkDecoder,
    bit_accuracy,
    decode,
    fit_whitening,
    sample_message,
    train_decoder,
)
from .data import CLASS_NAMES, NUM_CLASSES, make_dataset
from .diffusion import (
    ConditionEmbedding,
    DenoiserOutput,
    DiffusionModel,
    ModelConfig,
    TrainConfig,
    train_toy_model,
)
from .embedder import (
    EmbedConfig,
    EmbedResult,
    PseudoMask,
    blend_with_mask,
    compute_pseudo_mask,
    embed,
    loss_decode,
    loss_mse_masked,
    loss_self_attention,
)
from .autoencoder import (
    QUALITY_WIDTHS,
    CompressionAutoencoder,
    toy_autoencoder_attack,
    train_autoencoder,
)
from .bench import (
    BenchReport,
    WatermarkMethod,
    autoencoder_sweep,
    regeneration_attack,
    regeneration_sweep,
    render_report_plots,
    run_benchmark,
)
from .config import ConfigError, RunConfig, build_config, load_config
from .dwtdct import dwtdct_embed, dwtdct_extract
from .fileio import load_message, load_png, save_message, save_png
from .inversion import LatentTrajectory, ddim_invert, null_text_optimize, reconstruct
from .manifest import RunManifest, file_sha256
from .metrics import quality_metrics
from .schedule import NoiseSchedule
from .seeds import derive_seed
from .transforms import TRANSFORM_POINTS, TransformPoint, transform
from .unet import AttentionBundle, CondUNet

__all__ = [name for name in dir() if not name.startswith("_")]
