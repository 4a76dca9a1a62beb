"""Semi-supervised similarity-regularized beta-VAE for 3-D volumes."""

from ._core import (
    CheckpointError,
    ConfigError,
    Dataset,
    Model,
    Trainer,
    TrainingError,
    average_reconstruction,
    bootstrap_classify,
    converged_value,
    corpus_defaults,
    correlate,
    derive_seed,
    dispersion,
    generate_corpus,
    glm_voxelwise,
    kl_gaussian,
    latent_traversal,
    load_checkpoint,
    load_dataset,
    load_volume,
    logistic_fit,
    mse_loss,
    normalize_intensity,
    pearson,
    phantom,
    save_volume,
    split_ids,
)

__version__ = "0.1.0"
