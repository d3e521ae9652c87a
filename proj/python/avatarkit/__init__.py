"""Head avatar reenactment pipeline: synthesis, training, inference, metrics."""

import json as _json

from ._core import (  # noqa: F401
    AvatarkitError,
    Backbone,
    UsageError,
    default_train_config,
    evaluate_dirs,
    fit_gaussian,
    frechet_distance,
    loss_cos,
    loss_d,
    loss_g,
    loss_idmrf,
    loss_l1,
    loss_mask,
    load_dataset,
    perceptual_distance,
    psnr,
    reenact,
    ssim,
    synthesize_dataset,
    total_loss,
    validate_sample,
)
from ._core import train_json as _train_json

__version__ = "0.1.0"


def train(config, dataset, out):
    """Run training; `config` is a dict shaped like default_train_config()."""
    return _train_json(_json.dumps(config), str(dataset), str(out))
