"""UNet + spatial-reduction-attention transformer for binary segmentation,
built on a small reverse-mode autodiff core with finite-difference oracles."""

from .arch import (
    ENCODER_PRESETS,
    VARIANTS,
    SeUNetTrans,
    VariantSpec,
    build_variant,
    count_attention_scores,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import generate_synthetic, load_dataset, load_manifest, split_dataset
from .gradcheck import finite_diff_gradcheck
from .metrics import confusion_counts, dataset_metrics, image_metrics
from .tensor import Parameter, Tape, Tensor, backward_accumulate
from .train import Adam, bce_loss, evaluate_model, train_loop

__version__ = "0.1.0"

__all__ = [
    "ENCODER_PRESETS",
    "VARIANTS",
    "SeUNetTrans",
    "VariantSpec",
    "build_variant",
    "count_attention_scores",
    "load_checkpoint",
    "save_checkpoint",
    "generate_synthetic",
    "load_dataset",
    "load_manifest",
    "split_dataset",
    "finite_diff_gradcheck",
    "confusion_counts",
    "dataset_metrics",
    "image_metrics",
    "Parameter",
    "Tape",
    "Tensor",
    "backward_accumulate",
    "Adam",
    "bce_loss",
    "evaluate_model",
    "train_loop",
    "__version__",
]
