"""Alignment-preserving compression of small networks.

Train a reference, prune it, fine-tune with logit-pairing / distillation
losses under several weighting schemes, and measure how far the compressed
model drifts from the reference (CIE, CIE-U, CIP, class fairness, saliency
IoU, dice).
"""

from .autodiff import Parameter, backward, forward, grad_check, sgd_step, softmax_t
from .compression import (
    CompressionPlan,
    attach_group_adapter,
    fold_adapters,
    group_sparsity_compress,
    group_sparsity_regularizer,
    magnitude_prune,
    rewind_compress,
)
from .losses import CE, CE_PRED, KD, MSE, LossBundle, ce_loss, ce_pred_loss, combined_loss, kd_loss, mse_pairing_loss
from .metrics import build_report, count_cie_u, count_cies, count_cips, dice, fairness_metrics, saliency, soft_iou
from .models import Network, build_classifier, build_segmenter, load_checkpoint, save_checkpoint
from .training import TrainSchedule, fit
from .weighting import WeightingConfig, WeightingState

__version__ = "0.1.0"
