"""
Training objective: weighted cross-entropy plus soft Dice.
"""

import logging

import numpy as np

from . import functional as F
from .errors import ConfigurationError, InputError
from .tensor import Tensor

logger = logging.getLogger(__name__)

DICE_EPS = 1e-5


def one_hot(target: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """[n, h, w] integer labels → [n, K, h, w] indicator array."""
    return np.moveaxis(np.eye(num_classes, dtype=dtype)[target], -1, 1)


def validate_target(target: np.ndarray, num_classes: int) -> np.ndarray:
    target = np.asarray(target)
    if not np.issubdtype(target.dtype, np.integer):
        raise InputError(f"target labels must be integers, got dtype {target.dtype}")
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise InputError(
            f"target labels must lie in [0, {num_classes}), found range [{target.min()}, {target.max()}]"
        )
    return target.astype(np.int64)


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    n, k, h, w = logits.shape
    t = one_hot(validate_target(target, k), k, dtype=logits.dtype)
    return -(F.log_softmax(logits, axis=1) * t).sum() * (1.0 / (n * h * w))


def soft_dice_loss(logits: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 − mean over all K classes of (2Σpt + ε)/(Σp + Σt + ε), summed over the batch."""
    k = logits.shape[1]
    t = one_hot(validate_target(target, k), k, dtype=logits.dtype)
    p = F.softmax(logits, axis=1)
    axes = (0, 2, 3)
    intersection = (p * t).sum(axis=axes)
    denominator = p.sum(axis=axes) + t.sum(axis=axes) + eps
    dice = (intersection * 2.0 + eps) / denominator
    return 1.0 - dice.mean()


def combined_loss(
    logits: Tensor,
    target: np.ndarray,
    ce_weight: float = 0.5,
    dice_weight: float = 0.5,
    eps: float = DICE_EPS,
) -> Tensor:
    """ce_weight·CE + dice_weight·softDice for logits [n, K, h, w] and labels [n, h, w]."""
    if logits.ndim != 4:
        raise ConfigurationError(f"logits must be [n, K, h, w], got {logits.shape}")
    target = np.asarray(target)
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ConfigurationError(f"target shape {target.shape} does not match logits {logits.shape}")
    return cross_entropy(logits, target) * ce_weight + soft_dice_loss(logits, target, eps) * dice_weight
