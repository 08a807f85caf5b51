"""
Adversarial attack module for jamident.
White-box fast gradient sign perturbations of spectrogram images under an
L-infinity budget.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

PIXEL_LEVELS = 255.0


@dataclass(frozen=True)
class AttackConfig:
    """
    Attack budget.

    Attributes:
        epsilon: max per-pixel change on the [0, 1] image scale
        norm: only "inf" is supported
    """
    epsilon: float
    norm: str = "inf"

    def __post_init__(self):
        if not math.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be finite and nonnegative, got {self.epsilon}")
        if self.norm != "inf":
            raise ValueError(f"unsupported attack norm {self.norm!r}; only 'inf' is implemented")

    @classmethod
    def from_levels(cls, levels, **kwargs):
        """Budget given in pixel levels, e.g. 8 for 8/255."""
        return cls(levels / PIXEL_LEVELS, **kwargs)


def input_gradient(model, images, labels):
    """
    Gradient of the mean cross-entropy w.r.t. the input pixels.

    ``model`` is any callable mapping a (B, C, H, W) Tensor to (B, K)
    logits (or log-probabilities). Parameter gradients are left untouched.
    """
    x = T.Tensor(np.asarray(images), requires_grad=True)
    loss = T.cross_entropy(model(x), labels)
    (gradient,) = T.grad(loss, [x])
    return gradient


def fgsm(model, images, labels, cfg):
    """
    Fast gradient sign method.

    x_adv = clip(x + eps * sign(mean_c dCE/dx), 0, 1): the channel-averaged
    gradient keeps identical channels identical.

    Args:
        model: callable returning logits, kept in its current mode
        images: (B, C, H, W) or (C, H, W) array in [0, 1]
        labels: class index or array of B indices
        cfg: AttackConfig

    Returns:
        Adversarial images with the dtype and shape of ``images``
    """
    images = np.asarray(images)
    if cfg.epsilon == 0:
        return images.copy()
    single = images.ndim == 3
    batch = images[None] if single else images
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    gradient = input_gradient(model, batch, labels)
    direction = np.sign(gradient.mean(axis=-3, keepdims=True))
    adversarial = np.clip(batch + batch.dtype.type(cfg.epsilon) * direction, 0.0, 1.0).astype(batch.dtype)
    return adversarial[0] if single else adversarial
