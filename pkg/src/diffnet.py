"""
Differential transformer module for jamident.
Patch split and embedding, multi-head differential attention with the
gated feed-forward block, the GAP classifier head and the analytic FLOP
count.
"""

import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import tensor as T
from .tensor import Module, Param, ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults give the 29,928-parameter classifier."""
    image_size: int = 40
    in_channels: int = 3
    patch: int = 4
    channels: int = 32
    heads: int = 4
    blocks: int = 2
    lam: float = 0.8
    expand: int = 2
    kernel: int = 3
    num_classes: int = 8

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError(f"image size {self.image_size} is not a multiple of patch size {self.patch}")
        if self.channels % self.heads:
            raise ValueError(f"{self.channels} channels do not split into {self.heads} heads")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.expand < 1 or self.blocks < 1 or self.kernel < 1 or self.num_classes < 2:
            raise ValueError(f"invalid model config {self}")

    @property
    def grid(self):
        return self.image_size // self.patch

    @property
    def num_patches(self):
        return self.grid ** 2

    @property
    def patch_dim(self):
        return self.in_channels * self.patch ** 2

    @property
    def head_dim(self):
        return self.channels // self.heads

    @property
    def hidden(self):
        return self.expand * self.channels


# Output maps of the attention branch and the classifier head start at
# He-uniform scale; every other weight keeps U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
OUTPUT_GAIN = math.sqrt(6.0)


def _uniform(rng, shape, fan_in, gain=1.0):
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class PatchEmbed(Module):
    """Sequence-axis convolution, batch norm and ReLU over the patch tokens."""

    def __init__(self, cfg, rng):
        fan_in = cfg.kernel * cfg.patch_dim
        self.weight = Param(_uniform(rng, (cfg.kernel, cfg.patch_dim, cfg.channels), fan_in), "weight")
        self.bias = Param(_uniform(rng, (cfg.channels,), fan_in), "bias")
        self.gamma = Param(np.ones(cfg.channels), "gamma")
        self.beta = Param(np.zeros(cfg.channels), "beta")
        self.running_mean = np.zeros(cfg.channels, dtype=self.gamma.dtype)
        self.running_var = np.ones(cfg.channels, dtype=self.gamma.dtype)


class MultiDiff(Module):
    """Per-head projection stacks: w_q, w_k (h, C, 2d), w_v (h, C, d); output map w_o (C, C)."""

    def __init__(self, cfg, rng):
        c, h, d = cfg.channels, cfg.heads, cfg.head_dim
        self.lam = float(cfg.lam)
        self.w_q = Param(_uniform(rng, (h, c, 2 * d), c), "w_q")
        self.w_k = Param(_uniform(rng, (h, c, 2 * d), c), "w_k")
        self.w_v = Param(_uniform(rng, (h, c, d), c), "w_v")
        self.head_gamma = Param(np.ones((h, 1, d)), "head_gamma")
        self.head_beta = Param(np.zeros((h, 1, d)), "head_beta")
        self.w_o = Param(_uniform(rng, (c, c), c, OUTPUT_GAIN), "w_o")


class EluBlock(Module):
    """Gated feed-forward unit (silu(x W1) * x W2) W3, no biases."""

    def __init__(self, cfg, rng):
        c, hidden = cfg.channels, cfg.hidden
        self.w1 = Param(_uniform(rng, (c, hidden), c), "w1")
        self.w2 = Param(_uniform(rng, (c, hidden), c), "w2")
        self.w3 = Param(_uniform(rng, (hidden, c), hidden), "w3")


class EncoderBlock(Module):
    def __init__(self, cfg, rng):
        c = cfg.channels
        self.ln1_gamma = Param(np.ones(c), "ln1_gamma")
        self.ln1_beta = Param(np.zeros(c), "ln1_beta")
        self.attn = MultiDiff(cfg, rng)
        self.ln2_gamma = Param(np.ones(c), "ln2_gamma")
        self.ln2_beta = Param(np.zeros(c), "ln2_beta")
        self.elu = EluBlock(cfg, rng)


class DiffTransformer(Module):
    """
    Jamming classifier: patch split, patch embedding, encoder blocks, GAP
    and a linear head.

    Calling the model returns logits; ``features`` stops after GAP.
    """

    def __init__(self, cfg=ModelConfig(), seed=0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.embed = PatchEmbed(cfg, rng)
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.blocks)]
        self.fc_weight = Param(_uniform(rng, (cfg.channels, cfg.num_classes), cfg.channels, OUTPUT_GAIN),
                               "fc_weight")
        self.fc_bias = Param(np.zeros(cfg.num_classes), "fc_bias")

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def features(self, images, active=None, noise_std=0.0, rng=None, track_stats=True):
        """
        Post-GAP features of a batch.

        Args:
            images: (B, 3, H, W) or (3, H, W) array or Tensor
            active: optional indices of the patches to keep
            noise_std: std of the Gaussian noise added to embedded tokens
            rng: numpy Generator, required when noise_std > 0
            track_stats: update batch-norm running statistics in training mode

        Returns:
            Tensor (B, C), or (C,) for a single image
        """
        images = T.as_tensor(images)
        single = images.ndim == 3
        if single:
            images = T.reshape(images, (1,) + images.shape)
        tokens = patch_split(images, self.config)
        if active is not None:
            tokens = T.take(tokens, check_active(active, self.config.num_patches), axis=1)
        tokens = patch_embed(tokens, self.embed, self.training, track_stats)
        if noise_std:
            if rng is None:
                raise ValueError("feature noise needs a random generator")
            tokens = T.gaussian_noise_add(tokens, noise_std, rng)
        for block in self.blocks:
            tokens = encoder_block(tokens, block)
        pooled = T.mean(tokens, axis=1)
        return T.reshape(pooled, pooled.shape[1:]) if single else pooled

    def head(self, features):
        return T.add(T.matmul(_as_matrix(features), self.fc_weight), self.fc_bias)

    def __call__(self, images, active=None, noise_std=0.0, rng=None, track_stats=True):
        z = self.features(images, active, noise_std, rng, track_stats)
        logits = self.head(z)
        return T.reshape(logits, logits.shape[1:]) if z.ndim == 1 else logits


def _as_matrix(x):
    return T.reshape(x, (1,) + x.shape) if x.ndim == 1 else x


def check_active(active, num_patches):
    """Validate an active patch index set and return it as an int array."""
    indices = np.asarray(sorted(active) if isinstance(active, (set, frozenset)) else active, dtype=np.int64).reshape(-1)
    if indices.size == 0:
        raise ValueError("active patch set is empty")
    if indices.min() < 0 or indices.max() >= num_patches:
        raise ValueError(f"active patch indices must lie in 0..{num_patches - 1}")
    if np.unique(indices).size != indices.size:
        raise ValueError("active patch indices repeat")
    return indices


def patch_split(images, cfg=ModelConfig()):
    """
    Cut images into non-overlapping square patches.

    Patches are scanned row-major over the image; each patch is flattened
    channel-major (channel, row, column).

    Args:
        images: (B, C, H, W) or (C, H, W) array or Tensor

    Returns:
        Tensor (B, N, C * p * p), or (N, C * p * p) for a single image
    """
    images = T.as_tensor(images)
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if images.ndim not in (3, 4) or images.shape[-3:] != expected:
        raise ShapeError(f"patch_split: expected images of shape {expected}, got {images.shape}")
    single = images.ndim == 3
    batch = 1 if single else images.shape[0]
    g, p = cfg.grid, cfg.patch
    x = T.reshape(images, (batch, cfg.in_channels, g, p, g, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (batch, cfg.num_patches, cfg.patch_dim))
    return T.reshape(x, x.shape[1:]) if single else x


def patch_embed(tokens, embed, training=True, track_stats=True):
    """Conv1d (zero-padded, stride 1) over the patch axis, then batch norm and ReLU."""
    tokens = T.as_tensor(tokens)
    if tokens.shape[-1] != embed.weight.shape[1]:
        raise ShapeError(f"patch_embed: tokens {tokens.shape} do not match kernel {embed.weight.shape}")
    single = tokens.ndim == 2
    x = T.reshape(tokens, (1,) + tokens.shape) if single else tokens
    x = T.conv1d(x, embed.weight, embed.bias, padding=(embed.weight.shape[0] - 1) // 2)
    x = T.batch_norm1d(x, embed.gamma, embed.beta, embed.running_mean, embed.running_var,
                       training, track_stats=track_stats)
    x = T.relu(x)
    return T.reshape(x, x.shape[1:]) if single else x


def diff_attention(x, w_q, w_k, w_v, lam=0.8):
    """
    Differential attention of one head (or a stack of heads).

    Computes (softmax(Q1 K1^T / sqrt(d)) - lam * softmax(Q2 K2^T / sqrt(d))) V
    where [Q1, Q2] = x w_q and [K1, K2] = x w_k split along channels.

    Args:
        x: Tensor (..., N, C)
        w_q, w_k: (..., C, 2d)
        w_v: (..., C, d)

    Returns:
        Tensor (..., N, d)
    """
    d = w_v.shape[-1]
    if w_q.shape[-1] != 2 * d or w_k.shape[-1] != 2 * d:
        raise ShapeError(f"diff_attention: projections {w_q.shape}, {w_k.shape} need 2d = {2 * d} columns")
    q1, q2 = T.split(T.matmul(x, w_q), 2, axis=-1)
    k1, k2 = T.split(T.matmul(x, w_k), 2, axis=-1)
    v = T.matmul(x, w_v)
    return T.matmul(diff_scores(q1, k1, q2, k2, lam), v)


def diff_scores(q1, k1, q2, k2, lam):
    """Differential score map softmax(Q1 K1^T / sqrt(d)) - lam * softmax(Q2 K2^T / sqrt(d))."""
    inv = 1.0 / math.sqrt(q1.shape[-1])
    first = T.softmax(T.scale(T.matmul(q1, T.transpose(k1)), inv), axis=-1)
    second = T.softmax(T.scale(T.matmul(q2, T.transpose(k2)), inv), axis=-1)
    return T.sub(first, T.scale(second, lam))


def multi_diff(x, attn):
    """
    All heads of differential attention, each layer-normalized and scaled
    by (1 - lam), concatenated and mapped through w_o.

    Args:
        x: Tensor (..., N, C)
        attn: MultiDiff

    Returns:
        Tensor (..., N, C)
    """
    x = T.as_tensor(x)
    lead, (n, c) = x.shape[:-2], x.shape[-2:]
    heads = diff_attention(T.reshape(x, lead + (1, n, c)), attn.w_q, attn.w_k, attn.w_v, attn.lam)
    heads = T.layer_norm(heads, attn.head_gamma, attn.head_beta)
    heads = T.scale(heads, 1.0 - attn.lam)
    k = len(lead)
    merged = T.reshape(T.transpose(heads, list(range(k)) + [k + 1, k, k + 2]), lead + (n, c))
    return T.matmul(merged, attn.w_o)


def elu_block(x, elu):
    gate = T.silu(T.matmul(x, elu.w1))
    return T.matmul(T.mul(gate, T.matmul(x, elu.w2)), elu.w3)


def encoder_block(x, block):
    """Pre-norm residual block: O = MultiDiff(LN(X)) + X; O' = ELU(LN(O)) + O."""
    o = T.add(multi_diff(T.layer_norm(x, block.ln1_gamma, block.ln1_beta), block.attn), x)
    return T.add(elu_block(T.layer_norm(o, block.ln2_gamma, block.ln2_beta), block.elu), o)


def forward(model, images, active=None, noise_std=0.0, rng=None, track_stats=True):
    """Logits of ``model`` for one image (K,) or a batch (B, K)."""
    return model(images, active, noise_std, rng, track_stats)


def predict_from_logits(logits):
    """Argmax class; ties go to the lowest index."""
    return np.argmax(np.asarray(getattr(logits, "data", logits)), axis=-1)


def predict(model, images, batch_size=256):
    """
    Predicted class of one image or of every image in a batch.

    Runs without recording a graph; the model keeps whatever mode it is in.
    """
    images = np.asarray(getattr(images, "data", images))
    with T.no_grad():
        if images.ndim == 3:
            return int(predict_from_logits(model(images)))
        parts = [predict_from_logits(model(images[i:i + batch_size])) for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


# ----------------------------------------------------------------------
# analytic FLOP count

SOFTMAX_FLOPS = 5
NORM_FLOPS = 5
SILU_FLOPS = 4


@dataclass
class FlopsReport:
    """Total FLOPs (multiply-accumulate = 2), stage breakdown and weight-layer MACs."""
    total: int
    breakdown: Dict[str, int] = field(default_factory=dict)
    weight_macs: int = 0


def _block_flops(cfg):
    n, c, h, d, hidden = cfg.num_patches, cfg.channels, cfg.heads, cfg.head_dim, cfg.hidden
    maps = 2 * h
    return {
        "ln1": NORM_FLOPS * n * c,
        "qkv": 2 * n * c * (2 * h * 2 * d + h * d),
        "scores": maps * 2 * n * n * d,
        "score_scale": maps * n * n,
        "softmax": maps * SOFTMAX_FLOPS * n * n,
        "diff": h * 2 * n * n,
        "attend": h * 2 * n * n * d,
        "head_ln": NORM_FLOPS * n * c,
        "head_scale": n * c,
        "w_o": 2 * n * c * c,
        "residual1": n * c,
        "ln2": NORM_FLOPS * n * c,
        "w1_w2": 2 * 2 * n * c * hidden,
        "silu": SILU_FLOPS * n * hidden,
        "gate": n * hidden,
        "w3": 2 * n * hidden * c,
        "residual2": n * c,
    }


def count_flops(model_or_config=ModelConfig()):
    """
    FLOPs of one unmasked forward pass of a single image.

    Dense and attention products count 2 per multiply-accumulate, softmax
    and normalizations 5 per element, SiLU 4, other elementwise ops 1.
    Biases are not counted.
    """
    cfg = getattr(model_or_config, "config", model_or_config)
    n, c = cfg.num_patches, cfg.channels
    conv_macs = n * cfg.patch_dim * c * cfg.kernel
    breakdown = {"patch_embed": 2 * conv_macs + NORM_FLOPS * n * c + n * c}
    block = sum(_block_flops(cfg).values())
    for i in range(cfg.blocks):
        breakdown[f"block{i + 1}"] = block
    breakdown["gap"] = n * c
    breakdown["head"] = 2 * c * cfg.num_classes
    block_macs = n * c * (2 * cfg.heads * 2 * cfg.head_dim + c + c) + 3 * n * c * cfg.hidden
    weight_macs = conv_macs + cfg.blocks * block_macs + c * cfg.num_classes
    return FlopsReport(sum(breakdown.values()), breakdown, weight_macs)
