"""
Training module for jamident.
Handles baseline cross-entropy training and the two defenses: randomized
masking ensembles and consistent (dual-branch) training.
"""

import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from rich.console import Console

from . import tensor as T

console = Console()
logger = logging.getLogger(__name__)

STRATEGIES = ("baseline", "masked", "consistent")
MASK_MODES = ("continuous", "discrete")
REDUCTIONS = ("sum", "mean")


class TrainingDivergedError(RuntimeError):
    """Raised when a mini-batch loss stops being finite."""


@dataclass(frozen=True)
class MaskStrategy:
    """Which patches a branch hides: a contiguous run or a random subset."""
    mode: str = "continuous"
    mask_rate: float = 0.3
    num_patches: int = 100

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ValueError(f"mask mode must be one of {MASK_MODES}, got {self.mode!r}")
        if not 0 < self.masked < self.num_patches:
            raise ValueError(
                f"mask rate {self.mask_rate} masks {self.masked} of {self.num_patches} patches; need 0 < n < total")

    @property
    def masked(self):
        return int(round(self.mask_rate * self.num_patches))


@dataclass(frozen=True)
class MaskEnsembleConfig:
    branches: int = 4
    strategy: Optional[MaskStrategy] = MaskStrategy()
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.branches < 1:
            raise ValueError(f"need at least one branch, got {self.branches}")
        if self.noise_std < 0:
            raise ValueError(f"noise std must be nonnegative, got {self.noise_std}")


@dataclass(frozen=True)
class TrainConfig:
    """
    SGD schedule.

    With ``reduction="sum"`` the step follows the loss summed over the
    mini-batch, so ``lr`` is a per-sample rate and the batch size only
    changes how often the weights move; "mean" divides by the batch size.
    """
    epochs: int = 50
    lr: float = 0.001
    batch_size: int = 32
    seed: int = 0
    queue_size: int = 4
    reduction: str = "sum"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.queue_size < 1:
            raise ValueError(f"epochs, batch size and queue size must be positive: {self}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"loss reduction must be one of {REDUCTIONS}, got {self.reduction!r}")


@dataclass(frozen=True)
class ConsistencyConfig:
    """
    Dual-branch loss weights and the robust branch's corruption.

    ``ce_on_both`` averages the cross-entropy over both branches instead of
    applying it to the regular branch only.
    """
    beta_features: float = 0.2
    beta_probs: float = 0.2
    strategy: Optional[MaskStrategy] = MaskStrategy()
    noise_std: float = 0.1
    ce_on_both: bool = False

    def __post_init__(self):
        if self.beta_features < 0 or self.beta_probs < 0 or self.noise_std < 0:
            raise ValueError(f"loss weights and noise std must be nonnegative: {self}")

    @property
    def needs_robust_branch(self):
        return bool(self.beta_features or self.beta_probs or self.ce_on_both)


@dataclass
class TrainResult:
    model: object
    strategy: str
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)


# ----------------------------------------------------------------------
# masking

def contiguous_mask(start, n, total):
    """Indices start, start + 1, ... (n of them) wrapping around ``total``."""
    return (start + np.arange(n)) % total


def sample_mask(strategy, rng, start=None):
    """
    Draw the active patch set of one branch.

    Args:
        strategy: MaskStrategy
        rng: numpy Generator
        start: first masked index for continuous masking (drawn when None)

    Returns:
        Sorted int array of the num_patches - n active indices
    """
    total, n = strategy.num_patches, strategy.masked
    if strategy.mode == "continuous":
        if start is None:
            start = int(rng.integers(0, total))
        masked = contiguous_mask(start, n, total)
    else:
        masked = rng.choice(total, size=n, replace=False)
    keep = np.ones(total, dtype=bool)
    keep[masked] = False
    return np.flatnonzero(keep)


def ensemble_probs(model, images, cfg, rng, track_stats=True):
    """
    Mean softmax probabilities over ``cfg.branches`` masked, noisy branches.

    Differentiable; every branch shares the model weights and draws its own
    mask and feature noise from ``rng``.
    """
    total = None
    for _ in range(cfg.branches):
        active = sample_mask(cfg.strategy, rng) if cfg.strategy is not None else None
        probs = T.softmax(model(images, active, cfg.noise_std, rng, track_stats), axis=-1)
        total = probs if total is None else T.add(total, probs)
    return T.scale(total, 1.0 / cfg.branches)


def ensemble_forward(model, images, cfg, rng):
    """Ensemble probabilities as a plain array, no graph recorded."""
    with T.no_grad():
        return ensemble_probs(model, images, cfg, rng, track_stats=False).data


class MaskEnsemble:
    """
    Masking ensemble as a classifier callable.

    Every call re-seeds its generator from ``seed``, so repeated calls use
    the same masks and noise. Returns log ensemble probabilities: their
    cross-entropy is the negative log-likelihood of the averaged prediction.
    """

    def __init__(self, model, cfg, seed=None):
        self.model = model
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed

    def __call__(self, images):
        probs = ensemble_probs(self.model, images, self.cfg, np.random.default_rng(self.seed), track_stats=False)
        return T.log(T.add(probs, 1e-12))


# ----------------------------------------------------------------------
# progress and batching

class ProgressLog:
    """Line-delimited JSON progress records on stdout and in an optional file."""

    def __init__(self, path=None, echo=True):
        self.path = path
        self.echo = echo
        self.records = []

    def record(self, **fields):
        self.records.append(fields)
        line = json.dumps(fields, sort_keys=True)
        if self.echo:
            console.out(line, highlight=False)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")


class BatchFeeder:
    """
    Bounded producer/consumer queue of shuffled mini-batches.

    A worker thread gathers batches (fancy indexing copies) ahead of the
    training loop, holding at most ``queue_size`` of them.
    """

    _DONE = object()

    def __init__(self, images, labels, batch_size, rng, queue_size=4):
        self.images = images
        self.labels = labels
        self.batch_size = batch_size
        self.order = rng.permutation(len(labels))
        self.queue = queue.Queue(maxsize=queue_size)
        self._stop = threading.Event()

    def _produce(self):
        try:
            for start in range(0, len(self.order), self.batch_size):
                if self._stop.is_set():
                    return
                index = self.order[start:start + self.batch_size]
                self.queue.put((self.images[index], self.labels[index]))
        except Exception as e:  # surfaced in the consumer
            self.queue.put(e)
        self.queue.put(self._DONE)

    def __iter__(self):
        worker = threading.Thread(target=self._produce, daemon=True)
        worker.start()
        try:
            while True:
                item = self.queue.get()
                if item is self._DONE:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self._stop.set()
            while worker.is_alive():
                try:
                    self.queue.get_nowait()
                except queue.Empty:
                    worker.join(timeout=0.05)

    def __len__(self):
        return -(-len(self.order) // self.batch_size)


def _arrays(dataset):
    if isinstance(dataset, tuple):
        images, labels = dataset
    else:
        images, labels = dataset.images, dataset.labels
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("training set is empty")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


# ----------------------------------------------------------------------
# training loops

def _fit(model, dataset, tc, strategy, step, log):
    """
    Shared SGD loop; ``step(x, y, mask_rng)`` returns (batch-mean loss
    Tensor, probs array).

    Batch order and masks draw from separate streams of ``tc.seed`` so a run
    that never masks consumes exactly the baseline's random numbers. The
    recorded losses stay per-sample means whatever ``tc.reduction`` says.
    """
    images, labels = _arrays(dataset)
    log = log or ProgressLog(echo=False)
    batch_rng = np.random.default_rng([tc.seed, 0])
    mask_rng = np.random.default_rng([tc.seed, 1])
    params = model.parameters()
    result = TrainResult(model, strategy)
    model.train()
    for epoch in range(1, tc.epochs + 1):
        loss_sum, correct = 0.0, 0
        feeder = BatchFeeder(images, labels, tc.batch_size, batch_rng, tc.queue_size)
        for batch, (x, y) in enumerate(feeder):
            loss, probs = step(x, y, mask_rng)
            value = float(loss.item())
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"{strategy} training diverged at epoch {epoch}, batch {batch}: loss {value}")
            model.zero_grad()
            T.backward(T.scale(loss, len(y)) if tc.reduction == "sum" else loss, params)
            T.sgd_step(params, tc.lr)
            loss_sum += value * len(y)
            correct += int((np.argmax(probs, axis=-1) == y).sum())
        result.losses.append(loss_sum / len(labels))
        result.accuracies.append(correct / len(labels))
        log.record(epoch=epoch, split="train", loss=result.losses[-1],
                   accuracy=result.accuracies[-1], strategy=strategy)
        logger.debug("%s epoch %d: loss %.4f", strategy, epoch, result.losses[-1])
    model.eval()
    return result


def train_baseline(model, dataset, tc, log=None):
    """
    Mini-batch cross-entropy training with plain SGD.

    Returns:
        TrainResult with one mean loss and accuracy per epoch

    Raises:
        TrainingDivergedError: a batch loss is NaN or infinite
    """
    def step(x, y, _):
        logits = model(x)
        return T.cross_entropy(logits, y), logits.data

    return _fit(model, dataset, tc, "baseline", step, log)


def train_masked(model, dataset, tc, mc, log=None):
    """Train through the masking ensemble: fresh masks and noise per branch and batch."""
    def step(x, y, mask_rng):
        probs = ensemble_probs(model, x, mc, mask_rng)
        return T.nll_loss(probs, y), probs.data

    return _fit(model, dataset, tc, "masked", step, log)


def consistency_losses(model, x, y, cc, rng):
    """
    Dual-branch loss terms for one batch.

    Returns:
        Tuple (total, ce, feature term, probability term, regular-branch probs);
        the penalties are batch means of squared L2 distances between the
        post-GAP features and the softmax outputs of the two branches.
        Without a robust branch both penalties are None.
    """
    z_regular = model.features(x)
    logits_regular = model.head(z_regular)
    ce = T.cross_entropy(logits_regular, y)
    if not cc.needs_robust_branch:
        return ce, ce, None, None, logits_regular.data
    active = sample_mask(cc.strategy, rng) if cc.strategy is not None else None
    z_robust = model.features(x, active, cc.noise_std, rng, track_stats=False)
    logits_robust = model.head(z_robust)
    p_regular = T.softmax(logits_regular, axis=-1)
    p_robust = T.softmax(logits_robust, axis=-1)
    if cc.ce_on_both:
        ce = T.scale(T.add(ce, T.cross_entropy(logits_robust, y)), 0.5)
    feature_gap = T.sub(z_regular, z_robust)
    prob_gap = T.sub(p_regular, p_robust)
    l_f = T.mean(T.reduce_sum(T.mul(feature_gap, feature_gap), axis=-1))
    l_p = T.mean(T.reduce_sum(T.mul(prob_gap, prob_gap), axis=-1))
    total = T.add(ce, T.add(T.scale(l_f, cc.beta_features), T.scale(l_p, cc.beta_probs)))
    return total, ce, l_f, l_p, p_regular.data


def train_consistent(model, dataset, tc, cc, log=None):
    """
    Consistent training: a clean regular branch and a masked, noisy robust
    branch share weights; only the regular inference path is kept.
    """
    def step(x, y, mask_rng):
        total, _, _, _, probs = consistency_losses(model, x, y, cc, mask_rng)
        return total, probs

    return _fit(model, dataset, tc, "consistent", step, log)


def train(strategy, model, dataset, tc, mc=MaskEnsembleConfig(), cc=ConsistencyConfig(), log=None):
    """Dispatch to the training loop of ``strategy``."""
    if strategy == "baseline":
        return train_baseline(model, dataset, tc, log)
    if strategy == "masked":
        return train_masked(model, dataset, tc, mc, log)
    if strategy == "consistent":
        return train_consistent(model, dataset, tc, cc, log)
    raise ValueError(f"unknown training strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
