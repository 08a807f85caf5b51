"""
Harness module for jamident.
Handles dataset generation and persistence, checkpoints, clean and
adversarial evaluation, report CSVs and the FLOPs report.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from . import tensor as T
from .attack import AttackConfig, fgsm
from .diffnet import DiffTransformer, ModelConfig, count_flops, predict_from_logits
from .metrics import AttackReport, EvalReport
from .siggen import (COMM_SNR_DB, SAMPLE_RATE_HZ, SIGNAL_LENGTH, ChannelConfig, JammingType, OfdmConfig,
                     received_signal)
from .tfmap import StftConfig, spectrogram
from .training import MaskEnsemble, MaskEnsembleConfig, MaskStrategy

logger = logging.getLogger(__name__)

DATASET_VERSION = 1
IMAGES_FILE = "images.f32"
LABELS_FILE = "labels.u8"
ISNR_FILE = "isnr.f32"
MANIFEST_FILE = "manifest.json"
CHECKPOINT_BLOB = "checkpoint.bin"
CHECKPOINT_HEADER = "checkpoint.json"


class DatasetError(ValueError):
    """Raised when dataset files are missing or inconsistent with the manifest."""


class CheckpointError(ValueError):
    """Raised when a checkpoint is missing, malformed or does not fit the model."""


@dataclass(frozen=True)
class DatasetConfig:
    isnr_grid_db: Tuple[float, ...] = (-14.0, -8.0, 0.0, 8.0)
    samples_per_type_per_isnr: int = 100
    test_fraction: float = 0.25
    seed: int = 2024
    num_classes: int = len(JammingType)
    sample_rate_hz: float = SAMPLE_RATE_HZ
    n_samples: int = SIGNAL_LENGTH
    snr_db: float = COMM_SNR_DB
    channel: ChannelConfig = ChannelConfig()
    ofdm: OfdmConfig = OfdmConfig()
    stft: StftConfig = StftConfig()

    def __post_init__(self):
        if not self.isnr_grid_db or self.samples_per_type_per_isnr < 1:
            raise ValueError(f"dataset needs ISNR values and samples: {self}")
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test fraction must lie in (0, 1), got {self.test_fraction}")
        if not 1 <= self.num_classes <= len(JammingType):
            raise ValueError(f"num_classes must lie in 1..{len(JammingType)}, got {self.num_classes}")

    @property
    def total(self):
        return self.num_classes * len(self.isnr_grid_db) * self.samples_per_type_per_isnr


@dataclass
class Dataset:
    """Images, labels and per-sample ISNR with the train/test assignment."""
    images: np.ndarray
    labels: np.ndarray
    isnr_db: np.ndarray
    is_test: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return self.labels.shape[0]

    def split(self, name):
        """View of the 'train' or 'test' part (or 'all')."""
        if name == "all":
            return self
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        keep = self.is_test if name == "test" else ~self.is_test
        return Dataset(self.images[keep], self.labels[keep], self.isnr_db[keep], self.is_test[keep], self.manifest)

    def summary(self):
        """Sample counts per class and ISNR, split into train and test columns."""
        frame = pd.DataFrame({
            "class": [JammingType(int(c)).name for c in self.labels],
            "isnr_db": self.isnr_db.astype(np.float64),
            "split": np.where(self.is_test, "test", "train"),
        })
        table = frame.groupby(["class", "isnr_db", "split"]).size().unstack("split", fill_value=0)
        return table.reindex(columns=["train", "test"], fill_value=0).reset_index()


# ----------------------------------------------------------------------
# dataset generation and persistence

def synthesize_example(cfg, jamming_type, isnr_index, index):
    """One spectrogram, seeded by (dataset seed, type, ISNR slot, sample index)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, int(jamming_type), isnr_index, index]))
    sig, _ = received_signal(jamming_type, cfg.isnr_grid_db[isnr_index], rng, cfg.channel, cfg.ofdm,
                             cfg.n_samples, cfg.sample_rate_hz, cfg.snr_db)
    return spectrogram(sig, cfg.stft)


def stratified_test_mask(labels, isnr_db, test_fraction, seed):
    """Mark round(test_fraction * group size) samples of every (class, ISNR) group as test."""
    rng = np.random.default_rng([seed, 7])
    is_test = np.zeros(labels.shape[0], dtype=bool)
    groups = pd.DataFrame({"label": labels, "isnr": isnr_db}).groupby(["label", "isnr"], sort=True).indices
    for key in sorted(groups):
        members = np.asarray(groups[key])
        picked = rng.permutation(members)[:int(round(test_fraction * members.size))]
        is_test[picked] = True
    return is_test


def gen_dataset(cfg, out_dir, workers=1):
    """
    Synthesize the full dataset and write it to ``out_dir``.

    Samples are ordered by (class, ISNR, index); per-sample seed streams
    make the output independent of ``workers``.

    Returns:
        Dataset with its manifest
    """
    jobs = [(t, k, i) for t in range(cfg.num_classes)
            for k in range(len(cfg.isnr_grid_db))
            for i in range(cfg.samples_per_type_per_isnr)]
    logger.info("synthesizing %d samples with %d worker(s)", len(jobs), workers)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        images = list(pool.map(lambda job: synthesize_example(cfg, *job), jobs))
    images = np.stack(images).astype(np.float32)
    labels = np.array([t for t, _, _ in jobs], dtype=np.uint8)
    isnr = np.array([cfg.isnr_grid_db[k] for _, k, _ in jobs], dtype=np.float32)
    is_test = stratified_test_mask(labels, isnr, cfg.test_fraction, cfg.seed)
    manifest = {
        "version": DATASET_VERSION,
        "num_classes": cfg.num_classes,
        "class_names": [JammingType(t).name for t in range(cfg.num_classes)],
        "isnr_grid_db": [float(v) for v in cfg.isnr_grid_db],
        "samples_per_type_per_isnr": cfg.samples_per_type_per_isnr,
        "split_ratio": "3:1",
        "test_fraction": cfg.test_fraction,
        "count": int(labels.size),
        "image_shape": list(images.shape[1:]),
        "sample_rate_hz": cfg.sample_rate_hz,
        "n_samples": cfg.n_samples,
        "snr_db": cfg.snr_db,
        "stft": asdict(cfg.stft),
        "channel": asdict(cfg.channel),
        "ofdm": {"subcarrier_spacing_hz": cfg.ofdm.subcarrier_spacing_hz, "num_subcarriers": cfg.ofdm.num_subcarriers},
        "seed": cfg.seed,
        "test_indices": np.flatnonzero(is_test).tolist(),
    }
    dataset = Dataset(images, labels, isnr, is_test, manifest)
    save_dataset(dataset, out_dir)
    return dataset


def save_dataset(dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    dataset.images.astype("<f4").tofile(os.path.join(out_dir, IMAGES_FILE))
    dataset.labels.astype("u1").tofile(os.path.join(out_dir, LABELS_FILE))
    dataset.isnr_db.astype("<f4").tofile(os.path.join(out_dir, ISNR_FILE))
    with open(os.path.join(out_dir, MANIFEST_FILE), "w", encoding="utf-8") as f:
        json.dump(dataset.manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(data_dir):
    """
    Read a dataset written by ``gen_dataset``.

    Raises:
        DatasetError: missing files or blob sizes that disagree with the manifest
    """
    manifest_path = os.path.join(data_dir, MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        raise DatasetError(f"no dataset manifest at {manifest_path}")
    try:
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
        count = int(manifest["count"])
        shape = tuple(manifest["image_shape"])
        test_indices = np.asarray(manifest["test_indices"], dtype=np.int64)
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetError(f"malformed manifest {manifest_path}: {e}") from e

    def read(name, dtype, expected):
        path = os.path.join(data_dir, name)
        if not os.path.exists(path):
            raise DatasetError(f"missing dataset file {path}")
        values = np.fromfile(path, dtype=dtype)
        if values.size != expected:
            raise DatasetError(f"{name} holds {values.size} values, manifest implies {expected}")
        return values

    images = read(IMAGES_FILE, "<f4", count * int(np.prod(shape))).reshape((count,) + shape).astype(np.float32)
    labels = read(LABELS_FILE, "u1", count)
    isnr = read(ISNR_FILE, "<f4", count).astype(np.float32)
    if test_indices.size and (test_indices.min() < 0 or test_indices.max() >= count):
        raise DatasetError(f"test indices exceed the {count} samples")
    if labels.size and labels.max() >= manifest.get("num_classes", len(JammingType)):
        raise DatasetError(f"labels exceed the manifest's {manifest.get('num_classes')} classes")
    is_test = np.zeros(count, dtype=bool)
    is_test[test_indices] = True
    return Dataset(images, labels, isnr, is_test, manifest)


# ----------------------------------------------------------------------
# checkpoints

def _state(model):
    for name, param in model.named_parameters():
        yield "param", name, param.data
    for name, buffer in model.named_buffers():
        yield "buffer", name, buffer


def save_checkpoint(model, out_dir, metadata=None):
    """
    Write checkpoint.bin (little-endian f32 parameters and buffers) and the
    checkpoint.json header holding the model config and offset table.
    """
    os.makedirs(out_dir, exist_ok=True)
    table, chunks, offset = [], [], 0
    for kind, name, values in _state(model):
        table.append({"name": name, "kind": kind, "offset": offset, "shape": list(values.shape)})
        chunks.append(np.asarray(values, dtype="<f4").ravel())
        offset += values.size
    header = {"model": asdict(model.config), "params": table, "metadata": metadata or {}}
    np.concatenate(chunks).astype("<f4").tofile(os.path.join(out_dir, CHECKPOINT_BLOB))
    with open(os.path.join(out_dir, CHECKPOINT_HEADER), "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    return header


def load_checkpoint(ckpt_dir):
    """
    Rebuild the model stored in ``ckpt_dir`` in evaluation mode.

    Returns:
        Tuple (model, header)

    Raises:
        CheckpointError: missing files or a parameter table that does not fit
    """
    header_path = os.path.join(ckpt_dir, CHECKPOINT_HEADER)
    blob_path = os.path.join(ckpt_dir, CHECKPOINT_BLOB)
    if not os.path.exists(header_path) or not os.path.exists(blob_path):
        raise CheckpointError(f"no checkpoint in {ckpt_dir}")
    try:
        with open(header_path, encoding="utf-8") as f:
            header = json.load(f)
        model = DiffTransformer(ModelConfig(**header["model"]))
        entries = {entry["name"]: entry for entry in header["params"]}
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"malformed checkpoint header {header_path}: {e}") from e
    blob = np.fromfile(blob_path, dtype="<f4")
    params = dict(model.named_parameters())
    expected = {name for _, name, _ in _state(model)}
    if set(entries) != expected:
        raise CheckpointError(f"checkpoint entries do not match the model: {sorted(set(entries) ^ expected)}")
    for kind, name, values in _state(model):
        entry = entries[name]
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if tuple(entry["shape"]) != values.shape or entry["offset"] + size > blob.size:
            raise CheckpointError(f"{name}: stored shape {entry['shape']} does not fit {values.shape}")
        stored = blob[entry["offset"]:entry["offset"] + size].reshape(values.shape)
        if kind == "param":
            params[name].data = stored.astype(params[name].dtype)
        else:
            values[...] = stored
    model.eval()
    return model, header


# ----------------------------------------------------------------------
# evaluation

def mask_config_from(metadata):
    """Ensemble settings stored with a masking-trained checkpoint."""
    mask = metadata.get("mask") or {}
    strategy = mask.get("strategy")
    return MaskEnsembleConfig(
        branches=int(mask.get("branches", 4)),
        strategy=MaskStrategy(**strategy) if strategy else None,
        noise_std=float(mask.get("noise_std", 0.1)),
        seed=int(mask.get("seed", 0)),
    )


@dataclass
class Classifier:
    """
    Inference path of a trained model: the plain forward pass or the
    seeded masking ensemble. ``chunk`` picks the ensemble's seed stream.
    """
    model: DiffTransformer
    ensemble: Optional[MaskEnsembleConfig] = None

    @property
    def mode(self):
        return "plain" if self.ensemble is None else "ensemble"

    def for_chunk(self, chunk):
        if self.ensemble is None:
            return self.model
        return MaskEnsemble(self.model, self.ensemble, seed=[self.ensemble.seed, chunk])


def classifier_for(model, header=None, use_ensemble=True, seed=None):
    """
    Classifier matching the evaluation mode recorded in a checkpoint header.

    ``seed`` replaces the stored ensemble seed; the plain path ignores it.
    """
    metadata = (header or {}).get("metadata", {})
    if use_ensemble and metadata.get("eval_mode") == "ensemble":
        ensemble = mask_config_from(metadata)
        return Classifier(model, ensemble if seed is None else replace(ensemble, seed=seed))
    return Classifier(model)


def _chunks(n, batch_size):
    return [(i, slice(start, min(start + batch_size, n))) for i, start in enumerate(range(0, n, batch_size))]


def _check_compatible(model, dataset):
    cfg = model.config
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if dataset.images.shape[1:] != expected:
        raise DatasetError(f"dataset images {dataset.images.shape[1:]} do not fit model input {expected}")
    if len(dataset) and int(dataset.labels.max()) >= cfg.num_classes:
        raise DatasetError(f"dataset labels exceed the model's {cfg.num_classes} classes")


def _run_chunks(classifier, dataset, batch_size, workers, epsilon=0.0):
    """Predictions for every sample, optionally on FGSM images of budget ``epsilon``."""
    labels = dataset.labels.astype(np.int64)

    def work(item):
        index, part = item
        net = classifier.for_chunk(index)
        images = dataset.images[part]
        if epsilon:
            images = fgsm(net, images, labels[part], AttackConfig(epsilon))
        with T.no_grad():
            return predict_from_logits(net(images))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(work, _chunks(len(dataset), batch_size)))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def evaluate(classifier, dataset, batch_size=128, workers=1):
    """
    Clean accuracy overall, per ISNR and per class.

    Args:
        classifier: Classifier or bare DiffTransformer
        dataset: Dataset (usually the test split)

    Returns:
        EvalReport
    """
    classifier = classifier if isinstance(classifier, Classifier) else Classifier(classifier)
    _check_compatible(classifier.model, dataset)
    predictions = _run_chunks(classifier, dataset, batch_size, workers)
    return EvalReport.build(predictions, dataset.labels, dataset.isnr_db, classifier.model.config.num_classes)


def eval_adversarial(classifier, dataset, eps_list=(3 / 255, 6 / 255, 8 / 255, 14 / 255), batch_size=128, workers=1):
    """
    Accuracy under FGSM for every budget in ``eps_list``.

    The attack and the prediction use the same inference path; a budget of
    0 reproduces the clean accuracy exactly.
    """
    classifier = classifier if isinstance(classifier, Classifier) else Classifier(classifier)
    _check_compatible(classifier.model, dataset)
    results = []
    for epsilon in eps_list:
        logger.info("FGSM at epsilon %.4f (%s path)", epsilon, classifier.mode)
        results.append((float(epsilon), _run_chunks(classifier, dataset, batch_size, workers, float(epsilon))))
    return AttackReport.build(results, dataset.labels, dataset.isnr_db)


# ----------------------------------------------------------------------
# reports

def write_eval_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, name) for name in ("eval.csv", "eval_class_isnr.csv", "confusion.csv")]
    report.to_frame().to_csv(paths[0], index=False)
    report.per_class_isnr.to_csv(paths[1], index=False)
    report.confusion_frame().to_csv(paths[2])
    return paths


def write_attack_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, name) for name in
             ("attack_eval.csv", "attack_eval_isnr.csv", "attack_eval_class.csv")]
    report.summary.to_csv(paths[0], index=False)
    report.per_isnr.to_csv(paths[1], index=False)
    report.per_class.to_csv(paths[2], index=False)
    return paths


def flops_report(model_or_config=ModelConfig(), band=(1.0e6, 2.6e6)):
    """
    FLOPs of one forward pass checked against an acceptance band.

    Returns:
        dict with flops, band_low, band_high, in_band, weight_macs, breakdown
    """
    report = count_flops(model_or_config)
    low, high = band
    return {
        "flops": report.total,
        "band_low": low,
        "band_high": high,
        "in_band": bool(low <= report.total <= high),
        "weight_macs": report.weight_macs,
        "breakdown": report.breakdown,
    }
