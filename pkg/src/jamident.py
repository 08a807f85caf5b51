#!/usr/bin/env python3
"""
Jamming identification workbench.
Usage: python run.py COMMAND [options]
Example: python run.py gen-dataset --out data/desk --desk-scale
Commands generate the spectrogram dataset, train the classifier with one of
three strategies, and evaluate it on clean and FGSM-perturbed test images.
"""

import argparse
import logging
import os
import sys
from dataclasses import asdict

from rich.console import Console
from rich.logging import RichHandler

from . import harness
from .config import Config, ConfigError, parse_eps_list, resolve_workers
from .diffnet import DiffTransformer
from .harness import CheckpointError, DatasetError
from .tensor import AutogradError
from .training import STRATEGIES, ProgressLog, TrainingDivergedError, train
from .ui_display import ChartDisplay, ReportTableBuilder, UIDisplay

console = Console()
logger = logging.getLogger("jamident")

EXIT_OK = 0
EXIT_OUT_OF_BAND = 1
EXIT_USAGE = 2


def build_parser():
    """
    Build the command-line parser.

    Returns:
        argparse.ArgumentParser with one sub-parser per command
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="config.ini", help="configuration file (default: src/config.ini)")
    common.add_argument("--seed", type=int,
                        help="override the dataset, training or evaluation-ensemble seed of the command")
    common.add_argument("--out", help="output directory")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    scale = common.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", action="store_true", help="4 ISNR values x 100 samples, 15 epochs")
    scale.add_argument("--paper-scale", action="store_true", help="12 ISNR values x 400 samples, 50 epochs")

    parser = argparse.ArgumentParser(prog="jamident", description="Jamming identification workbench")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen-dataset", parents=[common], help="synthesize the spectrogram dataset")

    train_cmd = commands.add_parser("train", parents=[common], help="train a classifier")
    train_cmd.add_argument("--dataset", required=True, help="dataset directory")
    train_cmd.add_argument("--strategy", choices=STRATEGIES, default="baseline")

    for name, text in (("eval", "clean accuracy report"), ("attack-eval", "accuracy under FGSM")):
        cmd = commands.add_parser(name, parents=[common], help=text)
        cmd.add_argument("--dataset", required=True, help="dataset directory")
        cmd.add_argument("--checkpoint", required=True, help="checkpoint directory")
        cmd.add_argument("--no-mask-eval", action="store_true",
                         help="evaluate a masking-trained model with the plain forward pass")
        if name == "attack-eval":
            cmd.add_argument("--eps", help="budgets in 1/255 pixel levels, e.g. 3,6,8,14")

    commands.add_parser("flops", parents=[common], help="FLOPs of the configured model")
    return parser


def setup_logging(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def load_config(args):
    config = Config(args.config)
    if args.desk_scale:
        config.apply_scale("desk")
    elif args.paper_scale:
        config.apply_scale("paper")
    return config


def cmd_gen_dataset(args, config):
    if args.seed is not None:
        config.set("Dataset", "seed", args.seed)
    out_dir = args.out or "data"
    cfg = config.dataset_config()
    workers = resolve_workers(config["Runtime"]["workers"])
    UIDisplay.show_info(f"📡 Synthesizing {cfg.total} samples into {out_dir} ({workers} worker(s))")
    dataset = harness.gen_dataset(cfg, out_dir, workers)
    UIDisplay.show_table(ReportTableBuilder.dataset_table(dataset))
    UIDisplay.show_success(f"Dataset written to {out_dir}")
    return EXIT_OK


def _train_metadata(strategy, config, args, result):
    metadata = {
        "strategy": strategy,
        "eval_mode": "ensemble" if strategy == "masked" else "plain",
        "dataset": os.path.abspath(args.dataset),
        "model_seed": config["Model"]["seed"],
        "train": asdict(config.train_config()),
        "losses": result.losses,
        "accuracies": result.accuracies,
    }
    if strategy == "masked":
        mc = config.mask_ensemble_config()
        metadata["mask"] = {"branches": mc.branches, "strategy": asdict(mc.strategy),
                            "noise_std": mc.noise_std, "seed": mc.seed}
    elif strategy == "consistent":
        cc = config.consistency_config()
        metadata["consistency"] = {"beta_features": cc.beta_features, "beta_probs": cc.beta_probs,
                                   "strategy": asdict(cc.strategy), "noise_std": cc.noise_std,
                                   "ce_on_both": cc.ce_on_both}
    return metadata


def cmd_train(args, config):
    if args.seed is not None:
        config.set("Training", "seed", args.seed)
        config.set("Model", "seed", args.seed)
    out_dir = args.out or os.path.join("runs", args.strategy)
    dataset = harness.load_dataset(args.dataset).split("train")
    model = DiffTransformer(config.model_config(), seed=config["Model"]["seed"])
    tc = config.train_config()
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train.log")
    open(log_path, "w", encoding="utf-8").close()
    UIDisplay.show_info(f"🏋️  Training {args.strategy} on {len(dataset)} samples for {tc.epochs} epochs")
    result = train(args.strategy, model, dataset, tc, config.mask_ensemble_config(),
                   config.consistency_config(), ProgressLog(log_path))
    harness.save_checkpoint(model, out_dir, _train_metadata(args.strategy, config, args, result))
    ChartDisplay.draw_curve(result.losses, "Training loss")
    UIDisplay.show_success(f"Checkpoint and log written to {out_dir}")
    return EXIT_OK


def _load_for_eval(args, config):
    model, header = harness.load_checkpoint(args.checkpoint)
    dataset = harness.load_dataset(args.dataset).split("test")
    classifier = harness.classifier_for(model, header, use_ensemble=not args.no_mask_eval, seed=args.seed)
    workers = resolve_workers(config["Runtime"]["workers"])
    logger.info("evaluating %d test samples through the %s path", len(dataset), classifier.mode)
    return classifier, dataset, workers, args.out or args.checkpoint


def cmd_eval(args, config):
    classifier, dataset, workers, out_dir = _load_for_eval(args, config)
    report = harness.evaluate(classifier, dataset, config["Attack"]["batch_size"], workers)
    UIDisplay.show_table(ReportTableBuilder.eval_table(report))
    UIDisplay.show_table(ReportTableBuilder.confusion_table(report))
    paths = harness.write_eval_report(report, out_dir)
    UIDisplay.show_success(f"Reports written: {', '.join(paths)}")
    return EXIT_OK


def cmd_attack_eval(args, config):
    eps_list = parse_eps_list(args.eps) if args.eps else config.attack_epsilons()
    classifier, dataset, workers, out_dir = _load_for_eval(args, config)
    report = harness.eval_adversarial(classifier, dataset, eps_list, config["Attack"]["batch_size"], workers)
    UIDisplay.show_table(ReportTableBuilder.attack_table(report))
    paths = harness.write_attack_report(report, out_dir)
    UIDisplay.show_success(f"Reports written: {', '.join(paths)}")
    return EXIT_OK


def cmd_flops(args, config):
    row = harness.flops_report(config.model_config(), config.flops_band())
    UIDisplay.show_table(ReportTableBuilder.flops_table(row))
    if not row["in_band"]:
        message = f"{row['flops']:,} FLOPs lie outside [{row['band_low']:.3g}, {row['band_high']:.3g}]."
        if row["weight_macs"] > row["band_high"]:
            message += (" Counting a multiply-accumulate as 2 FLOPs, softmax and layer norm included, the band "
                        f"is out of reach: the weight layers alone take {row['weight_macs']:,} MACs.")
        UIDisplay.show_warning(message + " Set [Flops] band_low and band_high to check another band.")
        return EXIT_OUT_OF_BAND
    return EXIT_OK


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "attack-eval": cmd_attack_eval,
    "flops": cmd_flops,
}


def main(argv=None):
    """
    Run one command.

    Returns:
        Exit code: 0 success, 1 FLOPs out of band, 2 usage or validation error
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    setup_logging(args.verbose)
    UIDisplay.show_header()
    try:
        config = load_config(args)
        return COMMANDS[args.command](args, config)
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError, ValueError,
            TrainingDivergedError, AutogradError) as e:
        UIDisplay.show_error(str(e))
        return EXIT_USAGE
    except KeyboardInterrupt:
        UIDisplay.show_warning("Interrupted.")
        return 130


if __name__ == "__main__":
    sys.exit(main())
