"""
attentivo command-line interface.

    python app.py synth-gen --config scene.json --out data/synth
    python app.py train --dataset data/synth --config train.json --out model.ckpt
    python app.py infer-mask --dataset data/synth --ckpt model.ckpt --rho 0.51 --out masks/
    python app.py vo-run --dataset data/synth --masks masks/ --detector fast --seed 0 --report run.json
    python app.py evaluate --dataset data/synth --compare a.json b.json --out table.csv

Exit codes: 0 success, 2 validation or data error, 3 degenerate run or diverged training.
"""

import argparse
import json
import logging
import os
import sys

import config
from data import SyntheticSceneConfig, load_dataset, load_manifest, synth_generate
from errors import AttentivoError, InvalidArgumentError
from harness import (
    TrajectoryReport,
    dataset_windows,
    emit_report,
    evaluate,
    plot_loss,
    read_mask_dir,
    run_vo,
    write_mask_dir,
)
from learn import TrainConfig, infer_masks, load_checkpoint, save_checkpoint, train, write_loss_history
from sfm import RansacConfig
from vision import make_detector

logger = logging.getLogger("attentivo")


def _manifest_path(dataset):
    return os.path.join(dataset, "manifest.json") if os.path.isdir(dataset) else dataset


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise InvalidArgumentError(f"Config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise InvalidArgumentError(f"{path}:{e.lineno}: malformed JSON: {e.msg}") from e


def cmd_synth_gen(args):
    settings = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        settings["rng_seed"] = args.seed
    manifest = synth_generate(SyntheticSceneConfig.from_dict(settings), args.out)
    print(manifest)
    return 0


def cmd_train(args):
    settings = {"window_size": config.default_window_size(), "mask_rho": config.default_mask_rho()}
    settings["rng_seed"] = config.default_seed()
    if args.config:
        settings.update(_read_json(args.config))
    if args.seed is not None:
        settings["rng_seed"] = args.seed
    if args.epochs is not None:
        settings["epochs"] = args.epochs
    train_config = TrainConfig.from_dict(settings)
    dataset = load_dataset(_manifest_path(args.dataset))
    windows = dataset_windows(dataset, train_config.window_size)
    logger.info("Training on %d windows of %d frame pairs", len(windows), train_config.window_size)
    result = train(train_config, windows)
    save_checkpoint(args.out, result.model)
    loss_path = args.loss_csv or os.path.splitext(args.out)[0] + "_loss.csv"
    write_loss_history(loss_path, result.history)
    plot_path = os.path.splitext(args.out)[0] + "_loss.svg"
    plot_loss(plot_path, result.history)
    logger.info("Loss history written to %s and %s", loss_path, plot_path)
    return 0


def cmd_infer_mask(args):
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(_manifest_path(args.dataset))
    rho = config.default_mask_rho() if args.rho is None else args.rho
    masks, scores = infer_masks(model, dataset.images, rho)
    write_mask_dir(args.out, masks, scores if args.heatmaps else None)
    return 0


def cmd_vo_run(args):
    dataset = load_dataset(_manifest_path(args.dataset))
    detector = make_detector(args.detector, threshold=args.fast_threshold, max_keypoints=args.max_keypoints)
    masks = read_mask_dir(args.masks) if args.masks else None
    ransac = RansacConfig.from_dict(_read_json(args.ransac)) if args.ransac else RansacConfig()
    seed = config.default_seed() if args.seed is None else args.seed
    estimate, report = run_vo(dataset, detector, masks, ransac, seed=seed, pixel_threshold=args.pixel_threshold)
    emit_report(report, args.report, args.format)
    if args.plot:
        emit_report(report, args.plot, "svg", estimate=estimate, groundtruth=dataset.gt_poses)
    return 0


def cmd_evaluate(args):
    manifest = load_manifest(_manifest_path(args.dataset))
    a, b = (TrajectoryReport.load(p) for p in args.compare)
    table = evaluate(manifest, a, b, args.out)
    print(table.to_string(index=False))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="attentivo", description="IMU-supervised attention masks for visual odometry")
    parser.add_argument("--log-level", default=None, help="overrides ATTENTIVO_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="SyntheticSceneConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train the attention/pose networks against IMU proxies")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss-csv", help="defaults to <out>_loss.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer-mask", help="write per-frame attention masks")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rho", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--heatmaps", action="store_true", help="also write attention heat maps")
    p.set_defaults(func=cmd_infer_mask)

    p = sub.add_parser("vo-run", help="run monocular VO and write a report")
    p.add_argument("--dataset", required=True)
    p.add_argument("--masks")
    p.add_argument("--detector", default="fast", help="fast | external:<dir>")
    p.add_argument("--seed", type=int)
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=("json", "csv", "svg"))
    p.add_argument("--plot", help="also write a trajectory SVG")
    p.add_argument("--ransac", help="RansacConfig JSON")
    p.add_argument("--pixel-threshold", type=float)
    p.add_argument("--fast-threshold", type=int, default=20)
    p.add_argument("--max-keypoints", type=int, default=500)
    p.set_defaults(func=cmd_vo_run)

    p = sub.add_parser("evaluate", help="compare two VO reports")
    p.add_argument("--dataset", required=True)
    p.add_argument("--compare", nargs=2, required=True, metavar=("REPORT_A", "REPORT_B"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    config.configure_logging(args.log_level)
    try:
        return args.func(args)
    except AttentivoError as e:
        logger.error("%s failed: %s", args.command, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
