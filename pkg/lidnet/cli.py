"""
lidnet.cli — lidnet entry point.

Commands: simulate | train | eval | report | ablate
Exit codes: 0 ok, 2 configuration, 3 I/O, 4 training divergence,
5 missing checkpoint, 6 missing report artifacts.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import torch

from lidnet.errors import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_IO,
    EXIT_MISSING_ARTIFACTS,
    EXIT_MISSING_CHECKPOINT,
    EXIT_OK,
    ConfigurationError,
    ContractError,
    DataError,
    DatasetIOError,
    MissingArtifactError,
    SchedulingError,
    TrainingError,
)
from lidnet.metrics.evaluate import MetricReport, evaluate_with_controls
from lidnet.models.config import PROFILES, ExperimentConfig, config_from_dict, load_config
from lidnet.networks.checkpoint import load_checkpoint
from lidnet.networks.denoiser import DenoiserParams, build_denoiser, denoise
from lidnet.networks.detector import Detector, infer_detections, select_top_k
from lidnet.phantoms.dataset import MANIFEST_NAME, DatasetHandle, build_dataset, load_dataset, save_dataset
from lidnet.reports.base import create_writer, read_reports, write_reports
from lidnet.reports.figures import save_ap_curve, save_detection_overlay, save_proposal_overlay
from lidnet.runs import RunLock, atomic_write_json, read_json, resolve_dir
from lidnet.training.logs import read_ap_curve
from lidnet.training.trainer import CHECKPOINTS_DIR, resume_collaborative, train, train_eval_detector

logger = logging.getLogger(__name__)

RUN_CONFIG = "config.json"
METRICS_JSON = "metrics.json"
DETECTIONS_JSONL = "detections.jsonl"
FINAL_CHECKPOINT = "final"
EVAL_DETECTOR_CHECKPOINT = "eval-detector"
REPORT_SAMPLES = 4

ABLATION_ARMS: Dict[str, Dict[str, Any]] = {
    "lidnet-cnn": {"variant": "cnn", "lambda1": 5.0, "lambda2": 5.0},
    "recon-only": {"variant": "cnn", "lambda1": 0.0, "lambda2": 0.0},
    "lidnet-gan": {"variant": "gan", "lambda1": 5.0, "lambda2": 5.0},
    "simultaneous": {"variant": "cnn", "strategy": "simultaneous"},
    "global-perceptual": {"variant": "cnn", "perceptual": "global"},
}


# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(verbose: bool = False) -> None:
    root = logging.getLogger()
    level = logging.INFO if verbose else logging.WARNING
    root.setLevel(logging.INFO)
    for handler in root.handlers:
        if getattr(handler, "_lidnet_handler", False):
            handler.setLevel(level)
            return
    handler = logging.StreamHandler()
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._lidnet_handler = True  # type: ignore[attr-defined]
    root.addHandler(handler)


def attach_run_log(run_dir: str) -> logging.Handler:
    """Mirror INFO records of this command into ``<run_dir>/run.log``."""
    os.makedirs(run_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(run_dir, "run.log"), encoding="utf-8")
    handler.setLevel(logging.INFO)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _override(section: Any, **values: Any) -> Any:
    changes = {k: v for k, v in values.items() if v is not None}
    return dataclasses.replace(section, **changes) if changes else section


def _apply_train_flags(args: argparse.Namespace, config: ExperimentConfig) -> ExperimentConfig:
    train_cfg = _override(
        config.train,
        seed=getattr(args, "seed", None),
        strategy=getattr(args, "strategy", None),
        variant=getattr(args, "variant", None),
        lambda1=getattr(args, "lambda1", None),
        lambda2=getattr(args, "lambda2", None),
        perceptual=getattr(args, "perceptual", None),
    )
    return dataclasses.replace(config, train=train_cfg)


def _data_dir(args: argparse.Namespace) -> str:
    return resolve_dir(getattr(args, "data", None), "data")


def _load_run_config(run_dir: str, fallback: ExperimentConfig) -> Dict[str, Any]:
    path = os.path.join(run_dir, RUN_CONFIG)
    if not os.path.exists(path):
        return {"config": fallback.to_dict(), "data_dir": None}
    saved = read_json(path)
    if not isinstance(saved, dict) or not isinstance(saved.get("config"), dict):
        raise DatasetIOError("malformed run config", path)
    return saved


def _restore_config(saved: Dict[str, Any]) -> ExperimentConfig:
    config, warnings = config_from_dict(saved["config"], "desk")
    for warning in warnings:
        logger.warning(warning)
    config.validate()
    return config


def load_generator(run_dir: str, config: ExperimentConfig) -> DenoiserParams:
    tc = config.train
    denoiser = build_denoiser(tc.variant, tc.generator_channels, tc.discriminator_channels, tc.gp_weight)
    load_checkpoint(os.path.join(run_dir, CHECKPOINTS_DIR, FINAL_CHECKPOINT), {"generator": denoiser.generator})
    return denoiser


def load_detector(checkpoint_dir: str, config: ExperimentConfig) -> Detector:
    detector = Detector(config.detector)
    load_checkpoint(checkpoint_dir, {"detector": detector})
    return detector


def _eval_detector_dir(args: argparse.Namespace, config: ExperimentConfig) -> str:
    explicit = getattr(args, "eval_detector", None) or config.eval.eval_detector
    if explicit:
        return os.path.abspath(explicit)
    return os.path.join(resolve_dir(None, EVAL_DETECTOR_CHECKPOINT), CHECKPOINTS_DIR, EVAL_DETECTOR_CHECKPOINT)


def _train_run(config: ExperimentConfig, dataset: DatasetHandle, run_dir: str, data_dir: str, force: bool) -> None:
    final_dir = os.path.join(run_dir, CHECKPOINTS_DIR, FINAL_CHECKPOINT)
    if os.path.exists(final_dir) and not force:
        raise DatasetIOError("run already trained (use --force to overwrite)", final_dir)
    atomic_write_json(os.path.join(run_dir, RUN_CONFIG), {
        "config": config.to_dict(),
        "data_dir": data_dir,
        "role": "model",
    })
    train(config, dataset, run_dir)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def handle_simulate(args: argparse.Namespace, config: ExperimentConfig) -> int:
    ds = config.dataset
    phantom, simulation = ds.phantom, ds.simulation
    if args.seed is not None:
        phantom = dataclasses.replace(phantom, rng_seed=args.seed)
        simulation = dataclasses.replace(simulation, rng_seed=args.seed)
    n_train = args.n_train if args.n_train is not None else ds.n_train
    n_test = args.n_test if args.n_test is not None else ds.n_test

    out_dir = resolve_dir(args.out, "data")
    manifest = os.path.join(out_dir, MANIFEST_NAME)
    if os.path.exists(manifest) and not args.force:
        raise DatasetIOError("dataset already exists (use --force to overwrite)", manifest)
    with RunLock(out_dir):
        handler = attach_run_log(out_dir)
        try:
            dataset = build_dataset(phantom, simulation, n_train, n_test, workers=args.workers or ds.workers)
            save_dataset(dataset, out_dir, force=args.force)
        finally:
            detach_run_log(handler)
    print(f"Simulated {len(dataset.train)} train / {len(dataset.test)} test samples "
          f"({dataset.image_size}x{dataset.image_size}, n0={dataset.n0:g}) -> {out_dir}")
    return EXIT_OK


def _resume_run(args: argparse.Namespace, config: ExperimentConfig) -> int:
    if args.role != "model":
        raise ConfigurationError("--resume applies to model runs only")
    run_dir = resolve_dir(args.out, "run")
    config_path = os.path.join(run_dir, RUN_CONFIG)
    if not os.path.exists(config_path):
        raise MissingArtifactError("missing run config", config_path)
    saved = _load_run_config(run_dir, config)
    run_config = _restore_config(saved)
    dataset = load_dataset(args.data or saved.get("data_dir") or _data_dir(args))
    with RunLock(run_dir):
        handler = attach_run_log(run_dir)
        try:
            result = resume_collaborative(run_config, dataset, run_dir, args.resume)
        finally:
            detach_run_log(handler)
    print(f"Resumed {run_dir} from {args.resume}; finished after {len(result.logs.trace)} steps")
    return EXIT_OK


def handle_train(args: argparse.Namespace, config: ExperimentConfig) -> int:
    if args.resume:
        return _resume_run(args, config)
    config = _apply_train_flags(args, config)
    config.validate()
    data_dir = _data_dir(args)
    dataset = load_dataset(data_dir)

    if args.role == "eval-detector":
        run_dir = resolve_dir(args.out, EVAL_DETECTOR_CHECKPOINT)
        target = os.path.join(run_dir, CHECKPOINTS_DIR, EVAL_DETECTOR_CHECKPOINT)
        with RunLock(run_dir):
            if os.path.exists(target) and not args.force:
                raise DatasetIOError("evaluation detector exists (use --force to overwrite)", target)
            handler = attach_run_log(run_dir)
            try:
                atomic_write_json(os.path.join(run_dir, RUN_CONFIG), {
                    "config": config.to_dict(),
                    "data_dir": data_dir,
                    "role": "eval-detector",
                })
                train_eval_detector(config, dataset, run_dir)
            finally:
                detach_run_log(handler)
        print(f"Trained evaluation detector on NDCT ({config.train.t1} steps) -> {target}")
        return EXIT_OK

    run_dir = resolve_dir(args.out, "run")
    with RunLock(run_dir):
        handler = attach_run_log(run_dir)
        try:
            _train_run(config, dataset, run_dir, data_dir, args.force)
        finally:
            detach_run_log(handler)
    tc = config.train
    print(f"Trained {tc.variant}/{tc.strategy} (lambda1={tc.lambda1:g}, lambda2={tc.lambda2:g}) -> {run_dir}")
    return EXIT_OK


def handle_eval(args: argparse.Namespace, config: ExperimentConfig) -> int:
    run_dir = resolve_dir(args.run, "run")
    saved = _load_run_config(run_dir, config)
    run_config = _restore_config(saved)
    data_dir = args.data or saved.get("data_dir") or _data_dir(args)

    denoiser = load_generator(run_dir, run_config)
    eval_detector = load_detector(_eval_detector_dir(args, config), run_config)
    dataset = load_dataset(data_dir)

    out_dir = os.path.abspath(args.out) if args.out else run_dir
    with RunLock(out_dir):
        detections_path = os.path.join(out_dir, DETECTIONS_JSONL)
        reports = evaluate_with_controls(
            denoiser.generator, eval_detector, dataset.test, run_config.eval, detections_path=detections_path
        )
        paths = write_reports(reports, out_dir) + [detections_path]
    for report in reports:
        print(f"{report.name:>14}: AP-50 {report.ap50:.4f}  AP-75 {report.ap75:.4f}  "
              f"PSNR {report.psnr:.2f}  SSIM {report.ssim:.4f}  RMSE {report.rmse:.4f}")
    print(f"Reports -> {', '.join(paths)}")
    return EXIT_OK


def _report_figures(run_dir: str, run_config: ExperimentConfig, dataset: DatasetHandle, figures_dir: str) -> List[str]:
    denoiser = load_generator(run_dir, run_config)
    detector = load_detector(os.path.join(run_dir, CHECKPOINTS_DIR, FINAL_CHECKPOINT), run_config)
    samples = dataset.test[:REPORT_SAMPLES]
    written = []
    with torch.no_grad():
        ldct = torch.from_numpy(np.stack([s.ldct for s in samples]))
        denoised = denoise(denoiser.generator, ldct)
        fmap = detector.extract_features(denoised)
        proposal_sets = detector.rpn_propose(fmap)
        detections = infer_detections(detector, denoised, run_config.eval.score_thresh, run_config.eval.nms_iou)
    for i, sample in enumerate(samples):
        image = denoised[i].numpy()
        top = select_top_k(proposal_sets[i], run_config.train.top_k)
        path = os.path.join(figures_dir, f"proposals_{sample.id}.png")
        save_proposal_overlay(path, image, top.boxes.tolist(), top.scores.tolist())
        written.append(path)
        path = os.path.join(figures_dir, f"detections_{sample.id}.png")
        save_detection_overlay(
            path,
            image,
            [(d.box, d.score) for d in detections[i]],
            [a.corners for a in sample.annotations],
        )
        written.append(path)
    return written


def handle_report(args: argparse.Namespace, config: ExperimentConfig) -> int:
    run_dir = resolve_dir(args.run, "run")
    metrics_path = os.path.join(run_dir, METRICS_JSON)
    reports = read_reports(metrics_path)
    curve = read_ap_curve(run_dir)
    config_path = os.path.join(run_dir, RUN_CONFIG)
    if not os.path.exists(config_path):
        raise MissingArtifactError("missing run config", config_path)
    saved = _load_run_config(run_dir, config)
    run_config = _restore_config(saved)
    data_dir = args.data or saved.get("data_dir") or _data_dir(args)
    dataset = load_dataset(data_dir)

    figures_dir = os.path.join(run_dir, "figures")
    os.makedirs(figures_dir, exist_ok=True)
    with RunLock(run_dir):
        written = _report_figures(run_dir, run_config, dataset, figures_dir)
        curve_path = os.path.join(figures_dir, "ap_curve.png")
        save_ap_curve(curve_path, {run_config.train.strategy: curve})
        table_path = create_writer("markdown").write(reports, os.path.join(run_dir, "table.md"))
    print(f"Wrote {len(written)} overlays, {curve_path} and {table_path}")
    return EXIT_OK


def handle_ablate(args: argparse.Namespace, config: ExperimentConfig) -> int:
    data_dir = _data_dir(args)
    dataset = load_dataset(data_dir)
    out_dir = resolve_dir(args.out, "ablation")
    eval_detector = load_detector(_eval_detector_dir(args, config), config)
    arms = args.arms or list(ABLATION_ARMS)
    unknown = [a for a in arms if a not in ABLATION_ARMS]
    if unknown:
        raise ConfigurationError(f"unknown ablation arms {unknown} (expected {sorted(ABLATION_ARMS)})")

    rows = []
    for arm in arms:
        for seed in args.seeds:
            arm_config = dataclasses.replace(
                config, train=dataclasses.replace(config.train, seed=seed, **ABLATION_ARMS[arm])
            )
            arm_config.validate()
            run_dir = os.path.join(out_dir, arm, f"seed-{seed}")
            with RunLock(run_dir):
                handler = attach_run_log(run_dir)
                try:
                    _train_run(arm_config, dataset, run_dir, data_dir, args.force)
                    denoiser = load_generator(run_dir, arm_config)
                    reports = evaluate_with_controls(
                        denoiser.generator, eval_detector, dataset.test, arm_config.eval, name=arm
                    )
                    write_reports(reports, run_dir)
                finally:
                    detach_run_log(handler)
            row = reports[-1].to_row()
            row["arm"] = arm
            row["seed"] = seed
            rows.append(row)

    frame = pd.DataFrame(rows)
    numeric = [c for c in frame.columns if c not in ("name", "arm", "seed", "PSNR-capped")]
    summary = frame.groupby("arm", sort=False)[numeric].mean().reset_index()
    os.makedirs(out_dir, exist_ok=True)
    frame.to_csv(os.path.join(out_dir, "ablation_runs.csv"), index=False)
    summary.to_csv(os.path.join(out_dir, "ablation.csv"), index=False)
    summary_reports = [
        MetricReport(
            name=str(r["arm"]),
            psnr=float(r["PSNR"]),
            ssim=float(r["SSIM"]),
            rmse=float(r["RMSE"]),
            roi_mad={"correlation": float(r["Correlation"]), "homogeneity": float(r["Homogeneity"]),
                     "energy": float(r["Energy"])},
            ap50=float(r["AP-50"]),
            ap75=float(r["AP-75"]),
            mean_iou=float(r["Mean-IoU"]),
        )
        for _, r in summary.iterrows()
    ]
    create_writer("markdown").write(summary_reports, os.path.join(out_dir, "ablation.md"))
    print(f"Ablation over {len(arms)} arms x {len(args.seeds)} seeds -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parser
# ---------------------------------------------------------------------------

def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--strategy", choices=["collaborative", "simultaneous"], help="Training strategy.")
    parser.add_argument("--variant", choices=["cnn", "gan"], help="Denoiser variant.")
    parser.add_argument("--lambda1", type=float, help="ROI perceptual weight.")
    parser.add_argument("--lambda2", type=float, help="Detection weight.")
    parser.add_argument("--perceptual", choices=["roi", "global"], help="Perceptual loss flavour.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidnet",
        description="lidnet — detection-aware low-dose CT denoising on synthetic phantoms",
    )
    parser.add_argument("--config", help="Path to a JSON/YAML experiment config.")
    parser.add_argument("--profile", choices=sorted(PROFILES), default="desk", help="Default value profile.")
    parser.add_argument("--seed", type=int, help="Override every seed in the config.")
    parser.add_argument("--verbose", "-v", action="store_true", help="Log progress to stderr.")

    sub = parser.add_subparsers(dest="command", required=True)

    # simulate
    simulate = sub.add_parser("simulate", help="Generate a paired LDCT/NDCT phantom dataset.")
    simulate.add_argument("--out", help="Dataset directory (default: $LIDNET_RUN_DIR/data).")
    simulate.add_argument("--n-train", dest="n_train", type=int, help="Training samples.")
    simulate.add_argument("--n-test", dest="n_test", type=int, help="Test samples.")
    simulate.add_argument("--workers", type=int, help="Generation threads.")
    simulate.add_argument("--force", action="store_true", help="Overwrite an existing dataset.")

    # train
    train_cmd = sub.add_parser("train", help="Train the denoiser with the detector, or the evaluation detector.")
    train_cmd.add_argument("--data", help="Dataset directory.")
    train_cmd.add_argument("--out", help="Run directory.")
    train_cmd.add_argument("--role", choices=["model", "eval-detector"], default="model",
                           help="model: denoiser + detector; eval-detector: NDCT-only detector.")
    train_cmd.add_argument("--force", action="store_true", help="Overwrite an existing run.")
    train_cmd.add_argument("--resume", metavar="LABEL",
                           help="Continue the run in --out from a checkpoint (pretrain, roundNN-denoiser, roundNN-detector).")
    _add_train_flags(train_cmd)

    # eval
    eval_cmd = sub.add_parser("eval", help="Evaluate a trained run with the NDCT evaluation detector.")
    eval_cmd.add_argument("--run", help="Run directory.")
    eval_cmd.add_argument("--data", help="Dataset directory (default: the one used for training).")
    eval_cmd.add_argument("--eval-detector", dest="eval_detector", help="Evaluation detector checkpoint.")
    eval_cmd.add_argument("--out", help="Report directory (default: the run directory).")

    # report
    report = sub.add_parser("report", help="Emit overlays, the AP curve and the metrics table.")
    report.add_argument("--run", help="Run directory.")
    report.add_argument("--data", help="Dataset directory (default: the one used for training).")

    # ablate
    ablate = sub.add_parser("ablate", help="Train and evaluate ablation arms over several seeds.")
    ablate.add_argument("--data", help="Dataset directory.")
    ablate.add_argument("--out", help="Ablation directory.")
    ablate.add_argument("--eval-detector", dest="eval_detector", help="Evaluation detector checkpoint.")
    ablate.add_argument("--arms", nargs="+", help=f"Subset of {', '.join(ABLATION_ARMS)}.")
    ablate.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2], help="Seeds per arm.")
    ablate.add_argument("--force", action="store_true", help="Overwrite existing arm runs.")

    return parser


# ---------------------------------------------------------------------------
# Entrypoint
# ---------------------------------------------------------------------------

def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    handlers = {
        "simulate": handle_simulate,
        "train": handle_train,
        "eval": handle_eval,
        "report": handle_report,
        "ablate": handle_ablate,
    }

    handler = handlers.get(args.command)
    if not handler:
        parser.print_help()
        return EXIT_CONFIG

    try:
        config, warnings = load_config(args.config, args.profile)
        for warning in warnings:
            logger.warning(warning)
        if args.config and not os.path.exists(args.config):
            raise ConfigurationError(f"config file not found: {args.config}")
        config.validate()
        return handler(args, config)
    except (ConfigurationError, ContractError) as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        logger.error("%s", exc)
        return EXIT_MISSING_ARTIFACTS if args.command == "report" else EXIT_MISSING_CHECKPOINT
    except (DatasetIOError, DataError) as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except (TrainingError, SchedulingError) as exc:
        logger.error("Training aborted: %s", exc)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
