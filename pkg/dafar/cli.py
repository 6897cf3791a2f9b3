#!/usr/bin/env python3
# dafar/cli.py
# CLI entrypoint for the feedback-autoencoder defense experiments.
#
# Commands:
#   train     - Jointly train victim + decoder, then the detector (optionally baselines)
#   calibrate - Compute the rejection threshold α on clean training samples
#   attack    - Generate and save an adversarial set
#   evaluate  - Run one experiment kind, write its curve CSV (--check: acceptance gates)
#   report    - Render plots for a run directory
#   verify    - Run the property suite on toy models

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional

import torch
from dotenv import load_dotenv

from dafar.artifacts import (
    RunManifest,
    create_run_directory,
    file_sha256,
    load_calibration,
    read_manifest,
    save_adversarial_set,
    save_calibration,
    write_curve_csv,
    write_detector_log,
    write_extras,
    write_loss_log,
    write_manifest,
    write_outcomes_csv,
)
from dafar.attacks import run_attack
from dafar.baselines import (
    BaselineKind,
    BinaryClassifierDetector,
    DenoisingAutoencoder,
    load_baseline,
    save_baseline,
    train_binary_classifier,
    train_denoising_ae,
)
from dafar.config import ATTACK_METHODS, DATASETS, DafarConfig, load_config, resolve_config_path
from dafar.data import ImageBatch, batch_hash, load_dataset
from dafar.detection import ThresholdCalibration, calibrate_model
from dafar.errors import AcceptanceFailure, ConfigError
from dafar.harness import EXPERIMENT_KINDS, ExperimentContext, check_gates, run_experiment
from dafar.models import DefendedModel, build_model, load_checkpoint, parameter_hash, preset, save_checkpoint
from dafar.pipeline import PipelineConfig, defend_batch
from dafar.report import render_report
from dafar.training import collect_errors, load_training_state, train_detector, train_joint
from dafar.verify import run_verify


logger = logging.getLogger("dafar")

load_dotenv()


# ----------------------------
# Configuration helpers
# ----------------------------

def get_config(args: argparse.Namespace) -> DafarConfig:
    """Load the dataset's config and apply command-line overrides."""
    path = resolve_config_path(args.dataset, Path(args.config) if args.config else None)
    cfg = load_config(path)
    if cfg.dataset != args.dataset:
        raise ConfigError(f"{path} is a {cfg.dataset!r} config, but --dataset is {args.dataset!r}")

    if args.seed is not None:
        cfg = replace(
            cfg,
            seed=args.seed,
            train=replace(cfg.train, seed=args.seed),
            detector_train=replace(cfg.detector_train, seed=args.seed),
            baselines=replace(cfg.baselines, train=replace(cfg.baselines.train, seed=args.seed)),
        )
    if args.out is not None:
        cfg = replace(cfg, out_dir=Path(args.out))
    if args.data_root is not None:
        cfg = replace(cfg, data_root=Path(args.data_root))
    if args.scorer is not None:
        cfg = replace(cfg, scorer=args.scorer.replace("-", "_"))
    if args.threshold_mode is not None:
        cfg = replace(cfg, threshold=replace(cfg.threshold, mode=args.threshold_mode.replace("-", "_")))
    return cfg


def get_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def checkpoint_path(cfg: DafarConfig) -> Path:
    return cfg.checkpoint_dir / f"{cfg.dataset}.pt"


def calibration_path(cfg: DafarConfig, scorer: str) -> Path:
    return cfg.checkpoint_dir / f"{cfg.dataset}_calibration_{scorer}.json"


def baseline_path(cfg: DafarConfig, kind: str) -> Path:
    return cfg.checkpoint_dir / f"{cfg.dataset}_{kind}.pt"


def load_model(cfg: DafarConfig, device: torch.device) -> DefendedModel:
    path = checkpoint_path(cfg)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}. Run `train` first.")
    model, _ = load_checkpoint(path)
    return model.to(device).eval()


def load_calibrations(cfg: DafarConfig, model: DefendedModel) -> Dict[str, ThresholdCalibration]:
    """Every calibration record on disk that was computed with the configured threshold mode."""
    found: Dict[str, ThresholdCalibration] = {}
    for scorer in ("detector", "plain_l2"):
        path = calibration_path(cfg, scorer)
        if path.is_file():
            cal = load_calibration(path)
            if cal.mode == cfg.threshold.mode:
                found[scorer] = cal
            else:
                logger.warning("ignoring %s: calibrated in %s mode, config asks for %s",
                               path, cal.mode, cfg.threshold.mode)
    return found


def new_manifest(command: str, cfg: DafarConfig, run_dir: Path) -> RunManifest:
    return RunManifest(run_id=run_dir.name, command=command, dataset=cfg.dataset, seed=cfg.seed,
                       config=cfg.snapshot())


def progress_enabled() -> bool:
    return sys.stderr.isatty()


# ----------------------------
# Train command
# ----------------------------

def cmd_train(args: argparse.Namespace) -> None:
    cfg = get_config(args)
    device = get_device(args.device)
    train_cfg = replace(cfg.train, epochs=args.epochs) if args.epochs is not None else cfg.train

    run_dir = create_run_directory(cfg.out_dir)
    manifest = new_manifest("train", cfg, run_dir)
    print(f"Results will be written to: {run_dir}")

    started = time.perf_counter()
    train = load_dataset(cfg.dataset, "train", cfg.data_root)
    test = load_dataset(cfg.dataset, "test", cfg.data_root)
    manifest.dataset_hashes = {"train": batch_hash(train), "test": batch_hash(test)}
    manifest.timings["load_data_s"] = time.perf_counter() - started
    print(f"✓ Loaded {cfg.dataset}: {len(train)} train / {len(test)} test samples")
    train, test = train.to(device), test.to(device)

    ckpt = checkpoint_path(cfg)
    if args.resume and ckpt.is_file():
        model, start_epoch, optimizer_state, log = load_training_state(ckpt)
        model = model.to(device)
        print(f"Resuming from {ckpt} after epoch {start_epoch}")
    else:
        model = build_model(preset(cfg.dataset), cfg.dataset, seed=cfg.seed).to(device)
        start_epoch, optimizer_state, log = 0, None, []

    started = time.perf_counter()
    joint = train_joint(model, train, train_cfg, eval_batch=test, checkpoint_path=ckpt,
                        start_epoch=start_epoch, optimizer_state=optimizer_state, log=log,
                        progress=progress_enabled())
    manifest.timings["train_joint_s"] = time.perf_counter() - started
    manifest.add_output(run_dir, write_loss_log(run_dir / "loss_log.csv", joint.log))
    if joint.log:
        last = joint.log[-1]
        print(f"✓ Joint training done: epoch {last.epoch}, clean accuracy {last.clean_accuracy:.4f}")

    started = time.perf_counter()
    assert model.detector is not None
    errors = collect_errors(model, train, cfg.experiments.batch_size)
    det = train_detector(model.detector, errors, cfg.detector_train, progress=progress_enabled())
    manifest.timings["train_detector_s"] = time.perf_counter() - started
    manifest.add_output(run_dir, write_detector_log(run_dir / "detector_log.csv", det.log))
    print(f"✓ Detector trained on {len(errors)} clean reconstruction errors")

    model_hash = save_checkpoint(model, ckpt, extra={
        "training": {
            "epoch": joint.log[-1].epoch if joint.log else start_epoch,
            "optimizer": joint.optimizer_state,
            "log": [asdict(e) for e in joint.log],
        },
        "detector_log": [asdict(e) for e in det.log],
    })
    manifest.checkpoint_hashes[str(ckpt)] = model_hash
    manifest.extras["checkpoint"] = str(ckpt)
    print(f"✓ Checkpoint written to {ckpt} ({model_hash[:12]})")

    if args.baselines:
        manifest.checkpoint_hashes.update(train_baselines(cfg, model, train, device))

    write_manifest(run_dir, manifest)
    print(f"✓ Results written to {run_dir}")


def train_baselines(cfg: DafarConfig, model: DefendedModel, train: ImageBatch,
                    device: torch.device) -> Dict[str, str]:
    hashes: Dict[str, str] = {}
    spec = model.spec
    bl = cfg.baselines

    denoiser = train_denoising_ae(spec, train, bl.denoising_sigma, bl.train, progress=progress_enabled())
    path = baseline_path(cfg, "denoising_ae")
    hashes[str(path)] = save_baseline(denoiser.model, BaselineKind("denoising_ae", {"sigma": bl.denoising_sigma}),
                                      path)
    print(f"✓ Denoising autoencoder (σ={bl.denoising_sigma}) written to {path}")

    acfg = cfg.attack(bl.classifier_attack)
    clean = train.take(bl.classifier_samples)
    adv = run_attack(model, clean, acfg, batch_size=cfg.experiments.batch_size, progress=progress_enabled())
    clf = train_binary_classifier(spec, clean, adv, bl.train, progress=progress_enabled())
    path = baseline_path(cfg, "binary_classifier")
    hashes[str(path)] = save_baseline(clf.model, BaselineKind("binary_classifier", {}, acfg), path)
    print(f"✓ Binary classifier ({acfg.method}) written to {path}")
    return hashes


# ----------------------------
# Calibrate command
# ----------------------------

def cmd_calibrate(args: argparse.Namespace) -> None:
    cfg = get_config(args)
    device = get_device(args.device)
    model = load_model(cfg, device)
    samples = args.samples or cfg.threshold.samples

    run_dir = create_run_directory(cfg.out_dir)
    manifest = new_manifest("calibrate", cfg, run_dir)
    train = load_dataset(cfg.dataset, "train", cfg.data_root).take(samples)
    manifest.dataset_hashes["train_calibration"] = batch_hash(train)
    manifest.checkpoint_hashes[str(checkpoint_path(cfg))] = parameter_hash(model)
    train = train.to(device)

    scorers = ["detector", "plain_l2"] if model.has_detector else ["plain_l2"]
    records = {}
    for scorer in scorers:
        cal = calibrate_model(model, train, cfg.threshold.z, cfg.threshold.mode, scorer,
                              cfg.experiments.batch_size)
        save_calibration(calibration_path(cfg, scorer), cal)
        manifest.add_output(run_dir, save_calibration(run_dir / f"calibration_{scorer}.json", cal))
        records[scorer] = cal.to_dict()
        print(f"✓ {scorer}: x̄={cal.mean:.4f} σ={cal.std:.4f} n={cal.n} z={cal.z:g} "
              f"mode={cal.mode} α={cal.alpha:.4f}")

    manifest.calibration = records
    write_manifest(run_dir, manifest)
    print(f"✓ Results written to {run_dir}")


# ----------------------------
# Attack command
# ----------------------------

def cmd_attack(args: argparse.Namespace) -> None:
    cfg = get_config(args)
    device = get_device(args.device)
    model = load_model(cfg, device)
    acfg = cfg.attack(args.method)
    if args.epsilon is not None:
        acfg = acfg.with_intensity(args.epsilon)

    run_dir = create_run_directory(cfg.out_dir)
    manifest = new_manifest("attack", cfg, run_dir)
    test = load_dataset(cfg.dataset, "test", cfg.data_root).take(args.samples or cfg.experiments.samples)
    manifest.dataset_hashes["test_subset"] = batch_hash(test)
    manifest.checkpoint_hashes[str(checkpoint_path(cfg))] = parameter_hash(model)
    manifest.extras["checkpoint"] = str(checkpoint_path(cfg))
    manifest.extras["attack"] = acfg.to_dict()

    started = time.perf_counter()
    adv = run_attack(model, test.to(device), acfg, batch_size=cfg.experiments.batch_size,
                     progress=progress_enabled())
    manifest.timings["attack_s"] = time.perf_counter() - started
    path = save_adversarial_set(run_dir / f"adversarial_{acfg.method}.npz", adv)
    manifest.add_output(run_dir, path)
    manifest.extras["adversarial_set"] = path.name
    print(f"✓ {acfg.method} ({acfg.intensity:g}): success rate {adv.success_rate:.4f} over {len(adv)} samples")

    calibrations = load_calibrations(cfg, model)
    if cfg.scorer in calibrations:
        pipeline = PipelineConfig("hybrid", cfg.scorer, calibrations[cfg.scorer])
        outcomes = defend_batch(model, adv.adversarials, pipeline, batch_size=cfg.experiments.batch_size)
        manifest.add_output(run_dir, write_outcomes_csv(run_dir / "outcomes_hybrid.csv", outcomes, "hybrid"))
        rejected = sum(o.rejected for o in outcomes)
        print(f"✓ Hybrid defense rejected {rejected}/{len(outcomes)} adversarial samples")

    write_manifest(run_dir, manifest)
    print(f"✓ Results written to {run_dir}")


# ----------------------------
# Evaluate command
# ----------------------------

def load_context(cfg: DafarConfig, device: torch.device, samples: Optional[int]) -> ExperimentContext:
    model = load_model(cfg, device)
    limit = max(samples or cfg.experiments.samples, cfg.experiments.interference_pairs)
    test = load_dataset(cfg.dataset, "test", cfg.data_root).take(limit).to(device)
    denoiser: Optional[DenoisingAutoencoder] = None
    classifier: Optional[BinaryClassifierDetector] = None
    for kind in ("denoising_ae", "binary_classifier"):
        path = baseline_path(cfg, kind)
        if path.is_file():
            module, _ = load_baseline(path, model.spec)
            module = module.to(device)
            if isinstance(module, DenoisingAutoencoder):
                denoiser = module
            elif isinstance(module, BinaryClassifierDetector):
                classifier = module
    return ExperimentContext(cfg=cfg, model=model, test=test, calibrations=load_calibrations(cfg, model),
                             denoiser=denoiser, binary_classifier=classifier, progress=progress_enabled())


def cmd_evaluate(args: argparse.Namespace) -> None:
    cfg = get_config(args)
    device = get_device(args.device)
    ctx = load_context(cfg, device, args.samples)

    run_dir = create_run_directory(cfg.out_dir)
    manifest = new_manifest(f"evaluate {args.kind}", cfg, run_dir)
    manifest.dataset_hashes["test_subset"] = batch_hash(ctx.test)
    manifest.checkpoint_hashes[str(checkpoint_path(cfg))] = parameter_hash(ctx.model)
    manifest.extras["checkpoint"] = str(checkpoint_path(cfg))
    manifest.calibration = {s: c.to_dict() for s, c in ctx.calibrations.items()}
    print(f"Results will be written to: {run_dir}")

    started = time.perf_counter()
    result = run_experiment(ctx, args.kind, method=args.method, samples=args.samples)
    manifest.timings["experiment_s"] = time.perf_counter() - started
    manifest.add_output(run_dir, write_curve_csv(run_dir, result))
    manifest.add_output(run_dir, write_extras(run_dir, result))
    print(f"✓ {result.kind}: {len(result.axis)} points × {len(result.series)} series")

    failed: List[str] = []
    if args.check:
        gates = check_gates(result)
        manifest.extras["gates"] = [asdict(g) for g in gates]
        for gate in gates:
            print(f"  {'✓' if gate.passed else '✗'} {gate.name}: {gate.detail}")
            if not gate.passed:
                failed.append(gate.name)

    write_manifest(run_dir, manifest)
    print(f"✓ Results written to {run_dir}")
    if failed:
        raise AcceptanceFailure(f"{len(failed)} acceptance gate(s) failed: {', '.join(failed)}")


# ----------------------------
# Report / verify commands
# ----------------------------

def cmd_report(args: argparse.Namespace) -> None:
    run_dir = Path(args.run_dir)
    manifest = read_manifest(run_dir)
    model: Optional[DefendedModel] = None
    ckpt = manifest.extras.get("checkpoint")
    if ckpt and Path(ckpt).is_file():
        model, _ = load_checkpoint(Path(ckpt))
        expected = manifest.checkpoint_hashes.get(ckpt)
        if expected and parameter_hash(model) != expected:
            logger.warning("checkpoint %s changed since this run; skipping the gallery", ckpt)
            model = None
    written = render_report(run_dir, model)
    for path in written:
        print(f"✓ {path} ({file_sha256(path)[:12]})")
    print(f"✓ {len(written)} plot(s) written to {run_dir / 'plots'}")


def cmd_verify(args: argparse.Namespace) -> None:
    results = run_verify(seed=args.seed or 0)
    total = sum(r.seconds for r in results)
    for r in results:
        print(f"  {'✓' if r.passed else '✗'} {r.name} ({r.seconds:.2f}s): {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f}s")
    if failed:
        raise AcceptanceFailure(f"property checks failed: {', '.join(failed)}")


# ----------------------------
# CLI setup
# ----------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Feedback-autoencoder adversarial defense: training, attacks and evaluation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--dataset", choices=DATASETS, default="mnist", help="Dataset (default: mnist)")
    parser.add_argument("--config", help="Config file (default: $DAFAR_CONFIG or config/<dataset>.yaml)")
    parser.add_argument("--seed", type=int, help="Random seed (overrides config)")
    parser.add_argument("--out", help="Base directory for run directories (overrides config)")
    parser.add_argument("--scorer", choices=["detector", "plain-l2"], help="Anomaly scorer (overrides config)")
    parser.add_argument("--threshold-mode", choices=["population", "paper-literal"],
                        help="Threshold formula (overrides config)")
    parser.add_argument("--data-root", help="Dataset directory (overrides config and $DAFAR_DATA_ROOT)")
    parser.add_argument("--device", default="auto", help="torch device, or auto (default)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    subparsers = parser.add_subparsers(dest="command", help="Command to execute")
    subparsers.required = True

    train_parser = subparsers.add_parser("train", help="Train victim + decoder, then the detector")
    train_parser.add_argument("--epochs", type=int, help="Joint-training epochs (overrides config)")
    train_parser.add_argument("--resume", action="store_true", help="Continue from the epoch checkpoint")
    train_parser.add_argument("--baselines", action="store_true",
                              help="Also train the denoising autoencoder and binary classifier")
    train_parser.set_defaults(func=cmd_train)

    calibrate_parser = subparsers.add_parser("calibrate", help="Calibrate the rejection threshold")
    calibrate_parser.add_argument("--samples", type=int, help="Clean training samples to score (overrides config)")
    calibrate_parser.set_defaults(func=cmd_calibrate)

    attack_parser = subparsers.add_parser("attack", help="Generate an adversarial set")
    attack_parser.add_argument("--method", required=True, choices=ATTACK_METHODS)
    attack_parser.add_argument("--epsilon", type=float,
                               help="Intensity on the [0,1] scale (γ for jsma, c for cw_l2)")
    attack_parser.add_argument("--samples", type=int, help="Test samples to attack")
    attack_parser.set_defaults(func=cmd_attack)

    evaluate_parser = subparsers.add_parser("evaluate", help="Run one experiment")
    evaluate_parser.add_argument("kind", choices=EXPERIMENT_KINDS)
    evaluate_parser.add_argument("--method", choices=ATTACK_METHODS, help="Attack method (default: fgsm)")
    evaluate_parser.add_argument("--samples", type=int, help="Test samples (overrides config)")
    evaluate_parser.add_argument("--check", action="store_true", help="Evaluate acceptance gates; exit 1 on failure")
    evaluate_parser.set_defaults(func=cmd_evaluate)

    report_parser = subparsers.add_parser("report", help="Render plots for a run directory")
    report_parser.add_argument("run_dir")
    report_parser.set_defaults(func=cmd_report)

    verify_parser = subparsers.add_parser("verify", help="Run the property suite on toy models")
    verify_parser.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> None:
    """Main CLI entrypoint."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except KeyboardInterrupt:
        print("\nInterrupted by user")
        sys.exit(1)
    except ConfigError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        sys.exit(2)
    except AcceptanceFailure as e:
        print(f"FAILED: {e}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        print(f"ERROR: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
