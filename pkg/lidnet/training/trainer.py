"""
training/trainer.py — Collaborative and simultaneous training loops.

Collaborative: pretrain the detector on NDCT for T1 steps, then for each
round optimise the denoiser for T2 steps with the detector frozen, followed
by T3 detector steps on the frozen denoiser's outputs. Simultaneous: both
parameter sets take a step on every batch, for a matched step budget.
"""
from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import torch
from torch import Tensor, nn

from lidnet.errors import ConfigurationError, DatasetIOError, TrainingError
from lidnet.metrics.detection import average_precision
from lidnet.metrics.evaluate import denoise_images, detections_for, ground_truths_for
from lidnet.models.config import ExperimentConfig
from lidnet.networks.checkpoint import load_checkpoint, save_checkpoint
from lidnet.networks.denoiser import DenoiserParams, build_denoiser, denoise, discriminator_loss
from lidnet.networks.detector import Detector, full_detector_loss
from lidnet.networks.optim import ParameterUpdater
from lidnet.objectives import ObjectiveWeights, denoiser_objective
from lidnet.phantoms.base import CtSample
from lidnet.phantoms.dataset import DatasetHandle
from lidnet.training.batches import Batch, BatchSampler
from lidnet.training.logs import TrainLogs, read_ap_curve, read_loss_log, write_logs
from lidnet.training.schedule import FrozenGuard, Phase, TrainSchedule, freeze, unfreeze

logger = logging.getLogger(__name__)

CHECKPOINTS_DIR = "checkpoints"
DetectorInputHook = Callable[[int, Tensor, Tensor], None]


@dataclass
class TrainState:
    cfg: ExperimentConfig
    denoiser: DenoiserParams
    detector: Detector
    generator_updater: ParameterUpdater
    detector_updater: ParameterUpdater
    discriminator_updater: Optional[ParameterUpdater]
    sampler: BatchSampler
    eval_samples: List[CtSample]
    schedule: TrainSchedule
    logs: TrainLogs
    gp_generator: torch.Generator
    run_dir: Optional[str] = None
    on_detector_input: Optional[DetectorInputHook] = None
    step: int = 0
    best_ap: float = -math.inf
    evals_since_best: int = 0

    @property
    def weights(self) -> ObjectiveWeights:
        return ObjectiveWeights(self.cfg.train.lambda1, self.cfg.train.lambda2)

    def theta(self) -> List[nn.Module]:
        modules: List[nn.Module] = [self.denoiser.generator]
        if self.denoiser.discriminator is not None:
            modules.append(self.denoiser.discriminator)
        return modules

    def modules(self) -> Dict[str, nn.Module]:
        named: Dict[str, nn.Module] = {"generator": self.denoiser.generator, "detector": self.detector}
        if self.denoiser.discriminator is not None:
            named["discriminator"] = self.denoiser.discriminator
        return named

    def updaters(self) -> Dict[str, ParameterUpdater]:
        named = {"generator": self.generator_updater, "detector": self.detector_updater}
        if self.discriminator_updater is not None:
            named["discriminator"] = self.discriminator_updater
        return named


class TrainResult(NamedTuple):
    denoiser: DenoiserParams
    detector: Detector
    logs: TrainLogs


def init_state(
    cfg: ExperimentConfig,
    dataset: DatasetHandle,
    run_dir: Optional[str] = None,
    on_detector_input: Optional[DetectorInputHook] = None,
) -> TrainState:
    """Seed torch, build the networks and their Adam updaters."""
    cfg.validate()
    tc = cfg.train
    torch.manual_seed(tc.seed)
    denoiser = build_denoiser(tc.variant, tc.generator_channels, tc.discriminator_channels, tc.gp_weight)
    detector = Detector(cfg.detector)
    disc_updater = None
    if denoiser.discriminator is not None:
        disc_updater = ParameterUpdater(denoiser.discriminator, tc.lr_discriminator, name="discriminator")
    return TrainState(
        cfg=cfg,
        denoiser=denoiser,
        detector=detector,
        generator_updater=ParameterUpdater(denoiser.generator, tc.lr_generator, name="generator"),
        detector_updater=ParameterUpdater(detector, tc.lr_detector, name="detector"),
        discriminator_updater=disc_updater,
        sampler=BatchSampler(dataset.train, tc.batch_size, seed=tc.seed),
        eval_samples=list(dataset.test[: tc.eval_samples]),
        schedule=TrainSchedule(),
        logs=TrainLogs(),
        gp_generator=torch.Generator().manual_seed(tc.seed + 1),
        run_dir=run_dir,
        on_detector_input=on_detector_input,
    )


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------

def _step_seed(state: TrainState) -> int:
    return state.cfg.train.seed * 1_000_003 + state.step


def _check_finite(loss: Tensor, state: TrainState, phase: Phase) -> None:
    if not torch.isfinite(loss).all():
        raise TrainingError("non-finite loss", step=state.step, phase=phase.value)


def _detector_step(state: TrainState, images: Tensor, batch: Batch, phase: Phase) -> Dict[str, float]:
    updater = state.detector_updater
    updater.zero_grad()
    loss = full_detector_loss(state.detector, images, batch.annotations, seed=_step_seed(state)).total
    _check_finite(loss, state, phase)
    loss.backward()
    updater.step(phase.value)
    return {"det": float(loss), "total": float(loss)}


def _discriminator_step(state: TrainState, batch: Batch, phase: Phase) -> None:
    updater = state.discriminator_updater
    if updater is None:
        return
    updater.zero_grad()
    with torch.no_grad():
        fake = denoise(state.denoiser.generator, batch.ldct)
    loss = discriminator_loss(
        state.denoiser.discriminator,
        fake,
        batch.ndct,
        state.denoiser.gp_weight,
        generator=state.gp_generator,
    )
    _check_finite(loss, state, phase)
    loss.backward()
    updater.step(phase.value)


def _denoiser_loss(state: TrainState, batch: Batch, require_frozen_detector: bool):
    tc = state.cfg.train
    return denoiser_objective(
        state.denoiser,
        state.detector,
        batch.ldct,
        batch.ndct,
        batch.annotations,
        state.weights,
        reconstruction=tc.reconstruction,
        perceptual=tc.perceptual,
        top_k=tc.top_k,
        pool_size=tc.pool_size,
        seed=_step_seed(state),
        require_frozen_detector=require_frozen_detector,
    )


def _enter(state: TrainState, phase: Phase, round_index: int) -> None:
    state.schedule.enter(phase, round_index)
    logger.info("Entering phase %s (round %d) at step %d", phase.value, round_index, state.step)


def _record(state: TrainState, phase: Phase, values: Dict[str, float]) -> None:
    state.logs.record(state.step, phase.value, phase.symbol, values)
    state.step += 1
    state.schedule.step_in_phase += 1
    interval = state.cfg.train.eval_interval
    if interval > 0 and state.step % interval == 0:
        evaluate_ap(state)


def evaluate_ap(state: TrainState) -> Optional[float]:
    """AP-50 of the co-trained detector on denoised validation images."""
    if not state.eval_samples:
        return None
    ev = state.cfg.eval
    ldct = np.stack([s.ldct for s in state.eval_samples]).astype(np.float32)
    images = denoise_images(state.denoiser.generator, ldct)
    found = detections_for(state.detector, images, [s.id for s in state.eval_samples], ev.score_thresh, ev.nms_iou)
    ap50 = average_precision(found, ground_truths_for(state.eval_samples), 0.5, ev.ap_interpolation).value
    state.logs.ap_curve.append({
        "step": state.step,
        "phase": state.schedule.phase.value,
        "round": state.schedule.round,
        "ap50": ap50,
    })
    if ap50 > state.best_ap:
        state.best_ap = ap50
        state.evals_since_best = 0
    else:
        state.evals_since_best += 1
    logger.info("Step %d: validation AP-50 %.4f", state.step, ap50)
    return ap50


def _phase_boundary(state: TrainState, label: str) -> None:
    if not state.run_dir:
        return
    path = os.path.join(state.run_dir, CHECKPOINTS_DIR, label)
    save_checkpoint(
        path,
        state.modules(),
        state.updaters(),
        step=state.step,
        metadata={
            "label": label,
            "phase": state.schedule.phase.value,
            "round": state.schedule.round,
            "variant": state.denoiser.variant,
            "strategy": state.cfg.train.strategy,
            "resume": {
                "sampler": state.sampler.state_dict(),
                "gp_generator": state.gp_generator.get_state().tolist(),
                "best_ap": state.best_ap if math.isfinite(state.best_ap) else None,
                "evals_since_best": state.evals_since_best,
            },
        },
    )
    state.logs.checkpoints.append(path)
    write_logs(state.logs, state.run_dir)


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------

def pretrain_detector(
    cfg: ExperimentConfig,
    dataset: DatasetHandle,
    state: Optional[TrainState] = None,
) -> Detector:
    """T1 detector steps on NDCT images with the denoiser frozen."""
    state = state or init_state(cfg, dataset)
    phase = Phase.PRETRAIN_DET
    _enter(state, phase, 0)
    freeze(*state.theta())
    unfreeze(state.detector)
    with FrozenGuard("denoiser parameters", *state.theta()):
        for _ in range(cfg.train.t1):
            batch = state.sampler.next_batch()
            _record(state, phase, _detector_step(state, batch.ndct, batch, phase))
    _phase_boundary(state, "pretrain")
    return state.detector


def run_denoiser_phase(cfg: ExperimentConfig, state: TrainState, round_index: int = 1) -> TrainState:
    """T2 denoiser steps (critic steps interleaved for GANs) with the detector frozen."""
    phase = Phase.DENOISER
    _enter(state, phase, round_index)
    freeze(state.detector)
    unfreeze(*state.theta())
    with FrozenGuard("detector parameters", state.detector):
        for _ in range(cfg.train.t2):
            batch = state.sampler.next_batch()
            if state.denoiser.variant == "gan":
                for _ in range(cfg.train.disc_steps):
                    _discriminator_step(state, batch, phase)
            state.generator_updater.zero_grad()
            _, breakdown = _denoiser_loss(state, batch, require_frozen_detector=True)
            _check_finite(breakdown.total, state, phase)
            breakdown.total.backward()
            state.generator_updater.step(phase.value)
            _record(state, phase, breakdown.as_floats())
    _phase_boundary(state, f"round{round_index:02d}-denoiser")
    return state


def run_detector_phase(cfg: ExperimentConfig, state: TrainState, round_index: int = 1) -> TrainState:
    """T3 detector steps on images denoised by the frozen generator."""
    phase = Phase.DETECTOR
    _enter(state, phase, round_index)
    freeze(*state.theta())
    unfreeze(state.detector)
    with FrozenGuard("denoiser parameters", *state.theta()):
        for _ in range(cfg.train.t3):
            batch = state.sampler.next_batch()
            with torch.no_grad():
                denoised = denoise(state.denoiser.generator, batch.ldct)
            if state.on_detector_input is not None:
                state.on_detector_input(state.step, batch.ldct, denoised)
            _record(state, phase, _detector_step(state, denoised, batch, phase))
    _phase_boundary(state, f"round{round_index:02d}-detector")
    return state


def _finish(state: TrainState) -> TrainResult:
    state.schedule.enter(Phase.DONE, state.schedule.round)
    unfreeze(*state.theta(), state.detector)
    _phase_boundary(state, "final")
    logger.info("Training finished after %d steps", state.step)
    return TrainResult(state.denoiser, state.detector, state.logs)


def _stop_early(cfg: ExperimentConfig, state: TrainState, round_index: int) -> bool:
    patience = cfg.train.early_stop_patience
    if patience > 0 and state.evals_since_best >= patience and round_index < cfg.train.rounds:
        logger.info("Validation AP-50 has not improved for %d evaluations; stopping after round %d",
                    state.evals_since_best, round_index)
        state.logs.stopped_early = True
        return True
    return False


def _run_rounds(cfg: ExperimentConfig, state: TrainState, first_round: int, detector_pending: bool) -> TrainResult:
    for round_index in range(first_round, cfg.train.rounds + 1):
        if not (detector_pending and round_index == first_round):
            run_denoiser_phase(cfg, state, round_index)
        run_detector_phase(cfg, state, round_index)
        if _stop_early(cfg, state, round_index):
            break
    return _finish(state)


def run_collaborative(
    cfg: ExperimentConfig,
    dataset: DatasetHandle,
    run_dir: Optional[str] = None,
    on_detector_input: Optional[DetectorInputHook] = None,
) -> TrainResult:
    """Pretrain, then alternate denoiser and detector phases for ``rounds`` rounds."""
    state = init_state(cfg, dataset, run_dir, on_detector_input)
    pretrain_detector(cfg, dataset, state)
    return _run_rounds(cfg, state, 1, detector_pending=False)


# ---------------------------------------------------------------------------
# Resuming
# ---------------------------------------------------------------------------

_ROUND_LABEL = re.compile(r"round(\d{2})-(denoiser|detector)")


def collaborative_labels(rounds: int) -> List[str]:
    """Phase-boundary checkpoint labels of a full collaborative run, in order."""
    labels = ["pretrain"]
    for round_index in range(1, rounds + 1):
        labels += [f"round{round_index:02d}-denoiser", f"round{round_index:02d}-detector"]
    return labels + ["final"]


def _resume_point(label: str, rounds: int) -> Tuple[int, str]:
    """(round, phase already completed in it) for a phase-boundary label."""
    if label == "pretrain":
        return 0, "detector"
    match = _ROUND_LABEL.fullmatch(label)
    if match is None or not 1 <= int(match.group(1)) <= rounds:
        raise ConfigurationError(f"cannot resume from checkpoint '{label}'")
    return int(match.group(1)), match.group(2)


def _restore_logs(state: TrainState, run_dir: str, label: str) -> None:
    losses = read_loss_log(run_dir)
    losses = losses[losses["step"] < state.step]
    if len(losses) != state.step:
        raise DatasetIOError(f"loss log covers {len(losses)} of {state.step} steps", run_dir)
    for row in losses.itertuples(index=False):
        values = {"recon_or_adv": float(row.recon_or_adv), "roi_pl": float(row.roi_pl),
                  "det": float(row.det), "total": float(row.total)}
        state.logs.record(int(row.step), row.phase, Phase(row.phase).symbol, values)
    curve = read_ap_curve(run_dir)
    state.logs.ap_curve = [
        {"step": int(r.step), "phase": r.phase, "round": int(r.round), "ap50": float(r.ap50)}
        for r in curve[curve["step"] <= state.step].itertuples(index=False)
    ]
    labels = collaborative_labels(state.cfg.train.rounds)
    state.logs.checkpoints = [
        os.path.join(run_dir, CHECKPOINTS_DIR, done) for done in labels[: labels.index(label) + 1]
    ]


def resume_collaborative(
    cfg: ExperimentConfig,
    dataset: DatasetHandle,
    run_dir: str,
    label: str,
    on_detector_input: Optional[DetectorInputHook] = None,
) -> TrainResult:
    """Continue a collaborative run from its ``label`` phase-boundary checkpoint.

    Parameters, Adam moments, the step counter, batch order, critic noise and
    early-stopping state are restored, so the continued run matches one that
    was never interrupted.
    """
    if cfg.train.strategy != "collaborative":
        raise ConfigurationError("only collaborative runs can be resumed")
    completed_round, completed_phase = _resume_point(label, cfg.train.rounds)
    state = init_state(cfg, dataset, run_dir, on_detector_input)
    info = load_checkpoint(os.path.join(run_dir, CHECKPOINTS_DIR, label), state.modules(), state.updaters())
    meta = info["metadata"]
    saved = meta.get("resume")
    if saved is None or meta.get("variant") != state.denoiser.variant or meta.get("strategy") != "collaborative":
        raise ConfigurationError(f"checkpoint '{label}' was not written by this kind of run")

    state.step = info["step"]
    state.sampler.load_state_dict(saved["sampler"])
    state.gp_generator.set_state(torch.tensor(saved["gp_generator"], dtype=torch.uint8))
    state.best_ap = -math.inf if saved["best_ap"] is None else float(saved["best_ap"])
    state.evals_since_best = int(saved["evals_since_best"])
    _restore_logs(state, run_dir, label)
    logger.info("Resuming from checkpoint %s at step %d", label, state.step)

    if completed_phase == "denoiser":
        return _run_rounds(cfg, state, completed_round, detector_pending=True)
    if completed_round > 0 and _stop_early(cfg, state, completed_round):
        return _finish(state)
    return _run_rounds(cfg, state, completed_round + 1, detector_pending=False)


def run_simultaneous(
    cfg: ExperimentConfig,
    dataset: DatasetHandle,
    run_dir: Optional[str] = None,
) -> TrainResult:
    """Update denoiser and detector on every batch for T1 + rounds * (T2 + T3) steps."""
    state = init_state(cfg, dataset, run_dir)
    phase = Phase.SIMULTANEOUS
    _enter(state, phase, 0)
    unfreeze(*state.theta(), state.detector)
    for _ in range(cfg.train.total_steps):
        batch = state.sampler.next_batch()
        if state.denoiser.variant == "gan":
            for _ in range(cfg.train.disc_steps):
                _discriminator_step(state, batch, phase)
        state.generator_updater.zero_grad()
        state.detector_updater.zero_grad()
        denoised, breakdown = _denoiser_loss(state, batch, require_frozen_detector=False)
        _check_finite(breakdown.total, state, phase)
        breakdown.total.backward()

        state.detector_updater.zero_grad()
        det_loss = full_detector_loss(
            state.detector, denoised.detach(), batch.annotations, seed=_step_seed(state)
        ).total
        _check_finite(det_loss, state, phase)
        det_loss.backward()

        state.generator_updater.step(phase.value)
        state.detector_updater.step(phase.value)
        values = breakdown.as_floats()
        values["det"] = float(det_loss)
        _record(state, phase, values)
    return _finish(state)


def train(
    cfg: ExperimentConfig,
    dataset: DatasetHandle,
    run_dir: Optional[str] = None,
) -> TrainResult:
    if cfg.train.strategy == "simultaneous":
        return run_simultaneous(cfg, dataset, run_dir)
    return run_collaborative(cfg, dataset, run_dir)


def train_eval_detector(
    cfg: ExperimentConfig,
    dataset: DatasetHandle,
    run_dir: Optional[str] = None,
) -> Detector:
    """The NDCT-only evaluation detector: T1 pretraining steps, nothing else."""
    state = init_state(cfg, dataset)
    detector = pretrain_detector(cfg, dataset, state)
    if run_dir:
        save_checkpoint(
            os.path.join(run_dir, CHECKPOINTS_DIR, "eval-detector"),
            {"detector": detector},
            {"detector": state.detector_updater},
            step=state.step,
            metadata={"label": "eval-detector", "role": "eval-detector"},
        )
        write_logs(state.logs, run_dir)
    return detector
