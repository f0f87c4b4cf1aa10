"""
training/logs.py — Step-indexed training logs.

loss CSV columns: step, phase, recon_or_adv, roi_pl, det, total
AP-curve CSV columns: step, phase, round, ap50
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List

import pandas as pd

from lidnet.errors import MissingArtifactError
from lidnet.runs import atomic_write_text

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "phase", "recon_or_adv", "roi_pl", "det", "total"]
AP_COLUMNS = ["step", "phase", "round", "ap50"]
LOSS_CSV = "losses.csv"
AP_CURVE_CSV = "ap_curve.csv"


@dataclass
class TrainLogs:
    trace: List[str] = field(default_factory=list)
    losses: List[Dict[str, object]] = field(default_factory=list)
    ap_curve: List[Dict[str, object]] = field(default_factory=list)
    phase_steps: Dict[str, int] = field(default_factory=dict)
    checkpoints: List[str] = field(default_factory=list)
    stopped_early: bool = False

    def record(self, step: int, phase: str, symbol: str, values: Dict[str, float]) -> None:
        self.trace.append(symbol)
        self.phase_steps[phase] = self.phase_steps.get(phase, 0) + 1
        self.losses.append({
            "step": step,
            "phase": phase,
            "recon_or_adv": values.get("recon_or_adv", 0.0),
            "roi_pl": values.get("roi_pl", 0.0),
            "det": values.get("det", 0.0),
            "total": values["total"],
        })

    def loss_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.losses, columns=LOSS_COLUMNS)

    def ap_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.ap_curve, columns=AP_COLUMNS)


def write_logs(logs: TrainLogs, run_dir: str) -> None:
    atomic_write_text(os.path.join(run_dir, LOSS_CSV), logs.loss_frame().to_csv(index=False))
    atomic_write_text(os.path.join(run_dir, AP_CURVE_CSV), logs.ap_frame().to_csv(index=False))


def read_ap_curve(run_dir: str) -> pd.DataFrame:
    path = os.path.join(run_dir, AP_CURVE_CSV)
    if not os.path.exists(path):
        raise MissingArtifactError("missing AP curve", path)
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in AP_COLUMNS if c not in frame.columns]
    if missing:
        raise MissingArtifactError(f"AP curve lacks columns {missing}", path)
    return frame.sort_values("step", kind="stable").reset_index(drop=True)


def read_loss_log(run_dir: str) -> pd.DataFrame:
    path = os.path.join(run_dir, LOSS_CSV)
    if not os.path.exists(path):
        raise MissingArtifactError("missing loss log", path)
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in LOSS_COLUMNS if c not in frame.columns]
    if missing:
        raise MissingArtifactError(f"loss log lacks columns {missing}", path)
    return frame.sort_values("step", kind="stable").reset_index(drop=True)
