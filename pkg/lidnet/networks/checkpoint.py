"""
networks/checkpoint.py — Checkpoint directories.

Layout::

    <dir>/index.json                    step, metadata, array table, optimizer groups
    <dir>/arrays/<module>.<param>.f32   little-endian float32 raw arrays
    <dir>/arrays/<updater>.<i>.<slot>.f32

The directory is written under a temporary name and swapped in place, so a
reader never sees a half-written checkpoint.
"""
from __future__ import annotations

import logging
import os
import shutil
import tempfile
from typing import Any, Dict, Mapping, Optional

import numpy as np
import torch
from torch import nn

from lidnet.errors import DatasetIOError, MissingArtifactError
from lidnet.networks.optim import ParameterUpdater
from lidnet.runs import atomic_write_json, read_json

logger = logging.getLogger(__name__)

INDEX_NAME = "index.json"
ARRAYS_DIR = "arrays"
FORMAT_VERSION = 1


def _write_array(directory: str, key: str, tensor: torch.Tensor) -> Dict[str, Any]:
    filename = f"{key}.f32"
    array = tensor.detach().cpu().to(torch.float32).numpy()
    np.ascontiguousarray(array, dtype="<f4").tofile(os.path.join(directory, ARRAYS_DIR, filename))
    return {"file": filename, "shape": list(array.shape)}


def _read_array(directory: str, entry: Mapping[str, Any]) -> torch.Tensor:
    path = os.path.join(directory, ARRAYS_DIR, entry["file"])
    if not os.path.exists(path):
        raise DatasetIOError("missing checkpoint array", path)
    data = np.fromfile(path, dtype="<f4")
    shape = tuple(entry["shape"])
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise DatasetIOError(f"corrupt checkpoint array (expected shape {shape})", path)
    return torch.from_numpy(data.reshape(shape).copy())


def save_checkpoint(
    directory: str,
    modules: Mapping[str, nn.Module],
    updaters: Optional[Mapping[str, ParameterUpdater]] = None,
    step: int = 0,
    metadata: Optional[Dict[str, Any]] = None,
) -> str:
    """Write every module's parameters and each updater's Adam state."""
    parent = os.path.dirname(os.path.abspath(directory))
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(dir=parent, prefix=".ckpt-")
    try:
        os.makedirs(os.path.join(staging, ARRAYS_DIR))
        index: Dict[str, Any] = {
            "format_version": FORMAT_VERSION,
            "step": int(step),
            "metadata": metadata or {},
            "modules": {},
            "updaters": {},
        }
        for name, module in modules.items():
            index["modules"][name] = {
                key: _write_array(staging, f"{name}.{key}", value)
                for key, value in module.state_dict().items()
            }
        for name, updater in (updaters or {}).items():
            opt_state = updater.optimizer.state_dict()
            slots: Dict[str, Any] = {}
            for idx, state in opt_state["state"].items():
                entry: Dict[str, Any] = {}
                for slot, value in state.items():
                    if torch.is_tensor(value) and value.dim() > 0:
                        entry[slot] = _write_array(staging, f"{name}.{idx}.{slot}", value)
                    else:
                        entry[slot] = {"value": float(value)}
                slots[str(idx)] = entry
            index["updaters"][name] = {
                "steps": updater.steps,
                "param_groups": opt_state["param_groups"],
                "state": slots,
            }
        atomic_write_json(os.path.join(staging, INDEX_NAME), index)

        if os.path.exists(directory):
            retired = directory.rstrip(os.sep) + ".old"
            shutil.rmtree(retired, ignore_errors=True)
            os.replace(directory, retired)
            os.replace(staging, directory)
            shutil.rmtree(retired, ignore_errors=True)
        else:
            os.replace(staging, directory)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    logger.info("Saved checkpoint at step %d to %s", step, directory)
    return directory


def load_checkpoint(
    directory: str,
    modules: Mapping[str, nn.Module],
    updaters: Optional[Mapping[str, ParameterUpdater]] = None,
) -> Dict[str, Any]:
    """Restore parameters (and Adam state) in place; returns ``{"step", "metadata"}``."""
    index_path = os.path.join(directory, INDEX_NAME)
    if not os.path.exists(index_path):
        raise MissingArtifactError("missing checkpoint", index_path)
    index = read_json(index_path)

    for name, module in modules.items():
        entries = index.get("modules", {}).get(name)
        if entries is None:
            raise DatasetIOError(f"checkpoint has no module '{name}'", index_path)
        current = module.state_dict()
        restored = {}
        for key, value in current.items():
            if key not in entries:
                raise DatasetIOError(f"checkpoint module '{name}' lacks '{key}'", index_path)
            tensor = _read_array(directory, entries[key])
            if tuple(tensor.shape) != tuple(value.shape):
                raise DatasetIOError(f"shape mismatch for '{name}.{key}'", index_path)
            restored[key] = tensor.to(dtype=value.dtype, device=value.device)
        module.load_state_dict(restored)

    for name, updater in (updaters or {}).items():
        saved = index.get("updaters", {}).get(name)
        if saved is None:
            logger.warning("Checkpoint %s has no optimizer state for '%s'; starting fresh", directory, name)
            continue
        state: Dict[int, Dict[str, Any]] = {}
        for idx, slots in saved["state"].items():
            state[int(idx)] = {
                slot: torch.tensor(entry["value"]) if "value" in entry else _read_array(directory, entry)
                for slot, entry in slots.items()
            }
        updater.load_state_dict({
            "optimizer": {"state": state, "param_groups": saved["param_groups"]},
            "steps": saved.get("steps", 0),
        })

    return {"step": int(index.get("step", 0)), "metadata": index.get("metadata", {})}
