"""
phantoms/dataset.py — Build, persist and load paired LDCT/NDCT datasets.

On-disk layout::

    <dir>/manifest.json
    <dir>/images/<id>_ldct.f32
    <dir>/images/<id>_ndct.f32

Images are little-endian float32 raw arrays; the manifest records image_size,
dtype="f32le", the split membership and annotations as
[row, col, width, height, label].
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from lidnet.errors import DataError, DatasetIOError, DatasetValidationError
from lidnet.models.config import PhantomSpec, SimulationConfig
from lidnet.phantoms.base import Annotation, CtSample
from lidnet.phantoms.generator import generate_phantom
from lidnet.phantoms.simulation import simulate_ldct
from lidnet.runs import atomic_write_json, read_json

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
IMAGES_DIR = "images"
DTYPE_TAG = "f32le"
FORMAT_VERSION = 1
SPLITS = ("train", "test")


@dataclass
class DatasetHandle:
    """In-memory dataset: train and test splits plus the configs that built them."""
    train: List[CtSample]
    test: List[CtSample]
    image_size: int
    num_classes: int = 1
    phantom: Optional[PhantomSpec] = None
    simulation: Optional[SimulationConfig] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def n0(self) -> Optional[float]:
        return self.simulation.n0 if self.simulation else None

    def split(self, name: str) -> List[CtSample]:
        if name not in SPLITS:
            raise KeyError(f"unknown split '{name}'")
        return self.train if name == "train" else self.test

    def manifest(self) -> Dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "image_size": self.image_size,
            "dtype": DTYPE_TAG,
            "num_classes": self.num_classes,
            "n0": self.n0,
            "phantom": dataclasses.asdict(self.phantom) if self.phantom else None,
            "simulation": dataclasses.asdict(self.simulation) if self.simulation else None,
            "splits": {
                name: [
                    {"id": s.id, "annotations": [a.as_list() for a in s.annotations]}
                    for s in self.split(name)
                ]
                for name in SPLITS
            },
        }

    def checksum(self) -> str:
        """SHA-256 over the canonical manifest and every image array."""
        digest = hashlib.sha256()
        digest.update(json.dumps(self.manifest(), sort_keys=True).encode("utf-8"))
        for name in SPLITS:
            for sample in self.split(name):
                digest.update(np.ascontiguousarray(sample.ldct, dtype="<f4").tobytes())
                digest.update(np.ascontiguousarray(sample.ndct, dtype="<f4").tobytes())
        return digest.hexdigest()


# ---------------------------------------------------------------------------
# Building
# ---------------------------------------------------------------------------

def derive_seed(base: int, *keys: int) -> int:
    """Independent, reproducible child seed for (base, *keys)."""
    return int(np.random.SeedSequence([int(base), *[int(k) for k in keys]]).generate_state(1)[0])


def make_sample(sample_id: str, phantom_spec: PhantomSpec, sim_cfg: SimulationConfig) -> CtSample:
    ndct, annotations = generate_phantom(phantom_spec)
    ldct = simulate_ldct(ndct, sim_cfg)
    sample = CtSample(id=sample_id, ldct=ldct, ndct=ndct, annotations=annotations)
    sample.validate(phantom_spec.num_classes)
    return sample


def build_dataset(
    phantom_spec: PhantomSpec,
    sim_cfg: SimulationConfig,
    n_train: int,
    n_test: int,
    workers: int = 1,
) -> DatasetHandle:
    """Generate ``n_train + n_test`` samples; every sample is a pure function of the seeds."""
    if n_train < 1 or n_test < 1:
        raise DataError("n_train and n_test must be >= 1")
    phantom_spec.validate()
    sim_cfg.validate()

    jobs = []
    for split_index, (name, count) in enumerate((("train", n_train), ("test", n_test))):
        for i in range(count):
            jobs.append((
                name,
                f"{name}-{i:05d}",
                dataclasses.replace(phantom_spec, rng_seed=derive_seed(phantom_spec.rng_seed, split_index, i)),
                dataclasses.replace(sim_cfg, rng_seed=derive_seed(sim_cfg.rng_seed, split_index, i)),
            ))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda job: make_sample(job[1], job[2], job[3]), jobs))
    else:
        samples = [make_sample(job[1], job[2], job[3]) for job in jobs]

    train = [s for job, s in zip(jobs, samples) if job[0] == "train"]
    test = [s for job, s in zip(jobs, samples) if job[0] == "test"]
    logger.info("Built dataset: %d train / %d test samples at n0=%s", len(train), len(test), sim_cfg.n0)
    return DatasetHandle(
        train=train,
        test=test,
        image_size=phantom_spec.image_size,
        num_classes=phantom_spec.num_classes,
        phantom=phantom_spec,
        simulation=sim_cfg,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _image_path(directory: str, sample_id: str, kind: str) -> str:
    return os.path.join(directory, IMAGES_DIR, f"{sample_id}_{kind}.f32")


def save_dataset(handle: DatasetHandle, directory: str, force: bool = False) -> str:
    """Write ``handle`` under ``directory``; refuses to overwrite unless ``force``."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if os.path.exists(manifest_path) and not force:
        raise DatasetIOError("dataset already exists (use --force to overwrite)", manifest_path)
    os.makedirs(os.path.join(directory, IMAGES_DIR), exist_ok=True)

    for name in SPLITS:
        for sample in handle.split(name):
            for kind, array in (("ldct", sample.ldct), ("ndct", sample.ndct)):
                path = _image_path(directory, sample.id, kind)
                try:
                    np.ascontiguousarray(array, dtype="<f4").tofile(path)
                except OSError as exc:
                    raise DatasetIOError(f"cannot write image ({exc})", path) from exc

    atomic_write_json(manifest_path, handle.manifest())
    logger.info("Saved dataset to %s", directory)
    return manifest_path


def _read_image(path: str, size: int) -> np.ndarray:
    if not os.path.exists(path):
        raise DatasetIOError("missing image file", path)
    data = np.fromfile(path, dtype="<f4")
    if data.size != size * size:
        raise DatasetIOError(f"corrupt image file (expected {size * size} values, found {data.size})", path)
    return data.reshape(size, size).astype(np.float32)


def load_dataset(directory: str) -> DatasetHandle:
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise DatasetIOError("missing dataset manifest", manifest_path)
    manifest = read_json(manifest_path)
    if not isinstance(manifest, dict):
        raise DatasetIOError("manifest root must be an object", manifest_path)
    if manifest.get("dtype") != DTYPE_TAG:
        raise DatasetIOError(f"unsupported dtype {manifest.get('dtype')!r}", manifest_path)

    try:
        size = int(manifest["image_size"])
        num_classes = int(manifest.get("num_classes", 1))
        splits = manifest["splits"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetIOError(f"manifest missing field ({exc})", manifest_path) from exc

    loaded: Dict[str, List[CtSample]] = {}
    seen_ids = set()
    for name in SPLITS:
        loaded[name] = []
        for entry in splits.get(name, []):
            if not isinstance(entry, dict) or "id" not in entry:
                raise DatasetIOError(f"malformed sample entry in split '{name}'", manifest_path)
            sample_id = str(entry["id"])
            if sample_id in seen_ids:
                raise DatasetValidationError(f"{manifest_path}: duplicate sample id {sample_id}")
            seen_ids.add(sample_id)
            try:
                annotations = [Annotation.from_list(values) for values in entry.get("annotations", [])]
                sample = CtSample(
                    id=sample_id,
                    ldct=_read_image(_image_path(directory, sample_id, "ldct"), size),
                    ndct=_read_image(_image_path(directory, sample_id, "ndct"), size),
                    annotations=annotations,
                )
                sample.validate(num_classes)
            except DatasetIOError:
                raise
            except DataError as exc:
                raise DatasetValidationError(f"{manifest_path}: {exc}") from exc
            loaded[name].append(sample)

    phantom = simulation = None
    if isinstance(manifest.get("phantom"), dict):
        phantom = PhantomSpec(**{
            k: tuple(v) if isinstance(v, list) else v for k, v in manifest["phantom"].items()
        })
    if isinstance(manifest.get("simulation"), dict):
        simulation = SimulationConfig(**manifest["simulation"])

    logger.info("Loaded dataset from %s (%d train / %d test)", directory, len(loaded["train"]), len(loaded["test"]))
    return DatasetHandle(
        train=loaded["train"],
        test=loaded["test"],
        image_size=size,
        num_classes=num_classes,
        phantom=phantom,
        simulation=simulation,
    )
