"""Synthetic CT phantoms, low-dose simulation and the on-disk dataset format."""

from lidnet.phantoms.base import Annotation, CtSample
from lidnet.phantoms.dataset import DatasetHandle, build_dataset, load_dataset, save_dataset
from lidnet.phantoms.generator import generate_phantom
from lidnet.phantoms.simulation import simulate_ldct

__all__ = [
    "Annotation",
    "CtSample",
    "DatasetHandle",
    "build_dataset",
    "generate_phantom",
    "load_dataset",
    "save_dataset",
    "simulate_ldct",
]
