"""Shared helpers: small geometric fixtures and tree hashing."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from particlekit.volume import LabelVolume, ScalarVolume, SemanticVolume, VolumeMeta


def make_scalar(arr, spacing=(1.0, 1.0, 1.0)) -> ScalarVolume:
    arr = np.asarray(arr, dtype=np.float32)
    return ScalarVolume(VolumeMeta(arr.shape, spacing, "f32"), arr)


def make_labels(arr, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    arr = np.asarray(arr, dtype=np.int32)
    return LabelVolume(VolumeMeta(arr.shape, spacing, "u32"), arr)


def make_semantic(arr, spacing=(1.0, 1.0, 1.0)) -> SemanticVolume:
    arr = np.asarray(arr, dtype=np.uint8)
    return SemanticVolume(VolumeMeta(arr.shape, spacing, "u8"), arr)


def sphere_mask(shape, center, radius) -> np.ndarray:
    grids = np.mgrid[: shape[0], : shape[1], : shape[2]].astype(np.float64)
    dist2 = sum((grids[a] - center[a]) ** 2 for a in range(3))
    return dist2 <= radius * radius


def fused_spheres(shape, c1, c2, radius) -> np.ndarray:
    return sphere_mask(shape, c1, radius) | sphere_mask(shape, c2, radius)


def hash_tree(root) -> str:
    """Order-independent content hash of every file under a directory."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
