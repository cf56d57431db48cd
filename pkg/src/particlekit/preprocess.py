"""Intensity z-scoring and particle-size normalization.

Intensities are z-scored against corpus-wide statistics; particle sizes are
homogenized by rescaling each volume so its measured average particle
diameter lands on a common target (60 voxels by default).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .exceptions import DegenerateStatsError, ValidationError
from .volume import LabelVolume, ScalarVolume, VolumeMeta

DEFAULT_TARGET_PARTICLE_SIZE_VOX = 60.0


@dataclass(frozen=True)
class GlobalStats:
    """Corpus-wide intensity mean and population standard deviation."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not np.isfinite(self.mu) or not np.isfinite(self.sigma) or self.sigma <= 0:
            raise ValidationError(f"stats require finite mu and sigma > 0, got mu={self.mu}, sigma={self.sigma}")


@dataclass(frozen=True)
class SizeNormSpec:
    """Rescaling from a measured average particle size to the target size."""

    reference_particle_size_vox: float
    target_particle_size_vox: float = DEFAULT_TARGET_PARTICLE_SIZE_VOX

    def __post_init__(self):
        if self.reference_particle_size_vox <= 0 or self.target_particle_size_vox <= 0:
            raise ValidationError("particle sizes must be positive")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValidationError(f"degenerate size scale {self.scale}")

    @property
    def scale(self) -> float:
        return self.target_particle_size_vox / self.reference_particle_size_vox


class StatsAccumulator:
    """Single-pass mean/std accumulator usable over streamed chunks."""

    def __init__(self):
        self.count = 0
        self.total = 0.0
        self.total_sq = 0.0
        self.vmin = np.inf
        self.vmax = -np.inf

    def update(self, arr: np.ndarray) -> None:
        a = arr.astype(np.float64, copy=False)
        self.count += a.size
        self.total += float(a.sum())
        self.total_sq += float(np.square(a).sum())
        if a.size:
            self.vmin = min(self.vmin, float(a.min()))
            self.vmax = max(self.vmax, float(a.max()))

    def finalize(self) -> GlobalStats:
        if self.count == 0:
            raise ValidationError("no voxels supplied")
        if self.vmin == self.vmax:
            raise DegenerateStatsError("constant intensity data: standard deviation is zero")
        mu = self.total / self.count
        var = max(self.total_sq / self.count - mu * mu, 0.0)
        sigma = float(np.sqrt(var))
        if sigma <= 0:
            raise DegenerateStatsError("degenerate intensity statistics: sigma = 0")
        return GlobalStats(mu=float(mu), sigma=sigma)


def global_stats(volumes: Iterable[ScalarVolume]) -> GlobalStats:
    """Mean and population std over all voxels of all given volumes."""
    acc = StatsAccumulator()
    for vol in volumes:
        acc.update(vol.values)
    return acc.finalize()


def zscore_normalize(vol: ScalarVolume, stats: GlobalStats) -> ScalarVolume:
    """Per-voxel ``(I - mu) / sigma``; output is float32."""
    values = (vol.values.astype(np.float32) - np.float32(stats.mu)) / np.float32(stats.sigma)
    return ScalarVolume(replace(vol.meta, dtype="f32"), values)


def scaled_shape(shape: Sequence[int], scale: float) -> tuple[int, int, int]:
    return tuple(max(1, int(round(s * scale))) for s in shape)


def _axis_coords_linear(n_out: int, n_in: int) -> np.ndarray:
    # Pixel-center alignment: output voxel i samples the source at
    # (i + 0.5) * n_in/n_out - 0.5, clipped to the valid range.
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(src, 0.0, n_in - 1.0)


def resample_trilinear(values: np.ndarray, out_shape: Sequence[int]) -> np.ndarray:
    """Separable trilinear resampling to ``out_shape``; returns float32."""
    out = values.astype(np.float32, copy=False)
    for axis in range(3):
        out = _lerp_axis(out, int(out_shape[axis]), axis)
    return out


def _lerp_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    if n_out == arr.shape[axis]:
        return arr
    return _lerp_axis_at(arr, _axis_coords_linear(n_out, arr.shape[axis]), axis)


def _lerp_axis_at(arr: np.ndarray, src: np.ndarray, axis: int) -> np.ndarray:
    """Linear interpolation along one axis at explicit source coordinates."""
    n_in = arr.shape[axis]
    lo = np.floor(src).astype(np.intp)
    np.clip(lo, 0, n_in - 1, out=lo)
    hi = np.minimum(lo + 1, n_in - 1)
    w = (src - lo).astype(np.float32)
    np.clip(w, 0.0, 1.0, out=w)
    shape = [1, 1, 1]
    shape[axis] = len(src)
    w = w.reshape(shape)
    a_lo = np.take(arr, lo, axis=axis)
    a_hi = np.take(arr, hi, axis=axis)
    return a_lo * (1.0 - w) + a_hi * w


def resample_labels_nearest(labels: np.ndarray, out_shape: Sequence[int]) -> np.ndarray:
    """Nearest-neighbor label resampling to ``out_shape``."""
    idx = []
    for axis in range(3):
        src = _axis_coords_linear(int(out_shape[axis]), labels.shape[axis])
        idx.append(np.clip(np.round(src).astype(np.intp), 0, labels.shape[axis] - 1))
    return labels[np.ix_(*idx)]


def size_normalize(vol: ScalarVolume, spec: SizeNormSpec) -> ScalarVolume:
    """Rescale intensities so the average particle diameter hits the target.

    Output shape per axis is ``round(shape * scale)`` (at least 1), values are
    trilinearly interpolated, and voxel spacing is divided by the scale.
    """
    scale = spec.scale
    out_shape = scaled_shape(vol.meta.shape, scale)
    values = resample_trilinear(vol.values, out_shape)
    meta = VolumeMeta(
        out_shape,
        tuple(s / scale for s in vol.meta.spacing_mm),
        "f32",
        vol.meta.origin_name,
    )
    return ScalarVolume(meta, values)


def size_denormalize_labels(labels: LabelVolume, original_shape: Sequence[int]) -> LabelVolume:
    """Resample labels produced at normalized scale back to the original grid."""
    original_shape = tuple(int(s) for s in original_shape)
    out = resample_labels_nearest(labels.labels, original_shape)
    spacing = tuple(
        sp * (n_in / n_out)
        for sp, n_in, n_out in zip(labels.meta.spacing_mm, labels.meta.shape, original_shape)
    )
    meta = VolumeMeta(original_shape, spacing, "u32", labels.meta.origin_name)
    return LabelVolume(meta, out.astype(np.int32, copy=False))


def estimate_voxel_particle_size(particle_size_mm: float, spacing_mm: float) -> float:
    """Particle size in voxels from its physical size and the voxel spacing."""
    if particle_size_mm <= 0 or spacing_mm <= 0:
        raise ValidationError("particle size and spacing must be positive")
    return particle_size_mm / spacing_mm


def estimate_mm_particle_size(particle_size_vox: float, spacing_mm: float) -> float:
    """Inverse of :func:`estimate_voxel_particle_size`."""
    if particle_size_vox <= 0 or spacing_mm <= 0:
        raise ValidationError("particle size and spacing must be positive")
    return particle_size_vox * spacing_mm
