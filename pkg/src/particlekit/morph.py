"""Discrete 3D morphology and geometry primitives.

Functions here operate on plain numpy arrays: boolean masks, integer label
arrays, and float priority/distance arrays, all indexed ``[x, y, z]``.
Outside the volume counts as background for every operation. Distances are
in voxel units (the pipeline normalizes to isotropic scale first).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from . import _kernels
from .exceptions import ValidationError
from .volume import VolumeMeta

_CROSS1 = ndimage.generate_binary_structure(3, 1)
_FULL3 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class StructuringElement:
    """Isotropic structuring element: Euclidean ball or L1 cross."""

    kind: str
    radius: int

    def __post_init__(self):
        if self.kind not in ("ball", "cross"):
            raise ValidationError(f"unknown structuring element kind {self.kind!r}")
        if self.radius < 1:
            raise ValidationError("structuring element radius must be >= 1")

    def footprint(self) -> np.ndarray:
        r = self.radius
        gx, gy, gz = np.mgrid[-r:r + 1, -r:r + 1, -r:r + 1]
        if self.kind == "ball":
            return gx * gx + gy * gy + gz * gz <= r * r
        return np.abs(gx) + np.abs(gy) + np.abs(gz) <= r


def ball(radius: int) -> StructuringElement:
    return StructuringElement("ball", radius)


def cross(radius: int) -> StructuringElement:
    return StructuringElement("cross", radius)


@dataclass(frozen=True)
class DistanceMap:
    """Per-voxel distances to a source set; 0 exactly on the source."""

    distances: np.ndarray
    metric: str
    meta: Optional[VolumeMeta] = None


def erode(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    """Keep voxels where the translated element fits entirely in the mask."""
    return ndimage.binary_erosion(mask, structure=se.footprint(), border_value=0)


def dilate(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=se.footprint(), border_value=0)


def opening(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    return dilate(erode(mask, se), se)


def distance_to_set(source: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance of every voxel to the nearest source voxel.

    An empty source yields +inf everywhere.
    """
    if not source.any():
        return np.full(source.shape, np.inf)
    return ndimage.distance_transform_edt(~source)


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels 6-adjacent to background (volume edges count as background)."""
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS1, border_value=0)


def euclidean_distance(mask: np.ndarray, to: str = "complement", meta: Optional[VolumeMeta] = None) -> DistanceMap:
    """Distance map of a binary volume.

    ``to="complement"`` measures to the nearest background voxel,
    ``to="boundary"`` to the mask's own outermost voxel layer (so surface
    voxels are at distance 0; the center of a 7x7x7 cube is at 3).
    """
    if to == "complement":
        source = ~mask
    elif to == "boundary":
        source = mask_boundary(mask)
    else:
        raise ValidationError(f"unknown distance target {to!r}")
    return DistanceMap(distance_to_set(source), "euclidean", meta)


def _neighborhood(connectivity: int, nx: int, ny: int):
    if connectivity == 6:
        offs = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
    elif connectivity == 26:
        offs = [
            (ox, oy, oz)
            for oz in (-1, 0, 1)
            for oy in (-1, 0, 1)
            for ox in (-1, 0, 1)
            if (ox, oy, oz) != (0, 0, 0)
        ]
    else:
        raise ValidationError(f"connectivity must be 6 or 26, got {connectivity}")
    dx = np.array([o[0] for o in offs], dtype=np.int64)
    dy = np.array([o[1] for o in offs], dtype=np.int64)
    dz = np.array([o[2] for o in offs], dtype=np.int64)
    dflat = dx + nx * dy + nx * ny * dz
    dw = np.sqrt((dx * dx + dy * dy + dz * dz).astype(np.float64))
    return dx, dy, dz, dflat, dw


def _seed_mask_from(seeds, shape) -> np.ndarray:
    seeds = np.asarray(seeds)
    if seeds.dtype == bool and seeds.shape == tuple(shape):
        return seeds
    if seeds.ndim == 2 and seeds.shape[1] == 3:
        mask = np.zeros(shape, dtype=bool)
        for axis in range(3):
            if (seeds[:, axis] < 0).any() or (seeds[:, axis] >= shape[axis]).any():
                raise ValidationError("seed coordinate out of bounds")
        mask[seeds[:, 0], seeds[:, 1], seeds[:, 2]] = True
        return mask
    raise ValidationError("seeds must be a boolean mask or an (N, 3) coordinate array")


def geodesic_distance(
    domain: np.ndarray,
    seeds,
    connectivity: int = 26,
    meta: Optional[VolumeMeta] = None,
) -> DistanceMap:
    """Shortest-path distance from the seed set within the domain mask.

    Paths step through the chosen neighborhood with Euclidean edge lengths;
    voxels outside the domain or unreachable from the seeds stay at +inf.
    """
    seed_mask = _seed_mask_from(seeds, domain.shape)
    if not seed_mask.any():
        raise ValidationError("geodesic distance requires a nonempty seed set")
    if (seed_mask & ~domain).any():
        raise ValidationError("seeds must lie inside the domain")
    nx, ny, nz = domain.shape
    dx, dy, dz, dflat, dw = _neighborhood(connectivity, nx, ny)
    domain_flat = np.ascontiguousarray(domain.ravel(order="F"))
    seed_idx = np.flatnonzero(seed_mask.ravel(order="F"))
    dist = _kernels.geodesic_flood(domain_flat, seed_idx, nx, ny, nz, dx, dy, dz, dflat, dw)
    return DistanceMap(dist.reshape(domain.shape, order="F"), "geodesic", meta)


def canonical_relabel(labels: np.ndarray) -> np.ndarray:
    """Relabel positive ids to 1..K by first-voxel raster (x-fastest) order."""
    flat = labels.ravel(order="F")
    vals, first = np.unique(flat, return_index=True)
    keep = vals > 0
    vals = vals[keep]
    first = first[keep]
    new_of_val = np.empty(len(vals), dtype=np.int32)
    new_of_val[np.argsort(first, kind="stable")] = np.arange(1, len(vals) + 1, dtype=np.int32)
    out = np.zeros(labels.shape, dtype=np.int32)
    pos = labels > 0
    out[pos] = new_of_val[np.searchsorted(vals, labels[pos])]
    return out


def connected_components(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Label connected sets with 1..K in raster order of their first voxel."""
    if connectivity == 6:
        structure = _CROSS1
    elif connectivity == 26:
        structure = _FULL3
    else:
        raise ValidationError(f"connectivity must be 6 or 26, got {connectivity}")
    lab, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return lab.astype(np.int32)
    return canonical_relabel(lab)


def seeded_watershed(
    priority: Union[DistanceMap, np.ndarray],
    seeds: np.ndarray,
    domain: np.ndarray,
    connectivity: int = 26,
) -> np.ndarray:
    """Priority-flood from labeled seeds over the domain, ascending priority.

    Equal priorities are resolved by insertion order of a stable queue seeded
    in raster order, so results are reproducible. Domain voxels unreachable
    from every seed stay 0.
    """
    prio = priority.distances if isinstance(priority, DistanceMap) else np.asarray(priority)
    if prio.shape != domain.shape or seeds.shape != domain.shape:
        raise ValidationError("priority, seeds, and domain must share one shape")
    seed_pos = seeds > 0
    if not seed_pos.any():
        raise ValidationError("seeded watershed requires at least one seed")
    if (seed_pos & ~domain).any():
        raise ValidationError("seed labels must lie inside the domain")
    if not np.isfinite(prio[domain]).all():
        raise ValidationError("priority must be finite on the domain")
    nx, ny, nz = domain.shape
    dx, dy, dz, dflat, dw = _neighborhood(connectivity, nx, ny)
    labels_flat = np.ascontiguousarray(seeds.astype(np.int32).ravel(order="F"))
    _kernels.priority_flood(
        np.ascontiguousarray(prio.astype(np.float64, copy=False).ravel(order="F")),
        labels_flat,
        np.ascontiguousarray(domain.ravel(order="F")),
        nx, ny, nz, dx, dy, dz, dflat,
    )
    return labels_flat.reshape(domain.shape, order="F")
