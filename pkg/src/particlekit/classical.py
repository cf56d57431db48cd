"""Classical baseline segmentation and interactive particle splitting.

``threshwater`` is the standard threshold + opening + erosion-seeded
watershed pipeline that instance-segments by intensity alone; it needs a
manually tuned threshold per image. ``split_particle`` separates fused
particles from user-supplied markers and a drawn border surface using
geodesic distances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .morph import (
    ball,
    connected_components,
    distance_to_set,
    erode,
    geodesic_distance,
    opening,
    seeded_watershed,
)
from .volume import LabelVolume, ScalarVolume, VolumeMeta


@dataclass(frozen=True)
class ThreshWaterParams:
    """Per-image threshold plus the two morphology radii."""

    threshold: float
    opening_radius: int = 1
    seed_erosion_radius: int = 3

    def __post_init__(self):
        if self.opening_radius < 1 or self.seed_erosion_radius < 1:
            raise ValidationError("morphology radii must be >= 1")


def threshwater(vol: ScalarVolume, p: ThreshWaterParams) -> LabelVolume:
    """Threshold, open, erode into seeds, and watershed-split the mask.

    The watershed priority is the negated distance to background, so particle
    interiors flood first. Voxels removed by the opening stay unlabeled.
    """
    mask = vol.values >= p.threshold
    mask = opening(mask, ball(p.opening_radius))
    meta = VolumeMeta(vol.meta.shape, vol.meta.spacing_mm, "u32", vol.meta.origin_name)
    if not mask.any():
        return LabelVolume(meta, np.zeros(vol.meta.shape, dtype=np.int32))
    seeds = connected_components(erode(mask, ball(p.seed_erosion_radius)), 26)
    if seeds.max() == 0:
        return LabelVolume(meta, np.zeros(vol.meta.shape, dtype=np.int32))
    depth = distance_to_set(~mask)
    if np.isinf(depth).any():  # mask covers the whole volume
        priority = np.zeros(vol.meta.shape)
    else:
        priority = -depth
    labels = seeded_watershed(priority, seeds, mask, connectivity=26)
    return LabelVolume(meta, labels)


@dataclass(frozen=True)
class SplitRequest:
    """Markers and a drawn border surface inside one target instance."""

    target_label: int
    markers: tuple[tuple[int, int, int], ...]
    border_voxels: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "markers", tuple(tuple(int(v) for v in m) for m in self.markers))
        object.__setattr__(
            self, "border_voxels", tuple(tuple(int(v) for v in b) for b in self.border_voxels)
        )
        if self.target_label <= 0:
            raise ValidationError("target label must be a positive instance id")
        if len(self.markers) < 2:
            raise ValidationError("a split needs at least two markers")
        if not self.border_voxels:
            raise ValidationError("a split needs a nonempty border surface")


def _coords_mask(coords, shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    arr = np.asarray(coords, dtype=np.intp)
    if (arr < 0).any() or (arr >= np.asarray(shape)).any():
        raise ValidationError("coordinate outside the volume")
    mask[arr[:, 0], arr[:, 1], arr[:, 2]] = True
    return mask


def split_particle(labels: LabelVolume, req: SplitRequest) -> LabelVolume:
    """Split one instance into one new instance per marker.

    Within the target mask minus the border, the geodesic distance to the
    border is flooded (farthest first) from the markers; border voxels and
    any flood-unreachable crumbs are then attached to the nearest marker by
    geodesic distance. The new labels partition the original mask exactly.
    """
    arr = labels.labels
    target = arr == req.target_label
    if not target.any():
        raise ValidationError(f"label {req.target_label} not present")
    marker_mask = _coords_mask(req.markers, arr.shape)
    if (marker_mask & ~target).any():
        raise ValidationError("marker outside the target instance")
    border_mask = _coords_mask(req.border_voxels, arr.shape)
    if (border_mask & ~target).any():
        raise ValidationError("border voxel outside the target instance")
    if (marker_mask & border_mask).any():
        raise ValidationError("markers may not lie on the border surface")

    interior = target & ~border_mask
    comps = connected_components(interior, 26)
    comp_at = [int(comps[m]) for m in req.markers]
    seen: dict[int, int] = {}
    for i, comp in enumerate(comp_at):
        if comp in seen:
            raise ValidationError(
                f"markers {req.markers[seen[comp]]} and {req.markers[i]} are not separated by the border"
            )
        seen[comp] = i

    to_border = geodesic_distance(target, border_mask, connectivity=26).distances
    priority = np.where(np.isfinite(to_border), -to_border, 0.0)
    seeds = np.zeros(arr.shape, dtype=np.int32)
    for i, m in enumerate(req.markers, start=1):
        seeds[m] = i
    basins = seeded_watershed(priority, seeds, interior, connectivity=26)

    # border voxels and unreachable crumbs go to the geodesically nearest
    # marker; argmin ties resolve to the lowest marker index
    assignment = basins
    unassigned = target & (basins == 0)
    if unassigned.any():
        per_marker = np.stack(
            [
                geodesic_distance(target, np.asarray([m], dtype=np.intp), connectivity=26).distances
                for m in req.markers
            ]
        )
        nearest = np.argmin(per_marker, axis=0).astype(np.int32) + 1
        assignment = basins.copy()
        assignment[unassigned] = nearest[unassigned]

    out = arr.copy()
    base = int(arr.max())
    out[target] = base + assignment[target]
    meta = VolumeMeta(labels.meta.shape, labels.meta.spacing_mm, "u32", labels.meta.origin_name)
    return LabelVolume(meta, out)
