"""Synthetic particle phantoms with exact ground truth.

Phantoms mimic resin-embedded particle samples: convex particles (spheres,
ellipsoids, superellipsoids) spaced at least two voxels apart, an optional
fraction placed as exactly face-adjacent touching pairs, Gaussian intensity
noise per region, and optional bright streak artifacts through particles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .exceptions import CapacityError, ValidationError
from .volume import LabelVolume, ScalarVolume, VolumeMeta

_PLACEMENT_RETRIES = 1000
_FULL3 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int]
    particle_count: int
    radius_range_vox: tuple[float, float] = (4.0, 9.0)
    shape_kinds: tuple[str, ...] = ("sphere", "ellipsoid", "superellipsoid")
    touching_pair_fraction: float = 0.0
    intensity_fg: tuple[float, float] = (1.0, 0.05)
    intensity_bg: tuple[float, float] = (0.0, 0.05)
    streak_artifact_count: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        rmin, rmax = self.radius_range_vox
        if rmin < 2:
            raise ValidationError("minimum particle radius is 2 voxels")
        if rmax < rmin or rmax >= min(self.shape) / 2:
            raise ValidationError("maximum radius must fit inside half the volume")
        if not 0.0 <= self.touching_pair_fraction <= 1.0:
            raise ValidationError("touching_pair_fraction must lie in [0, 1]")
        unknown = set(self.shape_kinds) - {"sphere", "ellipsoid", "superellipsoid"}
        if unknown:
            raise ValidationError(f"unknown shape kinds: {sorted(unknown)}")
        if not self.shape_kinds:
            raise ValidationError("at least one shape kind is required")
        if self.particle_count < 0 or self.streak_artifact_count < 0:
            raise ValidationError("counts must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        kwargs = dict(d)
        for key in ("shape", "radius_range_vox", "shape_kinds", "intensity_fg", "intensity_bg"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class InstanceStats:
    id: int
    voxels: int
    eq_diameter_vox: float
    bb_lo: tuple[int, int, int]
    bb_hi: tuple[int, int, int]


def _rasterize(kind: str, rng: np.random.Generator, rmin: float, rmax: float) -> np.ndarray:
    if kind == "sphere":
        r = rng.uniform(rmin, rmax)
        semi = np.array([r, r, r])
        exponent = 2.0
    elif kind == "ellipsoid":
        semi = rng.uniform(rmin, rmax, size=3)
        exponent = 2.0
    else:  # superellipsoid: boxier bodies mimic angular crushed particles
        semi = rng.uniform(rmin, rmax, size=3)
        exponent = rng.uniform(2.0, 4.0)
    half = np.ceil(semi).astype(int)
    grids = np.mgrid[-half[0]:half[0] + 1, -half[1]:half[1] + 1, -half[2]:half[2] + 1]
    acc = np.zeros(grids.shape[1:], dtype=np.float64)
    for axis in range(3):
        acc += np.abs(grids[axis] / semi[axis]) ** exponent
    mask = acc <= 1.0
    nz = np.nonzero(mask)
    lo = [int(c.min()) for c in nz]
    hi = [int(c.max()) + 1 for c in nz]
    return mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]


def _inside(corner, extent, shape) -> bool:
    return all(1 <= c and c + e <= s - 1 for c, e, s in zip(corner, extent, shape))


def _clear_placement(labels, mask, corner, touch_id=0) -> bool:
    """True if the placed mask overlaps nothing and keeps a >=2 voxel gap.

    Voxels of ``touch_id`` are exempt from the gap rule (but still from the
    overlap rule), which lets a touching-pair partner meet its mate.
    """
    lo = tuple(c - 1 for c in corner)
    hi = tuple(c + e + 1 for c, e in zip(corner, mask.shape))
    window = labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    inner = (slice(1, -1),) * 3
    if (window[inner][mask] > 0).any():
        return False
    others = window > 0
    if touch_id:
        others &= window != touch_id
    if not others.any():
        return True
    grown = ndimage.binary_dilation(others, structure=_FULL3)
    return not (grown[inner] & mask).any()


def _masks_touch(labels, mask_a, corner_a, mask_b, corner_b) -> bool:
    """Face adjacency between the two placed masks."""
    for axis in range(3):
        for sign in (-1, 1):
            lo_b = [c + (sign if a == axis else 0) for a, c in enumerate(corner_b)]
            ilo = [max(l, c) for l, c in zip(lo_b, corner_a)]
            ihi = [
                min(l + e, c + f)
                for l, e, c, f in zip(lo_b, mask_b.shape, corner_a, mask_a.shape)
            ]
            if any(l >= h for l, h in zip(ilo, ihi)):
                continue
            b_sl = tuple(slice(l - o, h - o) for l, h, o in zip(ilo, ihi, lo_b))
            a_sl = tuple(slice(l - o, h - o) for l, h, o in zip(ilo, ihi, corner_a))
            if (mask_b[b_sl] & mask_a[a_sl]).any():
                return True
    return False


def _place_touching(labels, mask_a, corner_a, mask_b, rng, shape) -> Optional[tuple]:
    """Find a corner for B that is face-adjacent to A with zero overlap."""
    jitters = sorted(
        ((da, db) for da in (-2, -1, 0, 1, 2) for db in (-2, -1, 0, 1, 2)),
        key=lambda j: (abs(j[0]) + abs(j[1]), j),
    )
    for code in rng.permutation(6):
        axis, parity = divmod(int(code), 2)
        sign = 1 if parity == 0 else -1
        other = [a for a in range(3) if a != axis]
        for da, db in jitters:
            base = list(corner_a)
            base[other[0]] += (mask_a.shape[other[0]] - mask_b.shape[other[0]]) // 2 + da
            base[other[1]] += (mask_a.shape[other[1]] - mask_b.shape[other[1]]) // 2 + db
            for step in range(mask_a.shape[axis] + mask_b.shape[axis] + 1):
                corner = list(base)
                if sign > 0:
                    corner[axis] = corner_a[axis] + mask_a.shape[axis] - mask_b.shape[axis] + step
                else:
                    corner[axis] = corner_a[axis] - step
                corner = tuple(corner)
                if not _inside(corner, mask_b.shape, shape):
                    continue
                sl = tuple(slice(c, c + e) for c, e in zip(corner, mask_b.shape))
                if (labels[sl][mask_b] > 0).any():
                    continue
                if not _masks_touch(labels, mask_a, corner_a, mask_b, corner):
                    break  # walked past the contact point on this ray
                if _clear_placement(labels, mask_b, corner, touch_id=_label_at(labels, mask_a, corner_a)):
                    return corner
    return None


def _label_at(labels, mask, corner) -> int:
    nz = np.nonzero(mask)
    return int(labels[corner[0] + nz[0][0], corner[1] + nz[1][0], corner[2] + nz[2][0]])


def generate(spec: PhantomSpec) -> tuple[ScalarVolume, LabelVolume]:
    """Rasterize a phantom; labels are exact ground truth for the intensities."""
    rng = np.random.default_rng(spec.rng_seed)
    shape = spec.shape
    labels = np.zeros(shape, dtype=np.int32)
    rmin, rmax = spec.radius_range_vox
    kinds = list(spec.shape_kinds)
    centroids = []
    next_id = 1
    placed = 0

    def place_single(mask):
        for _ in range(_PLACEMENT_RETRIES):
            hi_corner = [s - e - 1 for s, e in zip(shape, mask.shape)]
            if any(h < 1 for h in hi_corner):
                break
            corner = tuple(int(rng.integers(1, h + 1)) for h in hi_corner)
            if _clear_placement(labels, mask, corner):
                return corner
        return None

    def paint(mask, corner):
        nonlocal next_id
        sl = tuple(slice(c, c + e) for c, e in zip(corner, mask.shape))
        labels[sl][mask] = next_id
        centroids.append(tuple(c + e / 2.0 for c, e in zip(corner, mask.shape)))
        next_id += 1

    pair_particles = int(round(spec.particle_count * spec.touching_pair_fraction))
    for _ in range(pair_particles // 2):
        mask_a = _rasterize(kinds[rng.integers(len(kinds))], rng, rmin, rmax)
        corner_a = place_single(mask_a)
        if corner_a is None:
            raise CapacityError("phantom placement failed; use fewer or smaller particles")
        paint(mask_a, corner_a)
        mask_b = _rasterize(kinds[rng.integers(len(kinds))], rng, rmin, rmax)
        corner_b = _place_touching(labels, mask_a, corner_a, mask_b, rng, shape)
        if corner_b is None:
            raise CapacityError("touching-pair placement failed; use fewer or smaller particles")
        paint(mask_b, corner_b)
        placed += 2

    while placed < spec.particle_count:
        mask = _rasterize(kinds[rng.integers(len(kinds))], rng, rmin, rmax)
        corner = place_single(mask)
        if corner is None:
            raise CapacityError("phantom placement failed; use fewer or smaller particles")
        paint(mask, corner)
        placed += 1

    fg_mean, fg_std = spec.intensity_fg
    bg_mean, bg_std = spec.intensity_bg
    values = rng.normal(bg_mean, bg_std, size=shape).astype(np.float32)
    fg = labels > 0
    values[fg] = rng.normal(fg_mean, fg_std, size=int(fg.sum())).astype(np.float32)

    for _ in range(spec.streak_artifact_count):
        if not centroids:
            break
        center = np.array(centroids[rng.integers(len(centroids))])
        direction = rng.normal(size=3)
        direction /= max(float(np.linalg.norm(direction)), 1e-9)
        _paint_streak(values, center, direction, fg_mean - bg_mean)

    meta = VolumeMeta(shape, (1.0, 1.0, 1.0), "f32", "phantom")
    return ScalarVolume(meta, values), LabelVolume(
        VolumeMeta(shape, (1.0, 1.0, 1.0), "u32", "phantom"), labels
    )


def _paint_streak(values, center, direction, amplitude):
    shape = values.shape
    diag = math.sqrt(sum(s * s for s in shape))
    marked = np.zeros(shape, dtype=bool)
    t = -diag
    while t <= diag:
        p = np.round(center + t * direction).astype(int)
        if all(0 <= p[a] < shape[a] for a in range(3)):
            lo = np.maximum(p - 1, 0)
            hi = np.minimum(p + 2, shape)
            sub = np.mgrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
            dist2 = sum((sub[a] - p[a]) ** 2 for a in range(3))
            marked[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= dist2 <= 1
        t += 0.5
    values[marked] += np.float32(amplitude)


def measure(labels: LabelVolume) -> list[InstanceStats]:
    """Per-instance voxel counts, equivalent diameters, and bounding boxes."""
    arr = labels.labels
    ids = np.unique(arr)
    ids = ids[ids > 0]
    rows = []
    max_id = int(ids.max()) if ids.size else 0
    slices = ndimage.find_objects(arr, max_label=max_id) if max_id else []
    for pid in ids:
        sl = slices[int(pid) - 1]
        sub = arr[sl] == pid
        count = int(sub.sum())
        eq_d = 2.0 * (3.0 * count / (4.0 * math.pi)) ** (1.0 / 3.0)
        where = np.nonzero(sub)
        lo = tuple(int(c.min()) + s.start for c, s in zip(where, sl))
        hi = tuple(int(c.max()) + 1 + s.start for c, s in zip(where, sl))
        rows.append(InstanceStats(int(pid), count, eq_d, lo, hi))
    return rows
