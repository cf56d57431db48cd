"""Touching-particle augmentation and training-pair export.

The augmentation copies a particle from a bank of training particles next to
a particle in the current patch so that their surfaces become face-adjacent
without overlapping, teaching a downstream model to keep touching particles
apart. Export writes normalized intensity/border-core target pairs for
external trainers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .bordercore import BorderCoreConfig, encode
from .exceptions import ValidationError
from .preprocess import (
    GlobalStats,
    SizeNormSpec,
    resample_labels_nearest,
    size_normalize,
    zscore_normalize,
)
from .volume import LabelVolume, ScalarVolume, VolumeMeta, write_blockstore

_DIRECTION_RETRIES = 20


@dataclass(frozen=True)
class BankEntry:
    """One particle: its tight intensity crop and binary mask."""

    intensity: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class ParticleBank:
    entries: tuple[BankEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)


def build_bank(vols: Sequence[ScalarVolume], labels: Sequence[LabelVolume]) -> ParticleBank:
    """Extract every instance of every volume as a bank entry.

    Entries are ordered by (volume index, instance id); crops are tight
    bounding boxes.
    """
    if len(vols) != len(labels):
        raise ValidationError("volumes and labels must be paired")
    entries = []
    for vol, lab in zip(vols, labels):
        if vol.meta.shape != lab.meta.shape:
            raise ValidationError("volume/label shape mismatch")
        arr = lab.labels
        max_id = int(arr.max(initial=0))
        if max_id == 0:
            continue
        for idx, sl in enumerate(ndimage.find_objects(arr, max_label=max_id), start=1):
            if sl is None:
                continue
            mask = arr[sl] == idx
            entries.append(BankEntry(vol.values[sl].copy(), mask))
    return ParticleBank(tuple(entries))


def _face_adjacent(mask_a: np.ndarray, corner_a, mask_b: np.ndarray, corner_b) -> bool:
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


def touching_augment(
    patch_vol: ScalarVolume,
    patch_labels: LabelVolume,
    bank: ParticleBank,
    probability: float,
    rng_seed: int,
) -> tuple[ScalarVolume, LabelVolume]:
    """With the given probability, paste a bank particle against a patch
    particle so their surfaces touch face-on with zero overlap.

    Existing intensities and labels are never modified; the pasted particle
    receives a fresh label. If no collision-free touching placement is found
    after a bounded number of direction retries, or the patch has no
    particles, the input is returned unchanged (as copies).
    """
    if not 0.0 <= probability <= 1.0:
        raise ValidationError("probability must lie in [0, 1]")
    values = patch_vol.values.copy()
    labels = patch_labels.labels.copy()
    out = (
        ScalarVolume(patch_vol.meta, values),
        LabelVolume(patch_labels.meta, labels),
    )
    rng = np.random.default_rng(rng_seed)
    if rng.random() >= probability or len(bank) == 0:
        return out
    ids = np.unique(labels)
    ids = ids[ids > 0]
    if ids.size == 0:
        return out

    target_id = int(ids[rng.integers(ids.size)])
    entry = bank.entries[int(rng.integers(len(bank)))]
    target_sl = ndimage.find_objects(labels == target_id, max_label=1)[0]
    corner_a = tuple(s.start for s in target_sl)
    mask_a = labels[target_sl] == target_id
    center_a = np.array([c + e / 2.0 for c, e in zip(corner_a, mask_a.shape)])
    shape = labels.shape
    mask_b = entry.mask

    for _ in range(_DIRECTION_RETRIES):
        direction = rng.normal(size=3)
        norm = float(np.linalg.norm(direction))
        if norm < 1e-9:
            continue
        direction /= norm
        placed = _walk_ray(labels, mask_a, corner_a, mask_b, center_a, direction, shape)
        if placed is None:
            continue
        sl = tuple(slice(c, c + e) for c, e in zip(placed, mask_b.shape))
        values[sl][mask_b] = entry.intensity[mask_b]
        labels[sl][mask_b] = labels.max() + 1
        return out
    return out


def _walk_ray(labels, mask_a, corner_a, mask_b, center_a, direction, shape):
    """March B outward along the ray until it touches A without overlap."""
    half_b = np.array(mask_b.shape) / 2.0
    diag = float(np.linalg.norm(np.array(mask_a.shape) + np.array(mask_b.shape)))
    was_overlapping = False
    for t in np.arange(0.0, diag + 1.0, 0.5):
        corner = tuple(int(round(c)) for c in (center_a + t * direction - half_b))
        if any(c < 0 or c + e > s for c, e, s in zip(corner, mask_b.shape, shape)):
            continue
        sl = tuple(slice(c, c + e) for c, e in zip(corner, mask_b.shape))
        overlap = (labels[sl][mask_b] > 0).any()
        if overlap:
            was_overlapping = True
            continue
        if _face_adjacent(mask_a, corner_a, mask_b, corner):
            return corner
        if was_overlapping:
            return None  # jumped from overlap straight past contact
    return None


def export_training_pairs(
    vols: Sequence[ScalarVolume],
    labels: Sequence[LabelVolume],
    cfg: BorderCoreConfig,
    size: SizeNormSpec,
    stats: GlobalStats,
    out: Path,
) -> Path:
    """Write normalized intensity patches and border-core targets.

    Each pair becomes two block stores plus one manifest entry; the manifest
    records the preprocessing configuration for the external trainer.
    """
    if len(vols) != len(labels):
        raise ValidationError("volumes and labels must be paired")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, (vol, lab) in enumerate(zip(vols, labels)):
        if vol.meta.shape != lab.meta.shape:
            raise ValidationError(f"pair {i}: volume/label shape mismatch")
        norm = size_normalize(zscore_normalize(vol, stats), size)
        lab_arr = resample_labels_nearest(lab.labels, norm.meta.shape)
        lab_norm = LabelVolume(
            VolumeMeta(norm.meta.shape, norm.meta.spacing_mm, "u32", lab.meta.origin_name),
            lab_arr.astype(np.int32, copy=False),
        )
        target = encode(lab_norm, cfg)
        image_dir = f"image_{i:03d}"
        target_dir = f"target_{i:03d}"
        write_blockstore(norm, out / image_dir, norm.meta.shape)
        write_blockstore(target, out / target_dir, target.meta.shape)
        pairs.append({"image": image_dir, "target": target_dir})
    manifest = {
        "pairs": pairs,
        "border_core": {
            "border_thickness_vox": cfg.border_thickness_vox,
            "filter_min_distance": cfg.filter_min_distance,
            "filter_threshold": cfg.filter_threshold,
        },
        "size": {
            "reference_particle_size_vox": size.reference_particle_size_vox,
            "target_particle_size_vox": size.target_particle_size_vox,
        },
        "stats": {"mu": stats.mu, "sigma": stats.sigma},
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest_path
