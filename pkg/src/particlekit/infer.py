"""Memory-bounded chunk-patch sliding-window inference.

The volume is tiled twice: processing chunks bound memory, and within each
chunk overlapping patches feed the pluggable predictor. Per-voxel class
probabilities are averaged over every covering patch. Each chunk owns a
disjoint interior region but evaluates the full set of globally planned
patches that cover it, so a chunked run reproduces the monolithic run
voxel for voxel, no matter the predictor.
"""

from __future__ import annotations

import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union, runtime_checkable

import numpy as np
from scipy import ndimage

from .bordercore import BorderCoreConfig, decode_streaming, encode
from .exceptions import ContractViolationError, ValidationError
from .morph import ball
from .preprocess import GlobalStats, SizeNormSpec, _axis_coords_linear, _lerp_axis_at, scaled_shape
from .volume import BlockStore, LabelVolume, ScalarVolume, VolumeMeta

NUM_CLASSES = 3

DEFAULT_PATCH_SHAPE = (128, 128, 128)
DEFAULT_CHUNK_SHAPE = (384, 384, 384)
DEFAULT_OVERLAP_FRACTION = 0.5


@runtime_checkable
class PatchPredictor(Protocol):
    """Contract for patch-level class-probability predictors.

    ``predict`` receives a z-scored, size-normalized float32 patch plus the
    patch origin on the normalized grid (content-only predictors ignore it)
    and returns float32 probabilities of shape ``(3, *patch_shape)`` that are
    non-negative and sum to one per voxel. Predictions must be deterministic.
    """

    patch_shape: tuple[int, int, int]
    num_classes: int

    def predict(self, patch: np.ndarray, origin: tuple[int, int, int]) -> np.ndarray:
        ...


def _one_hot(classes: np.ndarray) -> np.ndarray:
    return np.stack([classes == c for c in range(NUM_CLASSES)]).astype(np.float32)


class OraclePredictor:
    """Test double emitting the one-hot border-core encoding of a reference.

    The reference labels live on the normalized grid; patches outside it are
    padded with background.
    """

    def __init__(self, reference: LabelVolume, cfg: BorderCoreConfig, patch_shape=DEFAULT_PATCH_SHAPE):
        self.patch_shape = tuple(int(p) for p in patch_shape)
        self.num_classes = NUM_CLASSES
        self._sem = encode(reference, cfg).classes

    def predict(self, patch: np.ndarray, origin) -> np.ndarray:
        lo = tuple(int(o) for o in origin)
        hi = tuple(o + p for o, p in zip(lo, self.patch_shape))
        clipped_hi = tuple(min(h, s) for h, s in zip(hi, self._sem.shape))
        out = np.zeros(self.patch_shape, dtype=np.uint8)
        if all(l < h for l, h in zip(lo, clipped_hi)):
            sl = tuple(slice(l, h) for l, h in zip(lo, clipped_hi))
            dst = tuple(slice(0, h - l) for l, h in zip(lo, clipped_hi))
            out[dst] = self._sem[sl]
        return _one_hot(out)


class ConstantPredictor:
    """Emits one fixed probability triple everywhere; handy in tests."""

    def __init__(self, probs=(1.0, 0.0, 0.0), patch_shape=DEFAULT_PATCH_SHAPE):
        self.patch_shape = tuple(int(p) for p in patch_shape)
        self.num_classes = NUM_CLASSES
        self._probs = np.asarray(probs, dtype=np.float32).reshape(3, 1, 1, 1)

    def predict(self, patch, origin) -> np.ndarray:
        return np.broadcast_to(self._probs, (3, *self.patch_shape)).copy()


class ThreshWaterPredictor:
    """Classical stand-in: threshold the patch, erode the mask into cores.

    The threshold applies to z-scored intensities. Output classes: eroded
    mask is core, the rest of the mask is border.
    """

    def __init__(self, threshold: float, erosion_radius: int = 3, patch_shape=DEFAULT_PATCH_SHAPE):
        if erosion_radius < 1:
            raise ValidationError("erosion radius must be >= 1")
        self.patch_shape = tuple(int(p) for p in patch_shape)
        self.num_classes = NUM_CLASSES
        self.threshold = float(threshold)
        self._footprint = ball(erosion_radius).footprint()

    def predict(self, patch, origin) -> np.ndarray:
        mask = patch >= self.threshold
        core = ndimage.binary_erosion(mask, structure=self._footprint, border_value=0)
        classes = np.zeros(patch.shape, dtype=np.uint8)
        classes[mask] = 2
        classes[core] = 1
        return _one_hot(classes)


# -- geometric planning -------------------------------------------------------


def _axis_origins(region: int, patch: int, stride: int) -> np.ndarray:
    if patch >= region:
        return np.array([0], dtype=np.int64)
    origins = list(range(0, region - patch + 1, stride))
    if origins[-1] != region - patch:
        origins.append(region - patch)
    return np.array(origins, dtype=np.int64)


@dataclass(frozen=True)
class PatchPlan:
    """Ordered patch origins covering a region; raster (x-fastest) order."""

    patch_shape: tuple[int, int, int]
    stride: tuple[int, int, int]
    positions: tuple[tuple[int, int, int], ...]


def plan_patches(region_shape, patch_shape, overlap_fraction: float) -> PatchPlan:
    """Plan overlapping patches: stride ``floor(patch * (1 - overlap))``.

    The final patch per axis is clamped so the region is fully covered.
    """
    region_shape = tuple(int(s) for s in region_shape)
    patch_shape = tuple(int(p) for p in patch_shape)
    if any(p < 1 for p in patch_shape):
        raise ValidationError("patch_shape entries must be positive")
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValidationError("overlap_fraction must lie in [0, 1)")
    stride = tuple(max(1, int(p * (1.0 - overlap_fraction))) for p in patch_shape)
    axes = [_axis_origins(region_shape[a], patch_shape[a], stride[a]) for a in range(3)]
    positions = tuple(
        (int(x), int(y), int(z)) for z in axes[2] for y in axes[1] for x in axes[0]
    )
    return PatchPlan(patch_shape, stride, positions)


@dataclass(frozen=True)
class ChunkPlan:
    """Chunk windows striding by (chunk - patch), overlapping by one patch.

    Each chunk owns a disjoint interior (overlap bands are split at their
    midpoints); interiors partition the volume.
    """

    volume_shape: tuple[int, int, int]
    chunk_shape: tuple[int, int, int]
    patch_shape: tuple[int, int, int]
    axis_origins: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]

    @property
    def origins(self) -> tuple[tuple[int, int, int], ...]:
        ax = self.axis_origins
        return tuple((int(x), int(y), int(z)) for z in ax[2] for y in ax[1] for x in ax[0])

    def axis_bounds(self, axis: int) -> list[tuple[int, int]]:
        origins = self.axis_origins[axis]
        length = self.volume_shape[axis]
        chunk = self.chunk_shape[axis]
        cuts = [0]
        for prev, nxt in zip(origins, origins[1:]):
            cuts.append((nxt + min(prev + chunk, length)) // 2)
        cuts.append(length)
        return list(zip(cuts[:-1], cuts[1:]))

    @property
    def interiors(self) -> tuple[tuple[tuple[int, int, int], tuple[int, int, int]], ...]:
        bounds = [self.axis_bounds(a) for a in range(3)]
        return tuple(
            ((bx[0], by[0], bz[0]), (bx[1], by[1], bz[1]))
            for bz in bounds[2]
            for by in bounds[1]
            for bx in bounds[0]
        )


def plan_chunks(volume_shape, chunk_shape, patch_shape) -> ChunkPlan:
    """Plan chunk windows; requires ``chunk_shape >= 2 * patch_shape``."""
    volume_shape = tuple(int(s) for s in volume_shape)
    chunk_shape = tuple(int(c) for c in chunk_shape)
    patch_shape = tuple(int(p) for p in patch_shape)
    for axis in range(3):
        if chunk_shape[axis] < 2 * patch_shape[axis]:
            raise ValidationError(
                f"chunk_shape must be at least twice patch_shape per axis "
                f"(axis {axis}: {chunk_shape[axis]} < 2*{patch_shape[axis]})"
            )
    axis_origins = []
    for axis in range(3):
        length = volume_shape[axis]
        chunk = chunk_shape[axis]
        stride = chunk - patch_shape[axis]
        if length <= chunk:
            axis_origins.append((0,))
            continue
        origins = []
        o = 0
        while o + chunk < length:
            origins.append(o)
            o += stride
        last = length - chunk
        if not origins or origins[-1] != last:
            origins.append(last)
        axis_origins.append(tuple(origins))
    return ChunkPlan(volume_shape, chunk_shape, patch_shape, tuple(axis_origins))


# -- patch accumulation -------------------------------------------------------


def infer_chunk(
    values: np.ndarray,
    predictor: PatchPredictor,
    origins: Sequence[tuple[int, int, int]],
    global_origin: tuple[int, int, int] = (0, 0, 0),
) -> np.ndarray:
    """Predict a chunk: average class probabilities over covering patches.

    ``origins`` are patch origins local to ``values`` in raster order;
    ``global_origin`` translates them for location-aware predictors. Voxels
    are argmaxed with ties resolved toward the higher class index.
    """
    p = tuple(predictor.patch_shape)
    if not origins:
        raise ValidationError("no patch origins supplied")
    need = tuple(max(o[a] + p[a] for o in origins) for a in range(3))
    pad = [(0, max(0, need[a] - values.shape[a])) for a in range(3)]
    padded = np.pad(values, pad) if any(hi for _, hi in pad) else values
    prob_sum = np.zeros((NUM_CLASSES, *padded.shape), dtype=np.float32)
    counts = np.zeros(padded.shape, dtype=np.uint16)
    for origin in origins:
        sl = tuple(slice(o, o + p[a]) for a, o in enumerate(origin))
        patch = np.ascontiguousarray(padded[sl])
        probs = np.asarray(
            predictor.predict(patch, tuple(global_origin[a] + origin[a] for a in range(3))),
            dtype=np.float32,
        )
        if probs.shape != (NUM_CLASSES, *p):
            raise ContractViolationError(
                f"predictor returned shape {probs.shape}, expected {(NUM_CLASSES, *p)}"
            )
        prob_sum[(slice(None),) + sl] += probs
        counts[sl] += 1
    mean = prob_sum / np.maximum(counts, 1)
    classes = (NUM_CLASSES - 1 - np.argmax(mean[::-1], axis=0)).astype(np.uint8)
    classes[counts == 0] = 0
    sl = tuple(slice(0, s) for s in values.shape)
    return classes[sl]


# -- full pipeline ------------------------------------------------------------


class _ArrayReader:
    def __init__(self, vol: ScalarVolume):
        self.shape = vol.meta.shape
        self.spacing_mm = vol.meta.spacing_mm
        self.origin_name = vol.meta.origin_name
        self._arr = vol.values

    def read(self, lo, hi) -> np.ndarray:
        return self._arr[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]


class _StoreReader:
    def __init__(self, store: BlockStore):
        if store.kind != "scalar":
            raise ValidationError(f"inference input must be a scalar store, got {store.kind!r}")
        self.shape = store.meta.shape
        self.spacing_mm = store.meta.spacing_mm
        self.origin_name = store.meta.origin_name
        self._store = store

    def read(self, lo, hi) -> np.ndarray:
        return self._store.read_window(lo, hi)


def _cell_grid(shape, width):
    counts = [max(1, -(-shape[a] // width[a])) for a in range(3)]
    cells = []
    for cz in range(counts[2]):
        for cy in range(counts[1]):
            for cx in range(counts[0]):
                lo = (cx * width[0], cy * width[1], cz * width[2])
                hi = tuple(min(l + w, s) for l, w, s in zip(lo, width, shape))
                cells.append((lo, hi))
    return cells


def run_inference(
    source: Union[ScalarVolume, BlockStore],
    predictor: PatchPredictor,
    cfg: BorderCoreConfig,
    size: SizeNormSpec,
    stats: GlobalStats,
    scratch: Union[str, Path],
    overlap_fraction: float = DEFAULT_OVERLAP_FRACTION,
    chunk_shape=DEFAULT_CHUNK_SHAPE,
    workers: int = 1,
    out_root: Optional[Union[str, Path]] = None,
    keep_scratch: bool = False,
) -> Union[LabelVolume, BlockStore]:
    """Full pipeline: z-score, on-the-fly size normalization, chunked patch
    prediction, streaming decode, and resampling back to the original grid.

    Peak memory is bounded by one chunk window plus halos regardless of the
    total volume size. With a ``BlockStore`` source the result is written as
    a label store under ``out_root`` (required); an in-memory source returns
    a ``LabelVolume``.
    """
    reader = _StoreReader(source) if isinstance(source, BlockStore) else _ArrayReader(source)
    if isinstance(source, BlockStore) and out_root is None:
        raise ValidationError("out_root is required for block-store inference")
    patch = tuple(predictor.patch_shape)
    chunk_shape = tuple(int(c) for c in chunk_shape)
    for axis in range(3):
        if chunk_shape[axis] < 2 * patch[axis]:
            raise ValidationError("chunk_shape must be at least twice patch_shape per axis")
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValidationError("overlap_fraction must lie in [0, 1)")

    scratch = Path(scratch)
    scratch.mkdir(parents=True, exist_ok=True)
    orig_shape = reader.shape
    norm_shape = scaled_shape(orig_shape, size.scale)
    stride = tuple(max(1, int(p * (1.0 - overlap_fraction))) for p in patch)
    axis_origins = [_axis_origins(norm_shape[a], patch[a], stride[a]) for a in range(3)]
    axis_src = [_axis_coords_linear(norm_shape[a], orig_shape[a]) for a in range(3)]

    cell_width = tuple(max(1, c - p) for c, p in zip(chunk_shape, patch))
    norm_spacing = tuple(s / size.scale for s in reader.spacing_mm)
    sem_meta = VolumeMeta(norm_shape, norm_spacing, "u8", reader.origin_name)
    sem_store = BlockStore.create(scratch / "semantic", sem_meta, "semantic", cell_width)
    cells = _cell_grid(norm_shape, cell_width)
    mu, sigma = np.float32(stats.mu), np.float32(stats.sigma)

    def covering(axis: int, lo: int, hi: int) -> np.ndarray:
        origins = axis_origins[axis]
        keep = (origins > lo - patch[axis]) & (origins < hi)
        return origins[keep]

    def process_cell(box):
        lo, hi = box
        cov = [covering(a, lo[a], hi[a]) for a in range(3)]
        win_lo = tuple(int(c[0]) for c in cov)
        win_hi = tuple(min(int(c[-1]) + patch[a], norm_shape[a]) for a, c in enumerate(cov))
        values = _normalized_window(reader, axis_src, win_lo, win_hi, mu, sigma)
        local = tuple(
            (int(x - win_lo[0]), int(y - win_lo[1]), int(z - win_lo[2]))
            for z in cov[2]
            for y in cov[1]
            for x in cov[0]
        )
        sem = infer_chunk(values, predictor, local, global_origin=win_lo)
        cell = tuple(l // w for l, w in zip(lo, cell_width))
        sem_store.write_cell(cell, sem[tuple(slice(a - o, b - o) for a, b, o in zip(lo, hi, win_lo))])

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        list(pool.map(process_cell, cells))

    labels_norm = decode_streaming(sem_store, cfg, scratch / "labels_norm", workers=workers)

    out_target = Path(out_root) if out_root is not None else scratch / "labels"
    out_store = _denormalize_labels_streaming(labels_norm, orig_shape, reader.spacing_mm, out_target, cell_width)

    result: Union[LabelVolume, BlockStore]
    if isinstance(source, BlockStore):
        result = out_store
    else:
        arr = out_store.read_full()
        result = LabelVolume(out_store.meta, arr)
    if not keep_scratch:
        shutil.rmtree(scratch / "semantic", ignore_errors=True)
        shutil.rmtree(scratch / "labels_norm", ignore_errors=True)
        if out_root is None:
            shutil.rmtree(scratch / "labels", ignore_errors=True)
    return result


def _normalized_window(reader, axis_src, lo, hi, mu, sigma) -> np.ndarray:
    """Read the source window feeding normalized voxels [lo, hi) and resample."""
    coords = [axis_src[a][lo[a]:hi[a]] for a in range(3)]
    src_lo = tuple(int(np.floor(c[0])) for c in coords)
    src_hi = tuple(
        min(reader.shape[a], int(np.floor(c[-1])) + 2) for a, c in enumerate(coords)
    )
    raw = reader.read(src_lo, src_hi)
    values = (raw.astype(np.float32) - mu) / sigma
    for axis in range(3):
        values = _lerp_axis_at(values, coords[axis] - src_lo[axis], axis)
    return values


def _denormalize_labels_streaming(labels_norm: BlockStore, orig_shape, spacing_mm, out_root, cell_width) -> BlockStore:
    norm_shape = labels_norm.meta.shape
    out_meta = VolumeMeta(tuple(orig_shape), tuple(spacing_mm), "u32", labels_norm.meta.origin_name)
    out = BlockStore.create(out_root, out_meta, "labels", cell_width)
    nn_idx = []
    for axis in range(3):
        src = _axis_coords_linear(orig_shape[axis], norm_shape[axis])
        nn_idx.append(np.clip(np.round(src).astype(np.intp), 0, norm_shape[axis] - 1))
    for cell in out.cells():
        lo, hi = out.cell_box(cell)
        idx = [nn_idx[a][lo[a]:hi[a]] for a in range(3)]
        wlo = tuple(int(i.min()) for i in idx)
        whi = tuple(int(i.max()) + 1 for i in idx)
        window = labels_norm.read_window(wlo, whi)
        local = [i - w for i, w in zip(idx, wlo)]
        out.write_cell(cell, window[np.ix_(*local)])
    return out
