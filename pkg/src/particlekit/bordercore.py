"""Conversion between instance labels and the border-core representation.

Encoding erodes every instance independently: what survives is the core,
the eroded-away remainder is the border. Cores of distinct instances are
never 26-connected, which is what lets a semantic prediction be decoded
back into instances. Decoding filters implausibly thin cores, labels core
components, and grows them back over the border with a distance-priority
watershed.
"""

from __future__ import annotations

import shutil
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import ValidationError
from .morph import ball, connected_components, distance_to_set, seeded_watershed
from .volume import BlockStore, LabelVolume, SemanticVolume, VolumeMeta

BACKGROUND, CORE, BORDER = 0, 1, 2

DEFAULT_BORDER_THICKNESS_VOX = 3


@dataclass(frozen=True)
class BorderCoreConfig:
    """Erosion width and the small-core removal filter parameters.

    The filter defaults (minimum distance 1, threshold 0.95) remove cores of
    particles thinner than the erosion can support.
    """

    border_thickness_vox: int = DEFAULT_BORDER_THICKNESS_VOX
    filter_min_distance: float = 1.0
    filter_threshold: float = 0.95

    def __post_init__(self):
        if self.border_thickness_vox < 1:
            raise ValidationError("border thickness must be a positive integer")
        if self.filter_min_distance < 0:
            raise ValidationError("filter minimum distance must be >= 0")
        if not 0.0 <= self.filter_threshold <= 1.0:
            raise ValidationError("filter threshold must lie in [0, 1]")


def _demote_touching_cores(sem: np.ndarray, labels: np.ndarray) -> None:
    # With thickness 1, cores of diagonally touching instances can still end
    # up 26-adjacent; demote those voxels to border to keep the guarantee.
    core_id = np.where(sem == CORE, labels, 0)
    conflict = np.zeros(sem.shape, dtype=bool)
    offsets = [
        (ox, oy, oz)
        for oz in (0, 1)
        for oy in (-1, 0, 1)
        for ox in (-1, 0, 1)
        if (oz, oy, ox) > (0, 0, 0)
    ]
    for off in offsets:
        src = tuple(slice(max(o, 0), s + min(o, 0)) for o, s in zip(off, sem.shape))
        dst = tuple(slice(max(-o, 0), s + min(-o, 0)) for o, s in zip(off, sem.shape))
        a = core_id[src]
        b = core_id[dst]
        bad = (a > 0) & (b > 0) & (a != b)
        if bad.any():
            conflict[src] |= bad
            conflict[dst] |= bad
    sem[conflict] = BORDER


def encode(instances: LabelVolume, cfg: BorderCoreConfig) -> SemanticVolume:
    """Map an instance segmentation to background/core/border classes."""
    labels = instances.labels
    sem = np.zeros(labels.shape, dtype=np.uint8)
    sem[labels > 0] = BORDER
    max_id = int(labels.max(initial=0))
    if max_id > 0:
        footprint = ball(cfg.border_thickness_vox).footprint()
        for idx, sl in enumerate(ndimage.find_objects(labels, max_label=max_id), start=1):
            if sl is None:
                continue
            instance = labels[sl] == idx
            core = ndimage.binary_erosion(instance, structure=footprint, border_value=0)
            sem[sl][core] = CORE
        if cfg.border_thickness_vox < 2:
            _demote_touching_cores(sem, labels)
    meta = VolumeMeta(instances.meta.shape, instances.meta.spacing_mm, "u8", instances.meta.origin_name)
    return SemanticVolume(meta, sem)


def _near_surface(core: np.ndarray, min_distance: float) -> np.ndarray:
    # A core voxel counts as near-surface when its Euclidean distance to the
    # nearest non-core voxel does not exceed the minimum distance; at the
    # default of 1 that is exactly face-adjacency to non-core.
    if core.all():
        return np.zeros(core.shape, dtype=bool)
    return core & (ndimage.distance_transform_edt(core) <= min_distance)


def small_core_filter(sem: SemanticVolume, cfg: BorderCoreConfig) -> SemanticVolume:
    """Reclassify cores that hug their own surface too tightly as border.

    For every connected core component the fraction of near-surface voxels
    is measured; components exceeding ``filter_threshold`` are demoted to
    border. With the defaults, single-voxel cores and plates up to two
    voxels thick are removed while solid cores survive.
    """
    core = sem.classes == CORE
    if not core.any():
        return SemanticVolume(sem.meta, sem.classes.copy())
    comps = connected_components(core, 26)
    near = _near_surface(core, cfg.filter_min_distance)
    vals = comps[core]
    totals = np.bincount(vals)
    nears = np.bincount(vals[near[core]], minlength=totals.size)
    remove = np.flatnonzero((totals > 0) & (nears > cfg.filter_threshold * totals))
    out = sem.classes.copy()
    if remove.size:
        out[np.isin(comps, remove)] = BORDER
    return SemanticVolume(sem.meta, out)


def decode(sem: SemanticVolume, cfg: BorderCoreConfig) -> LabelVolume:
    """Recover instances from a border-core map.

    Filtered core components become seeds; border voxels are claimed by the
    watershed in order of Euclidean distance to the nearest core. Border
    regions unreachable from any core become background.
    """
    filtered = small_core_filter(sem, cfg)
    core = filtered.classes == CORE
    meta = VolumeMeta(sem.meta.shape, sem.meta.spacing_mm, "u32", sem.meta.origin_name)
    if not core.any():
        return LabelVolume(meta, np.zeros(sem.meta.shape, dtype=np.int32))
    seeds = connected_components(core, 26)
    domain = filtered.classes != BACKGROUND
    labels = seeded_watershed(distance_to_set(core), seeds, domain, connectivity=26)
    return LabelVolume(meta, labels)


# -- streaming decode ---------------------------------------------------------


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def add(self, a) -> None:
        if a not in self.parent:
            self.parent[a] = a

    def find(self, a):
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b) -> None:
        self.add(a)
        self.add(b)
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller key wins so the final id order is input-stable
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def _expand_box(lo, hi, halo, shape):
    elo = tuple(max(0, l - halo) for l in lo)
    ehi = tuple(min(s, h + halo) for s, h in zip(shape, hi))
    return elo, ehi


def _box_slices(lo, hi, origin):
    return tuple(slice(l - o, h - o) for l, h, o in zip(lo, hi, origin))


class _StreamingDecoder:
    """Shared state for the chunked decode passes."""

    def __init__(self, store: BlockStore, cfg: BorderCoreConfig, out_root, workers: int, scratch_root):
        self.store = store
        self.cfg = cfg
        self.workers = max(1, workers)
        self.shape = store.meta.shape
        out_meta = VolumeMeta(self.shape, store.meta.spacing_mm, "u32", store.meta.origin_name)
        self.out = BlockStore.create(out_root, out_meta, "labels", store.chunk_shape)
        if scratch_root is None:
            scratch_root = Path(out_root).parent / (Path(out_root).name + ".cores-tmp")
        self.scratch_root = Path(scratch_root)
        self.cores = BlockStore.create(self.scratch_root, out_meta, "labels", store.chunk_shape)
        self.cells = list(store.cells())
        self.totals: dict = {}
        self.nears: dict = {}
        self.luts: dict = {}

    def cell_rank(self, cell) -> int:
        gx, gy, _ = self.store.grid_shape
        return cell[0] + gx * (cell[1] + gy * cell[2])

    # pass A: chunk-local components plus filter statistics
    def component_pass(self) -> None:
        halo = int(np.ceil(self.cfg.filter_min_distance)) + 1

        def work(cell):
            lo, hi = self.store.cell_box(cell)
            elo, ehi = _expand_box(lo, hi, halo, self.shape)
            sem = self.store.read_window(elo, ehi)
            core = sem == CORE
            comps = connected_components(core, 26)
            proper = _box_slices(lo, hi, elo)
            comps_proper = comps[proper].astype(np.int32)
            self.cores.write_cell(cell, comps_proper)
            near_proper = _near_surface(core, self.cfg.filter_min_distance)[proper]
            core_proper = core[proper]
            vals = comps_proper[core_proper]
            t = np.bincount(vals)
            m = np.bincount(vals[near_proper[core_proper]], minlength=t.size)
            return cell, t, m

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            for cell, t, m in pool.map(work, self.cells):
                rank = self.cell_rank(cell)
                for lid in range(1, t.size):
                    if t[lid]:
                        self.totals[(rank, lid)] = int(t[lid])
                        self.nears[(rank, lid)] = int(m[lid])

    # pass B: union 26-adjacent core voxels across cell faces
    def merge_pass(self) -> _UnionFind:
        uf = _UnionFind()
        for key in self.totals:
            uf.add(key)
        widths = self.store.chunk_shape
        gx, gy, _ = self.store.grid_shape
        for cell in self.cells:
            lo, hi = self.store.cell_box(cell)
            rank = self.cell_rank(cell)
            for axis in range(3):
                if hi[axis] >= self.shape[axis]:
                    continue
                alo = list(lo)
                ahi = list(hi)
                alo[axis] = hi[axis] - 1
                layer = self.cores.read_window(tuple(alo), tuple(ahi))
                if not layer.any():
                    continue
                blo = [max(0, l - 1) for l in lo]
                bhi = [min(s, h + 1) for s, h in zip(self.shape, hi)]
                blo[axis] = hi[axis]
                bhi[axis] = hi[axis] + 1
                slab = self.cores.read_window(tuple(blo), tuple(bhi))
                if not slab.any():
                    continue
                for pair in _face_adjacencies(layer, tuple(alo), slab, tuple(blo), axis):
                    a_id, b_id, b_voxel = pair
                    b_cell_rank = (
                        b_voxel[0] // widths[0]
                        + gx * (b_voxel[1] // widths[1] + gy * (b_voxel[2] // widths[2]))
                    )
                    uf.union((rank, a_id), (int(b_cell_rank), int(b_id)))
        return uf

    # filter decision on merged components, then per-cell lookup tables
    def build_luts(self, uf: _UnionFind) -> None:
        root_totals: dict = {}
        root_nears: dict = {}
        for key, t in self.totals.items():
            root = uf.find(key)
            root_totals[root] = root_totals.get(root, 0) + t
            root_nears[root] = root_nears.get(root, 0) + self.nears[key]
        final_id: dict = {}
        next_id = 1
        for root in sorted(root_totals):
            if root_nears[root] > self.cfg.filter_threshold * root_totals[root]:
                final_id[root] = 0
            else:
                final_id[root] = next_id
                next_id += 1
        by_rank = defaultdict(list)
        for rank, lid in self.totals:
            by_rank[rank].append(lid)
        for cell in self.cells:
            rank = self.cell_rank(cell)
            lids = by_rank.get(rank, [])
            lut = np.zeros((max(lids) + 1) if lids else 1, dtype=np.int32)
            for lid in lids:
                lut[lid] = final_id[uf.find((rank, lid))]
            self.luts[cell] = lut

    def seed_window(self, lo, hi) -> np.ndarray:
        window = self.cores.read_window(lo, hi)
        out = np.zeros(window.shape, dtype=np.int32)
        c0 = tuple(l // w for l, w in zip(lo, self.cores.chunk_shape))
        c1 = tuple((h - 1) // w for h, w in zip(hi, self.cores.chunk_shape))
        for cz in range(c0[2], c1[2] + 1):
            for cy in range(c0[1], c1[1] + 1):
                for cx in range(c0[0], c1[0] + 1):
                    cell = (cx, cy, cz)
                    clo, chi = self.cores.cell_box(cell)
                    ilo = tuple(max(a, b) for a, b in zip(lo, clo))
                    ihi = tuple(min(a, b) for a, b in zip(hi, chi))
                    sl = _box_slices(ilo, ihi, lo)
                    lut = self.luts[cell]
                    local = window[sl]
                    out[sl] = np.where(local > 0, lut[local], 0)
        return out

    # pass C: halo watershed per cell
    def watershed_pass(self, halo: int) -> None:

        def work(cell):
            lo, hi = self.store.cell_box(cell)
            elo, ehi = _expand_box(lo, hi, halo, self.shape)
            seeds = self.seed_window(elo, ehi)
            proper = _box_slices(lo, hi, elo)
            if not (seeds > 0).any():
                self.out.write_cell(cell, np.zeros(tuple(h - l for l, h in zip(lo, hi)), dtype=np.int32))
                return
            sem = self.store.read_window(elo, ehi)
            # demoted cores turn into border, like the in-memory filter
            sem[(sem == CORE) & (seeds == 0)] = BORDER
            labels = seeded_watershed(
                distance_to_set(seeds > 0), seeds, sem != BACKGROUND, connectivity=26
            )
            self.out.write_cell(cell, labels[proper])

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            list(pool.map(work, self.cells))


def _face_adjacencies(layer, layer_lo, slab, slab_lo, axis):
    """Yield (layer id, slab id, slab voxel) for 26-adjacent core voxel pairs.

    ``layer`` is the one-voxel slab at a cell's far face along ``axis``;
    ``slab`` is the adjacent layer one step further, expanded by one voxel in
    the other axes to catch diagonal contacts.
    """
    other = [a for a in range(3) if a != axis]
    pairs = set()
    for da in (-1, 0, 1):
        for db in (-1, 0, 1):
            shift = [0, 0, 0]
            shift[other[0]] = da
            shift[other[1]] = db
            a_sl = [slice(0, layer.shape[ax]) for ax in range(3)]
            b_sl = [slice(0, slab.shape[ax]) for ax in range(3)]
            b_sl[axis] = slice(0, 1)
            ok = True
            for o_axis in other:
                s = shift[o_axis] + (layer_lo[o_axis] - slab_lo[o_axis])
                a0 = max(0, -s)
                a1 = min(layer.shape[o_axis], slab.shape[o_axis] - s)
                if a0 >= a1:
                    ok = False
                    break
                a_sl[o_axis] = slice(a0, a1)
                b_sl[o_axis] = slice(a0 + s, a1 + s)
            if not ok:
                continue
            a = layer[tuple(a_sl)]
            b = slab[tuple(b_sl)]
            both = (a > 0) & (b > 0)
            if not both.any():
                continue
            idx = np.nonzero(both)
            a_ids = a[both]
            b_ids = b[both]
            for i in range(a_ids.size):
                voxel = tuple(
                    slab_lo[ax] + b_sl[ax].start + int(idx[ax][i]) for ax in range(3)
                )
                pairs.add((int(a_ids[i]), int(b_ids[i]), voxel))
    return sorted(pairs)


def decode_streaming(
    store: BlockStore,
    cfg: BorderCoreConfig,
    out_root,
    workers: int = 1,
    scratch_root=None,
    halo: int | None = None,
) -> BlockStore:
    """Decode a semantic block store chunk by chunk.

    Chunk-local core components are merged across chunk faces with a
    union-find, the small-core filter is evaluated on the merged components,
    and each chunk is watershed-labeled inside a halo of
    ``border_thickness_vox + 1`` voxels (override with ``halo``). Matches the
    in-memory decode up to a label permutation whenever every instance keeps
    a core, i.e. instance diameters reach ``2 * thickness + 3``; border
    regions whose nearest core lies beyond the halo decode to background.
    """
    if store.kind != "semantic":
        raise ValidationError(f"decode_streaming expects a semantic store, got kind {store.kind!r}")
    if halo is None:
        halo = cfg.border_thickness_vox + 1
    dec = _StreamingDecoder(store, cfg, out_root, workers, scratch_root)
    dec.component_pass()
    uf = dec.merge_pass()
    dec.build_luts(uf)
    dec.watershed_pass(halo)
    shutil.rmtree(dec.scratch_root)
    return dec.out
