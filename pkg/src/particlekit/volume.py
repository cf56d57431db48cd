"""Volumetric containers and a chunked on-disk block store.

Axis convention used throughout the toolkit: arrays are indexed ``[x, y, z]``
and all flat serialization is x-fastest (Fortran linearization). Raw chunk
files are little-endian.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from .exceptions import IntegrityError, ValidationError

Coord = tuple[int, int, int]

#: Serialized element types. ``u32`` backs label stores, where instance ids
#: can exceed the 16-bit range.
DTYPE_CODES = {
    "u8": np.dtype("<u1"),
    "u16": np.dtype("<u2"),
    "u32": np.dtype("<u4"),
    "f32": np.dtype("<f4"),
}

#: Types accepted for flat raw CT imports.
RAW_IMPORT_DTYPES = ("u8", "u16", "f32")

SIDECAR_NAME = "meta.json"


@dataclass(frozen=True)
class VolumeMeta:
    """Grid geometry and element type of a volume.

    ``shape`` counts voxels per axis, ``spacing_mm`` is the physical voxel
    edge length per axis in millimetres.
    """

    shape: Coord
    spacing_mm: tuple[float, float, float]
    dtype: str
    origin_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        if len(self.shape) != 3 or any(s < 1 for s in self.shape):
            raise ValidationError(f"shape must be 3 positive integers, got {self.shape}")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValidationError(f"spacing_mm must be 3 positive reals, got {self.spacing_mm}")
        if self.dtype not in DTYPE_CODES:
            raise ValidationError(f"unsupported dtype {self.dtype!r}, expected one of {sorted(DTYPE_CODES)}")

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.shape))


def _check_array(meta: VolumeMeta, arr: np.ndarray, name: str) -> None:
    if tuple(arr.shape) != meta.shape:
        raise ValidationError(f"{name} array shape {arr.shape} does not match meta shape {meta.shape}")


@dataclass(frozen=True)
class ScalarVolume:
    """Dense 3D intensity grid (the CT image)."""

    meta: VolumeMeta
    values: np.ndarray

    def __post_init__(self):
        _check_array(self.meta, self.values, "values")

    @property
    def array(self) -> np.ndarray:
        return self.values


@dataclass(frozen=True)
class LabelVolume:
    """Dense 3D grid of instance identifiers; 0 is background."""

    meta: VolumeMeta
    labels: np.ndarray

    def __post_init__(self):
        _check_array(self.meta, self.labels, "labels")
        if self.labels.dtype.kind not in "iu":
            raise ValidationError(f"labels must be integer-typed, got {self.labels.dtype}")

    @property
    def array(self) -> np.ndarray:
        return self.labels

    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.labels)
        return ids[ids > 0]


@dataclass(frozen=True)
class SemanticVolume:
    """Dense 3D grid over {0: background, 1: core, 2: border}."""

    meta: VolumeMeta
    classes: np.ndarray

    def __post_init__(self):
        _check_array(self.meta, self.classes, "classes")
        if self.classes.size and int(self.classes.max(initial=0)) > 2:
            raise ValidationError("semantic classes must lie in {0, 1, 2}")

    @property
    def array(self) -> np.ndarray:
        return self.classes


Volume = Union[ScalarVolume, LabelVolume, SemanticVolume]

_NUMPY_TO_CODE = {
    np.dtype("u1"): "u8",
    np.dtype("u2"): "u16",
    np.dtype("u4"): "u32",
    np.dtype("f4"): "f32",
}


def scalar_volume(values: np.ndarray, spacing_mm=(1.0, 1.0, 1.0), origin_name: str = "") -> ScalarVolume:
    code = _NUMPY_TO_CODE.get(values.dtype.newbyteorder("="), None)
    if code is None:
        values = values.astype(np.float32)
        code = "f32"
    meta = VolumeMeta(tuple(values.shape), tuple(spacing_mm), code, origin_name)
    return ScalarVolume(meta, values)


def label_volume(labels: np.ndarray, spacing_mm=(1.0, 1.0, 1.0), origin_name: str = "") -> LabelVolume:
    meta = VolumeMeta(tuple(labels.shape), tuple(spacing_mm), "u32", origin_name)
    return LabelVolume(meta, labels.astype(np.int32, copy=False))


def semantic_volume(classes: np.ndarray, spacing_mm=(1.0, 1.0, 1.0), origin_name: str = "") -> SemanticVolume:
    meta = VolumeMeta(tuple(classes.shape), tuple(spacing_mm), "u8", origin_name)
    return SemanticVolume(meta, classes.astype(np.uint8, copy=False))


def volume_kind(vol: Volume) -> str:
    if isinstance(vol, ScalarVolume):
        return "scalar"
    if isinstance(vol, LabelVolume):
        return "labels"
    if isinstance(vol, SemanticVolume):
        return "semantic"
    raise ValidationError(f"not a volume: {type(vol)!r}")


def _wrap(kind: str, meta: VolumeMeta, arr: np.ndarray) -> Volume:
    if kind == "scalar":
        return ScalarVolume(meta, arr)
    if kind == "labels":
        return LabelVolume(meta, arr.astype(np.int32, copy=False))
    if kind == "semantic":
        return SemanticVolume(meta, arr.astype(np.uint8, copy=False))
    raise IntegrityError(f"unknown volume kind {kind!r}")


def import_raw(path, meta: VolumeMeta, endianness: str = "little") -> ScalarVolume:
    """Read a flat raw file into a ScalarVolume, x-fastest voxel order.

    The file size must equal ``prod(shape) * dtype_width`` exactly.
    """
    if endianness not in ("little", "big"):
        raise ValidationError(f"endianness must be 'little' or 'big', got {endianness!r}")
    if meta.dtype not in RAW_IMPORT_DTYPES:
        raise ValidationError(f"raw import supports dtypes {RAW_IMPORT_DTYPES}, got {meta.dtype!r}")
    path = Path(path)
    dt = DTYPE_CODES[meta.dtype].newbyteorder("<" if endianness == "little" else ">")
    expected = meta.voxel_count * dt.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise ValidationError(
            f"{path}: expected {expected} bytes for shape {meta.shape} dtype {meta.dtype}, got {actual}"
        )
    flat = np.fromfile(path, dtype=dt)
    values = flat.astype(dt.newbyteorder("=")).reshape(meta.shape, order="F")
    return ScalarVolume(meta, values)


def crop(vol: Volume, lo: Coord, hi: Coord) -> Volume:
    """Extract the half-open box ``[lo, hi)``; spacing is preserved."""
    lo = tuple(int(v) for v in lo)
    hi = tuple(int(v) for v in hi)
    shape = vol.meta.shape
    for axis in range(3):
        if not (0 <= lo[axis] < hi[axis] <= shape[axis]):
            raise ValidationError(f"crop box {lo}..{hi} out of range for shape {shape} on axis {axis}")
    arr = vol.array[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].copy()
    meta = replace(vol.meta, shape=tuple(h - l for l, h in zip(lo, hi)))
    return _wrap(volume_kind(vol), meta, arr)


class BlockStore:
    """Directory-backed volume split into a regular grid of raw chunks.

    Layout: a ``meta.json`` sidecar plus one little-endian raw file per grid
    cell named ``cx_cy_cz.blk``. Trailing cells are truncated to the volume
    bounds; all other cells have the full ``chunk_shape``.
    """

    def __init__(self, root, meta: VolumeMeta, kind: str, chunk_shape: Coord):
        if kind not in ("scalar", "labels", "semantic"):
            raise ValidationError(f"unknown store kind {kind!r}")
        chunk_shape = tuple(int(c) for c in chunk_shape)
        if any(c < 1 for c in chunk_shape):
            raise ValidationError(f"chunk_shape entries must be >= 1, got {chunk_shape}")
        self.root = Path(root)
        self.meta = meta
        self.kind = kind
        self.chunk_shape = chunk_shape

    # -- geometry -----------------------------------------------------------

    @property
    def grid_shape(self) -> Coord:
        return tuple(-(-s // c) for s, c in zip(self.meta.shape, self.chunk_shape))

    def cells(self) -> Iterator[Coord]:
        gx, gy, gz = self.grid_shape
        for cz in range(gz):
            for cy in range(gy):
                for cx in range(gx):
                    yield (cx, cy, cz)

    def cell_box(self, cell: Coord) -> tuple[Coord, Coord]:
        lo = tuple(c * w for c, w in zip(cell, self.chunk_shape))
        hi = tuple(min(l + w, s) for l, w, s in zip(lo, self.chunk_shape, self.meta.shape))
        return lo, hi

    def cell_path(self, cell: Coord) -> Path:
        return self.root / ("%d_%d_%d.blk" % cell)

    def _disk_dtype(self) -> np.dtype:
        return DTYPE_CODES[self.meta.dtype]

    def _memory_dtype(self) -> np.dtype:
        if self.kind == "labels":
            return np.dtype(np.int32)
        return self._disk_dtype().newbyteorder("=")

    # -- I/O ----------------------------------------------------------------

    @classmethod
    def create(cls, root, meta: VolumeMeta, kind: str, chunk_shape: Coord) -> "BlockStore":
        store = cls(root, meta, kind, chunk_shape)
        store.root.mkdir(parents=True, exist_ok=True)
        sidecar = {
            "shape": list(meta.shape),
            "spacing_mm": list(meta.spacing_mm),
            "dtype": meta.dtype,
            "chunk_shape": list(store.chunk_shape),
            "kind": kind,
            "origin_name": meta.origin_name,
        }
        (store.root / SIDECAR_NAME).write_text(json.dumps(sidecar, sort_keys=True, indent=1))
        return store

    @classmethod
    def open(cls, root) -> "BlockStore":
        root = Path(root)
        sidecar_path = root / SIDECAR_NAME
        if not sidecar_path.is_file():
            raise IntegrityError(f"{root}: missing {SIDECAR_NAME} sidecar")
        try:
            sidecar = json.loads(sidecar_path.read_text())
        except json.JSONDecodeError as exc:
            raise IntegrityError(f"{sidecar_path}: sidecar parse error: {exc}") from exc
        try:
            meta = VolumeMeta(
                tuple(sidecar["shape"]),
                tuple(sidecar["spacing_mm"]),
                sidecar["dtype"],
                sidecar.get("origin_name", ""),
            )
            return cls(root, meta, sidecar["kind"], tuple(sidecar["chunk_shape"]))
        except (KeyError, TypeError, ValidationError) as exc:
            raise IntegrityError(f"{sidecar_path}: invalid sidecar: {exc}") from exc

    def write_cell(self, cell: Coord, arr: np.ndarray) -> None:
        lo, hi = self.cell_box(cell)
        expected = tuple(h - l for l, h in zip(lo, hi))
        if tuple(arr.shape) != expected:
            raise ValidationError(f"cell {cell} expects shape {expected}, got {arr.shape}")
        arr.astype(self._disk_dtype(), copy=False).ravel(order="F").tofile(self.cell_path(cell))

    def read_cell(self, cell: Coord) -> np.ndarray:
        lo, hi = self.cell_box(cell)
        shape = tuple(h - l for l, h in zip(lo, hi))
        path = self.cell_path(cell)
        if not path.is_file():
            raise IntegrityError(f"{self.root}: missing chunk file for grid cell {cell}")
        flat = np.fromfile(path, dtype=self._disk_dtype())
        if flat.size != int(np.prod(shape)):
            raise IntegrityError(f"{path}: expected {int(np.prod(shape))} elements, got {flat.size}")
        return flat.astype(self._memory_dtype()).reshape(shape, order="F")

    def read_window(self, lo: Coord, hi: Coord) -> np.ndarray:
        """Assemble an arbitrary half-open window from the covering cells."""
        lo = tuple(int(v) for v in lo)
        hi = tuple(int(v) for v in hi)
        for axis in range(3):
            if not (0 <= lo[axis] < hi[axis] <= self.meta.shape[axis]):
                raise ValidationError(f"window {lo}..{hi} out of range for shape {self.meta.shape}")
        out = np.empty(tuple(h - l for l, h in zip(lo, hi)), dtype=self._memory_dtype())
        c0 = tuple(l // w for l, w in zip(lo, self.chunk_shape))
        c1 = tuple((h - 1) // w for h, w in zip(hi, self.chunk_shape))
        for cz in range(c0[2], c1[2] + 1):
            for cy in range(c0[1], c1[1] + 1):
                for cx in range(c0[0], c1[0] + 1):
                    cell = (cx, cy, cz)
                    clo, chi = self.cell_box(cell)
                    ilo = tuple(max(a, b) for a, b in zip(lo, clo))
                    ihi = tuple(min(a, b) for a, b in zip(hi, chi))
                    data = self.read_cell(cell)
                    src = tuple(slice(a - o, b - o) for a, b, o in zip(ilo, ihi, clo))
                    dst = tuple(slice(a - o, b - o) for a, b, o in zip(ilo, ihi, lo))
                    out[dst] = data[src]
        return out

    def read_full(self) -> np.ndarray:
        return self.read_window((0, 0, 0), self.meta.shape)


def write_blockstore(vol: Volume, root, chunk_shape: Coord) -> BlockStore:
    """Persist a volume as a block store; returns the store handle."""
    kind = volume_kind(vol)
    store = BlockStore.create(root, vol.meta, kind, chunk_shape)
    arr = vol.array
    for cell in store.cells():
        lo, hi = store.cell_box(cell)
        store.write_cell(cell, arr[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]])
    return store


def read_blockstore(root) -> Volume:
    """Load a block store back into the volume type recorded in its sidecar."""
    store = BlockStore.open(root)
    return _wrap(store.kind, store.meta, store.read_full())
