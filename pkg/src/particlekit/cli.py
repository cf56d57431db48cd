"""Command-line interface: one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation/usage error, 2 I/O or store-integrity
error. Diagnostics go to stderr; results go to files or stdout as JSON.
Every run writes a ``run_config.json`` echo next to its primary output
(execution-environment flags like --threads are excluded so outputs stay
byte-identical across thread counts).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment as augment_mod
from . import classical, infer, metrics, synth
from . import bordercore
from .exceptions import IntegrityError, ValidationError
from .preprocess import (
    DEFAULT_TARGET_PARTICLE_SIZE_VOX,
    GlobalStats,
    SizeNormSpec,
    StatsAccumulator,
)
from .volume import (
    BlockStore,
    VolumeMeta,
    import_raw,
    read_blockstore,
    write_blockstore,
)

log = logging.getLogger("particlekit")

_ECHO_EXCLUDE = {"func", "threads", "log_level"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("formatter_class", argparse.ArgumentDefaultsHelpFormatter)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _write_run_config(primary_out, args) -> None:
    options = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in _ECHO_EXCLUDE
    }
    echo = {"subcommand": args.subcommand, "options": options}
    primary_out = Path(primary_out)
    if primary_out.is_dir():
        target = primary_out / "run_config.json"
    else:
        target = primary_out.with_name(primary_out.stem + ".run_config.json")
    target.write_text(json.dumps(echo, sort_keys=True, indent=1))


def _emit_json(payload: dict, out) -> None:
    text = json.dumps(payload, sort_keys=True, indent=1)
    if out is None:
        print(text)
    else:
        Path(out).write_text(text)


def _load_stats(path) -> GlobalStats:
    data = json.loads(Path(path).read_text())
    return GlobalStats(mu=float(data["mu"]), sigma=float(data["sigma"]))


def _border_cfg(args) -> bordercore.BorderCoreConfig:
    return bordercore.BorderCoreConfig(
        border_thickness_vox=args.thickness,
        filter_min_distance=args.min_distance,
        filter_threshold=args.threshold_filter,
    )


def _add_border_flags(p) -> None:
    p.add_argument("--thickness", type=int, default=bordercore.DEFAULT_BORDER_THICKNESS_VOX,
                   help="border erosion width in voxels")
    p.add_argument("--min-distance", dest="min_distance", type=float, default=1.0,
                   help="small-core filter minimum distance")
    p.add_argument("--threshold-filter", dest="threshold_filter", type=float, default=0.95,
                   help="small-core filter removal threshold")


# -- subcommand implementations ------------------------------------------------


def _cmd_import(args) -> None:
    meta = VolumeMeta(tuple(args.shape), tuple(args.spacing), args.dtype, args.origin_name)
    vol = import_raw(args.input, meta, endianness=args.endian)
    write_blockstore(vol, args.out, (args.chunk,) * 3)
    _write_run_config(args.out, args)


def _cmd_synth(args) -> None:
    spec = synth.PhantomSpec.from_dict(json.loads(Path(args.spec).read_text()))
    vol, lab = synth.generate(spec)
    write_blockstore(vol, args.out_vol, (args.chunk,) * 3)
    write_blockstore(lab, args.out_labels, (args.chunk,) * 3)
    _write_run_config(args.out_vol, args)
    _write_run_config(args.out_labels, args)


def _cmd_stats(args) -> None:
    acc = StatsAccumulator()
    for root in args.inputs:
        store = BlockStore.open(root)
        if store.kind != "scalar":
            raise ValidationError(f"{root}: stats needs scalar stores")
        for cell in store.cells():
            acc.update(store.read_cell(cell))
    stats = acc.finalize()
    _emit_json({"mu": stats.mu, "sigma": stats.sigma}, args.out)
    if args.out:
        _write_run_config(Path(args.out), args)


def _cmd_encode(args) -> None:
    lab = read_blockstore(args.input)
    sem = bordercore.encode(lab, _border_cfg(args))
    store = BlockStore.open(args.input)
    write_blockstore(sem, args.out, store.chunk_shape)
    _write_run_config(args.out, args)


def _cmd_decode(args) -> None:
    store = BlockStore.open(args.input)
    bordercore.decode_streaming(store, _border_cfg(args), args.out, workers=args.threads)
    _write_run_config(args.out, args)


def _parse_predictor(text: str, patch_shape, stats: GlobalStats):
    kind, _, params = text.partition(":")
    if kind == "oracle":
        if not params:
            raise ValidationError("oracle predictor needs a labels store: oracle:<path>")
        ref = read_blockstore(params)
        return infer.OraclePredictor(ref, bordercore.BorderCoreConfig(), patch_shape=patch_shape)
    if kind == "threshwater":
        if not params:
            raise ValidationError("threshwater predictor needs parameters: threshwater:T[,R]")
        parts = params.split(",")
        raw_threshold = float(parts[0])
        radius = int(parts[1]) if len(parts) > 1 else 3
        normed = (raw_threshold - stats.mu) / stats.sigma
        return infer.ThreshWaterPredictor(normed, erosion_radius=radius, patch_shape=patch_shape)
    if kind == "constant":
        probs = tuple(float(v) for v in params.split(",")) if params else (1.0, 0.0, 0.0)
        return infer.ConstantPredictor(probs, patch_shape=patch_shape)
    raise ValidationError(f"unknown predictor {kind!r}; use oracle:<store>, threshwater:T[,R], or constant:p0,p1,p2")


def _cmd_infer(args) -> None:
    store = BlockStore.open(args.input)
    if args.stats:
        stats = _load_stats(args.stats)
    else:
        log.warning("no --stats supplied; computing statistics from the input volume")
        acc = StatsAccumulator()
        for cell in store.cells():
            acc.update(store.read_cell(cell))
        stats = acc.finalize()
    patch_shape = (args.patch,) * 3
    predictor = _parse_predictor(args.predictor, patch_shape, stats)
    size = SizeNormSpec(args.ref_size_vox, args.target_size_vox)
    infer.run_inference(
        store,
        predictor,
        _border_cfg(args),
        size,
        stats,
        scratch=args.scratch,
        overlap_fraction=args.overlap,
        chunk_shape=(args.chunk,) * 3,
        workers=args.threads,
        out_root=args.out,
    )
    _write_run_config(args.out, args)


def _cmd_threshwater(args) -> None:
    vol = read_blockstore(args.input)
    params = classical.ThreshWaterParams(
        threshold=args.threshold,
        opening_radius=args.opening,
        seed_erosion_radius=args.seed_erosion,
    )
    labels = classical.threshwater(vol, params)
    store = BlockStore.open(args.input)
    write_blockstore(labels, args.out, store.chunk_shape)
    _write_run_config(args.out, args)


def _cmd_split(args) -> None:
    labels = read_blockstore(args.input)
    markers = json.loads(Path(args.markers).read_text())
    border = json.loads(Path(args.border).read_text())
    req = classical.SplitRequest(
        target_label=args.label,
        markers=tuple(tuple(m) for m in markers),
        border_voxels=tuple(tuple(b) for b in border),
    )
    result = classical.split_particle(labels, req)
    store = BlockStore.open(args.input)
    write_blockstore(result, args.out, store.chunk_shape)
    _write_run_config(args.out, args)


def _cmd_augment(args) -> None:
    vol = read_blockstore(args.vol)
    labels = read_blockstore(args.labels)
    bank_spec = json.loads(Path(args.bank).read_text())
    bank_vols = [read_blockstore(p["vol"]) for p in bank_spec["pairs"]]
    bank_labels = [read_blockstore(p["labels"]) for p in bank_spec["pairs"]]
    bank = augment_mod.build_bank(bank_vols, bank_labels)
    out_vol, out_labels = augment_mod.touching_augment(vol, labels, bank, args.prob, args.seed)
    store = BlockStore.open(args.vol)
    write_blockstore(out_vol, args.out_vol, store.chunk_shape)
    write_blockstore(out_labels, args.out_labels, store.chunk_shape)
    _write_run_config(args.out_vol, args)
    _write_run_config(args.out_labels, args)


def _cmd_export_train(args) -> None:
    vols = [read_blockstore(p) for p in args.vols]
    labels = [read_blockstore(p) for p in args.labels]
    stats = _load_stats(args.stats)
    size = SizeNormSpec(args.ref_size_vox, args.target_size_vox)
    augment_mod.export_training_pairs(vols, labels, _border_cfg(args), size, stats, Path(args.out))
    _write_run_config(args.out, args)


def _cmd_eval(args) -> None:
    pred = read_blockstore(args.pred)
    ref = read_blockstore(args.ref)
    report = metrics.evaluate(pred, ref)
    _emit_json(report.to_dict(), args.out)
    if args.out:
        _write_run_config(Path(args.out), args)


def _cmd_measure(args) -> None:
    labels = read_blockstore(args.input)
    rows = synth.measure(labels)
    lines = ["id,voxels,eq_diameter_vox,bb_lo,bb_hi"]
    for row in rows:
        lines.append(
            "%d,%d,%.6f,%d:%d:%d,%d:%d:%d"
            % (row.id, row.voxels, row.eq_diameter_vox, *row.bb_lo, *row.bb_hi)
        )
    Path(args.out).write_text("\n".join(lines) + "\n")
    _write_run_config(Path(args.out), args)


# -- parser ---------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="particlekit", description=__doc__)
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--threads", type=int, default=1, help="worker pool size; 1 reproduces parallel results")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("import", help="import a flat raw volume into a block store")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--shape", type=int, nargs=3, required=True)
    p.add_argument("--spacing", type=float, nargs=3, required=True)
    p.add_argument("--dtype", default="u16", choices=["u8", "u16", "f32"], help="element type")
    p.add_argument("--endian", default="little", choices=["little", "big"], help="raw byte order")
    p.add_argument("--origin-name", dest="origin_name", default="", help="free-text sample name")
    p.add_argument("--chunk", type=int, default=64, help="store chunk edge, voxels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_import)

    p = sub.add_parser("synth", help="generate a phantom with exact ground truth")
    p.add_argument("--spec", required=True, help="JSON file with PhantomSpec fields")
    p.add_argument("--chunk", type=int, default=64, help="store chunk edge, voxels")
    p.add_argument("--out-vol", dest="out_vol", required=True)
    p.add_argument("--out-labels", dest="out_labels", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("stats", help="corpus intensity statistics {mu, sigma}")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", default=None, help="JSON output path (stdout if omitted)")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("encode", help="instances -> border-core semantic store")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    _add_border_flags(p)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="border-core semantic store -> instances")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    _add_border_flags(p)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("infer", help="chunked sliding-window inference")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--predictor", required=True,
                   help="oracle:<labels.store> | threshwater:T[,R] | constant:p0,p1,p2")
    p.add_argument("--patch", type=int, default=infer.DEFAULT_PATCH_SHAPE[0], help="cubic patch edge, voxels")
    p.add_argument("--overlap", type=float, default=infer.DEFAULT_OVERLAP_FRACTION, help="patch overlap fraction")
    p.add_argument("--chunk", type=int, default=infer.DEFAULT_CHUNK_SHAPE[0], help="cubic chunk edge, voxels")
    p.add_argument("--ref-size-vox", dest="ref_size_vox", type=float, required=True,
                   help="measured average particle size of this sample, voxels")
    p.add_argument("--target-size-vox", dest="target_size_vox", type=float,
                   default=DEFAULT_TARGET_PARTICLE_SIZE_VOX, help="normalized particle size")
    p.add_argument("--stats", default=None, help="JSON file {mu, sigma}")
    p.add_argument("--scratch", required=True)
    _add_border_flags(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("threshwater", help="threshold + watershed baseline")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--opening", type=int, default=1, help="mask opening radius")
    p.add_argument("--seed-erosion", dest="seed_erosion", type=int, default=3, help="seed erosion radius")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_threshwater)

    p = sub.add_parser("split", help="split one instance with markers and a border")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--markers", required=True, help="JSON [[x,y,z], ...]")
    p.add_argument("--border", required=True, help="JSON [[x,y,z], ...]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("augment", help="touching-particle augmentation")
    p.add_argument("--vol", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--bank", required=True, help='JSON {"pairs": [{"vol": ..., "labels": ...}]}')
    p.add_argument("--prob", type=float, default=0.3, help="augmentation trigger probability")
    p.add_argument("--seed", type=int, default=0, help="rng seed")
    p.add_argument("--out-vol", dest="out_vol", required=True)
    p.add_argument("--out-labels", dest="out_labels", required=True)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("export-train", help="write normalized training pairs + manifest")
    p.add_argument("--vols", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--ref-size-vox", dest="ref_size_vox", type=float, required=True)
    p.add_argument("--target-size-vox", dest="target_size_vox", type=float,
                   default=DEFAULT_TARGET_PARTICLE_SIZE_VOX, help="normalized particle size")
    p.add_argument("--stats", required=True)
    p.add_argument("--out", required=True)
    _add_border_flags(p)
    p.set_defaults(func=_cmd_export_train)

    p = sub.add_parser("eval", help="metrics report for prediction vs reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", default=None, help="report path (stdout if omitted)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("measure", help="per-instance size table as CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_measure)

    return parser


def dispatch(argv=None) -> int:
    """Parse and run a subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, args.log_level))
    try:
        args.func(args)
        return 0
    except ValidationError as exc:
        log.error("%s", exc)
        return 1
    except (IntegrityError, OSError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return 2


def main() -> None:
    sys.exit(dispatch())
