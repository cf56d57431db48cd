"""3D particle instance segmentation toolkit.

Border-core instance encoding, memory-bounded chunk-patch inference around a
pluggable patch predictor, classical watershed baselines, touching-particle
augmentation, phantom generation, and the full evaluation-metric suite.
"""

from .bordercore import BorderCoreConfig, decode, decode_streaming, encode, small_core_filter
from .classical import SplitRequest, ThreshWaterParams, split_particle, threshwater
from .infer import (
    ChunkPlan,
    ConstantPredictor,
    OraclePredictor,
    PatchPlan,
    ThreshWaterPredictor,
    infer_chunk,
    plan_chunks,
    plan_patches,
    run_inference,
)
from .metrics import MetricsReport, evaluate, f1_instance, f1_match, f1_voxel, match_instances
from .preprocess import (
    GlobalStats,
    SizeNormSpec,
    estimate_mm_particle_size,
    estimate_voxel_particle_size,
    global_stats,
    size_denormalize_labels,
    size_normalize,
    zscore_normalize,
)
from .synth import PhantomSpec, generate, measure
from .volume import (
    BlockStore,
    LabelVolume,
    ScalarVolume,
    SemanticVolume,
    VolumeMeta,
    crop,
    import_raw,
    read_blockstore,
    write_blockstore,
)

__version__ = "0.1.0"
