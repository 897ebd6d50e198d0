"""Online open-vocabulary 3D segment mapping.

Posed RGB-D keyframes with 2D instance masks stream in; a labeled 3D point
cloud with tracked segments and fused open-vocabulary descriptors comes out.
The package also ships a synthetic benchmark with exact ground truth, a
trainable descriptor merger, query/evaluation tools and a timing harness.
"""

from .core import UNLABELED, Segment, ViewEntry, WorldMap
from .engine import PipelineConfig, RunResult, run_sequence, worker_thread_budget
from .evaluation import (
    ClassTable,
    EvalReport,
    classify_segments,
    compute_metrics,
    rank_segments,
    transfer_labels,
)
from .fusion import (
    DegenerateDescriptorError,
    DescriptorTriple,
    FixedWeights,
    cosine_similarity,
    fuse_fixed,
    grid_search_weights,
    medoid_descriptor,
    normalize_descriptor,
)
from .geometry import (
    CameraIntrinsics,
    GeometryParams,
    Keyframe,
    ProjectedPoints,
    VoxelGrid,
    backproject_depth,
    occlusion_tolerance,
    project_points,
    voxel_fuse,
)
from .io import (
    FileEmbedder,
    FormatError,
    FrameRecord,
    SequenceManifest,
    load_class_table,
    load_manifest,
    load_map,
    load_merger_params,
    load_points_ply,
    load_poses,
    load_segments,
    load_sequence,
    load_training_corpus,
    maps_equal,
    read_embeddings,
    save_class_table,
    save_manifest,
    save_map,
    save_merger_params,
    save_points_ply,
    save_poses,
    save_segments,
    write_embeddings,
)
from .mapper import (
    MapperConfig,
    MapperStats,
    Mask2D,
    label_mode_and_votes,
    masks_from_id_image,
    merge_2d_segments,
    process_keyframe,
    update_point_cloud_labels,
)
from .merger import (
    MergerFusion,
    MergerParams,
    TrainSample,
    init_merger_params,
    merger_backward,
    merger_forward,
    merger_loss,
    train_merger,
)
from .pipeline import (
    BoundedQueue,
    Embedder,
    EmbeddingUnavailable,
    FixedFusion,
    QueueClosed,
    QueueItem,
    RegionKind,
    RegionRequest,
    TableEmbedder,
    assemble_triple,
    descriptor_worker_step,
)
from .synth import (
    PrototypeEmbedder,
    SceneBox,
    SceneSpec,
    SyntheticEmbedder,
    make_fusion_corpus,
    oracle_tracking_metrics,
    render_frame,
    sample_gt_vertices,
    standard_scene,
    synth_embeddings,
    write_sequence,
)
from .timing import STAGES, TimingReport, TimingSummary

__version__ = "0.1.0"

__all__ = [
    "STAGES",
    "UNLABELED",
    "BoundedQueue",
    "CameraIntrinsics",
    "ClassTable",
    "DegenerateDescriptorError",
    "DescriptorTriple",
    "Embedder",
    "EmbeddingUnavailable",
    "EvalReport",
    "FileEmbedder",
    "FixedFusion",
    "FixedWeights",
    "FormatError",
    "FrameRecord",
    "GeometryParams",
    "Keyframe",
    "MapperConfig",
    "MapperStats",
    "Mask2D",
    "MergerFusion",
    "MergerParams",
    "PipelineConfig",
    "ProjectedPoints",
    "PrototypeEmbedder",
    "QueueClosed",
    "QueueItem",
    "RegionKind",
    "RegionRequest",
    "RunResult",
    "SceneBox",
    "SceneSpec",
    "Segment",
    "SequenceManifest",
    "SyntheticEmbedder",
    "TableEmbedder",
    "TimingReport",
    "TimingSummary",
    "TrainSample",
    "ViewEntry",
    "WorldMap",
    "assemble_triple",
    "backproject_depth",
    "classify_segments",
    "compute_metrics",
    "cosine_similarity",
    "descriptor_worker_step",
    "fuse_fixed",
    "grid_search_weights",
    "init_merger_params",
    "label_mode_and_votes",
    "load_class_table",
    "load_manifest",
    "load_map",
    "load_merger_params",
    "load_points_ply",
    "load_poses",
    "load_segments",
    "load_sequence",
    "load_training_corpus",
    "make_fusion_corpus",
    "maps_equal",
    "masks_from_id_image",
    "medoid_descriptor",
    "merge_2d_segments",
    "merger_backward",
    "merger_forward",
    "merger_loss",
    "normalize_descriptor",
    "occlusion_tolerance",
    "oracle_tracking_metrics",
    "process_keyframe",
    "project_points",
    "rank_segments",
    "read_embeddings",
    "render_frame",
    "run_sequence",
    "sample_gt_vertices",
    "save_class_table",
    "save_manifest",
    "save_map",
    "save_merger_params",
    "save_points_ply",
    "save_poses",
    "save_segments",
    "standard_scene",
    "synth_embeddings",
    "train_merger",
    "transfer_labels",
    "update_point_cloud_labels",
    "voxel_fuse",
    "worker_thread_budget",
    "write_embeddings",
    "write_sequence",
]
