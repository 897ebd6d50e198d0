"""The online mapping loop.

``run_sequence`` streams keyframes from a manifest through the tracker, hands
merged masks to the descriptor worker over the bounded queue, and collects
per-stage timings.  In deterministic mode (the default) the worker drains the
queue synchronously after every keyframe, so two runs over the same input
produce byte-identical map files.  Otherwise the worker runs in a background
thread with queue backpressure; the `OVO_THREADS` environment variable caps
the worker threads (values below 2 force the synchronous path).
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .core import WorldMap
from .fusion import FixedWeights
from .geometry import GeometryParams, Keyframe, VoxelGrid
from .io import FileEmbedder, SequenceManifest, load_manifest, load_merger_params, load_sequence
from .mapper import MapperConfig, process_keyframe
from .merger import MergerFusion
from .pipeline import (
    BoundedQueue,
    Embedder,
    FixedFusion,
    FusionFn,
    QueueItem,
    descriptor_worker_step,
)
from .timing import TimingReport, TimingSummary

THREADS_ENV = "OVO_THREADS"


@dataclass
class PipelineConfig:
    """Everything a run needs besides the data itself."""

    mapper: MapperConfig = field(default_factory=MapperConfig)
    geometry: GeometryParams = field(default_factory=GeometryParams)
    fusion_mode: str = "fixed"  # "fixed" | "merger"
    alpha: float = 0.5
    beta: float = 0.5
    merger_checkpoint: str | None = None
    queue_capacity: int = 8
    deterministic: bool = True
    keyframe_stride: int | None = None  # overrides the manifest stride

    def __post_init__(self):
        if self.fusion_mode not in ("fixed", "merger"):
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.fusion_mode == "merger" and not self.merger_checkpoint:
            raise ValueError("merger fusion needs a checkpoint path")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["mapper"] = asdict(self.mapper)
        doc["geometry"] = asdict(self.geometry)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        if "mapper" in doc:
            doc["mapper"] = MapperConfig(**doc["mapper"])
        if "geometry" in doc:
            doc["geometry"] = GeometryParams(**doc["geometry"])
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        import json

        return cls.from_dict(json.loads(Path(path).read_text()))


def build_fusion(config: PipelineConfig) -> FusionFn:
    if config.fusion_mode == "merger":
        return MergerFusion(load_merger_params(config.merger_checkpoint))
    return FixedFusion(FixedWeights(config.alpha, config.beta))


def worker_thread_budget() -> int:
    """Worker thread cap from the environment (2 when unset)."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 2
    try:
        return max(int(raw), 1)
    except ValueError:
        return 2


@dataclass
class RunResult:
    world: WorldMap
    timing: TimingReport
    summary: TimingSummary
    counters: dict


def run_sequence(
    manifest: SequenceManifest | str | Path,
    config: PipelineConfig | None = None,
    embedder: Embedder | None = None,
) -> RunResult:
    """Build a map from a recorded sequence.

    Args:
        manifest: a loaded manifest or a path to one.
        config: pipeline configuration; defaults are the reference settings.
        embedder: descriptor provider; defaults to the manifest's per-frame
            embedding files.

    Returns:
        The finished map plus timing and bookkeeping counters.
    """
    if not isinstance(manifest, SequenceManifest):
        manifest = load_manifest(manifest)
    config = config or PipelineConfig()
    if embedder is None:
        embedder = FileEmbedder.from_manifest(manifest)
    fusion = build_fusion(config)

    world = WorldMap(heap_capacity=config.mapper.heap_capacity)
    grid = VoxelGrid(config.geometry.voxel_size)
    report = TimingReport()
    queue = BoundedQueue(config.queue_capacity)
    frames: dict[int, Keyframe] = {}
    counters = {
        "keyframes": 0,
        "points": 0,
        "segments": 0,
        "masks_accepted": 0,
        "masks_discarded": 0,
        "points_relabeled": 0,
        "descriptors_updated": 0,
    }

    threaded = (not config.deterministic) and worker_thread_budget() >= 2
    map_lock = threading.Lock()
    worker_error: list[BaseException] = []

    def consume() -> None:
        try:
            for item in queue:
                t0 = time.perf_counter()
                with map_lock:
                    n = descriptor_worker_step(world, item, embedder, fusion, frames)
                counters["descriptors_updated"] += n
                report.record_stage(item.keyframe_index, "CLIP", time.perf_counter() - t0)
        except BaseException as exc:  # surfaced after join
            worker_error.append(exc)

    worker = threading.Thread(target=consume, daemon=True) if threaded else None
    if worker:
        worker.start()

    stream = load_sequence(manifest, stride=config.keyframe_stride)
    try:
        while True:
            t_start = time.perf_counter()
            try:
                kf, masks, table = next(stream)
            except StopIteration:
                break
            t_loaded = time.perf_counter()

            if table is not None and isinstance(embedder, FileEmbedder):
                embedder.prime(kf.index, table)

            with map_lock:
                merged, stats = process_keyframe(
                    world, kf, masks, config.mapper, config.geometry, grid
                )
            frames[kf.index] = kf
            report.record_stage(kf.index, "Seg", t_loaded - t_start)
            report.record_stage(kf.index, "PP", stats.seconds_preprocess)
            report.record_stage(kf.index, "M&T", stats.seconds_matching)
            counters["keyframes"] += 1
            counters["masks_accepted"] += stats.masks_accepted
            counters["masks_discarded"] += stats.masks_discarded
            counters["points_relabeled"] += stats.points_relabeled

            item = QueueItem(kf.index, [(m.matched_label, m) for m in merged])
            queue.put(item)
            if not threaded:
                t0 = time.perf_counter()
                drained = queue.get()
                n = descriptor_worker_step(world, drained, embedder, fusion, frames)
                counters["descriptors_updated"] += n
                report.record_stage(kf.index, "CLIP", time.perf_counter() - t0)
            report.record_total(kf.index, time.perf_counter() - t_start)
    finally:
        queue.close()
        if worker:
            worker.join()
    if worker_error:
        raise worker_error[0]

    counters["points"] = world.num_points
    counters["segments"] = len(world.segments)
    return RunResult(
        world=world, timing=report, summary=report.finalize(), counters=counters
    )
