"""Descriptor extraction pipeline: queue, crops, worker.

Matched masks are handed to a descriptor worker through a bounded FIFO queue
so tracking never waits on the (slow) embedder.  The worker re-checks that a
view is still on the segment's heap before spending an embedding on it, fuses
the three crops into one vector and refreshes the segment medoid.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Mapping, Protocol

import numpy as np

from .core import WorldMap, set_descriptor
from .fusion import DescriptorTriple, FixedWeights, fuse_fixed
from .geometry import Keyframe
from .mapper import Mask2D

log = logging.getLogger(__name__)

DEFAULT_QUEUE_CAPACITY = 8


class QueueClosed(RuntimeError):
    """Raised by put() on a closed queue and by get() once it has drained."""


class BoundedQueue:
    """Blocking FIFO with a hard capacity and close-then-drain semantics.

    put() blocks while full; get() blocks while empty.  After close(), put()
    raises, pending items still come out in order, and further get() calls
    raise :class:`QueueClosed`.  Safe for one producer and one consumer.
    """

    def __init__(self, capacity: int = DEFAULT_QUEUE_CAPACITY):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: list = []
        self._closed = False
        self._cond = threading.Condition()

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)

    def put(self, item) -> None:
        with self._cond:
            while len(self._items) >= self.capacity and not self._closed:
                self._cond.wait()
            if self._closed:
                raise QueueClosed("put on closed queue")
            self._items.append(item)
            self._cond.notify_all()

    def get(self):
        with self._cond:
            while not self._items and not self._closed:
                self._cond.wait()
            if self._items:
                item = self._items.pop(0)
                self._cond.notify_all()
                return item
            raise QueueClosed("queue closed and drained")

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        with self._cond:
            return self._closed

    def __iter__(self):
        while True:
            try:
                yield self.get()
            except QueueClosed:
                return


@dataclass
class QueueItem:
    """Work unit for the descriptor worker: one keyframe's merged masks."""

    keyframe_index: int
    merged_masks: list[tuple[int, Mask2D]]  # (matched label, merged mask)


class RegionKind(IntEnum):
    """Which crop of the frame an embedding request covers.

    Values match the region byte of the embeddings container.
    """

    FULL = 0
    MASKED = 1
    BBOX = 2


@dataclass
class RegionRequest:
    frame_index: int
    kind: RegionKind
    mask_id: int  # 0 for the frame-level FULL request
    image: np.ndarray | None = None


class EmbeddingUnavailable(LookupError):
    """An embedder has no vector for the requested region."""


class Embedder(Protocol):
    def embed(self, request: RegionRequest) -> np.ndarray: ...


FusionFn = Callable[[DescriptorTriple], np.ndarray]


@dataclass(frozen=True)
class FixedFusion:
    """Fusion with fixed scalar weights."""

    weights: FixedWeights = FixedWeights()

    def __call__(self, triple: DescriptorTriple) -> np.ndarray:
        return fuse_fixed(triple, self.weights)


def masked_crop(rgb: np.ndarray, mask: Mask2D) -> np.ndarray:
    """Bounding-box crop with pixels outside the mask blacked out."""
    u0, v0, u1, v1 = mask.bbox
    crop = rgb[v0 : v1 + 1, u0 : u1 + 1].copy()
    crop[~mask.pixels[v0 : v1 + 1, u0 : u1 + 1]] = 0
    return crop


def bbox_crop(rgb: np.ndarray, mask: Mask2D) -> np.ndarray:
    """Bounding-box crop with the background kept."""
    u0, v0, u1, v1 = mask.bbox
    return rgb[v0 : v1 + 1, u0 : u1 + 1].copy()


def _triple_for_mask(
    frame_index: int, mask: Mask2D, embedder: Embedder, rgb: np.ndarray | None
) -> DescriptorTriple:
    g = embedder.embed(RegionRequest(frame_index, RegionKind.FULL, 0, image=rgb))
    m = embedder.embed(
        RegionRequest(
            frame_index,
            RegionKind.MASKED,
            mask.mask_id,
            image=masked_crop(rgb, mask) if rgb is not None else None,
        )
    )
    b = embedder.embed(
        RegionRequest(
            frame_index,
            RegionKind.BBOX,
            mask.mask_id,
            image=bbox_crop(rgb, mask) if rgb is not None else None,
        )
    )
    return DescriptorTriple.from_raw(g, m, b)


def assemble_triple(kf: Keyframe, mask: Mask2D, embedder: Embedder) -> DescriptorTriple:
    """Request the three crops of a mask from the embedder and normalize."""
    return _triple_for_mask(kf.index, mask, embedder, kf.rgb)


def descriptor_worker_step(
    world: WorldMap,
    item: QueueItem,
    embedder: Embedder,
    fusion: FusionFn,
    frames: Mapping[int, Keyframe] | None = None,
) -> int:
    """Process one queue item: embed, fuse and attach view descriptors.

    A mask whose keyframe has been evicted from the segment heap since it was
    queued is dropped (the view no longer counts).  A mask whose embedding is
    unavailable is skipped with a log line; tracking state is untouched.
    Returns the number of view descriptors written.
    """
    kf = frames.get(item.keyframe_index) if frames is not None else None
    rgb = kf.rgb if kf is not None else None
    updated = 0
    for label, mask in item.merged_masks:
        seg = world.segments[label]
        if seg.view_for(item.keyframe_index) is None:
            continue  # stale: this view was evicted while queued
        try:
            triple = _triple_for_mask(item.keyframe_index, mask, embedder, rgb)
        except EmbeddingUnavailable as exc:
            log.warning(
                "no embedding for frame %d mask %d: %s",
                item.keyframe_index, mask.mask_id, exc,
            )
            continue
        d = fusion(triple)
        if set_descriptor(seg, item.keyframe_index, d):
            updated += 1
    return updated


@dataclass
class TableEmbedder:
    """Embedder backed by per-frame lookup tables.

    ``tables`` maps frame_index -> {(mask_id, kind): vector}.  Raises
    :class:`EmbeddingUnavailable` on misses.
    """

    tables: Mapping[int, Mapping[tuple[int, RegionKind], np.ndarray]] = field(
        default_factory=dict
    )

    def embed(self, request: RegionRequest) -> np.ndarray:
        frame = self.tables.get(request.frame_index)
        if frame is None:
            raise EmbeddingUnavailable(f"no embeddings for frame {request.frame_index}")
        key = (request.mask_id if request.kind != RegionKind.FULL else 0, request.kind)
        vec = frame.get(key)
        if vec is None:
            raise EmbeddingUnavailable(
                f"frame {request.frame_index} has no record for mask "
                f"{key[0]} kind {request.kind.name}"
            )
        return vec
