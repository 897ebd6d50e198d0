"""Persistent map state: labeled 3D points, tracked segments, keyframe poses.

A segment is a tracked 3D instance.  It owns a bounded best-view heap: the
top-``capacity`` observations ranked by score (mask pixel count), ties broken
toward the lower keyframe index.  View descriptors live on the heap entries;
the segment descriptor is their medoid and is refreshed on every descriptor
arrival and on every eviction that removes a descriptor.

Labels index ``WorldMap.segments`` directly and are never recycled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fusion import medoid_descriptor, normalize_descriptor

DEFAULT_HEAP_CAPACITY = 10  # best views kept per segment

UNLABELED = -1

_POSE_ATOL = 1e-6


@dataclass
class ViewEntry:
    """One scored observation of a segment from a keyframe."""

    keyframe_index: int
    score: int
    descriptor: np.ndarray | None = None


def _entry_rank(e: ViewEntry) -> tuple[int, int]:
    # higher is better: score first, then the lower keyframe index
    return (e.score, -e.keyframe_index)


@dataclass
class Segment:
    label: int
    capacity: int = DEFAULT_HEAP_CAPACITY
    descriptor: np.ndarray | None = None
    views: list[ViewEntry] = field(default_factory=list)

    def view_for(self, keyframe_index: int) -> ViewEntry | None:
        for e in self.views:
            if e.keyframe_index == keyframe_index:
                return e
        return None

    def descriptor_pool(self) -> list[tuple[int, np.ndarray]]:
        return [(e.keyframe_index, e.descriptor) for e in self.views if e.descriptor is not None]

    def refresh_descriptor(self) -> None:
        pool = self.descriptor_pool()
        self.descriptor = medoid_descriptor(pool) if pool else None


def offer_view(segment: Segment, entry: ViewEntry) -> bool:
    """Offer an observation to the segment's bounded best-view heap.

    Keeps the ``capacity`` best entries under (score desc, keyframe asc).  A
    repeated keyframe index replaces the stored entry only with a higher
    score.  Returns True iff the heap changed.
    """
    if entry.score <= 0:
        raise ValueError(f"view score must be positive, got {entry.score}")
    if entry.keyframe_index < 0:
        raise ValueError(f"negative keyframe index: {entry.keyframe_index}")

    existing = segment.view_for(entry.keyframe_index)
    if existing is not None:
        if entry.score > existing.score:
            had_descriptor = existing.descriptor is not None
            segment.views.remove(existing)
            segment.views.append(entry)
            _sort_views(segment)
            if had_descriptor or entry.descriptor is not None:
                segment.refresh_descriptor()
            return True
        return False

    if len(segment.views) < segment.capacity:
        segment.views.append(entry)
        _sort_views(segment)
        if entry.descriptor is not None:
            segment.refresh_descriptor()
        return True

    worst = segment.views[-1]  # sorted best-first, so the tail is the eviction candidate
    if _entry_rank(entry) > _entry_rank(worst):
        segment.views.pop()
        segment.views.append(entry)
        _sort_views(segment)
        if worst.descriptor is not None or entry.descriptor is not None:
            segment.refresh_descriptor()
        return True
    return False


def _sort_views(segment: Segment) -> None:
    segment.views.sort(key=lambda e: (-e.score, e.keyframe_index))


def set_descriptor(segment: Segment, keyframe_index: int, d: np.ndarray) -> bool:
    """Attach a view descriptor, then refresh the segment medoid.

    Returns False when the keyframe is no longer on the heap (stale arrival).
    Non-unit vectors are normalized; near-zero vectors raise.
    """
    v = normalize_descriptor(d)
    entry = segment.view_for(keyframe_index)
    if entry is None:
        return False
    entry.descriptor = v
    segment.refresh_descriptor()
    return True


class WorldMap:
    """The incrementally built map: poses, labeled points and segments."""

    def __init__(self, heap_capacity: int = DEFAULT_HEAP_CAPACITY):
        if heap_capacity < 1:
            raise ValueError(f"heap capacity must be >= 1, got {heap_capacity}")
        self.heap_capacity = heap_capacity
        self.pose_indices: list[int] = []
        self.poses: list[np.ndarray] = []
        # points are stored float32: the on-disk contract is 4-byte reals and
        # keeping memory identical to disk makes save/load the identity
        self.positions = np.empty((0, 3), dtype=np.float32)
        self.labels = np.empty((0,), dtype=np.int32)
        self.segments: list[Segment] = []

    @property
    def next_label(self) -> int:
        return len(self.segments)

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]

    def has_pose(self, keyframe_index: int) -> bool:
        return keyframe_index in self.pose_indices

    def add_pose(self, keyframe_index: int, pose: np.ndarray) -> None:
        if self.has_pose(keyframe_index):
            raise ValueError(f"keyframe {keyframe_index} already registered")
        pose = np.asarray(pose, dtype=np.float64)
        _validate_pose(pose)
        self.pose_indices.append(keyframe_index)
        self.poses.append(pose)

    def add_points(self, points: np.ndarray) -> int:
        """Append unlabeled points; returns the index of the first new row."""
        pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
        start = self.num_points
        if len(pts):
            self.positions = np.concatenate([self.positions, pts])
            self.labels = np.concatenate(
                [self.labels, np.full(len(pts), UNLABELED, dtype=np.int32)]
            )
        return start

    def create_segment(self, keyframe_index: int, score: int) -> int:
        """Allocate the next label and seed its heap with one view."""
        if keyframe_index < 0:
            raise ValueError(f"negative keyframe index: {keyframe_index}")
        if score <= 0:
            raise ValueError(f"view score must be positive, got {score}")
        label = self.next_label
        seg = Segment(label=label, capacity=self.heap_capacity)
        seg.views.append(ViewEntry(keyframe_index, score))
        self.segments.append(seg)
        return label

    def segment(self, label: int) -> Segment:
        return self.segments[label]


def _validate_pose(pose: np.ndarray) -> None:
    if pose.shape != (4, 4):
        raise ValueError(f"pose must be 4x4, got {pose.shape}")
    r = pose[:3, :3]
    if not np.allclose(r.T @ r, np.eye(3), atol=_POSE_ATOL):
        raise ValueError("pose rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > _POSE_ATOL:
        raise ValueError("pose rotation must have determinant +1")
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=_POSE_ATOL):
        raise ValueError("pose bottom row must be [0 0 0 1]")
