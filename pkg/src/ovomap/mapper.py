"""Per-keyframe segment tracking by label mode voting.

Each incoming 2D mask is matched to an existing 3D segment by projecting the
map into the keyframe and taking the mode of the point labels falling inside
the mask.  A mode of -1 with enough votes bootstraps a new segment; too few
votes discards the mask.  Masks matched to the same label are merged, merged
masks feed the best-view heaps, and unlabeled points under accepted masks
inherit the mask label.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import UNLABELED, ViewEntry, WorldMap, offer_view
from .geometry import (
    GeometryParams,
    Keyframe,
    ProjectedPoints,
    VoxelGrid,
    backproject_depth,
    project_points,
)


@dataclass
class Mask2D:
    """One instance mask of a keyframe.

    ``matched_label`` stays -1 until the mask is matched or bootstraps a
    segment; ``votes`` records the supporting mode count once matched.
    """

    frame_index: int
    mask_id: int
    pixels: np.ndarray  # (H, W) bool
    pixel_count: int
    bbox: tuple[int, int, int, int]  # (u_min, v_min, u_max, v_max) inclusive
    matched_label: int = UNLABELED
    votes: int = 0

    def __post_init__(self):
        if self.mask_id < 1:
            raise ValueError(f"mask_id must be >= 1, got {self.mask_id}")
        if self.pixel_count < 1:
            raise ValueError("empty mask")

    @classmethod
    def from_bitmap(cls, frame_index: int, mask_id: int, bitmap: np.ndarray) -> "Mask2D":
        bitmap = np.asarray(bitmap, dtype=bool)
        vs, us = np.nonzero(bitmap)
        if not len(us):
            raise ValueError(f"mask {mask_id} of frame {frame_index} has no pixels")
        bbox = (int(us.min()), int(vs.min()), int(us.max()), int(vs.max()))
        return cls(
            frame_index=frame_index,
            mask_id=mask_id,
            pixels=bitmap,
            pixel_count=int(len(us)),
            bbox=bbox,
        )


def masks_from_id_image(frame_index: int, ids: np.ndarray) -> list[Mask2D]:
    """Split an instance-id image (0 = background) into per-id masks,
    ascending by id."""
    ids = np.asarray(ids)
    out = []
    for mid in np.unique(ids):
        if mid == 0:
            continue
        out.append(Mask2D.from_bitmap(frame_index, int(mid), ids == mid))
    return out


@dataclass(frozen=True)
class MapperConfig:
    epsilon: int = 5              # a mask is accepted iff votes > epsilon
    heap_capacity: int = 10
    min_new_mask_pixels: int = 200  # smallest mask allowed to bootstrap a segment

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.heap_capacity < 1:
            raise ValueError("heap_capacity must be >= 1")
        if self.min_new_mask_pixels < 0:
            raise ValueError("min_new_mask_pixels must be >= 0")


def label_mode_and_votes(projected: ProjectedPoints, mask: Mask2D) -> tuple[int, int]:
    """Mode of the projected point labels under the mask bitmap.

    Returns (mode, votes).  Ties prefer any real label over -1, then the
    smallest label.  No points under the mask gives (-1, 0).
    """
    if not len(projected):
        return (UNLABELED, 0)
    ui = projected.pixel_int[:, 0]
    vi = projected.pixel_int[:, 1]
    inside = mask.pixels[vi, ui]
    labels = projected.label[inside]
    if not len(labels):
        return (UNLABELED, 0)
    counts = np.bincount(labels + 1)  # slot 0 holds the -1 votes
    present = np.nonzero(counts)[0]
    best = max(present, key=lambda s: (counts[s], s != 0, -s))
    return (int(best) - 1, int(counts[best]))


def merge_2d_segments(masks: list[Mask2D]) -> list[Mask2D]:
    """Collapse matched masks to one mask per label, ascending by label.

    Unmatched masks are dropped.  Merged masks take the bitmap union, the
    bbox union, the summed pixel count (the inputs are disjoint within a
    frame), the summed votes and the smallest member mask_id.
    """
    by_label: dict[int, list[Mask2D]] = {}
    for m in masks:
        if m.matched_label != UNLABELED:
            by_label.setdefault(m.matched_label, []).append(m)
    merged = []
    for label in sorted(by_label):
        group = by_label[label]
        if len(group) == 1:
            merged.append(group[0])
            continue
        frame_index = group[0].frame_index
        union = np.zeros_like(group[0].pixels)
        for m in group:
            union |= m.pixels
        merged.append(
            Mask2D(
                frame_index=frame_index,
                mask_id=min(m.mask_id for m in group),
                pixels=union,
                pixel_count=sum(m.pixel_count for m in group),
                bbox=(
                    min(m.bbox[0] for m in group),
                    min(m.bbox[1] for m in group),
                    max(m.bbox[2] for m in group),
                    max(m.bbox[3] for m in group),
                ),
                matched_label=label,
                votes=sum(m.votes for m in group),
            )
        )
    return merged


def update_point_cloud_labels(
    world: WorldMap, projected: ProjectedPoints, accepted: list[Mask2D]
) -> int:
    """Give unlabeled projected points the label of the accepted mask covering
    them.  Masks apply in descending vote order (ties toward the lower label)
    and the first assignment wins.  Returns the number of points relabeled.
    """
    if not len(projected) or not accepted:
        return 0
    ui = projected.pixel_int[:, 0]
    vi = projected.pixel_int[:, 1]
    free = projected.label == UNLABELED
    relabeled = 0
    for mask in sorted(accepted, key=lambda m: (-m.votes, m.matched_label)):
        take = free & mask.pixels[vi, ui]
        n = int(take.sum())
        if not n:
            continue
        world.labels[projected.point_index[take]] = mask.matched_label
        free &= ~take
        relabeled += n
    return relabeled


@dataclass
class MapperStats:
    """Counters and stage timings for one processed keyframe."""

    points_added: int = 0
    points_projected: int = 0
    segments_created: int = 0
    masks_accepted: int = 0
    masks_discarded: int = 0
    points_relabeled: int = 0
    seconds_preprocess: float = 0.0  # back-projection, voxel fuse, projection
    seconds_matching: float = 0.0    # voting, merging, heap updates, relabeling

    counts: dict = field(default_factory=dict)


def process_keyframe(
    world: WorldMap,
    kf: Keyframe,
    masks: list[Mask2D],
    cfg: MapperConfig = MapperConfig(),
    geom: GeometryParams = GeometryParams(),
    voxel_grid: VoxelGrid | None = None,
) -> tuple[list[Mask2D], MapperStats]:
    """Run one keyframe through the tracker.

    Order matters: the frame's depth is fused into the point cloud before
    matching so a first observation sees its own unlabeled points and the
    mode -1 bootstrap is well defined.

    Args:
        world: map to update in place.
        kf: posed depth frame; its index must be new to the map.
        masks: 2D instance masks of this frame.
        cfg: matching thresholds.
        geom: stride / voxel / culling parameters.
        voxel_grid: persistent occupancy index; rebuilt from the map when not
            given.

    Returns:
        (merged accepted masks, stats).
    """
    for m in masks:
        if m.frame_index != kf.index:
            raise ValueError(
                f"mask frame {m.frame_index} does not match keyframe {kf.index}"
            )
    if world.has_pose(kf.index):
        raise ValueError(f"keyframe {kf.index} was already processed")

    stats = MapperStats()
    t0 = time.perf_counter()

    if voxel_grid is None:
        voxel_grid = VoxelGrid(geom.voxel_size)
        voxel_grid.occupy(world.positions)
    elif abs(voxel_grid.voxel_size - geom.voxel_size) > 1e-12:
        raise ValueError("voxel grid size disagrees with geometry params")

    world.add_pose(kf.index, kf.pose)
    # float32 before fusing keeps voxel keys identical to what a grid rebuilt
    # from the stored (float32) map would produce
    fresh = backproject_depth(kf, geom.stride).astype(np.float32)
    kept = voxel_grid.fuse(fresh)
    world.add_points(kept)
    stats.points_added = len(kept)

    projected = project_points(world.positions, world.labels, kf, z_min=geom.z_min)
    stats.points_projected = len(projected)
    t1 = time.perf_counter()
    stats.seconds_preprocess = t1 - t0

    # big masks first so creation order is deterministic and favors solid views
    for mask in sorted(masks, key=lambda m: (-m.pixel_count, m.mask_id)):
        mode, votes = label_mode_and_votes(projected, mask)
        if votes > cfg.epsilon:
            if mode == UNLABELED:
                if mask.pixel_count >= cfg.min_new_mask_pixels:
                    label = world.create_segment(kf.index, mask.pixel_count)
                    mask.matched_label = label
                    mask.votes = votes
                    stats.segments_created += 1
                    stats.masks_accepted += 1
                else:
                    stats.masks_discarded += 1
            else:
                mask.matched_label = mode
                mask.votes = votes
                stats.masks_accepted += 1
        else:
            stats.masks_discarded += 1

    merged = merge_2d_segments(masks)
    for mm in merged:
        # segments created above already carry this keyframe at the same
        # score, so the duplicate-keyframe rule makes this a no-op for them
        offer_view(
            world.segments[mm.matched_label], ViewEntry(kf.index, mm.pixel_count)
        )

    stats.points_relabeled = update_point_cloud_labels(world, projected, merged)
    stats.seconds_matching = time.perf_counter() - t1
    return merged, stats
