"""Pinhole camera geometry and voxel bookkeeping.

All poses are 4x4 camera-to-world transforms and follow the usual pinhole
convention: +x right, +y down, +z forward (optical axis).  Depth images store
the distance along the optical axis in meters; zero marks invalid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Z_MIN = 0.01  # meters; points closer than this are culled

OCCLUSION_ABS = 0.05  # meters
OCCLUSION_REL = 0.02  # fraction of measured depth


def occlusion_tolerance(depth: np.ndarray | float) -> np.ndarray | float:
    """Depth agreement band: a projected point within max(0.05, 0.02*z) of the
    measured depth z counts as visible."""
    return np.maximum(OCCLUSION_ABS, OCCLUSION_REL * depth)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0  # meters per stored depth unit

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass
class Keyframe:
    """A posed RGB-D frame selected for mapping."""

    index: int
    intrinsics: CameraIntrinsics
    pose: np.ndarray                 # (4, 4) camera-to-world
    depth: np.ndarray                # (H, W) meters, 0 = invalid
    rgb: np.ndarray | None = None    # (H, W, 3) uint8, optional

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        h, w = self.depth.shape
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError(
                f"depth shape {self.depth.shape} does not match intrinsics "
                f"{self.intrinsics.height}x{self.intrinsics.width}"
            )


@dataclass(frozen=True)
class GeometryParams:
    """Knobs for map point creation and visibility tests."""

    stride: int = 2           # back-projection pixel stride
    voxel_size: float = 0.02  # meters
    z_min: float = Z_MIN

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")


def backproject_depth(kf: Keyframe, stride: int = 2) -> np.ndarray:
    """Lift the depth image to world coordinates on a pixel stride grid.

    Pixels with zero depth are skipped.  Returns (M, 3) float64 world points
    in row-major pixel scan order.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    intr = kf.intrinsics
    vs = np.arange(0, intr.height, stride)
    us = np.arange(0, intr.width, stride)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    z = kf.depth[vv, uu].ravel()
    uu = uu.ravel().astype(np.float64)
    vv = vv.ravel().astype(np.float64)
    valid = z > 0
    z = z[valid]
    if not len(z):
        return np.empty((0, 3), dtype=np.float64)
    x = (uu[valid] - intr.cx) / intr.fx * z
    y = (vv[valid] - intr.cy) / intr.fy * z
    cam = np.stack([x, y, z], axis=1)
    r = kf.pose[:3, :3]
    t = kf.pose[:3, 3]
    return cam @ r.T + t


@dataclass
class ProjectedPoints:
    """Map points visible in one keyframe, after frustum and occlusion tests.

    Structure-of-arrays: row i describes one surviving map point.
    """

    pixel: np.ndarray        # (M, 2) float64 (u, v)
    pixel_int: np.ndarray    # (M, 2) int64 rounded pixel used for lookups
    depth_cam: np.ndarray    # (M,) camera-frame z
    label: np.ndarray        # (M,) current point labels
    point_index: np.ndarray  # (M,) row into the map point arrays

    def __len__(self) -> int:
        return len(self.depth_cam)

    @classmethod
    def empty(cls) -> "ProjectedPoints":
        return cls(
            pixel=np.empty((0, 2), dtype=np.float64),
            pixel_int=np.empty((0, 2), dtype=np.int64),
            depth_cam=np.empty((0,), dtype=np.float64),
            label=np.empty((0,), dtype=np.int64),
            point_index=np.empty((0,), dtype=np.int64),
        )


def project_points(
    positions: np.ndarray,
    labels: np.ndarray,
    kf: Keyframe,
    z_min: float = Z_MIN,
) -> ProjectedPoints:
    """Project map points into a keyframe, keeping the visible ones.

    A point survives iff it lies in front of the camera (z > z_min), its pixel
    rounded to the nearest integer falls inside the image (rounding also picks
    the depth-lookup pixel, so boundary pixels are judged at their rounded
    position), the depth image is valid there, and the camera-frame depth
    agrees with the measurement within the occlusion tolerance.
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels)
    if len(pts) != len(labels):
        raise ValueError("positions and labels length mismatch")
    if not len(pts):
        return ProjectedPoints.empty()

    intr = kf.intrinsics
    r = kf.pose[:3, :3]
    t = kf.pose[:3, 3]
    cam = (pts - t) @ r  # R^T (p - t)

    idx = np.nonzero(cam[:, 2] > z_min)[0]
    if not len(idx):
        return ProjectedPoints.empty()
    cam = cam[idx]
    z = cam[:, 2]
    u = intr.fx * cam[:, 0] / z + intr.cx
    v = intr.fy * cam[:, 1] / z + intr.cy
    ui = np.rint(u).astype(np.int64)
    vi = np.rint(v).astype(np.int64)
    inside = (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    idx, z, u, v, ui, vi = idx[inside], z[inside], u[inside], v[inside], ui[inside], vi[inside]
    if not len(idx):
        return ProjectedPoints.empty()

    measured = kf.depth[vi, ui]
    visible = (measured > 0) & (np.abs(z - measured) <= occlusion_tolerance(measured))
    idx, z, u, v, ui, vi = (
        idx[visible], z[visible], u[visible], v[visible], ui[visible], vi[visible],
    )
    return ProjectedPoints(
        pixel=np.stack([u, v], axis=1),
        pixel_int=np.stack([ui, vi], axis=1),
        depth_cam=z,
        label=np.asarray(labels)[idx].astype(np.int64),
        point_index=idx.astype(np.int64),
    )


_CELL_OFFSET = 1 << 20  # supports |cell index| < 2^20 per axis


def _cell_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    cells = np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)
    if len(cells) and np.abs(cells).max() >= _CELL_OFFSET:
        raise ValueError("point coordinates exceed the voxel index range")
    shifted = cells + _CELL_OFFSET
    return (shifted[:, 0] << 42) | (shifted[:, 1] << 21) | shifted[:, 2]


class VoxelGrid:
    """Occupancy index over floor(p / voxel_size) cells.

    Keeps at most one point per cell.  ``fuse`` is idempotent under replay and
    its output does not depend on the input point order: within a batch the
    lexicographically smallest point wins a contested cell, and appended
    points come out sorted by cell key.
    """

    def __init__(self, voxel_size: float = 0.02):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self._occupied: set[int] = set()

    def __len__(self) -> int:
        return len(self._occupied)

    def occupy(self, points: np.ndarray) -> None:
        """Mark cells as occupied without returning anything."""
        pts = np.asarray(points).reshape(-1, 3)
        if len(pts):
            self._occupied.update(_cell_keys(pts, self.voxel_size).tolist())

    def fuse(self, points: np.ndarray) -> np.ndarray:
        """Return the subset of ``points`` landing in previously empty cells
        and mark those cells occupied."""
        pts = np.asarray(points).reshape(-1, 3)
        if not len(pts):
            return pts[:0].copy()
        order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
        pts = pts[order]
        keys = _cell_keys(pts, self.voxel_size)
        uniq_keys, first = np.unique(keys, return_index=True)
        fresh = [i for k, i in zip(uniq_keys.tolist(), first.tolist()) if k not in self._occupied]
        self._occupied.update(uniq_keys.tolist())
        return pts[np.array(fresh, dtype=np.int64)] if fresh else pts[:0].copy()


def voxel_fuse(
    existing: np.ndarray, new_points: np.ndarray, voxel_size: float = 0.02
) -> np.ndarray:
    """Functional form of :class:`VoxelGrid`: the subset of ``new_points``
    whose cells hold no existing point."""
    grid = VoxelGrid(voxel_size)
    grid.occupy(existing)
    return grid.fuse(new_points)
