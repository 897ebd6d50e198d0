"""Synthetic scenes with exact ground truth.

A scene is an axis-aligned room with axis-aligned boxes inside it and an
orbit trajectory around the room center.  Frames are rendered analytically by
ray/AABB intersection: depth is the hit distance along the optical axis and
the instance-id image doubles as the 2D segmentation (0 = background, room
faces carry their own ids).  Embeddings come from per-class prototype vectors
with controlled noise and context pollution, so descriptor quality is known
by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import UNLABELED, WorldMap
from .fusion import DescriptorTriple, normalize_descriptor
from .geometry import CameraIntrinsics
from .mapper import Mask2D, masks_from_id_image
from .merger import TrainSample
from .pipeline import Embedder, EmbeddingUnavailable, RegionKind, RegionRequest


@dataclass(frozen=True)
class SceneBox:
    box_min: tuple[float, float, float]
    box_max: tuple[float, float, float]
    class_id: int
    instance_id: int  # >= 1, unique within the scene

    def __post_init__(self):
        if self.instance_id < 1:
            raise ValueError("instance ids start at 1")
        if any(a >= b for a, b in zip(self.box_min, self.box_max)):
            raise ValueError(f"degenerate box {self.box_min}..{self.box_max}")


@dataclass(frozen=True)
class SceneInstance:
    """Renderable/groundtruth unit: an object box or one room face slab."""

    instance_id: int
    class_id: int
    box_min: np.ndarray
    box_max: np.ndarray
    is_room_face: bool


# room face order: x-, x+, y-, y+, z- (floor), z+ (ceiling)
_FACE_AXES = ((0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1))


@dataclass
class SceneSpec:
    """Geometry, trajectory and camera of a synthetic scene."""

    room_min: tuple[float, float, float]
    room_max: tuple[float, float, float]
    boxes: list[SceneBox]
    orbit_radius: float
    orbit_height: float
    n_poses: int
    spin_poses: int = 0  # look-around prelude at the room center
    orbit_target_height: float | None = None  # None: look at the room center
    open_room: bool = False  # True: only the floor is solid, no walls/ceiling
    width: int = 160
    height: int = 120
    hfov_deg: float = 70.0
    seed: int = 1234
    wall_class: int = 6
    floor_class: int = 7
    ceiling_class: int = 8
    class_names: list[str] | None = None
    depth_scale: float = 1.0 / 5000.0  # meters per stored depth unit

    def __post_init__(self):
        if any(a >= b for a, b in zip(self.room_min, self.room_max)):
            raise ValueError("degenerate room")
        ids = [b.instance_id for b in self.boxes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate box instance ids")
        for b in self.boxes:
            inside = all(
                rmin <= lo and hi <= rmax
                for rmin, rmax, lo, hi in zip(self.room_min, self.room_max, b.box_min, b.box_max)
            )
            if not inside:
                raise ValueError(f"box {b.instance_id} leaves the room")
        if self.n_poses < 1:
            raise ValueError("need at least one pose")
        if not 0 <= self.spin_poses < self.n_poses:
            raise ValueError("spin_poses must leave at least one orbit pose")

    @property
    def num_classes(self) -> int:
        box_classes = [b.class_id for b in self.boxes]
        return max(box_classes + [self.wall_class, self.floor_class, self.ceiling_class]) + 1

    def intrinsics(self) -> CameraIntrinsics:
        fx = 0.5 * self.width / np.tan(np.radians(self.hfov_deg) / 2.0)
        return CameraIntrinsics(
            fx=fx,
            fy=fx,
            cx=self.width / 2.0 - 0.5,
            cy=self.height / 2.0 - 0.5,
            width=self.width,
            height=self.height,
            depth_scale=self.depth_scale,
        )

    def center(self) -> np.ndarray:
        return (np.asarray(self.room_min) + np.asarray(self.room_max)) / 2.0

    def poses(self) -> list[np.ndarray]:
        """Camera trajectory.

        An optional look-around prelude spins at the room center so every
        wall is first seen frontally (a cold map otherwise bootstraps
        segments from grazing slivers that fragment the walls).  The
        remaining poses orbit the center, looking inward.
        """
        center = self.center()
        out = []
        for i in range(self.spin_poses):
            phi = 2.0 * np.pi * i / self.spin_poses
            eye = np.array([center[0], center[1], self.orbit_height])
            # pitch up: the spin must clear the box tops so boxes are first
            # seen frontally from the orbit, not as top slivers
            target = eye + np.array([np.cos(phi), np.sin(phi), 0.25])
            out.append(look_at_pose(eye, target))
        target = center.copy()
        if self.orbit_target_height is not None:
            target[2] = self.orbit_target_height
        n_orbit = self.n_poses - self.spin_poses
        for i in range(n_orbit):
            theta = 2.0 * np.pi * i / n_orbit
            eye = np.array(
                [
                    center[0] + self.orbit_radius * np.cos(theta),
                    center[1] + self.orbit_radius * np.sin(theta),
                    self.orbit_height,
                ]
            )
            out.append(look_at_pose(eye, target))
        return out

    def instances(self) -> list[SceneInstance]:
        """Boxes followed by the room faces, ascending by instance id.

        Open rooms have a single face (the floor); closed rooms all six.
        """
        out = [
            SceneInstance(
                instance_id=b.instance_id,
                class_id=b.class_id,
                box_min=np.asarray(b.box_min, dtype=np.float64),
                box_max=np.asarray(b.box_max, dtype=np.float64),
                is_room_face=False,
            )
            for b in sorted(self.boxes, key=lambda b: b.instance_id)
        ]
        next_id = max((b.instance_id for b in self.boxes), default=0) + 1
        rmin = np.asarray(self.room_min, dtype=np.float64)
        rmax = np.asarray(self.room_max, dtype=np.float64)
        faces = (_FACE_AXES[4],) if self.open_room else _FACE_AXES
        for face_index, (axis, side) in enumerate(faces):
            lo = rmin.copy()
            hi = rmax.copy()
            plane = rmax[axis] if side else rmin[axis]
            lo[axis] = plane
            hi[axis] = plane
            if axis == 2:
                class_id = self.ceiling_class if side else self.floor_class
            else:
                class_id = self.wall_class
            out.append(
                SceneInstance(
                    instance_id=next_id + face_index,
                    class_id=class_id,
                    box_min=lo,
                    box_max=hi,
                    is_room_face=True,
                )
            )
        return out

    def instance_classes(self) -> dict[int, int]:
        return {inst.instance_id: inst.class_id for inst in self.instances()}


def look_at_pose(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from eye to target (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    forward = forward / n
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise ValueError("viewing direction is parallel to the up vector")
    right = right / rn
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = eye
    return pose


def render_frame(scene: SceneSpec, pose: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Render (depth, instance ids) for one pose.

    Depth is the distance along the optical axis in meters (0 where the ray
    misses everything); ids are uint16 with 0 as background.
    """
    intr = scene.intrinsics()
    h, w = intr.height, intr.width
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.stack(
        [
            (us.ravel() - intr.cx) / intr.fx,
            (vs.ravel() - intr.cy) / intr.fy,
            np.ones(h * w),
        ],
        axis=1,
    )
    pose = np.asarray(pose, dtype=np.float64)
    dirs = dirs_cam @ pose[:3, :3].T
    origin = pose[:3, 3]

    best_t = np.full(h * w, np.inf)
    best_id = np.zeros(h * w, dtype=np.uint16)

    with np.errstate(divide="ignore", invalid="ignore"):
        for box in scene.boxes:
            t1 = (np.asarray(box.box_min) - origin) / dirs
            t2 = (np.asarray(box.box_max) - origin) / dirs
            t_enter = np.minimum(t1, t2).max(axis=1)
            t_exit = np.maximum(t1, t2).min(axis=1)
            hit = (t_enter <= t_exit) & (t_enter > 1e-9) & (t_enter < best_t)
            best_t[hit] = t_enter[hit]
            best_id[hit] = box.instance_id

        rmin = np.asarray(scene.room_min)
        rmax = np.asarray(scene.room_max)
        t1 = (rmin - origin) / dirs
        t2 = (rmax - origin) / dirs

    face_ids = np.array(
        [inst.instance_id for inst in scene.instances() if inst.is_room_face],
        dtype=np.uint16,
    )
    if scene.open_room:
        # only the floor plane (z = room_min.z) is solid; other rays escape
        t_floor = t1[:, 2]
        with np.errstate(invalid="ignore"):
            hit_xy = origin[:2] + t_floor[:, None] * dirs[:, :2]
            on_floor = (
                (t_floor > 1e-9)
                & (hit_xy >= rmin[:2]).all(axis=1)
                & (hit_xy <= rmax[:2]).all(axis=1)
            )
        take = on_floor & (t_floor < best_t)
        best_t[take] = t_floor[take]
        best_id[take] = face_ids[0]
    else:
        # the room is an inward-facing shell: from inside, a ray exits at the
        # nearest face along its direction
        t_axis_min = np.minimum(t1, t2)
        t_axis_max = np.maximum(t1, t2)
        t_enter = t_axis_min.max(axis=1)
        t_exit = t_axis_max.min(axis=1)
        inside = t_enter < 0
        room_hit = (t_exit > 1e-9) & (t_enter <= t_exit)
        t_room = np.where(inside, t_exit, t_enter)
        axis = np.where(
            inside[:, None],
            t_axis_max == t_room[:, None],
            t_axis_min == t_room[:, None],
        ).argmax(axis=1)
        going_positive = np.take_along_axis(dirs, axis[:, None], axis=1).ravel() > 0
        side = np.where(inside, going_positive, ~going_positive).astype(np.int64)
        face = face_ids[axis * 2 + side]
        take = room_hit & (t_room > 1e-9) & (t_room < best_t)
        best_t[take] = t_room[take]
        best_id[take] = face[take]

    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return depth.reshape(h, w), best_id.reshape(h, w)


@dataclass
class PrototypeEmbedder:
    """Per-class prototype directions plus Gaussian noise.

    The masked crop is the cleanest view of a class; the bbox crop mixes in a
    ``gamma`` fraction of the other visible classes (context pollution); the
    full-frame vector is the noisy mean of everything visible.
    """

    prototypes: np.ndarray  # (C, D), unit rows
    sigma: float = 0.05
    gamma: float = 0.3

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.sigma < 0 or not 0.0 <= self.gamma <= 1.0:
            raise ValueError("sigma must be >= 0 and gamma in [0, 1]")

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @classmethod
    def create(
        cls,
        num_classes: int,
        dim: int,
        seed: int = 0,
        sigma: float = 0.05,
        gamma: float = 0.3,
        basis: bool = False,
    ) -> "PrototypeEmbedder":
        """Pairwise orthogonal prototypes (requires num_classes <= dim).

        ``basis=True`` uses the standard basis; otherwise a seeded random
        orthonormal frame.
        """
        if num_classes > dim:
            raise ValueError("orthogonal prototypes need num_classes <= dim")
        if basis:
            protos = np.eye(dim)[:num_classes]
        else:
            rng = np.random.default_rng(seed)
            q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            protos = q[:num_classes]
        return cls(prototypes=protos, sigma=sigma, gamma=gamma)

    def _noise(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, self.sigma, self.dim) if self.sigma > 0 else 0.0

    def masked_vec(self, class_id: int, rng: np.random.Generator) -> np.ndarray:
        return normalize_descriptor(self.prototypes[class_id] + self._noise(rng))

    def bbox_vec(
        self, class_id: int, visible_classes: list[int], rng: np.random.Generator
    ) -> np.ndarray:
        others = [c for c in visible_classes if c != class_id]
        mix = self.prototypes[others].mean(axis=0) if others else 0.0
        raw = (1.0 - self.gamma) * self.prototypes[class_id] + self.gamma * mix
        return normalize_descriptor(raw + self._noise(rng))

    def global_vec(self, visible_classes: list[int], rng: np.random.Generator) -> np.ndarray:
        mean = self.prototypes[sorted(set(visible_classes))].mean(axis=0)
        return normalize_descriptor(mean + self._noise(rng))


def synth_embeddings(
    scene: SceneSpec,
    masks: list[Mask2D],
    embedder: PrototypeEmbedder,
    seed: int = 0,
) -> dict[int, DescriptorTriple]:
    """Descriptor triples for one frame's masks, keyed by mask id.

    Deterministic for a given (scene, frame, seed): the noise stream is
    seeded per frame and consumed in a fixed order (global first, then masks
    ascending by id).
    """
    if not masks:
        return {}
    frame_index = masks[0].frame_index
    classes = scene.instance_classes()
    visible = sorted({classes[m.mask_id] for m in masks})
    rng = np.random.default_rng(np.random.SeedSequence([seed, frame_index]))
    d_global = embedder.global_vec(visible, rng)
    out = {}
    for m in sorted(masks, key=lambda m: m.mask_id):
        c = classes[m.mask_id]
        d_masked = embedder.masked_vec(c, rng)
        d_bbox = embedder.bbox_vec(c, visible, rng)
        out[m.mask_id] = DescriptorTriple(
            d_global=d_global, d_masked=d_masked, d_bbox=d_bbox
        )
    return out


def embedding_table(
    triples: dict[int, DescriptorTriple]
) -> dict[tuple[int, RegionKind], np.ndarray]:
    """Flatten per-mask triples into the (mask_id, kind) -> vector table used
    by file and in-memory embedders.  The shared full-frame vector is stored
    once under mask id 0."""
    table: dict[tuple[int, RegionKind], np.ndarray] = {}
    for mid in sorted(triples):
        t = triples[mid]
        table.setdefault((0, RegionKind.FULL), t.d_global)
        table[(mid, RegionKind.MASKED)] = t.d_masked
        table[(mid, RegionKind.BBOX)] = t.d_bbox
    return table


class SyntheticEmbedder(Embedder):
    """In-memory embedding provider for a synthetic scene.

    Renders frames lazily, so end-to-end runs need no files on disk.
    """

    def __init__(self, scene: SceneSpec, embedder: PrototypeEmbedder, seed: int = 0):
        self.scene = scene
        self.proto = embedder
        self.seed = seed
        self._poses = scene.poses()
        self._cache: dict[int, dict[tuple[int, RegionKind], np.ndarray]] = {}

    def _table(self, frame_index: int) -> dict[tuple[int, RegionKind], np.ndarray]:
        if frame_index not in self._cache:
            if not 0 <= frame_index < len(self._poses):
                raise EmbeddingUnavailable(f"no pose for frame {frame_index}")
            _, ids = render_frame(self.scene, self._poses[frame_index])
            masks = masks_from_id_image(frame_index, ids)
            triples = synth_embeddings(self.scene, masks, self.proto, self.seed)
            self._cache[frame_index] = embedding_table(triples)
        return self._cache[frame_index]

    def embed(self, request: RegionRequest) -> np.ndarray:
        table = self._table(request.frame_index)
        key = (request.mask_id if request.kind != RegionKind.FULL else 0, request.kind)
        if key not in table:
            raise EmbeddingUnavailable(
                f"frame {request.frame_index}: no region ({key[0]}, {request.kind.name})"
            )
        return table[key]


@dataclass
class TrackingReport:
    """Agreement between the built map and the scene's ground truth.

    ``coverage`` is per ground-truth instance: IoU between its point set and
    the point set of its best-matching segment.  ``purity`` is per segment:
    the fraction of its points belonging to its majority instance.
    """

    coverage: dict[int, float]
    purity: dict[int, float]
    best_segment: dict[int, int]
    majority_instance: dict[int, int]
    point_instance: np.ndarray


def assign_points_to_instances(points: np.ndarray, scene: SceneSpec) -> np.ndarray:
    """Nearest-surface instance id per point (ties toward the lower id)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    instances = scene.instances()
    dists = np.empty((len(instances), len(pts)))
    for i, inst in enumerate(instances):
        below = np.maximum(inst.box_min - pts, 0.0)
        above = np.maximum(pts - inst.box_max, 0.0)
        dists[i] = np.einsum("ij,ij->i", below, below) + np.einsum("ij,ij->i", above, above)
    ids = np.array([inst.instance_id for inst in instances], dtype=np.int64)
    return ids[np.argmin(dists, axis=0)]


def oracle_tracking_metrics(world: WorldMap, scene: SceneSpec) -> TrackingReport:
    """Score tracking against ground truth by point-to-instance membership."""
    assignment = assign_points_to_instances(world.positions, scene)
    labels = np.asarray(world.labels, dtype=np.int64)

    coverage: dict[int, float] = {}
    best_segment: dict[int, int] = {}
    label_total = {
        int(lab): int(n)
        for lab, n in zip(*np.unique(labels[labels != UNLABELED], return_counts=True))
    }
    for inst in scene.instances():
        iid = inst.instance_id
        in_inst = assignment == iid
        n_inst = int(in_inst.sum())
        if n_inst == 0:
            coverage[iid] = 0.0
            best_segment[iid] = UNLABELED
            continue
        inst_labels = labels[in_inst]
        inst_labels = inst_labels[inst_labels != UNLABELED]
        if not len(inst_labels):
            coverage[iid] = 0.0
            best_segment[iid] = UNLABELED
            continue
        labs, counts = np.unique(inst_labels, return_counts=True)
        k = np.lexsort((labs, -counts))[0]  # most overlap, ties to the lower label
        lab, inter = int(labs[k]), int(counts[k])
        union = n_inst + label_total[lab] - inter
        coverage[iid] = inter / union
        best_segment[iid] = lab

    purity: dict[int, float] = {}
    majority: dict[int, int] = {}
    for seg in world.segments:
        in_seg = labels == seg.label
        n_seg = int(in_seg.sum())
        if n_seg == 0:
            continue
        insts, counts = np.unique(assignment[in_seg], return_counts=True)
        k = np.lexsort((insts, -counts))[0]
        purity[seg.label] = int(counts[k]) / n_seg
        majority[seg.label] = int(insts[k])

    return TrackingReport(
        coverage=coverage,
        purity=purity,
        best_segment=best_segment,
        majority_instance=majority,
        point_instance=assignment,
    )


def standard_scene(
    seed: int = 1234,
    n_poses: int = 120,
    width: int = 160,
    height: int = 120,
) -> SceneSpec:
    """The reference scene: an open desk-scale tabletop with 8 boxes over 6 classes.

    Desk scale keeps the stride-2 pixel footprint below the 0.02 m voxel, so
    re-observed surfaces fall into already occupied cells and mode votes are
    dominated by labeled points instead of freshly fused ones.  The high
    oblique orbit keeps every instance in view from the first frame, so each
    object bootstraps with one large mask instead of accreting fragments.
    """
    boxes = [
        SceneBox((0.14, 0.13, 0.0), (0.30, 0.29, 0.14), class_id=0, instance_id=1),
        SceneBox((0.74, 0.13, 0.0), (0.90, 0.29, 0.18), class_id=1, instance_id=2),
        SceneBox((0.74, 0.57, 0.0), (0.90, 0.73, 0.12), class_id=2, instance_id=3),
        SceneBox((0.14, 0.57, 0.0), (0.30, 0.73, 0.16), class_id=3, instance_id=4),
        SceneBox((0.44, 0.11, 0.0), (0.60, 0.25, 0.10), class_id=4, instance_id=5),
        SceneBox((0.44, 0.63, 0.0), (0.60, 0.77, 0.14), class_id=5, instance_id=6),
        SceneBox((0.12, 0.36, 0.0), (0.26, 0.50, 0.12), class_id=0, instance_id=7),
        SceneBox((0.78, 0.36, 0.0), (0.92, 0.50, 0.10), class_id=1, instance_id=8),
    ]
    return SceneSpec(
        room_min=(0.0, 0.0, 0.0),
        room_max=(1.04, 0.88, 0.54),
        boxes=boxes,
        orbit_radius=0.55,
        orbit_height=0.50,
        orbit_target_height=0.08,
        open_room=True,
        n_poses=n_poses,
        width=width,
        height=height,
        seed=seed,
        class_names=[
            "crate", "carton", "tray", "tin", "block", "spool",
            "wall", "floor", "ceiling",
        ],
    )


def _rect_points(lo: np.ndarray, hi: np.ndarray, axis: int, plane: float, spacing: float) -> np.ndarray:
    """Grid of points on an axis-aligned rectangle, half-spacing inset."""
    a, b = (i for i in range(3) if i != axis)
    ca = np.arange(lo[a] + spacing / 2.0, hi[a], spacing)
    cb = np.arange(lo[b] + spacing / 2.0, hi[b], spacing)
    if not len(ca) or not len(cb):
        return np.empty((0, 3))
    ga, gb = np.meshgrid(ca, cb)
    pts = np.empty((ga.size, 3))
    pts[:, a] = ga.ravel()
    pts[:, b] = gb.ravel()
    pts[:, axis] = plane
    return pts


def sample_gt_vertices(scene: SceneSpec, spacing: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth surface vertices with class labels.

    Samples a regular grid on every observable face: all room faces and all
    box faces except the bottoms (boxes rest on the floor).
    """
    verts = []
    labels = []
    for inst in scene.instances():
        if inst.is_room_face:
            axis = int(np.nonzero(inst.box_min == inst.box_max)[0][0])
            pts = _rect_points(inst.box_min, inst.box_max, axis, inst.box_min[axis], spacing)
            if len(pts):
                verts.append(pts)
                labels.append(np.full(len(pts), inst.class_id, dtype=np.int64))
            continue
        for axis in range(3):
            for side in (0, 1):
                if axis == 2 and side == 0:
                    continue  # bottom face is unobservable
                plane = inst.box_max[axis] if side else inst.box_min[axis]
                pts = _rect_points(inst.box_min, inst.box_max, axis, plane, spacing)
                if len(pts):
                    verts.append(pts)
                    labels.append(np.full(len(pts), inst.class_id, dtype=np.int64))
    return np.concatenate(verts), np.concatenate(labels)


def _class_color(class_id: int) -> tuple[int, int, int]:
    return ((37 * class_id + 93) % 256, (101 * class_id + 45) % 256, (59 * class_id + 171) % 256)


def write_sequence(
    scene: SceneSpec,
    out_dir,
    sigma: float = 0.05,
    gamma: float = 0.3,
    embed_dim: int = 32,
    basis_prototypes: bool = False,
    include_rgb: bool = True,
    gt_spacing: float = 0.1,
) -> PrototypeEmbedder:
    """Render the scene to an on-disk sequence.

    Writes depth/mask/rgb images, per-frame embedding containers, poses, a
    manifest (stride 1), a class table with the prototype embeddings and
    ground-truth frequencies, sampled ground-truth vertices, and the
    mask-to-class target table used for merger training.

    Returns the prototype embedder the embeddings were drawn from.
    """
    from .evaluation import ClassTable
    from .io import (
        FrameRecord,
        SequenceManifest,
        save_class_table,
        save_manifest,
        save_points_ply,
        save_poses,
        write_embeddings,
        write_rgb_png,
        write_u16_png,
    )

    out = Path(out_dir)
    for sub in ("depth", "mask", "embed") + (("rgb",) if include_rgb else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)

    proto = PrototypeEmbedder.create(
        scene.num_classes, embed_dim, seed=scene.seed,
        sigma=sigma, gamma=gamma, basis=basis_prototypes,
    )
    classes = scene.instance_classes()
    id_to_color = {0: (0, 0, 0)}
    for iid, cid in classes.items():
        id_to_color[iid] = _class_color(cid)

    poses = scene.poses()
    frames = []
    for i, pose in enumerate(poses):
        depth, ids = render_frame(scene, pose)
        stored = np.clip(np.round(depth / scene.depth_scale), 0, 65535).astype(np.uint16)
        write_u16_png(out / "depth" / f"{i:06d}.png", stored)
        write_u16_png(out / "mask" / f"{i:06d}.png", ids)
        rec = FrameRecord(
            index=i,
            depth=f"depth/{i:06d}.png",
            mask=f"mask/{i:06d}.png",
            embeddings=f"embed/{i:06d}.bin",
        )
        if include_rgb:
            lut = np.zeros((int(ids.max()) + 1, 3), dtype=np.uint8)
            for iid, color in id_to_color.items():
                if iid <= ids.max():
                    lut[iid] = color
            write_rgb_png(out / "rgb" / f"{i:06d}.png", lut[ids])
            rec.rgb = f"rgb/{i:06d}.png"
        masks = masks_from_id_image(i, ids)
        triples = synth_embeddings(scene, masks, proto, seed=scene.seed)
        write_embeddings(out / "embed" / f"{i:06d}.bin", embedding_table(triples))
        frames.append(rec)

    save_poses(out / "poses.txt", list(range(len(poses))), poses)
    manifest = SequenceManifest(
        intrinsics=scene.intrinsics(),
        poses="poses.txt",
        frames=frames,
        keyframe_stride=1,
        root=out,
    )
    save_manifest(out / "manifest.json", manifest)

    gt_verts, gt_labels = sample_gt_vertices(scene, spacing=gt_spacing)
    save_points_ply(out / "gt_vertices.ply", gt_verts, gt_labels)
    names = scene.class_names or [f"class_{i}" for i in range(scene.num_classes)]
    if len(names) != scene.num_classes:
        raise ValueError("class_names length must match the class count")
    freqs = np.bincount(gt_labels, minlength=scene.num_classes).astype(np.uint64)
    save_class_table(
        out / "classes.ovoc",
        ClassTable(names=names, embeddings=proto.prototypes, frequencies=freqs),
    )
    (out / "targets.json").write_text(
        json.dumps({"mask_classes": {str(k): v for k, v in classes.items()}}, indent=2)
        + "\n"
    )
    return proto


def make_fusion_corpus(
    n_samples: int,
    embedder: PrototypeEmbedder,
    seed: int = 0,
    min_visible: int = 2,
    max_visible: int = 5,
) -> list[TrainSample]:
    """Random (triple, prototype target) pairs mimicking per-mask extraction.

    Each sample picks a subject class and a handful of co-visible classes,
    then draws the three crop embeddings from the prototype model.
    """
    num_classes = embedder.prototypes.shape[0]
    if not 1 <= min_visible <= max_visible <= num_classes:
        raise ValueError("need 1 <= min_visible <= max_visible <= num_classes")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_samples):
        n_vis = int(rng.integers(min_visible, max_visible + 1))
        visible = rng.choice(num_classes, size=n_vis, replace=False).tolist()
        subject = int(visible[0])
        triple = DescriptorTriple(
            d_global=embedder.global_vec(visible, rng),
            d_masked=embedder.masked_vec(subject, rng),
            d_bbox=embedder.bbox_vec(subject, visible, rng),
        )
        samples.append(TrainSample(triple=triple, target=embedder.prototypes[subject]))
    return samples
