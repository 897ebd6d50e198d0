"""On-disk formats and sequence loading.

Binary containers share one style: a 4-byte ASCII magic, a little-endian u32
version, then fixed-layout records.

* ``OVOE`` per-frame embeddings: header (magic, version, count, dim), then
  ``count`` records of (mask_id u32, region u8, dim float32).  Region 0 is the
  full frame (stored once, mask_id 0), 1 the masked crop, 2 the bbox crop.
* ``OVOC`` class table: header (magic, version, count, dim), then per class a
  u32-length-prefixed UTF-8 name, a u8 frequency flag (+ u64 frequency when
  set) and dim float32 of unit embedding.
* ``OVOS`` segments: header (magic, version, count, dim), then per segment
  label u32, descriptor flag u8 (+ dim float64 when set), view count u32 and
  (keyframe u32, score u32) view entries, best first.  Per-view descriptors
  are transient worker state and are not persisted.
* ``OVOM`` merger checkpoint: magic, version, dim, then every parameter
  tensor as float64 in the order defined by ``MergerParams.to_vector``.

Points are an ASCII polygon file with float32 x, y, z and int32 label per
vertex.  Poses are one text line per keyframe: the index followed by the 16
row-major entries of the camera-to-world matrix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from PIL import Image

from .core import Segment, ViewEntry, WorldMap
from .geometry import CameraIntrinsics, Keyframe
from .evaluation import ClassTable
from .fusion import DescriptorTriple
from .mapper import Mask2D, masks_from_id_image
from .merger import MergerParams, TrainSample
from .pipeline import Embedder, EmbeddingUnavailable, RegionKind, RegionRequest

FORMAT_VERSION = 1

POINTS_FILENAME = "points.ply"
SEGMENTS_FILENAME = "segments.bin"
POSES_FILENAME = "poses.txt"
STATS_FILENAME = "stats.json"


class FormatError(IOError):
    """A file failed to parse as the expected container."""


# -- images -------------------------------------------------------------


def write_u16_png(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint16)
    Image.fromarray(arr).save(path)


def read_u16_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.uint16)


def write_rgb_png(path, arr: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8), mode="RGB").save(path)


def read_rgb_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


# -- poses ---------------------------------------------------------------


def save_poses(path, indices: list[int], poses: list[np.ndarray]) -> None:
    if len(indices) != len(poses):
        raise ValueError("indices/poses length mismatch")
    lines = []
    for idx, pose in zip(indices, poses):
        vals = " ".join(f"{v:.17g}" for v in np.asarray(pose, dtype=np.float64).ravel())
        lines.append(f"{idx} {vals}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_poses(path) -> tuple[list[int], list[np.ndarray]]:
    indices: list[int] = []
    poses: list[np.ndarray] = []
    for ln, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 17:
            raise FormatError(f"{path}: line {ln + 1}: expected 17 fields, got {len(parts)}")
        indices.append(int(parts[0]))
        poses.append(np.array([float(p) for p in parts[1:]], dtype=np.float64).reshape(4, 4))
    return indices, poses


# -- embeddings container (OVOE) ------------------------------------------


def write_embeddings(path, table: Mapping[tuple[int, RegionKind], np.ndarray]) -> None:
    keys = sorted(table, key=lambda k: (k[0], int(k[1])))
    dim = len(next(iter(table.values()))) if table else 0
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", b"OVOE", FORMAT_VERSION, len(keys), dim))
        for mask_id, kind in keys:
            vec = np.asarray(table[(mask_id, kind)], dtype="<f4")
            if vec.shape != (dim,):
                raise ValueError("inconsistent embedding dims")
            f.write(struct.pack("<IB", mask_id, int(kind)))
            f.write(vec.tobytes())


def read_embeddings(path) -> dict[tuple[int, RegionKind], np.ndarray]:
    raw = Path(path).read_bytes()
    magic, version, count, dim = _unpack(path, "<4sIII", raw, 0)
    if magic != b"OVOE":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = struct.calcsize("<4sIII")
    rec = struct.calcsize("<IB")
    out: dict[tuple[int, RegionKind], np.ndarray] = {}
    for _ in range(count):
        mask_id, kind = _unpack(path, "<IB", raw, offset)
        offset += rec
        vec = _read_floats(path, raw, "<f4", dim, offset)
        offset += 4 * dim
        out[(mask_id, RegionKind(kind))] = vec.astype(np.float64)
    return out


def _unpack(path, fmt: str, raw: bytes, offset: int):
    size = struct.calcsize(fmt)
    if offset + size > len(raw):
        raise FormatError(f"{path}: truncated at byte {offset}")
    return struct.unpack_from(fmt, raw, offset)


def _read_floats(path, raw: bytes, dtype: str, count: int, offset: int) -> np.ndarray:
    if offset + count * np.dtype(dtype).itemsize > len(raw):
        raise FormatError(f"{path}: truncated at byte {offset}")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset)


# -- class table (OVOC) ----------------------------------------------------


def save_class_table(path, table: ClassTable) -> None:
    emb = np.asarray(table.embeddings, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", b"OVOC", FORMAT_VERSION, len(table), emb.shape[1]))
        for i, name in enumerate(table.names):
            data = name.encode("utf-8")
            f.write(struct.pack("<I", len(data)))
            f.write(data)
            if table.frequencies is not None:
                f.write(struct.pack("<BQ", 1, int(table.frequencies[i])))
            else:
                f.write(struct.pack("<B", 0))
            f.write(emb[i].tobytes())


def load_class_table(path) -> ClassTable:
    raw = Path(path).read_bytes()
    magic, version, count, dim = _unpack(path, "<4sIII", raw, 0)
    if magic != b"OVOC":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = struct.calcsize("<4sIII")
    names: list[str] = []
    freqs: list[int] = []
    any_freq = False
    rows = np.empty((count, dim), dtype=np.float64)
    for i in range(count):
        (nlen,) = _unpack(path, "<I", raw, offset)
        offset += 4
        if offset + nlen > len(raw):
            raise FormatError(f"{path}: truncated name")
        names.append(raw[offset : offset + nlen].decode("utf-8"))
        offset += nlen
        (flag,) = _unpack(path, "<B", raw, offset)
        offset += 1
        if flag:
            (freq,) = _unpack(path, "<Q", raw, offset)
            offset += 8
            any_freq = True
        else:
            freq = 0
        freqs.append(freq)
        rows[i] = _read_floats(path, raw, "<f4", dim, offset)
        offset += 4 * dim
    return ClassTable(
        names=names,
        embeddings=rows,
        frequencies=np.array(freqs, dtype=np.uint64) if any_freq else None,
    )


# -- merger checkpoint (OVOM) ----------------------------------------------


def save_merger_params(path, params: MergerParams) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", b"OVOM", FORMAT_VERSION, params.dim))
        f.write(params.to_vector().astype("<f8").tobytes())


def load_merger_params(path) -> MergerParams:
    raw = Path(path).read_bytes()
    magic, version, dim = _unpack(path, "<4sII", raw, 0)
    if magic != b"OVOM":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = struct.calcsize("<4sII")
    expected = MergerParams.zeros(dim).to_vector().size
    vec = np.frombuffer(raw, dtype="<f8", count=(len(raw) - offset) // 8, offset=offset)
    if vec.size != expected:
        raise FormatError(f"{path}: expected {expected} parameters, found {vec.size}")
    return MergerParams.from_vector(dim, vec.astype(np.float64))


# -- labeled points (ASCII polygon format) ----------------------------------


def save_points_ply(path, positions: np.ndarray, labels: np.ndarray) -> None:
    positions = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int32).ravel()
    if len(positions) != len(labels):
        raise ValueError("positions/labels length mismatch")
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(positions)}",
        "property float x",
        "property float y",
        "property float z",
        "property int label",
        "end_header",
    ]
    # %.9g round-trips float32 exactly
    body = [
        f"{x:.9g} {y:.9g} {z:.9g} {l}"
        for (x, y, z), l in zip(positions.tolist(), labels.tolist())
    ]
    Path(path).write_text("\n".join(header + body) + "\n")


def load_points_ply(path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a polygon file")
    count = None
    end = None
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if tok[:2] == ["element", "vertex"]:
            count = int(tok[2])
        if tok[:1] == ["end_header"]:
            end = i
            break
    if count is None or end is None:
        raise FormatError(f"{path}: missing vertex element or end_header")
    rows = lines[end + 1 : end + 1 + count]
    if len(rows) != count:
        raise FormatError(f"{path}: expected {count} vertices, found {len(rows)}")
    positions = np.empty((count, 3), dtype=np.float32)
    labels = np.empty(count, dtype=np.int32)
    for i, row in enumerate(rows):
        parts = row.split()
        if len(parts) != 4:
            raise FormatError(f"{path}: vertex line {i} malformed")
        positions[i] = [np.float32(float(p)) for p in parts[:3]]
        labels[i] = int(parts[3])
    return positions, labels


# -- whole-map save/load -----------------------------------------------------


def save_segments(path, segments: list[Segment]) -> None:
    dim = 0
    for seg in segments:
        if seg.descriptor is not None:
            dim = len(seg.descriptor)
            break
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", b"OVOS", FORMAT_VERSION, len(segments), dim))
        for seg in segments:
            f.write(struct.pack("<I", seg.label))
            if seg.descriptor is not None:
                if len(seg.descriptor) != dim:
                    raise ValueError("segments disagree on descriptor dim")
                f.write(struct.pack("<B", 1))
                f.write(np.asarray(seg.descriptor, dtype="<f8").tobytes())
            else:
                f.write(struct.pack("<B", 0))
            f.write(struct.pack("<I", len(seg.views)))
            for e in seg.views:
                f.write(struct.pack("<II", e.keyframe_index, e.score))


def load_segments(path, heap_capacity: int = 10) -> list[Segment]:
    raw = Path(path).read_bytes()
    magic, version, count, dim = _unpack(path, "<4sIII", raw, 0)
    if magic != b"OVOS":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = struct.calcsize("<4sIII")
    segments: list[Segment] = []
    for i in range(count):
        (label,) = _unpack(path, "<I", raw, offset)
        offset += 4
        if label != i:
            raise FormatError(f"{path}: segment {i} has label {label}; labels must be dense")
        (flag,) = _unpack(path, "<B", raw, offset)
        offset += 1
        descriptor = None
        if flag:
            descriptor = _read_floats(path, raw, "<f8", dim, offset).astype(np.float64)
            offset += 8 * dim
        (n_views,) = _unpack(path, "<I", raw, offset)
        offset += 4
        views = []
        for _ in range(n_views):
            kf, score = _unpack(path, "<II", raw, offset)
            offset += 8
            views.append(ViewEntry(int(kf), int(score)))
        segments.append(
            Segment(label=label, capacity=heap_capacity, descriptor=descriptor, views=views)
        )
    return segments


def save_map(world: WorldMap, out_dir, stats: dict | None = None) -> None:
    """Write the map: labeled points, segments, poses and optional stats.

    Per-view descriptors are working state of the descriptor pipeline and are
    not part of the persistent map.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_points_ply(out / POINTS_FILENAME, world.positions, world.labels)
    save_segments(out / SEGMENTS_FILENAME, world.segments)
    save_poses(out / POSES_FILENAME, world.pose_indices, world.poses)
    if stats is not None:
        (out / STATS_FILENAME).write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")


def load_map(map_dir, heap_capacity: int = 10) -> WorldMap:
    d = Path(map_dir)
    world = WorldMap(heap_capacity=heap_capacity)
    indices, poses = load_poses(d / POSES_FILENAME)
    for idx, pose in zip(indices, poses):
        world.add_pose(idx, pose)
    positions, labels = load_points_ply(d / POINTS_FILENAME)
    world.positions = positions
    world.labels = labels
    world.segments = load_segments(d / SEGMENTS_FILENAME, heap_capacity=heap_capacity)
    return world


def maps_equal(a: WorldMap, b: WorldMap) -> bool:
    """Equality of the persistent map state (see :func:`save_map`)."""
    if a.pose_indices != b.pose_indices:
        return False
    if len(a.poses) != len(b.poses) or any(
        not np.array_equal(p, q) for p, q in zip(a.poses, b.poses)
    ):
        return False
    if not np.array_equal(a.positions, b.positions):
        return False
    if not np.array_equal(a.labels, b.labels):
        return False
    if len(a.segments) != len(b.segments):
        return False
    for sa, sb in zip(a.segments, b.segments):
        if sa.label != sb.label:
            return False
        if (sa.descriptor is None) != (sb.descriptor is None):
            return False
        if sa.descriptor is not None and not np.array_equal(sa.descriptor, sb.descriptor):
            return False
        if [(e.keyframe_index, e.score) for e in sa.views] != [
            (e.keyframe_index, e.score) for e in sb.views
        ]:
            return False
    return True


# -- sequence manifests -------------------------------------------------------


@dataclass
class FrameRecord:
    index: int
    depth: str
    rgb: str | None = None
    mask: str | None = None
    embeddings: str | None = None


@dataclass
class SequenceManifest:
    intrinsics: CameraIntrinsics
    poses: str
    frames: list[FrameRecord]
    keyframe_stride: int = 10
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.keyframe_stride < 1:
            raise ValueError("keyframe_stride must be >= 1")
        indices = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("frame indices must be strictly increasing")

    def keyframes(self, stride: int | None = None) -> list[FrameRecord]:
        return self.frames[:: stride or self.keyframe_stride]

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def save_manifest(path, manifest: SequenceManifest) -> None:
    intr = manifest.intrinsics
    doc = {
        "intrinsics": {
            "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "width": intr.width, "height": intr.height,
            "depth_scale": intr.depth_scale,
        },
        "poses": manifest.poses,
        "keyframe_stride": manifest.keyframe_stride,
        "frames": [
            {
                k: v
                for k, v in (
                    ("index", f.index), ("depth", f.depth), ("rgb", f.rgb),
                    ("mask", f.mask), ("embeddings", f.embeddings),
                )
                if v is not None
            }
            for f in manifest.frames
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path) -> SequenceManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot parse manifest: {exc}") from exc
    try:
        intr = CameraIntrinsics(**doc["intrinsics"])
        frames = [FrameRecord(**f) for f in doc["frames"]]
        manifest = SequenceManifest(
            intrinsics=intr,
            poses=doc["poses"],
            frames=frames,
            keyframe_stride=doc.get("keyframe_stride", 10),
            root=path.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid manifest: {exc}") from exc
    return manifest


def load_sequence(
    manifest: SequenceManifest, stride: int | None = None
) -> Iterator[tuple[Keyframe, list[Mask2D], dict | None]]:
    """Yield (keyframe, masks, embedding table) at the keyframe stride.

    Depth images are converted to meters with the intrinsics' depth scale.
    Missing or unreadable files raise :class:`FormatError` naming the frame.
    """
    pose_index, pose_list = load_poses(manifest.resolve(manifest.poses))
    poses = dict(zip(pose_index, (p for p in pose_list)))
    records = manifest.keyframes(stride)
    missing = [f.index for f in records if f.index not in poses]
    if missing:
        raise FormatError(
            f"{manifest.resolve(manifest.poses)}: no pose for frames {missing[:5]}"
        )
    for rec in records:
        try:
            depth_raw = read_u16_png(manifest.resolve(rec.depth))
        except OSError as exc:
            raise FormatError(f"frame {rec.index}: cannot read depth {rec.depth}: {exc}") from exc
        depth = depth_raw.astype(np.float64) * manifest.intrinsics.depth_scale
        rgb = None
        if rec.rgb is not None:
            try:
                rgb = read_rgb_png(manifest.resolve(rec.rgb))
            except OSError as exc:
                raise FormatError(f"frame {rec.index}: cannot read rgb {rec.rgb}: {exc}") from exc
        kf = Keyframe(
            index=rec.index, intrinsics=manifest.intrinsics, pose=poses[rec.index],
            depth=depth, rgb=rgb,
        )
        masks: list[Mask2D] = []
        if rec.mask is not None:
            try:
                ids = read_u16_png(manifest.resolve(rec.mask))
            except OSError as exc:
                raise FormatError(f"frame {rec.index}: cannot read mask {rec.mask}: {exc}") from exc
            masks = masks_from_id_image(rec.index, ids)
        table = None
        if rec.embeddings is not None:
            table = read_embeddings(manifest.resolve(rec.embeddings))
        yield kf, masks, table


def load_training_corpus(corpus_dir) -> list[TrainSample]:
    """Training samples from a sequence directory.

    Expects ``manifest.json`` with per-frame embeddings, ``classes.ovoc`` for
    the target vectors and ``targets.json`` mapping mask ids to class ids.
    Every (masked, bbox) pair in a frame yields one sample whose target is
    its class embedding.
    """
    corpus_dir = Path(corpus_dir)
    manifest = load_manifest(corpus_dir / "manifest.json")
    classes = load_class_table(corpus_dir / "classes.ovoc")
    targets_path = corpus_dir / "targets.json"
    try:
        doc = json.loads(targets_path.read_text())
        mask_classes = {int(k): int(v) for k, v in doc["mask_classes"].items()}
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"{targets_path}: invalid target table: {exc}") from exc
    samples: list[TrainSample] = []
    for rec in manifest.frames:
        if rec.embeddings is None:
            continue
        table = read_embeddings(manifest.resolve(rec.embeddings))
        full = table.get((0, RegionKind.FULL))
        if full is None:
            continue
        for mid, kind in sorted(table):
            if kind != RegionKind.MASKED:
                continue
            bbox = table.get((mid, RegionKind.BBOX))
            if bbox is None or mid not in mask_classes:
                continue
            triple = DescriptorTriple.from_raw(
                d_global=full, d_masked=table[(mid, kind)], d_bbox=bbox
            )
            samples.append(
                TrainSample(triple=triple, target=classes.embeddings[mask_classes[mid]])
            )
    return samples


class FileEmbedder(Embedder):
    """Embedder reading per-frame OVOE containers lazily."""

    def __init__(self, paths: Mapping[int, Path]):
        self._paths = dict(paths)
        self._cache: dict[int, dict[tuple[int, RegionKind], np.ndarray]] = {}

    @classmethod
    def from_manifest(cls, manifest: SequenceManifest) -> "FileEmbedder":
        return cls(
            {
                f.index: manifest.resolve(f.embeddings)
                for f in manifest.frames
                if f.embeddings is not None
            }
        )

    def prime(self, frame_index: int, table: dict[tuple[int, RegionKind], np.ndarray]) -> None:
        """Seed the cache with an already-decoded table (avoids a re-read)."""
        self._cache[frame_index] = table

    def embed(self, request: RegionRequest) -> np.ndarray:
        frame = request.frame_index
        if frame not in self._cache:
            if frame not in self._paths:
                raise EmbeddingUnavailable(f"no embeddings file for frame {frame}")
            self._cache[frame] = read_embeddings(self._paths[frame])
        table = self._cache[frame]
        key = (request.mask_id if request.kind != RegionKind.FULL else 0, request.kind)
        if key not in table:
            raise EmbeddingUnavailable(
                f"frame {frame}: no record for mask {key[0]} kind {request.kind.name}"
            )
        return table[key]
