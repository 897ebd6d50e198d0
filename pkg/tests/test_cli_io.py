"""File formats, sequence loading and the command line, end to end."""

import hashlib
import json

import numpy as np
import pytest

from ovomap.cli import cli
from ovomap.core import Segment, ViewEntry, WorldMap
from ovomap.engine import PipelineConfig, run_sequence
from ovomap.evaluation import ClassTable
from ovomap.io import (
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
    read_rgb_png,
    read_u16_png,
    save_class_table,
    save_manifest,
    save_map,
    save_merger_params,
    save_points_ply,
    save_poses,
    save_segments,
    write_embeddings,
    write_rgb_png,
    write_u16_png,
)
from ovomap.mapper import masks_from_id_image
from ovomap.merger import MergerParams, init_merger_params
from ovomap.pipeline import EmbeddingUnavailable, RegionKind, RegionRequest
from ovomap.synth import render_frame, standard_scene, write_sequence

from conftest import random_pose, random_unit


class TestImageFiles:
    def test_u16_round_trip(self, tmp_path, rng):
        arr = rng.integers(0, 65536, size=(24, 32), dtype=np.uint16)
        arr[0, 0] = 0
        arr[-1, -1] = 65535
        write_u16_png(tmp_path / "d.png", arr)
        assert np.array_equal(read_u16_png(tmp_path / "d.png"), arr)

    def test_rgb_round_trip(self, tmp_path, rng):
        arr = rng.integers(0, 256, size=(16, 20, 3), dtype=np.uint8)
        write_rgb_png(tmp_path / "c.png", arr)
        assert np.array_equal(read_rgb_png(tmp_path / "c.png"), arr)


class TestPoseFile:
    def test_round_trip_is_exact(self, tmp_path, rng):
        poses = [random_pose(rng) for _ in range(4)]
        indices = [0, 3, 7, 12]
        save_poses(tmp_path / "p.txt", indices, poses)
        got_idx, got = load_poses(tmp_path / "p.txt")
        assert got_idx == indices
        for a, b in zip(poses, got):
            assert np.array_equal(a, b)  # %.17g round-trips float64

    def test_malformed_line_rejected(self, tmp_path):
        (tmp_path / "p.txt").write_text("0 1 2 3\n")
        with pytest.raises(FormatError):
            load_poses(tmp_path / "p.txt")

    def test_length_mismatch_rejected(self, tmp_path, rng):
        with pytest.raises(ValueError):
            save_poses(tmp_path / "p.txt", [0, 1], [random_pose(rng)])


class TestEmbeddingsContainer:
    def table(self, rng, dim=16):
        return {
            (0, RegionKind.FULL): random_unit(rng, dim),
            (3, RegionKind.MASKED): random_unit(rng, dim),
            (3, RegionKind.BBOX): random_unit(rng, dim),
            (7, RegionKind.MASKED): random_unit(rng, dim),
        }

    def test_round_trip(self, tmp_path, rng):
        table = self.table(rng)
        write_embeddings(tmp_path / "e.bin", table)
        got = read_embeddings(tmp_path / "e.bin")
        assert got.keys() == table.keys()
        for key, vec in table.items():
            assert np.array_equal(got[key], vec.astype(np.float32).astype(np.float64))

    def test_empty_table(self, tmp_path):
        write_embeddings(tmp_path / "e.bin", {})
        assert read_embeddings(tmp_path / "e.bin") == {}

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "e.bin").write_bytes(b"NOPE" + b"\0" * 12)
        with pytest.raises(FormatError):
            read_embeddings(tmp_path / "e.bin")

    def test_truncated_file_rejected(self, tmp_path, rng):
        write_embeddings(tmp_path / "e.bin", self.table(rng))
        raw = (tmp_path / "e.bin").read_bytes()
        (tmp_path / "e.bin").write_bytes(raw[:-7])
        with pytest.raises(FormatError):
            read_embeddings(tmp_path / "e.bin")


class TestClassTableFile:
    def test_round_trip_with_frequencies(self, tmp_path, rng):
        emb = np.stack([random_unit(rng, 8) for _ in range(3)])
        table = ClassTable(
            names=["chair", "möbel", "floor"],
            embeddings=emb,
            frequencies=np.array([5, 0, 123456], dtype=np.uint64),
        )
        save_class_table(tmp_path / "c.ovoc", table)
        got = load_class_table(tmp_path / "c.ovoc")
        assert got.names == table.names
        assert np.array_equal(got.embeddings, emb.astype(np.float32).astype(np.float64))
        assert np.array_equal(got.frequencies, table.frequencies)

    def test_round_trip_without_frequencies(self, tmp_path, rng):
        table = ClassTable(names=["a"], embeddings=random_unit(rng, 8)[None])
        save_class_table(tmp_path / "c.ovoc", table)
        assert load_class_table(tmp_path / "c.ovoc").frequencies is None

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "c.ovoc").write_bytes(b"XXXX" + b"\0" * 12)
        with pytest.raises(FormatError):
            load_class_table(tmp_path / "c.ovoc")


class TestMergerCheckpoint:
    def test_round_trip_is_exact(self, tmp_path, rng):
        base = init_merger_params(8, seed=4)
        vec = base.to_vector() + rng.normal(size=base.to_vector().size)
        params = MergerParams.from_vector(8, vec)
        save_merger_params(tmp_path / "m.ovom", params)
        got = load_merger_params(tmp_path / "m.ovom")
        assert got.dim == 8
        assert np.array_equal(got.to_vector(), params.to_vector())

    def test_truncated_checkpoint_rejected(self, tmp_path):
        save_merger_params(tmp_path / "m.ovom", init_merger_params(8))
        raw = (tmp_path / "m.ovom").read_bytes()
        (tmp_path / "m.ovom").write_bytes(raw[:-16])
        with pytest.raises(FormatError):
            load_merger_params(tmp_path / "m.ovom")


class TestPointsFile:
    def test_round_trip_is_exact(self, tmp_path, rng):
        pts = rng.normal(size=(50, 3)).astype(np.float32)
        labels = rng.integers(-1, 6, size=50).astype(np.int32)
        save_points_ply(tmp_path / "p.ply", pts, labels)
        got_pts, got_labels = load_points_ply(tmp_path / "p.ply")
        assert np.array_equal(got_pts, pts)  # %.9g round-trips float32
        assert np.array_equal(got_labels, labels)

    def test_empty_cloud(self, tmp_path):
        save_points_ply(tmp_path / "p.ply", np.zeros((0, 3)), np.zeros(0))
        pts, labels = load_points_ply(tmp_path / "p.ply")
        assert len(pts) == 0 and len(labels) == 0

    def test_not_a_ply_rejected(self, tmp_path):
        (tmp_path / "p.ply").write_text("off\n")
        with pytest.raises(FormatError):
            load_points_ply(tmp_path / "p.ply")

    def test_vertex_count_mismatch_rejected(self, tmp_path):
        save_points_ply(tmp_path / "p.ply", np.zeros((2, 3)), np.zeros(2))
        text = (tmp_path / "p.ply").read_text().splitlines()
        (tmp_path / "p.ply").write_text("\n".join(text[:-1]) + "\n")
        with pytest.raises(FormatError):
            load_points_ply(tmp_path / "p.ply")


def demo_segments(rng):
    a = Segment(label=0, descriptor=random_unit(rng, 8))
    a.views = [ViewEntry(2, 90), ViewEntry(5, 40)]
    b = Segment(label=1, descriptor=None)
    b.views = [ViewEntry(0, 10)]
    return [a, b]


class TestSegmentsFile:
    def test_round_trip(self, tmp_path, rng):
        segs = demo_segments(rng)
        save_segments(tmp_path / "s.bin", segs)
        got = load_segments(tmp_path / "s.bin", heap_capacity=7)
        assert [s.label for s in got] == [0, 1]
        assert got[0].capacity == 7
        assert np.array_equal(got[0].descriptor, segs[0].descriptor)
        assert got[1].descriptor is None
        assert [(e.keyframe_index, e.score) for e in got[0].views] == [(2, 90), (5, 40)]

    def test_per_view_descriptors_are_not_persisted(self, tmp_path, rng):
        segs = demo_segments(rng)
        segs[0].views[0].descriptor = random_unit(rng, 8)
        save_segments(tmp_path / "s.bin", segs)
        got = load_segments(tmp_path / "s.bin")
        assert all(e.descriptor is None for s in got for e in s.views)

    def test_labels_must_be_dense(self, tmp_path, rng):
        seg = Segment(label=1, descriptor=None)
        seg.views = [ViewEntry(0, 5)]
        save_segments(tmp_path / "s.bin", [seg])
        with pytest.raises(FormatError):
            load_segments(tmp_path / "s.bin")


class TestMapDirectory:
    def build_world(self, rng):
        world = WorldMap()
        world.add_pose(0, random_pose(rng))
        world.add_pose(1, random_pose(rng))
        world.add_points(rng.normal(size=(20, 3)).astype(np.float32))
        world.create_segment(keyframe_index=0, score=30)
        world.create_segment(keyframe_index=1, score=12)
        world.labels[:10] = 0
        world.labels[10:15] = 1
        world.segment(0).descriptor = random_unit(rng, 8)
        return world

    def test_save_load_round_trip(self, tmp_path, rng):
        world = self.build_world(rng)
        save_map(world, tmp_path / "map", stats={"note": 1})
        again = load_map(tmp_path / "map")
        assert maps_equal(world, again)
        assert json.loads((tmp_path / "map" / "stats.json").read_text()) == {"note": 1}

    def test_empty_world_round_trip(self, tmp_path):
        world = WorldMap()
        save_map(world, tmp_path / "map")
        assert maps_equal(world, load_map(tmp_path / "map"))

    def test_maps_equal_detects_differences(self, tmp_path, rng):
        world = self.build_world(rng)
        save_map(world, tmp_path / "map")
        other = load_map(tmp_path / "map")
        other.labels[0] = 1
        assert not maps_equal(world, other)


class TestManifest:
    def manifest(self, tmp_path):
        scene = standard_scene(n_poses=3, width=32, height=24)
        frames = [
            FrameRecord(index=0, depth="d0.png", mask="m0.png", embeddings="e0.bin"),
            FrameRecord(index=2, depth="d2.png"),
            FrameRecord(index=5, depth="d5.png", rgb="c5.png"),
        ]
        return SequenceManifest(
            intrinsics=scene.intrinsics(),
            poses="poses.txt",
            frames=frames,
            keyframe_stride=2,
            root=tmp_path,
        )

    def test_round_trip(self, tmp_path):
        manifest = self.manifest(tmp_path)
        save_manifest(tmp_path / "manifest.json", manifest)
        got = load_manifest(tmp_path / "manifest.json")
        assert got.intrinsics == manifest.intrinsics
        assert got.poses == "poses.txt"
        assert got.keyframe_stride == 2
        assert got.root == tmp_path
        assert [f.index for f in got.frames] == [0, 2, 5]
        assert got.frames[0].embeddings == "e0.bin"
        assert got.frames[1].rgb is None and got.frames[2].rgb == "c5.png"

    def test_stride_slicing(self, tmp_path):
        manifest = self.manifest(tmp_path)
        assert [f.index for f in manifest.keyframes()] == [0, 5]
        assert [f.index for f in manifest.keyframes(stride=1)] == [0, 2, 5]

    def test_indices_must_increase(self, tmp_path):
        scene = standard_scene(n_poses=3, width=32, height=24)
        frames = [FrameRecord(index=1, depth="a.png"), FrameRecord(index=1, depth="b.png")]
        with pytest.raises(ValueError):
            SequenceManifest(intrinsics=scene.intrinsics(), poses="p.txt", frames=frames)

    def test_unparseable_manifest_rejected(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(FormatError):
            load_manifest(tmp_path / "manifest.json")

    def test_missing_field_rejected(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"frames": []}))
        with pytest.raises(FormatError):
            load_manifest(tmp_path / "manifest.json")


@pytest.fixture(scope="module")
def sequence_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("seq")
    scene = standard_scene(seed=7, n_poses=8, width=64, height=48)
    write_sequence(scene, out, embed_dim=16)
    return out, scene


class TestLoadSequence:
    def test_round_trip_from_disk(self, sequence_dir):
        out, scene = sequence_dir
        manifest = load_manifest(out / "manifest.json")
        frames = list(load_sequence(manifest))
        assert [kf.index for kf, _, _ in frames] == list(range(8))

        poses = scene.poses()
        kf, masks, table = frames[0]
        depth, ids = render_frame(scene, poses[0])
        assert np.array_equal(kf.pose, poses[0])
        # depth survives u16 quantization to within half a unit
        assert np.abs(kf.depth - depth).max() <= scene.depth_scale / 2 + 1e-12
        want = masks_from_id_image(0, ids)
        assert [m.mask_id for m in masks] == [m.mask_id for m in want]
        for a, b in zip(masks, want):
            assert np.array_equal(a.pixels, b.pixels)
        assert table is not None and (0, RegionKind.FULL) in table

    def test_stride_subsampling(self, sequence_dir):
        out, _ = sequence_dir
        manifest = load_manifest(out / "manifest.json")
        indices = [kf.index for kf, _, _ in load_sequence(manifest, stride=3)]
        assert indices == [0, 3, 6]

    def test_missing_depth_file_names_the_frame(self, sequence_dir, tmp_path):
        out, _ = sequence_dir
        manifest = load_manifest(out / "manifest.json")
        manifest.frames[2].depth = "depth/gone.png"
        with pytest.raises(FormatError, match="frame 2"):
            list(load_sequence(manifest))

    def test_missing_pose_rejected_up_front(self, sequence_dir, tmp_path):
        out, _ = sequence_dir
        manifest = load_manifest(out / "manifest.json")
        lines = (out / "poses.txt").read_text().splitlines()
        (tmp_path / "poses.txt").write_text("\n".join(lines[:-1]) + "\n")
        manifest.root = tmp_path
        manifest.frames = [
            FrameRecord(index=f.index, depth=str(out / f.depth)) for f in manifest.frames
        ]
        with pytest.raises(FormatError, match="no pose"):
            list(load_sequence(manifest))


class TestTrainingCorpus:
    def test_samples_follow_the_target_table(self, sequence_dir):
        out, scene = sequence_dir
        samples = load_training_corpus(out)
        per_frame = len(scene.instances())
        assert len(samples) == 8 * per_frame
        classes = load_class_table(out / "classes.ovoc")
        for s in samples[:20]:
            assert any(np.array_equal(s.target, row) for row in classes.embeddings)
            for v in (s.triple.d_global, s.triple.d_masked, s.triple.d_bbox):
                assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-6)


class TestFileEmbedder:
    def test_reads_stored_vectors(self, sequence_dir):
        out, _ = sequence_dir
        manifest = load_manifest(out / "manifest.json")
        embedder = FileEmbedder.from_manifest(manifest)
        table = read_embeddings(out / "embed" / "000000.bin")
        mid = next(m for m, kind in table if kind == RegionKind.MASKED)
        got = embedder.embed(RegionRequest(frame_index=0, kind=RegionKind.MASKED, mask_id=mid))
        assert np.array_equal(got, table[(mid, RegionKind.MASKED)])

    def test_missing_frame_and_region(self, sequence_dir):
        out, _ = sequence_dir
        embedder = FileEmbedder.from_manifest(load_manifest(out / "manifest.json"))
        with pytest.raises(EmbeddingUnavailable):
            embedder.embed(RegionRequest(frame_index=99, kind=RegionKind.MASKED, mask_id=1))
        with pytest.raises(EmbeddingUnavailable):
            embedder.embed(RegionRequest(frame_index=0, kind=RegionKind.MASKED, mask_id=999))

    def test_prime_bypasses_the_file(self, sequence_dir, rng):
        out, _ = sequence_dir
        embedder = FileEmbedder.from_manifest(load_manifest(out / "manifest.json"))
        fake = random_unit(rng, 16)
        embedder.prime(0, {(1, RegionKind.MASKED): fake})
        got = embedder.embed(RegionRequest(frame_index=0, kind=RegionKind.MASKED, mask_id=1))
        assert np.array_equal(got, fake)


class TestPipelineConfig:
    def test_dict_round_trip(self):
        config = PipelineConfig(alpha=0.7, beta=0.9, keyframe_stride=3)
        assert PipelineConfig.from_dict(config.to_dict()) == config

    def test_file_round_trip(self, tmp_path):
        config = PipelineConfig(fusion_mode="fixed", alpha=0.25, deterministic=False)
        (tmp_path / "c.json").write_text(json.dumps(config.to_dict()))
        assert PipelineConfig.from_file(tmp_path / "c.json") == config

    def test_validation(self):
        with pytest.raises(ValueError):
            PipelineConfig(fusion_mode="nope")
        with pytest.raises(ValueError):
            PipelineConfig(fusion_mode="merger")  # no checkpoint


def tree_hashes(root):
    return {
        p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    seq = root / "seq"
    rc = cli(
        [
            "synth", "--out", str(seq), "--frames", "40", "--width", "96",
            "--height", "72", "--dim", "16", "--seed", "7",
        ]
    )
    assert rc == 0
    map_dir = root / "map"
    before = tree_hashes(seq)
    rc = cli(
        ["run", "--manifest", str(seq / "manifest.json"), "--out", str(map_dir),
         "--deterministic"]
    )
    assert rc == 0
    assert tree_hashes(seq) == before, "run must not touch its input"
    return root, seq, map_dir


class TestCommandLine:
    def test_run_produces_a_complete_map(self, cli_workspace):
        _, _, map_dir = cli_workspace
        for name in ("points.ply", "segments.bin", "poses.txt", "stats.json"):
            assert (map_dir / name).exists()
        stats = json.loads((map_dir / "stats.json").read_text())
        assert stats["counters"]["keyframes"] == 40
        assert stats["counters"]["segments"] >= 9

    def test_repeat_runs_are_byte_identical(self, cli_workspace):
        root, seq, map_dir = cli_workspace
        again = root / "map2"
        rc = cli(
            ["run", "--manifest", str(seq / "manifest.json"), "--out", str(again),
             "--deterministic"]
        )
        assert rc == 0
        for name in ("points.ply", "segments.bin", "poses.txt"):
            assert (map_dir / name).read_bytes() == (again / name).read_bytes()

    def test_query_ranks_the_matching_segment_first(self, cli_workspace, capsys):
        root, _, map_dir = cli_workspace
        world = load_map(map_dir)
        seg = next(s for s in world.segments if s.descriptor is not None)
        vec_path = root / "q.npy"
        np.save(vec_path, seg.descriptor)
        rc = cli(["query", "--map", str(map_dir), "--vector", str(vec_path), "-k", "3"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3
        label, sim = lines[0].split("\t")
        assert int(label) == seg.label
        assert float(sim) == pytest.approx(1.0, abs=1e-5)

    def test_query_accepts_plain_text_vectors(self, cli_workspace, capsys):
        root, _, map_dir = cli_workspace
        world = load_map(map_dir)
        seg = next(s for s in world.segments if s.descriptor is not None)
        vec_path = root / "q.txt"
        np.savetxt(vec_path, seg.descriptor)
        assert cli(["query", "--map", str(map_dir), "--vector", str(vec_path)]) == 0
        assert capsys.readouterr().out.splitlines()[0].startswith(str(seg.label))

    def test_eval_scores_the_map(self, cli_workspace, capsys):
        root, seq, map_dir = cli_workspace
        report_path = root / "report.json"
        rc = cli(
            ["eval", "--map", str(map_dir), "--gt", str(seq / "gt_vertices.ply"),
             "--classes", str(seq / "classes.ovoc"), "--out", str(report_path)]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "mIoU" in out
        report = json.loads(report_path.read_text())
        assert report["miou"] > 0.5
        assert set(report["tertiles"]) == {"head", "common", "tail"}

    def test_bench_prints_the_timing_table(self, cli_workspace, capsys):
        _, seq, _ = cli_workspace
        rc = cli(["bench", "--manifest", str(seq / "manifest.json"), "--deterministic"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3
        for col in ("Seg [s]", "M&T [s]", "PP [s]", "CLIP [s]", "s/KF"):
            assert col in lines[0]

    def test_train_merger_then_run_with_the_checkpoint(self, cli_workspace, capsys):
        root, seq, _ = cli_workspace
        ckpt = root / "merger.ovom"
        rc = cli(
            ["train-merger", "--corpus", str(seq), "--out", str(ckpt),
             "--epochs", "1", "--lr", "1e-3"]
        )
        assert rc == 0
        assert load_merger_params(ckpt).dim == 16
        assert "epoch   0" in capsys.readouterr().out
        rc = cli(
            ["run", "--manifest", str(seq / "manifest.json"),
             "--out", str(root / "map_merger"), "--deterministic",
             "--fusion", "merger", "--checkpoint", str(ckpt)]
        )
        assert rc == 0

    def test_config_flags_reach_the_stats_file(self, cli_workspace):
        root, seq, _ = cli_workspace
        out = root / "map_ab"
        rc = cli(
            ["run", "--manifest", str(seq / "manifest.json"), "--out", str(out),
             "--deterministic", "--alpha", "0.7", "--beta", "0.9", "--stride", "4"]
        )
        assert rc == 0
        stats = json.loads((out / "stats.json").read_text())
        assert stats["config"]["alpha"] == 0.7
        assert stats["config"]["beta"] == 0.9
        assert stats["counters"]["keyframes"] == 10

    def test_usage_errors_exit_2(self, capsys):
        assert cli(["run", "--bogus-flag"]) == 2
        assert cli(["not-a-command"]) == 2
        assert cli([]) == 2
        capsys.readouterr()

    def test_missing_manifest_exits_1(self, tmp_path, capsys):
        rc = cli(
            ["run", "--manifest", str(tmp_path / "none.json"), "--out", str(tmp_path / "m")]
        )
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_help_exits_0(self, capsys):
        assert cli(["--help"]) == 0
        assert "run" in capsys.readouterr().out


class TestRunSequenceApi:
    def test_counters_are_consistent(self, cli_workspace):
        _, seq, _ = cli_workspace
        result = run_sequence(seq / "manifest.json", PipelineConfig(deterministic=True))
        c = result.counters
        assert c["keyframes"] == 40
        assert c["points"] == result.world.num_points
        assert c["segments"] == len(result.world.segments)
        assert c["descriptors_updated"] > 0
        assert result.summary.num_keyframes == 40
