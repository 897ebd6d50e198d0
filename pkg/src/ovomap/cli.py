"""Command line front end.

Subcommands: ``run`` builds a map from a recorded sequence, ``query`` ranks
segments against a text-embedding vector, ``eval`` scores a map against
ground-truth vertices, ``synth`` renders a synthetic sequence, ``train-merger``
fits the descriptor merger on a corpus, ``bench`` prints the timing table.

Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .engine import PipelineConfig, run_sequence
from .evaluation import classify_segments, compute_metrics, rank_segments, transfer_labels
from .io import (
    FormatError,
    load_class_table,
    load_map,
    load_points_ply,
    load_training_corpus,
    save_map,
    save_merger_params,
)
from .merger import train_merger
from .synth import standard_scene, write_sequence


def _load_vector(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    return np.loadtxt(path, dtype=np.float64).ravel()


def _build_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        doc = PipelineConfig.from_file(args.config).to_dict()
    else:
        doc = PipelineConfig(deterministic=False).to_dict()
    if getattr(args, "deterministic", False):
        doc["deterministic"] = True
    if getattr(args, "stride", None) is not None:
        doc["keyframe_stride"] = args.stride
    if getattr(args, "fusion", None) is not None:
        doc["fusion_mode"] = args.fusion
    if getattr(args, "alpha", None) is not None:
        doc["alpha"] = args.alpha
    if getattr(args, "beta", None) is not None:
        doc["beta"] = args.beta
    if getattr(args, "checkpoint", None) is not None:
        doc["merger_checkpoint"] = str(args.checkpoint)
    return PipelineConfig.from_dict(doc)


def cmd_run(args) -> int:
    config = _build_config(args)
    result = run_sequence(args.manifest, config)
    stats = {
        "config": config.to_dict(),
        "counters": result.counters,
        "timing": result.summary.to_dict(),
    }
    save_map(result.world, args.out, stats=stats)
    c = result.counters
    print(
        f"{c['keyframes']} keyframes -> {c['points']} points, "
        f"{c['segments']} segments ({c['descriptors_updated']} descriptor updates)"
    )
    print(f"map written to {args.out}")
    return 0


def cmd_query(args) -> int:
    world = load_map(args.map)
    query = _load_vector(Path(args.vector))
    ranked = rank_segments(world, query, k=args.k)
    if not ranked:
        print("no segments with descriptors", file=sys.stderr)
        return 1
    for label, sim in ranked:
        print(f"{label}\t{sim:.6f}")
    return 0


def cmd_eval(args) -> int:
    world = load_map(args.map)
    classes = load_class_table(args.classes)
    gt_verts, gt_labels = load_points_ply(args.gt)
    seg_class = classify_segments(world, classes)
    point_class = np.full(len(world.labels), -1, dtype=np.int64)
    labeled = world.labels >= 0
    point_class[labeled] = seg_class[world.labels[labeled]]
    pred = transfer_labels(world.positions, point_class, gt_verts, k=args.k)
    report = compute_metrics(pred, gt_labels, classes)
    print(f"mIoU  {report.miou:.4f}   mAcc  {report.macc:.4f}")
    print(f"f-mIoU {report.f_miou:.4f}   f-mAcc {report.f_macc:.4f}")
    for name in ("head", "common", "tail"):
        members = ", ".join(classes.names[i] for i in report.tertiles[name])
        print(
            f"{name:>6}: IoU {report.tertile_miou[name]:.4f} "
            f"Acc {report.tertile_macc[name]:.4f}  [{members}]"
        )
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        print(f"report written to {args.out}")
    return 0


def cmd_synth(args) -> int:
    scene = standard_scene(
        seed=args.seed, n_poses=args.frames, width=args.width, height=args.height
    )
    write_sequence(
        scene,
        args.out,
        sigma=args.sigma,
        gamma=args.gamma,
        embed_dim=args.dim,
        basis_prototypes=args.basis,
        include_rgb=not args.no_rgb,
        gt_spacing=args.spacing,
    )
    print(f"{args.frames} frames written to {args.out}")
    return 0


def cmd_train_merger(args) -> int:
    dataset = load_training_corpus(args.corpus)
    if not dataset:
        print("corpus contains no training samples", file=sys.stderr)
        return 1
    params, curve = train_merger(
        dataset,
        epochs=args.epochs,
        step_size=args.lr,
        seed=args.seed,
        batch_size=args.batch,
    )
    for epoch, loss in enumerate(curve):
        print(f"epoch {epoch:3d}  loss {loss:.6f}")
    save_merger_params(args.out, params)
    print(f"{len(dataset)} samples; checkpoint written to {args.out}")
    return 0


def cmd_bench(args) -> int:
    config = _build_config(args)
    result = run_sequence(args.manifest, config)
    print(result.summary.format_table())
    if args.out:
        Path(args.out).write_text(json.dumps(result.summary.to_dict(), indent=2) + "\n")
    return 0


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="sequence manifest.json")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--stride", type=int, help="keyframe stride override")
    p.add_argument(
        "--deterministic",
        action="store_true",
        help="run the descriptor worker synchronously for reproducible output",
    )
    p.add_argument("--fusion", choices=("fixed", "merger"), help="descriptor fusion mode")
    p.add_argument("--alpha", type=float, help="masked/bbox mix for fixed fusion")
    p.add_argument("--beta", type=float, help="local/global mix for fixed fusion")
    p.add_argument("--checkpoint", help="merger checkpoint for --fusion merger")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovomap",
        description="Online open-vocabulary 3D segment mapping.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="build a map from a recorded sequence")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="output map directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("query", help="rank segments against an embedding vector")
    p.add_argument("--map", required=True, help="map directory")
    p.add_argument("--vector", required=True, help="query vector (.npy or whitespace text)")
    p.add_argument("-k", type=int, default=5, help="number of results")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="score a map against ground-truth vertices")
    p.add_argument("--map", required=True, help="map directory")
    p.add_argument("--gt", required=True, help="labeled ground-truth vertices (.ply)")
    p.add_argument("--classes", required=True, help="class table (.ovoc)")
    p.add_argument("-k", type=int, default=5, help="transfer neighborhood size")
    p.add_argument("--out", help="write the full report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="render a synthetic benchmark sequence")
    p.add_argument("--out", required=True, help="output sequence directory")
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--dim", type=int, default=32, help="embedding dimension")
    p.add_argument("--sigma", type=float, default=0.05, help="embedding noise level")
    p.add_argument("--gamma", type=float, default=0.3, help="bbox context pollution")
    p.add_argument("--spacing", type=float, default=0.1, help="ground-truth grid spacing")
    p.add_argument("--basis", action="store_true", help="standard-basis prototypes")
    p.add_argument("--no-rgb", action="store_true", help="skip color images")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-merger", help="fit the descriptor merger on a corpus")
    p.add_argument("--corpus", required=True, help="sequence directory with targets.json")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=64)
    p.set_defaults(func=cmd_train_merger)

    p = sub.add_parser("bench", help="run a sequence and print the timing table")
    _add_run_flags(p)
    p.add_argument("--out", help="also write the summary as JSON")
    p.set_defaults(func=cmd_bench)

    return parser


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (FormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
