"""Score a built map against ground-truth vertices, the benchmark way.

The evaluation path mirrors how real scans are scored: classify each
segment by nearest class embedding, push the class labels onto the
map's points, transfer point labels to the ground-truth vertex set by
5-nearest-neighbor majority, then compare against the true vertex
labels with a confusion matrix.

Reported numbers: per-class IoU and accuracy, their means, the
frequency-weighted variants, and the same means split over head /
common / tail class tertiles (by ground-truth frequency).
"""

from pathlib import Path

import numpy as np

from ovomap.engine import run_sequence
from ovomap.evaluation import classify_segments, compute_metrics, transfer_labels
from ovomap.io import load_class_table, load_points_ply
from ovomap.synth import standard_scene, write_sequence

OUT = Path(__file__).parent / "output" / "evaluate_semantics"


def main():
    scene = standard_scene(seed=7, n_poses=60, width=128, height=96)
    seq_dir = OUT / "sequence"
    print(f"building a map from {len(scene.poses())} keyframes ...")
    write_sequence(scene, seq_dir, embed_dim=32)
    world = run_sequence(seq_dir / "manifest.json").world

    classes = load_class_table(seq_dir / "classes.ovoc")
    seg_class = classify_segments(world, classes)

    # point label -> class id; unassigned points stay -1
    point_class = np.full(world.num_points, -1, dtype=np.int64)
    labeled = world.labels >= 0
    point_class[labeled] = seg_class[world.labels[labeled]]

    vertices, gt = load_points_ply(seq_dir / "gt_vertices.ply")
    pred = transfer_labels(world.positions, point_class, vertices, k=5)
    report = compute_metrics(pred, gt, classes)

    print(f"\n{len(vertices)} ground-truth vertices, {len(classes.names)} classes")
    print(f"{'class':10s} {'IoU':>6s} {'Acc':>6s}")
    for cid, name in enumerate(classes.names):
        iou, acc = report.per_class_iou[cid], report.per_class_acc[cid]
        if np.isnan(iou):
            print(f"{name:10s} {'-':>6s} {'-':>6s}")
        else:
            print(f"{name:10s} {iou:6.3f} {acc:6.3f}")
    print(f"\nmIoU {report.miou:.3f}   mAcc {report.macc:.3f}")
    print(f"f-mIoU {report.f_miou:.3f}  f-mAcc {report.f_macc:.3f}")
    for group, ids in report.tertiles.items():
        names = ", ".join(classes.names[i] for i in ids)
        print(f"  {group:6s} [{names}]")


if __name__ == "__main__":
    main()
