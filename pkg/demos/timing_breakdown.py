"""Measure where a mapping run spends its time, stage by stage.

Every keyframe passes through four stages: Seg (mask loading /
segmentation), M&T (map fusion, mode-vote matching, tracking), PP
(post-processing: relabeling and merging), and CLIP (descriptor
extraction and fusion).  The run records per-keyframe wall time for
each, and the summary prints the familiar per-stage mean table plus
seconds per keyframe.

s/KF is the mean of per-keyframe totals, where each total is at least
the sum of its stage times, so the table never under-reports a frame.
"""

from pathlib import Path

from ovomap.engine import PipelineConfig, run_sequence
from ovomap.synth import standard_scene, write_sequence

OUT = Path(__file__).parent / "output" / "timing_breakdown"


def main():
    scene = standard_scene(seed=7, n_poses=60, width=128, height=96)
    seq_dir = OUT / "sequence"
    print(f"rendering {len(scene.poses())} keyframes ...")
    write_sequence(scene, seq_dir, embed_dim=32)

    for deterministic in (True, False):
        config = PipelineConfig(deterministic=deterministic)
        result = run_sequence(seq_dir / "manifest.json", config)
        mode = "synchronous" if deterministic else "queued descriptor worker"
        print(f"\n{mode}, {result.summary.num_keyframes} keyframes:")
        print(result.summary.format_table())


if __name__ == "__main__":
    main()
