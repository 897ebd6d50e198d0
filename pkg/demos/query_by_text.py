"""Query a built map with embedding vectors, the open-vocabulary way.

The map stores one fused unit descriptor per segment, living in the same
latent space as the text/image encoder that produced the per-mask
embeddings.  Querying is then just cosine similarity: embed the query,
rank segments.

Here the synthetic embedder plays the encoder, so the class prototypes
double as "text" embeddings.  For each class name we rank all segments
and print the top matches; the segments tracking boxes of that class
should come out on top with similarity near 1.
"""

from pathlib import Path

from ovomap.engine import run_sequence
from ovomap.evaluation import rank_segments
from ovomap.io import load_class_table
from ovomap.synth import standard_scene, write_sequence

OUT = Path(__file__).parent / "output" / "query_by_text"


def main():
    scene = standard_scene(seed=7, n_poses=60, width=128, height=96)
    seq_dir = OUT / "sequence"
    print(f"building a map from {len(scene.poses())} keyframes ...")
    write_sequence(scene, seq_dir, embed_dim=32)
    world = run_sequence(seq_dir / "manifest.json").world
    print(f"map has {len(world.segments)} segments\n")

    classes = load_class_table(seq_dir / "classes.ovoc")
    for class_id, name in enumerate(classes.names):
        hits = rank_segments(world, classes.embeddings[class_id], k=3)
        ranked = ",  ".join(f"segment {lbl}: {sim:.3f}" for lbl, sim in hits)
        print(f"query {name!r:10s} -> {ranked}")


if __name__ == "__main__":
    main()
