"""Train the descriptor-merger network and race it against fixed weights.

Each mask yields three embeddings: the full frame, the masked-out crop,
and the bounding-box crop.  The simple fusion is a fixed convex blend
with weights (alpha, beta) tuned by grid search.  The merger network (5
self-attention blocks over the 3 tokens plus a 4-layer MLP) predicts
per-dimension convex weights instead, so it can learn when to trust
which crop.

Both are fit on the same corpus of (triple, class prototype) pairs and
compared on a held-out corpus by mean cosine to the target.  The merger
starts exactly at uniform 1/3 weights, so epoch 0 is the untuned
baseline and every improvement is learned.
"""

import numpy as np

from ovomap.fusion import cosine_similarity, fuse_fixed, grid_search_weights
from ovomap.merger import merger_forward, train_merger
from ovomap.synth import PrototypeEmbedder, make_fusion_corpus

DIM = 32
EPOCHS = 15


def mean_cosine(fn, corpus):
    return float(np.mean([cosine_similarity(fn(s.triple), s.target) for s in corpus]))


def main():
    embedder = PrototypeEmbedder.create(
        num_classes=9, dim=DIM, seed=5, sigma=0.15, gamma=0.3, basis=True
    )
    train = make_fusion_corpus(1000, embedder, seed=11)
    held_out = make_fusion_corpus(500, embedder, seed=12)

    weights = grid_search_weights([(s.triple, s.target) for s in train])
    print(f"grid search picked alpha={weights.alpha:.1f}, beta={weights.beta:.1f}")

    params, curve = train_merger(train, epochs=EPOCHS, step_size=1e-3, seed=0)
    for epoch, loss in enumerate(curve):
        print(f"epoch {epoch + 1:2d}  mean loss {loss:.4f}")

    fixed_score = mean_cosine(lambda t: fuse_fixed(t, weights), held_out)
    merged_score = mean_cosine(lambda t: merger_forward(params, t)[0], held_out)
    print(f"\nheld-out mean cosine to the class prototype:")
    print(f"  fixed weights : {fixed_score:.4f}")
    print(f"  trained merger: {merged_score:.4f}")
    print(f"  margin        : {merged_score - fixed_score:+.4f}")


if __name__ == "__main__":
    main()
