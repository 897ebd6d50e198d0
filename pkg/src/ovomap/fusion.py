"""Descriptor fusion: combining the three per-mask embedding crops into one vector.

Every 2D mask observation yields three embeddings: the full frame, the
mask-only crop (background blacked out) and the bounding-box crop.  A fused
per-view descriptor is a convex combination of the three, either with fixed
scalar weights or with the learned per-dimension merger (see merger.py).
Per-segment descriptors are the medoid of the fused view descriptors under
cosine distance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

UNIT_ATOL = 1e-6
DEGENERATE_NORM = 1e-9


class DegenerateDescriptorError(ValueError):
    """Raised when a fused vector has norm too small to normalize."""


def normalize_descriptor(d: np.ndarray) -> np.ndarray:
    """Return ``d`` scaled to unit norm (float64).

    Vectors already unit-norm within 1e-6 are passed through unchanged so
    repeated normalization is bit-stable.  Norms below 1e-9 are degenerate.
    """
    v = np.asarray(d, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"descriptor must be 1-D, got shape {v.shape}")
    n = float(np.linalg.norm(v))
    if n <= DEGENERATE_NORM:
        raise DegenerateDescriptorError(f"degenerate descriptor (norm {n:.3g})")
    if abs(n - 1.0) <= UNIT_ATOL:
        return v
    return v / n


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= DEGENERATE_NORM or nb <= DEGENERATE_NORM:
        raise DegenerateDescriptorError("cosine of near-zero vector")
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class DescriptorTriple:
    """The three unit embeddings extracted for one 2D mask observation."""

    d_global: np.ndarray  # full frame
    d_masked: np.ndarray  # mask crop, background blacked out
    d_bbox: np.ndarray    # bounding-box crop, background kept

    def __post_init__(self):
        dims = set()
        for name in ("d_global", "d_masked", "d_bbox"):
            v = getattr(self, name)
            if v.ndim != 1:
                raise ValueError(f"{name} must be 1-D")
            dims.add(v.shape[0])
            n = float(np.linalg.norm(v))
            if abs(n - 1.0) > UNIT_ATOL:
                raise ValueError(f"{name} is not unit-norm (|norm-1| = {abs(n - 1.0):.3g})")
        if len(dims) != 1:
            raise ValueError(f"mismatched descriptor dims: {sorted(dims)}")

    @classmethod
    def from_raw(cls, d_global, d_masked, d_bbox) -> "DescriptorTriple":
        """Build a triple from raw vectors, normalizing each."""
        return cls(
            d_global=normalize_descriptor(d_global),
            d_masked=normalize_descriptor(d_masked),
            d_bbox=normalize_descriptor(d_bbox),
        )

    @property
    def dim(self) -> int:
        return self.d_global.shape[0]

    def stacked(self) -> np.ndarray:
        """Tokens in (global, masked, bbox) order, shape (3, D)."""
        return np.stack([self.d_global, self.d_masked, self.d_bbox])


@dataclass(frozen=True)
class FixedWeights:
    """Scalar fusion weights: alpha mixes the two local crops, beta mixes local vs global."""

    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def fuse_fixed(triple: DescriptorTriple, weights: FixedWeights = FixedWeights()) -> np.ndarray:
    """Fuse a triple with fixed scalar weights.

    d_local = alpha * d_masked + (1 - alpha) * d_bbox
    d       = normalize(beta * d_local + (1 - beta) * d_global)
    """
    a, b = weights.alpha, weights.beta
    local = a * triple.d_masked + (1.0 - a) * triple.d_bbox
    fused = b * local + (1.0 - b) * triple.d_global
    return normalize_descriptor(fused)


def grid_search_weights(
    corpus: Sequence[tuple[DescriptorTriple, np.ndarray]],
    step: float = 0.1,
) -> FixedWeights:
    """Pick the (alpha, beta) grid point maximizing mean cosine to the targets.

    The grid spans [0, 1] in both axes with the given spacing.  Ties keep the
    lexicographically smallest (alpha, beta).  Samples whose fusion is
    degenerate for a grid point score -1 there.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if not 0.0 < step <= 1.0:
        raise ValueError(f"step must lie in (0, 1], got {step}")
    g = np.stack([t.d_global for t, _ in corpus])
    m = np.stack([t.d_masked for t, _ in corpus])
    bb = np.stack([t.d_bbox for t, _ in corpus])
    targets = np.stack([np.asarray(tg, dtype=np.float64) for _, tg in corpus])

    values = np.round(np.arange(0.0, 1.0 + step / 2.0, step), 12)
    values = np.minimum(values, 1.0)
    best: tuple[float, FixedWeights] | None = None
    for a in values:
        local = a * m + (1.0 - a) * bb
        for b in values:
            fused = b * local + (1.0 - b) * g
            norms = np.linalg.norm(fused, axis=1)
            ok = norms > DEGENERATE_NORM
            sims = np.full(len(corpus), -1.0)
            sims[ok] = np.einsum("ij,ij->i", fused[ok], targets[ok]) / norms[ok]
            score = float(sims.mean())
            # strict > keeps the first (smallest) grid point on ties
            if best is None or score > best[0]:
                best = (score, FixedWeights(float(a), float(b)))
    assert best is not None
    return best[1]


def medoid_descriptor(pool: Sequence[tuple[int, np.ndarray]]) -> np.ndarray:
    """Medoid of a descriptor pool under cosine distance.

    Returns the pool member with the smallest summed distance
    sum_j (1 - cos(d_i, d_j)); ties pick the lowest keyframe index.
    """
    if not pool:
        raise ValueError("empty descriptor pool")
    kfs = np.array([kf for kf, _ in pool], dtype=np.int64)
    vecs = np.stack([np.asarray(v, dtype=np.float64) for _, v in pool])
    sims = vecs @ vecs.T
    # self-distance is 0 by definition; the computed diagonal is only 1 +- ulp,
    # which would let rounding noise break mathematically exact ties
    np.fill_diagonal(sims, 1.0)
    totals = len(pool) - sims.sum(axis=1)
    order = np.lexsort((kfs, totals))
    return vecs[order[0]]
