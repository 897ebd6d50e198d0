"""Learned per-dimension descriptor merger.

The merger looks at the three crop embeddings of a mask as a 3-token sequence,
runs them through 5 pre-norm single-head self-attention blocks with residual
connections, flattens, and maps through a 4-layer MLP to one logit per
(vector, dimension).  A softmax across the three vectors per dimension turns
the logits into convex weights, and the output descriptor is the normalized
per-dimension weighted average of the *input* vectors.

Forward, loss and gradients are written out by hand in numpy; the backward
pass is exact reverse-mode differentiation of the forward (verified against
central finite differences in the test suite).  There is no autograd anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fusion import (
    DEGENERATE_NORM,
    DegenerateDescriptorError,
    DescriptorTriple,
    normalize_descriptor,
)

NUM_BLOCKS = 5
NUM_TOKENS = 3  # (global, masked, bbox)
LN_EPS = 1e-5

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_STEP_SIZE = 1e-4
DEFAULT_BATCH_SIZE = 64


@dataclass
class AttentionBlockParams:
    ln_gain: np.ndarray  # (D,)
    ln_bias: np.ndarray  # (D,)
    wq: np.ndarray       # (D, D)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class MergerParams:
    """All merger weights.

    ``mlp_weights``/``mlp_biases`` hold the four affine layers
    [3D -> 2D -> D -> D -> 3D]; rectifier on the hidden layers, linear output.
    The flattening order of :meth:`to_vector` (per block: ln_gain, ln_bias,
    wq, wk, wv, wo; then W1, b1 ... W4, b4) is also the checkpoint layout.
    """

    dim: int
    blocks: list[AttentionBlockParams]
    mlp_weights: list[np.ndarray]
    mlp_biases: list[np.ndarray]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for b in self.blocks:
            out.extend([b.ln_gain, b.ln_bias, b.wq, b.wk, b.wv, b.wo])
        for w, bias in zip(self.mlp_weights, self.mlp_biases):
            out.extend([w, bias])
        return out

    def to_vector(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    @classmethod
    def zeros(cls, dim: int) -> "MergerParams":
        blocks = [
            AttentionBlockParams(
                ln_gain=np.zeros(dim),
                ln_bias=np.zeros(dim),
                wq=np.zeros((dim, dim)),
                wk=np.zeros((dim, dim)),
                wv=np.zeros((dim, dim)),
                wo=np.zeros((dim, dim)),
            )
            for _ in range(NUM_BLOCKS)
        ]
        sizes = _mlp_sizes(dim)
        weights = [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(b) for b in sizes[1:]]
        return cls(dim=dim, blocks=blocks, mlp_weights=weights, mlp_biases=biases)

    @classmethod
    def from_vector(cls, dim: int, vec: np.ndarray) -> "MergerParams":
        params = cls.zeros(dim)
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for t in params.tensors():
            n = t.size
            t[...] = vec[offset : offset + n].reshape(t.shape)
            offset += n
        if offset != vec.size:
            raise ValueError(f"parameter vector has {vec.size} entries, expected {offset}")
        return params


def _mlp_sizes(dim: int) -> tuple[int, int, int, int, int]:
    return (3 * dim, 2 * dim, dim, dim, 3 * dim)


def init_merger_params(dim: int, seed: int = 0) -> MergerParams:
    """Fresh weights: orthogonal attention projections, He-normal MLP hidden
    layers, zero final layer.

    The zero final layer makes the untrained merger output uniform weights,
    i.e. the plain average of the three vectors.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    params = MergerParams.zeros(dim)
    for block in params.blocks:
        block.ln_gain[...] = 1.0
        for name in ("wq", "wk", "wv", "wo"):
            q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            getattr(block, name)[...] = q
    sizes = _mlp_sizes(dim)
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i < len(params.mlp_weights) - 1:
            params.mlp_weights[i][...] = rng.standard_normal(
                (fan_in, fan_out)
            ) * np.sqrt(2.0 / fan_in)
    # final layer stays zero
    return params


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _forward_batch(params: MergerParams, tokens: np.ndarray):
    """Run the merger on a (B, 3, D) token batch.

    Returns (d, weights, cache) where d is (B, D) unit rows, weights is the
    (B, 3, D) convex weight tensor and cache holds every intermediate needed
    by :func:`_backward_batch`.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3 or tokens.shape[1] != NUM_TOKENS or tokens.shape[2] != params.dim:
        raise ValueError(f"tokens must be (B, 3, {params.dim}), got {tokens.shape}")
    scale = 1.0 / np.sqrt(params.dim)
    x = tokens
    block_caches = []
    for block in params.blocks:
        h, xhat, inv = _layer_norm(x, block.ln_gain, block.ln_bias)
        q = h @ block.wq
        k = h @ block.wk
        v = h @ block.wv
        s = np.einsum("bid,bjd->bij", q, k) * scale
        a = _softmax(s, axis=-1)
        c = np.einsum("bij,bjd->bid", a, v)
        o = c @ block.wo
        block_caches.append((xhat, inv, h, q, k, v, a, c))
        x = x + o

    flat = x.reshape(x.shape[0], 3 * params.dim)
    acts = [flat]
    pre = []
    cur = flat
    n_layers = len(params.mlp_weights)
    for i, (w, b) in enumerate(zip(params.mlp_weights, params.mlp_biases)):
        z = cur @ w + b
        pre.append(z)
        cur = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(cur)

    logits = cur.reshape(-1, NUM_TOKENS, params.dim)
    weights = _softmax(logits, axis=1)
    u = (weights * tokens).sum(axis=1)
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms <= DEGENERATE_NORM):
        bad = int(np.argmin(norms))
        raise DegenerateDescriptorError(
            f"merged vector {bad} is degenerate (norm {norms[bad]:.3g})"
        )
    d = u / norms[:, None]
    cache = (tokens, block_caches, acts, pre, weights, u, norms, d)
    return d, weights, cache


def _loss_batch(d: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return 1.0 - np.einsum("ij,ij->i", d, targets)


def _backward_batch(
    params: MergerParams, cache, targets: np.ndarray, sample_weight: np.ndarray
) -> MergerParams:
    """Gradients of sum_i sample_weight[i] * (1 - cos(d_i, target_i)).

    Exact reverse-mode pass mirroring :func:`_forward_batch` step by step.
    Returns a :class:`MergerParams` of the same shape holding the gradients.
    """
    tokens, block_caches, acts, pre, weights, u, norms, d = cache
    grads = MergerParams.zeros(params.dim)
    scale = 1.0 / np.sqrt(params.dim)

    dd = -sample_weight[:, None] * np.asarray(targets, dtype=np.float64)
    # d = u / |u|  =>  du = (dd - d (d . dd)) / |u|
    du = (dd - d * np.einsum("ij,ij->i", d, dd)[:, None]) / norms[:, None]
    dweights = du[:, None, :] * tokens
    # softmax across the 3 vectors (axis 1)
    dlogits = weights * (dweights - (dweights * weights).sum(axis=1, keepdims=True))
    dz = dlogits.reshape(dlogits.shape[0], 3 * params.dim)

    n_layers = len(params.mlp_weights)
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            dz = dz * (pre[i] > 0)
        grads.mlp_weights[i][...] = acts[i].T @ dz
        grads.mlp_biases[i][...] = dz.sum(axis=0)
        dz = dz @ params.mlp_weights[i].T

    dx = dz.reshape(-1, NUM_TOKENS, params.dim)
    for bi in range(NUM_BLOCKS - 1, -1, -1):
        block = params.blocks[bi]
        gblock = grads.blocks[bi]
        xhat, inv, h, q, k, v, a, c = block_caches[bi]

        do = dx  # residual: dx also flows straight through
        gblock.wo[...] = np.einsum("bid,bie->de", c, do)
        dc = do @ block.wo.T
        da = np.einsum("bid,bjd->bij", dc, v)
        dv = np.einsum("bij,bid->bjd", a, dc)
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
        ds = ds * scale
        dq = np.einsum("bij,bjd->bid", ds, k)
        dk = np.einsum("bij,bid->bjd", ds, q)
        gblock.wq[...] = np.einsum("bid,bie->de", h, dq)
        gblock.wk[...] = np.einsum("bid,bie->de", h, dk)
        gblock.wv[...] = np.einsum("bid,bie->de", h, dv)
        dh = dq @ block.wq.T + dk @ block.wk.T + dv @ block.wv.T

        gblock.ln_gain[...] = (dh * xhat).sum(axis=(0, 1))
        gblock.ln_bias[...] = dh.sum(axis=(0, 1))
        dxhat = dh * block.ln_gain
        dx_ln = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dx = dx + dx_ln
    return grads


def merger_forward(
    params: MergerParams, triple: DescriptorTriple
) -> tuple[np.ndarray, np.ndarray]:
    """Fused unit descriptor and the (3, D) convex weights for one triple."""
    d, weights, _ = _forward_batch(params, triple.stacked()[None])
    return d[0], weights[0]


@dataclass(frozen=True)
class TrainSample:
    triple: DescriptorTriple
    target: np.ndarray  # unit vector the fused descriptor should match

    def __post_init__(self):
        object.__setattr__(self, "target", normalize_descriptor(self.target))


def merger_loss(params: MergerParams, sample: TrainSample) -> float:
    """1 - cos(merged descriptor, target)."""
    d, _, _ = _forward_batch(params, sample.triple.stacked()[None])
    return float(_loss_batch(d, np.asarray(sample.target, dtype=np.float64)[None])[0])


def merger_backward(params: MergerParams, sample: TrainSample) -> MergerParams:
    """Exact gradients of :func:`merger_loss` with respect to every parameter."""
    _, _, cache = _forward_batch(params, sample.triple.stacked()[None])
    return _backward_batch(
        params,
        cache,
        np.asarray(sample.target, dtype=np.float64)[None],
        np.ones(1),
    )


@dataclass(frozen=True)
class MergerFusion:
    """Adapter running the merger as the pipeline's fusion function."""

    params: MergerParams

    def __call__(self, triple: DescriptorTriple) -> np.ndarray:
        return merger_forward(self.params, triple)[0]


def _stack_dataset(dataset: Sequence[TrainSample]) -> tuple[np.ndarray, np.ndarray]:
    tokens = np.stack([s.triple.stacked() for s in dataset])
    targets = np.stack([np.asarray(s.target, dtype=np.float64) for s in dataset])
    return tokens, targets


def train_merger(
    dataset: Sequence[TrainSample],
    epochs: int,
    step_size: float = DEFAULT_STEP_SIZE,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH_SIZE,
    params: MergerParams | None = None,
) -> tuple[MergerParams, list[float]]:
    """Mini-batch training with decaying-moment adaptive updates.

    Shuffling is seeded, batches are visited in order and each batch's
    gradient is the mean over its samples, so training is deterministic for a
    given (dataset, epochs, step_size, seed, batch_size).

    Returns the trained parameters and the per-epoch mean loss (measured on
    the forward pass of each batch before its update).

    Raises RuntimeError if a loss turns non-finite.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    tokens, targets = _stack_dataset(dataset)
    dim = tokens.shape[2]
    if params is None:
        params = init_merger_params(dim, seed=seed)
    elif params.dim != dim:
        raise ValueError(f"params dim {params.dim} does not match data dim {dim}")
    if epochs == 0:
        return params, []

    theta = params.to_vector()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    step = 0
    rng = np.random.default_rng(seed)
    n = len(dataset)
    curve: list[float] = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            batch = perm[lo : lo + batch_size]
            cur = MergerParams.from_vector(dim, theta)
            d, _, cache = _forward_batch(cur, tokens[batch])
            losses = _loss_batch(d, targets[batch])
            if not np.all(np.isfinite(losses)):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch offset {lo}"
                )
            total += float(losses.sum())
            grads = _backward_batch(
                cur, cache, targets[batch], np.full(len(batch), 1.0 / len(batch))
            )
            g = grads.to_vector()
            step += 1
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
            mhat = m / (1.0 - ADAM_BETA1**step)
            vhat = v / (1.0 - ADAM_BETA2**step)
            theta = theta - step_size * mhat / (np.sqrt(vhat) + ADAM_EPS)
        curve.append(total / n)
    return MergerParams.from_vector(dim, theta), curve
