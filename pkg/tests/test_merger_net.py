"""The learned merger: forward, dual-implementation oracle, gradients, training."""

import math

import numpy as np
import pytest

from ovomap.fusion import DescriptorTriple
from ovomap.merger import (
    MergerFusion,
    MergerParams,
    TrainSample,
    init_merger_params,
    merger_backward,
    merger_forward,
    merger_loss,
    train_merger,
)

from conftest import random_unit


def make_triple(rng, dim=8):
    return DescriptorTriple(
        random_unit(rng, dim), random_unit(rng, dim), random_unit(rng, dim)
    )


def random_params(dim, rng, spread=0.3):
    """Fully random weights, including a nonzero final layer."""
    base = init_merger_params(dim, seed=int(rng.integers(1 << 30)))
    vec = base.to_vector() + rng.normal(size=base.to_vector().size) * spread
    return MergerParams.from_vector(dim, vec)


def straight_line_forward(params, triple):
    """Independent re-implementation with explicit loops, no shared code paths."""
    dim = params.dim
    tokens = [
        np.array(triple.d_global, dtype=np.float64),
        np.array(triple.d_masked, dtype=np.float64),
        np.array(triple.d_bbox, dtype=np.float64),
    ]
    scale = 1.0 / math.sqrt(dim)
    x = [t.copy() for t in tokens]
    for blk in params.blocks:
        h = []
        for xi in x:
            mu = xi.mean()
            var = ((xi - mu) ** 2).mean()
            xhat = (xi - mu) / math.sqrt(var + 1e-5)
            h.append(xhat * blk.ln_gain + blk.ln_bias)
        q = [hi @ blk.wq for hi in h]
        k = [hi @ blk.wk for hi in h]
        v = [hi @ blk.wv for hi in h]
        new_x = []
        for i in range(3):
            scores = np.array([float(np.dot(q[i], k[j])) * scale for j in range(3)])
            e = np.exp(scores - scores.max())
            a = e / e.sum()
            c = a[0] * v[0] + a[1] * v[1] + a[2] * v[2]
            new_x.append(x[i] + c @ blk.wo)
        x = new_x

    cur = np.concatenate(x)
    n_layers = len(params.mlp_weights)
    for i, (w, b) in enumerate(zip(params.mlp_weights, params.mlp_biases)):
        z = cur @ w + b
        cur = np.maximum(z, 0.0) if i < n_layers - 1 else z

    logits = cur.reshape(3, dim)
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    weights = e / e.sum(axis=0, keepdims=True)
    u = (weights * np.stack(tokens)).sum(axis=0)
    return u / np.linalg.norm(u), weights


def numeric_gradient(params, sample, h=1e-5):
    theta = params.to_vector()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        lp = merger_loss(MergerParams.from_vector(params.dim, up), sample)
        lm = merger_loss(MergerParams.from_vector(params.dim, down), sample)
        grad[i] = (lp - lm) / (2.0 * h)
    return grad


class TestForward:
    def test_fresh_params_average_uniformly(self, rng):
        params = init_merger_params(8, seed=3)
        t = make_triple(rng)
        d, weights = merger_forward(params, t)
        assert np.allclose(weights, 1.0 / 3.0)
        mean = (t.d_global + t.d_masked + t.d_bbox) / 3.0
        assert np.allclose(d, mean / np.linalg.norm(mean))

    def test_identical_inputs_are_a_fixed_point(self, rng):
        u = random_unit(rng, 8)
        t = DescriptorTriple(u.copy(), u.copy(), u.copy())
        for _ in range(3):
            d, _ = merger_forward(random_params(8, rng), t)
            assert np.allclose(d, u, atol=1e-12)

    def test_matches_straight_line_reimplementation(self, rng):
        for _ in range(5):
            params = random_params(8, rng)
            t = make_triple(rng)
            d, w = merger_forward(params, t)
            d_ref, w_ref = straight_line_forward(params, t)
            assert np.abs(d - d_ref).max() < 1e-12
            assert np.abs(w - w_ref).max() < 1e-12

    def test_weights_form_a_simplex_per_dimension(self, rng):
        for _ in range(5):
            _, w = merger_forward(random_params(8, rng), make_triple(rng))
            assert np.allclose(w.sum(axis=0), 1.0)
            assert (w > 0).all()

    def test_output_is_unit_norm(self, rng):
        for _ in range(5):
            d, _ = merger_forward(random_params(8, rng), make_triple(rng))
            assert abs(np.linalg.norm(d) - 1.0) < 1e-12

    def test_forward_is_deterministic(self, rng):
        params = random_params(8, rng)
        t = make_triple(rng)
        d1, w1 = merger_forward(params, t)
        d2, w2 = merger_forward(params, t)
        assert np.array_equal(d1, d2) and np.array_equal(w1, w2)

    def test_fusion_adapter_matches_forward(self, rng):
        params = random_params(8, rng)
        t = make_triple(rng)
        assert np.array_equal(MergerFusion(params)(t), merger_forward(params, t)[0])


class TestLoss:
    def test_zero_at_exact_match(self, rng):
        params = random_params(8, rng)
        t = make_triple(rng)
        d, _ = merger_forward(params, t)
        assert merger_loss(params, TrainSample(t, d)) < 1e-12

    def test_one_at_orthogonal_target(self, rng):
        params = random_params(8, rng)
        t = make_triple(rng)
        d, _ = merger_forward(params, t)
        probe = random_unit(rng, 8)
        orth = probe - d * np.dot(d, probe)
        sample = TrainSample(t, orth / np.linalg.norm(orth))
        assert abs(merger_loss(params, sample) - 1.0) < 1e-9

    def test_matches_scalar_recomputation(self, rng):
        params = random_params(8, rng)
        t = make_triple(rng)
        target = random_unit(rng, 8)
        d, _ = merger_forward(params, t)
        assert merger_loss(params, TrainSample(t, target)) == pytest.approx(
            1.0 - float(np.dot(d, target)), abs=1e-15
        )


class TestGradients:
    def test_matches_central_differences(self, rng):
        for _ in range(3):
            params = random_params(8, rng)
            sample = TrainSample(make_triple(rng), random_unit(rng, 8))
            analytic = merger_backward(params, sample).to_vector()
            numeric = numeric_gradient(params, sample)
            assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-8)

    def test_vanishes_at_exact_fit(self, rng):
        params = random_params(8, rng)
        t = make_triple(rng)
        d, _ = merger_forward(params, t)
        grad = merger_backward(params, TrainSample(t, d)).to_vector()
        assert np.abs(grad).max() < 1e-12

    def test_uniform_weight_configuration_against_dual_implementation(self, rng):
        # fresh params keep the final layer zero, so weights are uniform
        params = init_merger_params(8, seed=11)
        sample = TrainSample(make_triple(rng), random_unit(rng, 8))
        analytic = merger_backward(params, sample).to_vector()
        numeric = numeric_gradient(params, sample)
        assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


class TestTraining:
    def dataset_masked_is_target(self, rng, n=64, dim=8):
        out = []
        for _ in range(n):
            t = make_triple(rng, dim)
            out.append(TrainSample(t, t.d_masked))
        return out

    def test_zero_epochs_is_identity(self, rng):
        data = self.dataset_masked_is_target(rng, n=8)
        init = init_merger_params(8, seed=0)
        params, curve = train_merger(data, epochs=0)
        assert curve == []
        assert np.array_equal(params.to_vector(), init.to_vector())

    def test_single_sample_overfit_is_monotone(self, rng):
        sample = TrainSample(make_triple(rng), random_unit(rng, 8))
        _, curve = train_merger([sample], epochs=25, step_size=1e-3, seed=0)
        arr = np.asarray(curve)
        assert ((arr[1:] - arr[:-1]) < 1e-3).all()
        assert arr[-1] < arr[0]

    def test_training_is_deterministic(self, rng):
        data = self.dataset_masked_is_target(rng, n=32)
        p1, c1 = train_merger(data, epochs=3, step_size=1e-3, seed=7)
        p2, c2 = train_merger(data, epochs=3, step_size=1e-3, seed=7)
        assert c1 == c2
        assert np.array_equal(p1.to_vector(), p2.to_vector())

    def test_learns_to_pick_the_masked_vector(self, rng):
        data = self.dataset_masked_is_target(rng, n=256, dim=8)
        params, curve = train_merger(data, epochs=10, step_size=1e-3, seed=0)
        assert curve[-1] < 0.25 * curve[0]
        # the learned weights lean on the masked token
        w_mean = np.mean(
            [merger_forward(params, s.triple)[1][1].mean() for s in data[:32]]
        )
        assert w_mean > 0.5

    def test_non_finite_loss_aborts(self, rng):
        t = make_triple(rng)
        bad = TrainSample(t, np.full(8, np.nan))
        with pytest.raises(RuntimeError):
            train_merger([bad], epochs=1)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_merger([], epochs=1)

    def test_dim_mismatch_rejected(self, rng):
        data = self.dataset_masked_is_target(rng, n=4, dim=8)
        with pytest.raises(ValueError):
            train_merger(data, epochs=1, params=init_merger_params(16))


class TestParameterVector:
    def test_round_trip(self, rng):
        params = random_params(8, rng)
        again = MergerParams.from_vector(8, params.to_vector())
        assert np.array_equal(params.to_vector(), again.to_vector())

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            MergerParams.from_vector(8, np.zeros(10))
