import numpy as np
import pytest

from nose_align.adapters import (AdapterConfig, Head, LinearLayer,
                                 backward_adapter, finite_diff_gradient,
                                 forward_adapter, forward_head, gelu,
                                 head_backward, head_forward,
                                 init_adapter_params, max_relative_error,
                                 _dropout_mask)
from nose_align.linalg import Rng

TINY = AdapterConfig(dim=6, desc_depth=2, desc_expansion=2, rec_bottleneck=2)


def tiny_params(seed, jitter=0.0):
    rng = Rng(seed)
    params = init_adapter_params(TINY, rng)
    if jitter:
        for t in params.tensors().values():
            t += rng.normal(t.size, jitter).reshape(t.shape)
    return params


class TestHead:
    def test_zero_weights_zero_output(self):
        head = Head(LinearLayer(np.zeros((4, 3)), np.zeros(4)),
                    LinearLayer(np.zeros((2, 4)), np.zeros(2)))
        out = forward_head(np.ones((5, 3)), head)
        assert np.allclose(out, 0.0)

    def test_identity_layers_large_inputs(self):
        # GELU(10) is within 1e-3 of 10, so identity weights pass x through
        head = Head(LinearLayer(np.eye(3), np.zeros(3)),
                    LinearLayer(np.eye(3), np.zeros(3)))
        x = np.full((2, 3), 10.0)
        assert np.allclose(forward_head(x, head), x, atol=1e-3)

    def test_matches_hand_composition(self):
        rng = Rng(8)
        w1 = rng.normal(12).reshape(4, 3)
        b1 = rng.normal(4)
        w2 = rng.normal(8).reshape(2, 4)
        b2 = rng.normal(2)
        head = Head(LinearLayer(w1, b1), LinearLayer(w2, b2))
        x = rng.normal(6).reshape(2, 3)
        expect = gelu(x @ w1.T + b1) @ w2.T + b2
        assert np.allclose(forward_head(x, head), expect, atol=1e-12)

    def test_backward_matches_finite_difference(self):
        rng = Rng(3)
        params = tiny_params(3, jitter=0.2)
        x = rng.normal(18).reshape(3, 6)
        target = rng.normal(18).reshape(3, 6)

        def loss():
            y, _ = head_forward(x, params.head_desc)
            return float(np.sum((y - target) ** 2))

        y, cache = head_forward(x, params.head_desc)
        _, grads = head_backward(cache, params.head_desc, 2 * (y - target))
        tensors = {k.removeprefix("head_desc."): v
                   for k, v in params.tensors().items()
                   if k.startswith("head_desc.")}
        numeric = finite_diff_gradient(loss, tensors)
        assert max_relative_error(grads, numeric) < 1e-4


class TestDescAdapter:
    def test_zero_residual_blocks_reduce_to_output_layer(self):
        params = tiny_params(1)  # contract layers zero-initialized
        rng = Rng(2)
        x = rng.normal(24).reshape(4, 6)
        y, _ = forward_adapter(x, params.desc_adapter)
        expect = x @ params.desc_adapter.out.W.T + params.desc_adapter.out.b
        assert np.allclose(y, expect, atol=1e-12)

    def test_eval_determinism(self):
        params = tiny_params(1, jitter=0.1)
        x = Rng(2).normal(24).reshape(4, 6)
        y1, _ = forward_adapter(x, params.desc_adapter)
        y2, _ = forward_adapter(x, params.desc_adapter)
        assert np.array_equal(y1, y2)

    def test_backward_zero_upstream(self):
        params = tiny_params(1, jitter=0.1)
        x = Rng(2).normal(24).reshape(4, 6)
        _, cache = forward_adapter(x, params.desc_adapter)
        dx, grads = backward_adapter(cache, np.zeros((4, 6)))
        assert np.allclose(dx, 0.0)
        assert all(np.allclose(g, 0.0) for g in grads.values())


class TestRecAdapter:
    def test_training_mask_deterministic_by_seed(self):
        params = tiny_params(1, jitter=0.1)
        x = Rng(2).normal(24).reshape(4, 6)
        y1, _ = forward_adapter(x, params.rec_adapter, Rng(42))
        y2, _ = forward_adapter(x, params.rec_adapter, Rng(42))
        assert np.array_equal(y1, y2)

    def test_eval_mode_is_identity_on_dropout(self):
        params = tiny_params(1, jitter=0.1)
        params.rec_adapter.dropout_rate = 0.0
        x = Rng(2).normal(24).reshape(4, 6)
        y_eval, _ = forward_adapter(x, params.rec_adapter, None)
        y_train, _ = forward_adapter(x, params.rec_adapter, Rng(5))
        assert np.allclose(y_eval, y_train, atol=1e-15)

    def test_inverted_dropout_mask_mean(self):
        mask = _dropout_mask(Rng(11), (1000, 100), 0.5)
        # mean of the inverted mask is 1; sd of the sample mean is
        # sqrt(p/(1-p)) / sqrt(n)
        n = mask.size
        assert abs(mask.mean() - 1.0) <= 3.0 / np.sqrt(n)
        assert set(np.unique(mask)) == {0.0, 2.0}


class TestLinearGradients:
    def test_single_layer_closed_form(self):
        rng = Rng(6)
        w = rng.normal(12).reshape(3, 4)
        b = rng.normal(3)
        x = rng.normal(8).reshape(2, 4)
        g = rng.normal(6).reshape(2, 3)
        head = Head(LinearLayer(np.eye(4), np.zeros(4)), LinearLayer(w, b))
        # drive the second layer directly: with large positive first layer
        # inputs the GELU is effectively identity, so use the primitive
        from nose_align.adapters import _linear_fwd, _linear_bwd
        y, xc = _linear_fwd(x, LinearLayer(w, b))
        dx, dW, db = _linear_bwd(g, xc, LinearLayer(w, b))
        assert np.allclose(dW, g.T @ x, atol=1e-14)
        assert np.allclose(db, g.sum(axis=0), atol=1e-14)
        assert np.allclose(dx, g @ w, atol=1e-14)


class TestFiniteDiff:
    def test_quadratic(self):
        theta = np.array([3.0])
        grads = finite_diff_gradient(lambda: float(theta[0] ** 2),
                                     {"theta": theta}, h=1e-5)
        assert grads["theta"][0] == pytest.approx(6.0, abs=1e-7)

    def test_sine(self):
        theta = np.array([0.0])
        grads = finite_diff_gradient(lambda: float(np.sin(theta[0])),
                                     {"theta": theta}, h=1e-5)
        assert grads["theta"][0] == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("seed", [101, 202, 303, 404, 505])
def test_adapter_gradients_match_finite_differences(seed):
    params = tiny_params(seed, jitter=0.2)
    rng = Rng(seed + 1)
    x = rng.normal(24).reshape(4, 6)
    target = rng.normal(24).reshape(4, 6)

    for adapter, prefix, drop_seed in ((params.desc_adapter, "desc_adapter.", None),
                                       (params.rec_adapter, "rec_adapter.", 77)):
        def loss():
            drop = Rng(drop_seed) if drop_seed is not None else None
            y, _ = forward_adapter(x, adapter, drop)
            return float(np.sum((y - target) ** 2))

        drop = Rng(drop_seed) if drop_seed is not None else None
        y, cache = forward_adapter(x, adapter, drop)
        _, grads = backward_adapter(cache, 2 * (y - target))
        tensors = {k.removeprefix(prefix): v for k, v in params.tensors().items()
                   if k.startswith(prefix)}
        numeric = finite_diff_gradient(loss, tensors)
        assert max_relative_error(grads, numeric) < 1e-4


def test_param_count_reportable():
    params = tiny_params(1)
    total = params.param_count()
    assert total == sum(t.size for t in params.tensors().values())
    assert total > 0


def test_copy_is_deep():
    params = tiny_params(1, jitter=0.1)
    clone = params.copy()
    before = clone.desc_adapter.out.W.copy()
    params.desc_adapter.out.W += 1.0
    assert np.array_equal(clone.desc_adapter.out.W, before)
