import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robusteeg import functional as F
from robusteeg.gradcheck import finite_diff_grad, relative_error
from robusteeg.tensor import Tape, TapeError, Tensor, record


def grad_of(fn, *arrays):
    """Analytic gradients of scalar fn(*tensors) w.r.t. every argument."""
    ts = [Tensor(np.array(a, dtype=np.float64), track=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    tape.backward(out)
    return [t.grad for t in ts]


def numeric(fn, arrays, i, h=1e-5):
    def f(v):
        args = [Tensor(a) for a in arrays]
        args[i] = Tensor(v)
        return float(fn(*args).data)
    return finite_diff_grad(f, arrays[i], h=h)


def weighted_sum(t, r):
    """sum(t * r) for a fixed array r, so every output position gets a
    distinct upstream gradient."""
    out = Tensor(np.asarray((t.data * r).sum()))
    return record(out, (t,), lambda g: (g * r,))


def weighted(op):
    cache = {}

    def fn(*args):
        out = op(*args)
        if out.shape not in cache:
            cache[out.shape] = np.random.default_rng(99).standard_normal(out.shape)
        return weighted_sum(out, cache[out.shape])
    return fn


def as4(t):
    out = Tensor(t.data.reshape(t.shape[0], -1, 1, 1))
    return record(out, (t,), lambda g: (g.reshape(t.shape),))


class TestConv2d:
    def test_valid_ones(self):
        out = F.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)), np.zeros(1), "valid")
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    def test_same_even_kernel_pads_high_side(self):
        out = F.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)), np.zeros(1), "same")
        np.testing.assert_array_equal(out.data[0, 0], [[4, 4, 2], [4, 4, 2], [2, 2, 1]])

    def test_zero_weight_gives_bias(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
        out = F.conv2d(x, np.zeros((4, 3, 3, 3)), np.arange(4.0), "same")
        np.testing.assert_array_equal(out.data, np.broadcast_to(np.arange(4.0)[None, :, None, None], (2, 4, 5, 5)))

    def test_is_cross_correlation(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        w = np.array([[[[1.0, 0.0], [0.0, 0.0]]]])
        out = F.conv2d(x, w, np.zeros(1), "valid")
        np.testing.assert_array_equal(out.data[0, 0], [[0, 1], [3, 4]])

    def test_strided_valid_shape(self):
        out = F.conv2d(np.ones((1, 2, 7, 6)), np.ones((3, 2, 3, 2)), np.zeros(3), "valid", stride=2)
        assert out.shape == (1, 3, 3, 3)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            F.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 2, 2)), np.zeros(1))

    def test_kernel_too_large(self):
        with pytest.raises(ValueError, match="larger"):
            F.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), np.zeros(1), "valid")

    @pytest.mark.parametrize("seed", range(5))
    def test_linearity(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        a = rng.uniform(-3, 3)
        lhs = F.conv2d(a * x, w, np.zeros(4)).data
        rhs = a * F.conv2d(x, w, np.zeros(4)).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_direct_loops(self, seed):
        rng = np.random.default_rng(seed)
        kh, kw = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        sh, sw = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        padding = ("same", "valid")[seed % 2]
        x = rng.standard_normal((2, 3, int(rng.integers(kh, 9)), int(rng.integers(kw, 9))))
        w, b = rng.standard_normal((4, 3, kh, kw)), rng.standard_normal(4)
        h, wd = x.shape[2:]
        if padding == "same":
            ho, wo = -(-h // sh), -(-wd // sw)
            ph = max((ho - 1) * sh + kh - h, 0)
            pw = max((wo - 1) * sw + kw - wd, 0)
            xp = np.pad(x, ((0, 0), (0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)))
        else:
            ho, wo = (h - kh) // sh + 1, (wd - kw) // sw + 1
            xp = x
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        ref[n, o, i, j] = np.sum(xp[n, :, i * sh:i * sh + kh, j * sw:j * sw + kw] * w[o]) + b[o]
        np.testing.assert_allclose(F.conv2d(x, w, b, padding, stride=(sh, sw)).data, ref, rtol=1e-12, atol=1e-12)


class TestMaxpool:
    def test_two_by_two(self):
        out = F.maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
        np.testing.assert_array_equal(out.data, [[[[4.0]]]])

    def test_constant(self):
        out = F.maxpool2d(np.full((1, 2, 6, 6), 2.5), 3, 1, "same")
        np.testing.assert_array_equal(out.data, np.full((1, 2, 6, 6), 2.5))

    def test_backward_routes_to_argmax(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4), track=True)
        with Tape() as tape:
            loss = F.reduce_sum(F.maxpool2d(x, 4, 4))
        tape.backward(loss)
        assert float(loss.data) == 15
        expected = np.zeros(16)
        expected[15] = 1
        np.testing.assert_array_equal(x.grad.reshape(-1), expected)

    def test_ties_go_to_lowest_index(self):
        x = Tensor(np.ones((1, 1, 2, 2)), track=True)
        with Tape() as tape:
            loss = F.reduce_sum(F.maxpool2d(x, 2, 2))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_overlapping_general_path_ties(self):
        x = Tensor(np.ones((1, 1, 3, 3)), track=True)
        with Tape() as tape:
            loss = F.reduce_sum(F.maxpool2d(x, 2, 1, "valid"))
        tape.backward(loss)
        # windows start at (0,0),(0,1),(1,0),(1,1); each picks its top-left
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 1, 0], [1, 1, 0], [0, 0, 0]])

    def test_window_too_large(self):
        with pytest.raises(ValueError):
            F.maxpool2d(np.ones((1, 1, 2, 8)), 4, 4, "valid")

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_backward_conserves_gradient_mass(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 2, 7, 6)), track=True)
        g = rng.standard_normal((2, 2, 7, 6))
        with Tape() as tape:
            out = F.maxpool2d(x, 3, 1, "same")
            loss = weighted_sum(out, g)
        tape.backward(loss)
        assert math.isclose(x.grad.sum(), g.sum(), rel_tol=1e-12, abs_tol=1e-12)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(F.relu(np.array([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_negative_input_zero_grad(self):
        (g,) = grad_of(lambda x: F.reduce_sum(F.relu(x)), -np.ones(4))
        np.testing.assert_array_equal(g, np.zeros(4))

    def test_indicator(self):
        (g,) = grad_of(lambda x: F.reduce_sum(F.relu(x)), [-1.0, 3.0])
        np.testing.assert_array_equal(g, [0, 1])

    def test_zero_has_zero_derivative(self):
        (g,) = grad_of(lambda x: F.reduce_sum(F.relu(x)), [0.0])
        assert g[0] == 0


def _bn(x, scale, shift, training=True, rm=None, rv=None, eps=1e-5):
    c = x.shape[1]
    rm = np.zeros(c) if rm is None else rm
    rv = np.ones(c) if rv is None else rv
    return F.batchnorm2d(x, scale, shift, rm, rv, training=training, eps=eps)


class TestBatchnorm:
    def test_two_values(self):
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        out = _bn(x, np.ones(1), np.zeros(1), eps=1e-12)
        np.testing.assert_allclose(out.data.reshape(-1), [-1, 1], atol=1e-9)

    def test_constant_channel_gives_shift(self):
        out = _bn(np.full((3, 2, 2, 2), 7.0), np.ones(2), np.array([0.5, -1.0]))
        np.testing.assert_allclose(out.data[:, 0], 0.5)
        np.testing.assert_allclose(out.data[:, 1], -1.0)

    def test_eval_mode_uses_running_stats(self):
        out = _bn(np.full((1, 1, 1, 1), 0.5), np.array([2.0]), np.array([1.0]), training=False, eps=0.0)
        np.testing.assert_allclose(out.data.reshape(-1), [2.0])

    def test_running_update(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 3, 2, 2)) + 5
        rm, rv = np.zeros(3), np.ones(3)
        F.batchnorm2d(x, np.ones(3), np.zeros(3), rm, rv, training=True, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))

    @pytest.mark.parametrize("seed", range(5))
    def test_train_output_standardized(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((5, 3, 4, 4)) * rng.uniform(0.5, 3, size=(1, 3, 1, 1)) + rng.uniform(-2, 2, size=(1, 3, 1, 1))
        out = _bn(x, np.ones(3), np.zeros(3)).data
        assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-6)
        var = x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), var / (var + 1e-5), atol=1e-4)


class TestDropout:
    def test_eval_identity(self):
        x = np.random.default_rng(0).standard_normal(100)
        np.testing.assert_array_equal(F.dropout(x, 0.3, training=False).data, x)

    def test_rate_zero_identity(self):
        x = np.random.default_rng(0).standard_normal(100)
        np.testing.assert_array_equal(F.dropout(x, 0.0, True, np.random.default_rng(1)).data, x)

    def test_inverted_scaling_mean(self):
        out = F.dropout(np.ones(100_000), 0.5, True, np.random.default_rng(0)).data
        assert 0.98 <= out.mean() <= 1.02
        assert set(np.unique(out)) <= {0.0, 2.0}

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            F.dropout(np.ones(3), 1.0, True, np.random.default_rng(0))


class TestDense:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        np.testing.assert_array_equal(F.dense(x, np.eye(4), np.zeros(4)).data, x)

    def test_small(self):
        np.testing.assert_array_equal(F.dense([[1.0, 2.0]], [[1.0], [1.0]], [3.0]).data, [[6.0]])

    def test_mismatch(self):
        with pytest.raises(ValueError):
            F.dense(np.ones((2, 3)), np.ones((4, 1)), np.zeros(1))

    def test_weight_grad_of_sum(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.standard_normal((5, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)
        fn = lambda x, w, b: F.reduce_sum(F.dense(x, w, b))
        _, gw, _ = grad_of(fn, x, w, b)
        np.testing.assert_allclose(gw, np.repeat(x.sum(axis=0)[:, None], 2, axis=1))
        assert relative_error(gw, numeric(fn, [x, w, b], 1)) < 1e-6


class TestConcat:
    def test_inception_width(self):
        parts = [np.zeros((2, c, 3, 3)) for c in (32, 128, 32, 32)]
        assert F.concat_channels(parts).shape == (2, 224, 3, 3)

    def test_single_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 2, 2, 2))
        np.testing.assert_array_equal(F.concat_channels([x]).data, x)

    def test_order(self):
        out = F.concat_channels([np.full((1, 1, 2, 2), 1.0), np.full((1, 1, 2, 2), 2.0)]).data
        assert np.all(out[:, 0] == 1) and np.all(out[:, 1] == 2)

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError):
            F.concat_channels([np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 2))])


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        loss = F.softmax_cross_entropy(np.zeros((1, 3)), [0])
        assert math.isclose(float(loss.data), math.log(3), rel_tol=1e-12)

    def test_stable(self):
        loss = float(F.softmax_cross_entropy(np.array([[1000.0, 0.0, 0.0]]), [0]).data)
        assert np.isfinite(loss) and loss < 1e-12

    def test_gradient(self):
        (g,) = grad_of(lambda z: F.softmax_cross_entropy(z, [0]), [[0.0, 0.0]])
        np.testing.assert_allclose(g, [[-0.5, 0.5]])

    def test_bad_label(self):
        with pytest.raises(ValueError):
            F.softmax_cross_entropy(np.zeros((1, 3)), [3])

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((4, 3)) * 5
        assert float(F.softmax_cross_entropy(z, rng.integers(0, 3, 4)).data) >= 0


class TestTape:
    def test_sum_gradient_is_ones(self):
        (g,) = grad_of(F.reduce_sum, np.random.default_rng(0).standard_normal((2, 3, 4)))
        np.testing.assert_array_equal(g, np.ones((2, 3, 4)))

    def test_unused_leaf_gets_exact_zero(self):
        x = Tensor(np.ones(3), track=True)
        unused = Tensor(np.ones((3, 1)), track=True)
        with Tape() as tape:
            loss = F.reduce_sum(x)
            F.dense(np.ones((1, 3)), unused, np.zeros(1))
        tape.backward(loss)
        np.testing.assert_array_equal(unused.grad, np.zeros((3, 1)))

    def test_second_backward_fails(self):
        x = Tensor(np.ones(3), track=True)
        with Tape() as tape:
            loss = F.reduce_sum(x)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_nothing_recorded_without_tape(self):
        x = Tensor(np.ones(3), track=True)
        out = F.relu(x)
        assert not out.track

    def test_fan_out_accumulates(self):
        x = Tensor(np.array([[1.0, 2.0]]), track=True)
        with Tape() as tape:
            a = F.dense(x, np.array([[1.0], [1.0]]), np.zeros(1))
            b = F.dense(x, np.array([[2.0], [0.0]]), np.zeros(1))
            loss = F.reduce_sum(F.concat_channels([as4(a), as4(b)]))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [[3.0, 1.0]])


class TestFiniteDiff:
    def test_sum(self):
        np.testing.assert_allclose(finite_diff_grad(np.sum, np.random.default_rng(0).standard_normal(5)), 1, atol=1e-9)

    def test_square(self):
        g = finite_diff_grad(lambda v: float(v[0] ** 2), np.array([3.0]), h=1e-5)
        assert abs(g[0] - 6.0) < 1e-8

    def test_dense_cross_entropy_self_consistent(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)
        y = np.array([0, 1, 2, 1])
        fn = lambda x, w, b: F.softmax_cross_entropy(F.dense(x, w, b), y)
        grads = grad_of(fn, x, w, b)
        for i in range(3):
            assert relative_error(grads[i], numeric(fn, [x, w, b], i)) < 1e-6


# op-by-op gradient checks over several seeds (double precision)

def _conv_same(x, w, b):
    return F.conv2d(x, w, b, "same")


def _conv_valid_strided(x, w, b):
    return F.conv2d(x, w, b, "valid", stride=(2, 1))


OPS = {
    "conv_same_odd": (_conv_same, lambda r: [r.standard_normal((2, 3, 5, 4)), r.standard_normal((2, 3, 3, 3)), r.standard_normal(2)]),
    "conv_same_even": (_conv_same, lambda r: [r.standard_normal((1, 2, 4, 5)), r.standard_normal((3, 2, 2, 2)), r.standard_normal(3)]),
    "conv_valid_strided": (_conv_valid_strided, lambda r: [r.standard_normal((2, 2, 7, 5)), r.standard_normal((2, 2, 3, 2)), r.standard_normal(2)]),
    "maxpool_block": (lambda x: F.maxpool2d(x, 2, 2), lambda r: [r.standard_normal((2, 2, 4, 6))]),
    "maxpool_same": (lambda x: F.maxpool2d(x, 3, 1, "same"), lambda r: [r.standard_normal((2, 2, 5, 4))]),
    "relu": (F.relu, lambda r: [r.standard_normal((3, 7))]),
    "bn_train": (lambda x, s, t: _bn(x, s, t), lambda r: [r.standard_normal((3, 2, 3, 3)), r.standard_normal(2), r.standard_normal(2)]),
    "bn_eval": (lambda x, s, t: _bn(x, s, t, training=False, rm=np.array([0.3, -0.2]), rv=np.array([1.5, 0.7])),
                lambda r: [r.standard_normal((3, 2, 3, 3)), r.standard_normal(2), r.standard_normal(2)]),
    "dense": (F.dense, lambda r: [r.standard_normal((4, 5)), r.standard_normal((5, 3)), r.standard_normal(3)]),
    "concat": (lambda a, b: F.concat_channels([a, b]), lambda r: [r.standard_normal((2, 1, 3, 3)), r.standard_normal((2, 3, 3, 3))]),
    "xent": (lambda z: F.softmax_cross_entropy(z, [0, 2, 1]), lambda r: [r.standard_normal((3, 3)) * 3]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(5))
def test_op_gradients_match_finite_differences(name, seed):
    op, make = OPS[name]
    arrays = make(np.random.default_rng(seed))
    fn = weighted(op) if name != "xent" else op
    grads = grad_of(fn, *arrays)
    for i in range(len(arrays)):
        assert relative_error(grads[i], numeric(fn, arrays, i)) < 1e-4, (name, i)
