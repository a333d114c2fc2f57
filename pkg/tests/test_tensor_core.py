import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meranet import ops
from meranet.tensor import BatchNormParams, ConvParams, ShapeError, Tensor, conv_output_extent

from oracles import conv3d_loops, linear_loops, rel_err


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape).astype(np.float32))


# --------------------------------------------------------------------------
# Tensor


class TestTensor:
    def test_row_major_strides_and_offset(self):
        t = Tensor(np.arange(24.0).reshape(2, 3, 4))
        assert t.strides == (12, 4, 1)
        assert t.offset((1, 2, 3)) == 23
        assert t.at(1, 0, 2) == 14.0

    @given(st.lists(st.integers(1, 5), min_size=1, max_size=5), st.data())
    @settings(max_examples=50, deadline=None)
    def test_offset_matches_ravel(self, shape, data):
        t = Tensor(np.arange(math.prod(shape), dtype=np.float32).reshape(shape))
        idx = tuple(data.draw(st.integers(0, n - 1)) for n in shape)
        assert t.offset(idx) == np.ravel_multi_index(idx, shape)
        assert t.at(*idx) == float(t.offset(idx))

    def test_defaults_to_float32_and_is_immutable(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0

    def test_copy_on_construction(self):
        src = np.ones(3, dtype=np.float32)
        t = Tensor(src)
        src[0] = 7
        assert t.at(0) == 1.0

    def test_scalar_promoted_to_rank_one(self):
        assert Tensor(2.5).shape == (1,)

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_out_of_range_index(self):
        with pytest.raises(IndexError):
            Tensor(np.zeros((2, 2))).offset((2, 0))

    def test_assign_keeps_identity_and_dtype(self):
        t = Tensor(np.zeros(3), dtype=np.float64)
        ref = t
        t.assign(np.array([1.0, 2.0, 3.0], dtype=np.float64))
        assert ref is t and t.dtype == np.float64 and t.at(2) == 3.0
        with pytest.raises(ShapeError):
            t.assign(np.zeros(4))


def test_conv_output_extent():
    assert conv_output_extent(112, 7, 2, 3) == 56
    assert conv_output_extent(16, 3, 1, 1) == 16
    assert conv_output_extent(5, 3, 2, 0) == 2


# --------------------------------------------------------------------------
# conv3d


class TestConv3d:
    def test_identity_1x1x1_kernel(self):
        rng = np.random.default_rng(0)
        x = rand(rng, 2, 1, 3, 4, 5)
        w = Tensor(np.ones((1, 1, 1, 1, 1)))
        y = ops.conv3d(x, ConvParams(w))
        assert np.array_equal(y.data, x.data)

    def test_centered_delta_kernel_same_padding(self):
        rng = np.random.default_rng(1)
        x = rand(rng, 1, 2, 4, 5, 5)
        w = np.zeros((2, 2, 3, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1, 1] = w[1, 1, 1, 1, 1] = 1.0
        y = ops.conv3d(x, ConvParams(Tensor(w), padding=(1, 1, 1)))
        assert np.array_equal(y.data, x.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rand(rng, 1, 2, 4, 5, 5)
        w = rand(rng, 3, 2, 3, 3, 3)
        b = rand(rng, 3)
        y = ops.conv3d(x, ConvParams(w, b, padding=1))
        assert rel_err(y.data, conv3d_loops(x.data, w.data, b.data, padding=(1, 1, 1))) < 1e-5

    @given(
        st.integers(1, 2), st.integers(1, 3), st.integers(1, 3),
        st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
        st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
        st.tuples(st.integers(1, 2), st.integers(1, 2), st.integers(1, 2)),
        st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(0, 1)),
        st.integers(0, 2**31),
    )
    @settings(max_examples=25, deadline=None)
    def test_loop_oracle_property(self, n, c_in, c_out, ext, k, s, p, seed):
        if any(e + 2 * pp < kk for e, kk, pp in zip(ext, k, p)):
            return
        rng = np.random.default_rng(seed)
        x = rand(rng, n, c_in, *ext)
        w = rand(rng, c_out, c_in, *k)
        y = ops.conv3d_raw(x, w, None, s, p)
        assert rel_err(y.data, conv3d_loops(x.data, w.data, None, s, p)) < 1e-5

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((1, 2, 3, 3, 3)))
        with pytest.raises(ShapeError):
            ops.conv3d(x, ConvParams(Tensor(np.zeros((1, 3, 1, 1, 1)))))

    def test_non_positive_extent(self):
        x = Tensor(np.zeros((1, 1, 2, 2, 2)))
        with pytest.raises(ShapeError):
            ops.conv3d(x, ConvParams(Tensor(np.zeros((1, 1, 3, 3, 3)))))

    def test_large_input_uses_chunked_columns(self):
        # more positions than one column chunk holds; compare against a tap-by-tap sum
        rng = np.random.default_rng(3)
        x = rand(rng, 1, 4, 6, 20, 20)
        w = rand(rng, 5, 4, 3, 3, 3)
        y = ops.conv3d(x, ConvParams(w, padding=1)).data
        xp = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
        ref = np.zeros((1, 5, 6, 20, 20))
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    patch = xp[:, :, i : i + 6, j : j + 20, k : k + 20]
                    ref += np.einsum("nctHW,oc->notHW", patch, w.data[:, :, i, j, k].astype(np.float64))
        assert rel_err(y, ref) < 1e-5


# --------------------------------------------------------------------------
# reductions


class TestReduce:
    def test_constant_channels(self):
        x = np.zeros((2, 2, 2, 2))
        x[:, 0] = 1.0
        x[:, 1] = 3.0
        x = Tensor(x)
        assert np.all(ops.reduce(x, 1, "mean").data == 2.0)
        assert np.all(ops.reduce(x, 1, "max").data == 3.0)

    def test_one_to_eight(self):
        x = Tensor(np.arange(1.0, 9.0).reshape(1, 2, 2, 2))
        assert ops.reduce(x, (1, 2, 3), "mean").data.reshape(-1)[0] == 4.5
        assert ops.reduce(x, (1, 2, 3), "max").data.reshape(-1)[0] == 8.0
        assert ops.reduce(x, (1, 2, 3), "mean").shape == (1, 1, 1, 1)

    @given(st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_max_dominates_mean_and_constant_mean(self, seed):
        rng = np.random.default_rng(seed)
        x = rand(rng, 2, 3, 4)
        assert np.all(ops.reduce(x, (0, 2), "max").data >= ops.reduce(x, (0, 2), "mean").data - 1e-6)
        c = Tensor(np.full((3, 4), float(rng.uniform(-5, 5)), dtype=np.float32))
        assert np.allclose(ops.reduce(c, (0, 1), "mean").data, c.data[0, 0], rtol=0, atol=1e-6)

    def test_invalid_axes(self):
        x = Tensor(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            ops.reduce(x, (), "mean")
        with pytest.raises(ValueError):
            ops.reduce(x, 2, "mean")
        with pytest.raises(ValueError):
            ops.reduce(x, 0, "median")


# --------------------------------------------------------------------------
# batch norm


def bn(C, gamma=1.0, beta=0.0, mean=0.0, var=1.0):
    f = lambda v: Tensor(np.full(C, v, dtype=np.float32))
    return BatchNormParams(f(gamma), f(beta), f(mean), f(var))


class TestBatchNorm:
    def test_identity_parameters(self):
        rng = np.random.default_rng(0)
        x = rand(rng, 2, 3, 2, 3, 3)
        y = ops.batch_norm(x, bn(3), "infer")
        assert rel_err(y.data, x.data) < 1e-4

    def test_gamma_zero_beta_five(self):
        rng = np.random.default_rng(1)
        y = ops.batch_norm(rand(rng, 2, 3, 2, 2, 2), bn(3, gamma=0.0, beta=5.0), "infer")
        assert np.all(y.data == 5.0)

    def test_train_statistics_against_direct_oracle(self):
        rng = np.random.default_rng(2)
        x = rand(rng, 2, 3, 2, 3, 3)
        gamma = rng.uniform(0.5, 2.0, 3)
        beta = rng.uniform(-1.0, 1.0, 3)
        p = BatchNormParams(Tensor(gamma), Tensor(beta), Tensor(np.zeros(3)), Tensor(np.ones(3)))
        y = ops.batch_norm(x, p, "train").data.astype(np.float64)
        xd = x.data.astype(np.float64)
        for c in range(3):
            vals = xd[:, c].reshape(-1)
            mu = sum(vals) / len(vals)
            var = sum((v - mu) ** 2 for v in vals) / len(vals)
            expect = gamma[c] * (xd[:, c] - mu) / math.sqrt(var + 1e-5) + beta[c]
            assert np.allclose(y[:, c], expect, atol=1e-5)
            out = y[:, c].reshape(-1)
            assert abs(out.mean() - beta[c]) < 1e-4
            assert abs(out.var() - gamma[c] ** 2 * var / (var + 1e-5)) < 1e-4
            # running statistics: momentum 0.1, unbiased variance
            n = len(vals)
            assert p.running_mean.data[c] == pytest.approx(0.1 * mu, rel=1e-5)
            assert p.running_var.data[c] == pytest.approx(0.9 + 0.1 * var * n / (n - 1), rel=1e-5)

    def test_infer_formula(self):
        rng = np.random.default_rng(3)
        x = rand(rng, 1, 2, 2, 2, 2)
        p = BatchNormParams(Tensor([2.0, 0.5]), Tensor([1.0, -1.0]), Tensor([0.3, -0.2]), Tensor([4.0, 0.25]))
        y = ops.batch_norm(x, p, "infer").data
        for c, (g, b, m, v) in enumerate([(2.0, 1.0, 0.3, 4.0), (0.5, -1.0, -0.2, 0.25)]):
            assert np.allclose(y[:, c], g * (x.data[:, c] - m) / math.sqrt(v + 1e-5) + b, atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.batch_norm(Tensor(np.zeros((1, 2, 1, 1, 1))), bn(3), "infer")

    def test_negative_running_var_rejected(self):
        with pytest.raises(ValueError):
            bn(2, var=-1.0)


# --------------------------------------------------------------------------
# activations, linear, loss, broadcasting


class TestActivations:
    def test_values(self):
        assert ops.sigmoid(Tensor([0.0])).item() == 0.5
        assert ops.sigmoid(Tensor([math.log(3.0)])).item() == pytest.approx(0.75, abs=1e-7)
        assert np.array_equal(ops.relu(Tensor([-3.2, 3.2])).data, np.float32([0.0, 3.2]))
        assert np.array_equal(ops.activation(Tensor([-1.0]), "relu").data, [0.0])

    def test_sigmoid_strictly_inside_unit_interval(self):
        y = ops.sigmoid(Tensor([-1e4, -100.0, 100.0, 1e4])).data
        assert np.all(y > 0) and np.all(y < 1)

    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_ranges(self, vals):
        x = Tensor(vals)
        s = ops.sigmoid(x).data
        assert np.all((s > 0) & (s < 1))
        assert np.all(ops.relu(x).data >= 0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ops.activation(Tensor([1.0]), "tanh")


class TestLinear:
    def test_identity_and_bias(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert np.array_equal(ops.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x.data)
        y = ops.linear(x, Tensor(np.zeros((3, 3))), Tensor([1.0, 2.0, 3.0])).data
        assert np.array_equal(y, np.tile([1.0, 2.0, 3.0], (2, 1)))

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        x, w, b = rand(rng, 2, 4), rand(rng, 3, 4), rand(rng, 3)
        ref = linear_loops(x.data.tolist(), w.data.tolist(), b.data.tolist())
        assert np.max(np.abs(ops.linear(x, w, b).data - ref)) < 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            ops.linear(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 5))))


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        loss, probs = ops.softmax_cross_entropy(Tensor(np.zeros((4, 3))), [0, 1, 2, 0])
        assert loss.item() == pytest.approx(math.log(3), abs=1e-6)
        assert np.allclose(probs.data, 1 / 3)

    def test_saturated(self):
        logits = np.zeros((1, 3))
        logits[0, 1] = 1000.0
        loss, _ = ops.softmax_cross_entropy(Tensor(logits), [1])
        assert 0 <= loss.item() < 1e-6

    def test_direct_formula(self):
        rng = np.random.default_rng(5)
        z = rng.standard_normal((2, 3)).astype(np.float32)
        labels = [2, 0]
        loss, probs = ops.softmax_cross_entropy(Tensor(z), labels)
        zd = z.astype(np.float64)
        ref = -sum(math.log(math.exp(zd[n, labels[n]]) / sum(math.exp(v) for v in zd[n])) for n in range(2)) / 2
        assert abs(loss.item() - ref) < 1e-6
        assert np.allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ops.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


class TestBroadcastMul:
    def test_spatiotemporal_broadcast(self):
        rng = np.random.default_rng(0)
        a = rand(rng, 2, 4, 4, 4)
        y = ops.broadcast_mul(a, Tensor(np.full((1, 4, 4, 4), 0.5)))
        assert np.array_equal(y.data, a.data / 2)

    def test_channel_broadcast(self):
        rng = np.random.default_rng(1)
        a = rand(rng, 2, 4, 4, 4)
        b = Tensor(np.array([1.0, 0.0]).reshape(2, 1, 1, 1))
        y = ops.broadcast_mul(a, b).data
        assert np.array_equal(y[0], a.data[0]) and np.all(y[1] == 0)

    def test_ones_identity_and_commutativity(self):
        rng = np.random.default_rng(2)
        a, b = rand(rng, 2, 1, 3), rand(rng, 1, 4, 3)
        assert np.array_equal(ops.broadcast_mul(a, Tensor(np.ones(a.shape))).data, a.data)
        assert np.array_equal(ops.broadcast_mul(a, b).data, ops.broadcast_mul(b, a).data)
        assert ops.broadcast_mul(a, b).shape == (2, 4, 3)

    def test_incompatible(self):
        with pytest.raises(ShapeError):
            ops.broadcast_mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))
        with pytest.raises(ShapeError):
            ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3, 1))))


def test_zero_pad_shortcut_subsamples_and_pads():
    x = Tensor(np.arange(2 * 2 * 4 * 4 * 4, dtype=np.float32).reshape(2, 2, 4, 4, 4))
    y = ops.zero_pad_shortcut(x, 5, (2, 2, 2)).data
    assert y.shape == (2, 5, 2, 2, 2)
    assert np.array_equal(y[:, :2], x.data[:, :, ::2, ::2, ::2])
    assert np.all(y[:, 2:] == 0)


def test_concat_and_reshape():
    a, b = Tensor(np.zeros((1, 2, 3))), Tensor(np.ones((1, 1, 3)))
    c = ops.concat([a, b], 1)
    assert c.shape == (1, 3, 3) and np.all(c.data[0, 2] == 1)
    assert ops.reshape(c, (9,)).shape == (9,)
    with pytest.raises(ShapeError):
        ops.reshape(c, (4, 2))
