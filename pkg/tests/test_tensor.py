import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from neurofuse import tensor as T
from neurofuse.tensor import Tensor

from oracles import GRAD_RTOL, away_from_zero, op_gradient_errors, well_separated


# --- conv3d -----------------------------------------------------------------


@pytest.mark.parametrize(
    "extent, k, p, s, d, expected",
    [
        (96, 1, 0, 1, 1, 96),
        (47, 3, 0, 1, 2, 43),
        (21, 5, 2, 1, 2, 17),
        (8, 3, 1, 1, 2, 6),
    ],
)
def test_conv_output_extent_reference_blocks(extent, k, p, s, d, expected):
    assert T.conv_output_extent(extent, k, p, s, d) == expected


def test_conv3d_scalar_case():
    x = Tensor(np.full((1, 1, 1, 1, 1), 3.0))
    w = Tensor(np.full((1, 1, 1, 1, 1), -2.0))
    b = Tensor(np.array([0.5]))
    out = T.conv3d(x, w, b)
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.data.item() == pytest.approx(3.0 * -2.0 + 0.5)


def test_conv3d_matches_direct_sum():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2, 6, 7, 5))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    p, s, d = 1, 2, 1
    out = T.conv3d(Tensor(x), Tensor(w), Tensor(b), p, s, d).data
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    ref = np.zeros_like(out)
    for n, o, i, j, l in np.ndindex(*ref.shape):
        patch = xp[n, :, i * s: i * s + 3 * d: d, j * s: j * s + 3 * d: d, l * s: l * s + 3 * d: d]
        ref[n, o, i, j, l] = np.sum(patch * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-10)


def test_conv3d_rejects_channel_mismatch():
    with pytest.raises(ValueError, match=r"\(1, 2, 4, 4, 4\).*\(1, 3, 1, 1, 1\)"):
        T.conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 1, 1, 1))), Tensor(np.zeros(1)))


def test_conv3d_rejects_window_larger_than_input():
    with pytest.raises(ValueError):
        T.conv3d(Tensor(np.zeros((1, 1, 3, 3, 3))), Tensor(np.zeros((1, 1, 3, 3, 3))), Tensor(np.zeros(1)), dilation=2)


def test_conv3d_is_linear_without_bias():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 7, 7, 7))
    y = rng.standard_normal((1, 2, 7, 7, 7))
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
    b = Tensor(np.zeros(3))
    alpha = 2.75
    lhs = T.conv3d(Tensor(alpha * x + y), w, b, 1, 1, 2).data
    rhs = alpha * T.conv3d(Tensor(x), w, b, 1, 1, 2).data + T.conv3d(Tensor(y), w, b, 1, 1, 2).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


# --- maxpool3d ----------------------------------------------------------------


@pytest.mark.parametrize("extent, k, s, expected", [(96, 3, 2, 47), (43, 3, 2, 21), (17, 3, 2, 8), (6, 5, 2, 1)])
def test_pool_output_extent(extent, k, s, expected):
    assert T.pool_output_extent(extent, k, s) == expected


def test_maxpool_rejects_small_extent():
    with pytest.raises(ValueError):
        T.maxpool3d(Tensor(np.zeros((1, 1, 4, 4, 4))), 5, 2)


def test_maxpool_window_max_and_tie_routing():
    x = Tensor(np.ones((1, 1, 2, 2, 2)), tracked=True)
    out = T.maxpool3d(x, 2, 1)
    assert out.data.item() == 1.0
    T.backward(T.sum(out))
    expected = np.zeros((1, 1, 2, 2, 2))
    expected[0, 0, 0, 0, 0] = 1.0  # first element in row-major order
    np.testing.assert_array_equal(x.grad, expected)


def test_maxpool_overlapping_windows_accumulate():
    x = np.zeros((1, 1, 3, 3, 3))
    x[0, 0, 1, 1, 1] = 5.0
    t = Tensor(x, tracked=True)
    out = T.maxpool3d(t, 2, 1)
    assert np.all(out.data == 5.0)
    T.backward(T.sum(out))
    assert t.grad[0, 0, 1, 1, 1] == 8.0


# --- instance norm ------------------------------------------------------------


def test_instance_norm_constant_channel_is_zero():
    x = Tensor(np.full((1, 1, 2, 2, 2), 7.0))
    out = T.instance_norm3d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_instance_norm_unit_channel_unchanged():
    x = np.array([-1.0, 1.0]).reshape(1, 1, 2, 1, 1)
    out = T.instance_norm3d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=0.0)
    np.testing.assert_allclose(out.data, x, atol=1e-12)


def test_instance_norm_statistics():
    rng = np.random.default_rng(0)
    x = Tensor((rng.standard_normal((2, 2, 4, 4, 4)) * 3 + 5).astype(np.float32))
    out = T.instance_norm3d(x, Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32))).data
    mean = out.mean(axis=(2, 3, 4))
    var = out.var(axis=(2, 3, 4))
    assert np.all(np.abs(mean) < 1e-5)
    assert np.all(np.abs(var - 1) < 1e-3)


# --- relu / linear / loss ---------------------------------------------------


def test_relu_values_and_subgradient():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_array_equal(T.relu(Tensor(-np.arange(1.0, 5.0))).data, 0)
    x = Tensor([-1.0, 2.0], tracked=True)
    T.backward(T.sum(T.relu(x)))
    np.testing.assert_array_equal(x.grad, [0, 1])


def test_linear_hand_arithmetic():
    out = T.linear(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]]), Tensor([5.0]))
    np.testing.assert_array_equal(out.data, [[16.0]])


def test_linear_identity():
    x = np.arange(6.0).reshape(2, 3)
    out = T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_linear_rejects_mismatch():
    with pytest.raises(ValueError):
        T.linear(Tensor(np.zeros((1, 4))), Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


@pytest.mark.parametrize(
    "logits, target, expected",
    [
        ([0.0, 0.0, 0.0], 1, math.log(3)),
        ([30.0, -30.0, -30.0], 0, 0.0),
        ([1.0, 2.0, 3.0], 2, -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))),
    ],
)
def test_cross_entropy_values(logits, target, expected):
    loss, probs = T.softmax_cross_entropy(Tensor(np.array([logits])), [target])
    assert float(loss.data) == pytest.approx(expected, abs=1e-6)
    assert probs.sum() == pytest.approx(1.0, abs=1e-6)


def test_cross_entropy_value_123_is_04076():
    loss, _ = T.softmax_cross_entropy(Tensor(np.array([[1.0, 2.0, 3.0]])), [2])
    assert float(loss.data) == pytest.approx(0.4076, abs=1e-4)


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 4))), [0])


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.just(3)),
                  elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one(logits):
    _, probs = T.softmax_cross_entropy(Tensor(logits), np.zeros(len(logits), dtype=int))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(np.isfinite(probs))


# --- add / concat -------------------------------------------------------------


def test_add_and_concat():
    np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])
    x = np.arange(4.0)
    np.testing.assert_array_equal(T.add(Tensor(x), Tensor(np.zeros(4))).data, x)
    out = T.concat(Tensor(np.ones((2, 1024))), Tensor(np.zeros((2, 1024))))
    assert out.shape == (2, 2048)
    assert out.data[:, :1024].min() == 1 and out.data[:, 1024:].max() == 0
    with pytest.raises(ValueError):
        T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        T.concat(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))


# --- backward -----------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.zeros((2, 3, 4)), tracked=True)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_sum_of_squares():
    x = Tensor([1.0, -2.0], tracked=True)
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, -4.0])


def test_backward_rejects_untracked():
    with pytest.raises(ValueError):
        T.backward(Tensor(1.0))


def test_tape_replays_each_node_once_in_reverse_order():
    x = Tensor(np.ones(3), tracked=True)
    h = T.mul(x, x)
    loss = T.sum(T.add(h, h))  # h feeds add twice
    tape = T.Tape.from_loss(loss)
    seqs = [n.seq for n in tape.nodes]
    assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs) == 3
    visited = tape.replay(loss, np.ones(()))
    assert [n.seq for n in visited] == seqs[::-1]
    np.testing.assert_array_equal(x.grad, 4 * np.ones(3))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), tracked=True)
    with T.no_grad():
        y = T.sum(x)
    assert not y.tracked and y.node is None


def _conv_case(rng):
    x = rng.standard_normal((2, 2, 6, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    proj = rng.standard_normal((2, 3, 2, 2, 2))
    return [x, w, b], lambda x, w, b: T.sum(T.mul(T.conv3d(x, w, b, 1, 2, 2), Tensor(proj)))


def _norm_case(rng):
    x = rng.standard_normal((2, 3, 3, 4, 3))
    proj = rng.standard_normal(x.shape)
    return [x, rng.standard_normal(3), rng.standard_normal(3)], (
        lambda x, g, b: T.sum(T.mul(T.instance_norm3d(x, g, b), Tensor(proj)))
    )


def _pool_case(rng):
    x = well_separated(rng, (2, 2, 7, 7, 7))
    proj = rng.standard_normal((2, 2, 3, 3, 3))
    return [x], lambda x: T.sum(T.mul(T.maxpool3d(x, 3, 2), Tensor(proj)))


def _relu_case(rng):
    x = away_from_zero(rng, (4, 5))
    proj = rng.standard_normal((4, 5))
    return [x], lambda x: T.sum(T.mul(T.relu(x), Tensor(proj)))


def _linear_case(rng):
    return [rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)], (
        lambda x, w, b: T.sum(T.mul(T.linear(x, w, b), T.linear(x, w, b)))
    )


def _xent_case(rng):
    y = rng.integers(0, 3, size=4)
    return [rng.standard_normal((4, 3)) * 3], lambda z: T.softmax_cross_entropy(z, y)[0]


def _add_concat_case(rng):
    proj = rng.standard_normal((2, 6))
    return [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))], (
        lambda a, b: T.sum(T.mul(T.concat(T.add(a, b), T.mul(a, b)), Tensor(proj)))
    )


OP_CASES = {
    "conv3d": _conv_case,
    "instance_norm3d": _norm_case,
    "maxpool3d": _pool_case,
    "relu": _relu_case,
    "linear": _linear_case,
    "softmax_cross_entropy": _xent_case,
    "add_concat_mul": _add_concat_case,
}


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(op, seed):
    arrays, build = OP_CASES[op](np.random.default_rng(seed))
    errs = op_gradient_errors(build, arrays, seed=seed)
    assert max(errs) <= GRAD_RTOL


def test_backward_is_bitwise_reproducible():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((1, 2, 9, 9, 9)).astype(np.float32))
        w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32), tracked=True)
        b = Tensor(np.zeros(3, np.float32), tracked=True)
        g = Tensor(np.ones(3, np.float32), tracked=True)
        h = T.maxpool3d(T.relu(T.instance_norm3d(T.conv3d(x, w, b, 0, 1, 2), g, Tensor(np.zeros(3, np.float32)))), 3, 2)
        T.backward(T.sum(h))
        return w.grad, g.grad

    a, b = run(), run()
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_forward_outputs_finite_for_finite_inputs():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 1, 10, 10, 10)).astype(np.float32) * 1e3)
    w = Tensor(rng.standard_normal((2, 1, 3, 3, 3)).astype(np.float32))
    h = T.conv3d(x, w, Tensor(np.zeros(2, np.float32)), 1, 1, 1)
    h = T.instance_norm3d(h, Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32)))
    assert np.all(np.isfinite(T.maxpool3d(T.relu(h), 3, 2).data))
