import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kagprompt import tensor as tt
from kagprompt.gradcheck import grad_check
from kagprompt.tensor import AutodiffError, Tape, Tensor, backward

from oracles import bilinear_resize_points, conv2d_loops

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# conv2d


def test_conv_identity_depthwise_kernel():
    x = np.random.default_rng(0).standard_normal((3, 5, 4))
    k = np.ones((3, 1, 1, 1))
    np.testing.assert_array_equal(tt.conv2d(T(x), T(k), depthwise=True).data, x)


def test_conv_zero_kernel():
    x = np.random.default_rng(1).standard_normal((2, 4, 4))
    out = tt.conv2d(T(x), T(np.zeros((3, 2, 3, 3))))
    np.testing.assert_array_equal(out.data, np.zeros((3, 4, 4)))


def test_conv_ones_on_ones_hand_values():
    out = tt.conv2d(T(np.ones((1, 3, 3))), T(np.ones((1, 1, 3, 3)))).data[0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


@pytest.mark.parametrize("depthwise", [False, True])
@pytest.mark.parametrize("kshape", [(1, 1), (3, 3), (5, 5), (1, 5), (5, 1)])
def test_conv_matches_loop_oracle(depthwise, kshape):
    rng = np.random.default_rng(hash((depthwise, kshape)) % 2**32)
    x = rng.standard_normal((3, 6, 5))
    k = rng.standard_normal((3, 1 if depthwise else 3, *kshape))
    b = rng.standard_normal(3)
    got = tt.conv2d(T(x), T(k), depthwise=depthwise, bias=T(b)).data
    np.testing.assert_allclose(got, conv2d_loops(x, k, b, depthwise), atol=1e-12)


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 2, 5, 5))
    k = rng.standard_normal((4, 2, 3, 3))
    batched = tt.conv2d(T(x), T(k)).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], tt.conv2d(T(x[b]), T(k)).data, atol=1e-13)


def test_conv_errors():
    with pytest.raises(ValueError, match="odd"):
        tt.conv2d(T(np.ones((1, 4, 4))), T(np.ones((1, 1, 2, 2))))
    with pytest.raises(ValueError, match="channels"):
        tt.conv2d(T(np.ones((2, 4, 4))), T(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="depthwise"):
        tt.conv2d(T(np.ones((2, 4, 4))), T(np.ones((3, 1, 3, 3))), depthwise=True)


@settings(max_examples=30, deadline=None)
@given(a=finite, b=finite, seed=st.integers(0, 2**16))
def test_conv_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, 5, 5))
    k = T(rng.standard_normal((3, 2, 3, 3)))
    lhs = tt.conv2d(T(a * x + b * y), k).data
    rhs = a * tt.conv2d(T(x), k).data + b * tt.conv2d(T(y), k).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# ---------------------------------------------------------------------------
# matmul, softmax, elementwise


def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tt.matmul(T(a), T([[1.0], [1.0]])).data, [[3.0], [7.0]])
    np.testing.assert_array_equal(tt.matmul(T(a), T(np.eye(2))).data, a)
    np.testing.assert_array_equal(tt.matmul(T(np.zeros((3, 2))), T(a)).data, np.zeros((3, 2)))
    with pytest.raises(ValueError, match="inner"):
        tt.matmul(T(a), T(np.ones((3, 1))))


def test_softmax_examples():
    np.testing.assert_allclose(tt.softmax(T([0.0, math.log(3.0)])).data, [0.25, 0.75], rtol=1e-15)
    np.testing.assert_array_equal(tt.softmax(T([2.0, 2.0, 2.0, 2.0])).data, [0.25] * 4)


@settings(max_examples=50, deadline=None)
@given(x=arrays(np.float64, (3, 7), elements=st.floats(-50, 50)), c=st.floats(-100, 100), axis=st.sampled_from([0, 1]))
def test_softmax_stochastic_and_shift_invariant(x, c, axis):
    y = tt.softmax(T(x), axis=axis).data
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-12)
    assert np.all(y >= 0)
    np.testing.assert_allclose(tt.softmax(T(x + c), axis=axis).data, y, atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    x = np.random.default_rng(3).standard_normal((4, 5)) * 3
    np.testing.assert_allclose(tt.log_softmax(T(x)).data, np.log(tt.softmax(T(x)).data), atol=1e-13)


def test_elementwise_examples():
    z = T(np.zeros((2, 3)))
    np.testing.assert_array_equal(tt.sigmoid(z).data, 0.5)
    np.testing.assert_array_equal(tt.tanh(z).data, 0.0)
    x = np.random.default_rng(4).standard_normal((2, 3))
    np.testing.assert_array_equal(tt.mul(T(x), T(np.ones((2, 3)))).data, x)
    with pytest.raises(ValueError, match="incompatible"):
        tt.add(T(np.ones((2, 3))), T(np.ones((3, 2))))


def test_sigmoid_extremes_are_finite():
    y = tt.sigmoid(T([-800.0, 800.0])).data
    assert y[0] == 0.0 and y[1] == 1.0


# ---------------------------------------------------------------------------
# pooling, upsampling, normalization


def test_global_avg_pool_examples():
    np.testing.assert_array_equal(tt.global_avg_pool(T([[[1.0, 3.0], [5.0, 7.0]]])).data, [4.0])
    np.testing.assert_array_equal(tt.global_avg_pool(T(np.full((3, 4, 4), 2.5))).data, [2.5] * 3)
    np.testing.assert_array_equal(tt.global_avg_pool(T(np.zeros((2, 3, 3)))).data, [0.0, 0.0])


def test_upsample_hand_case():
    out = tt.bilinear_upsample(T([[[0.0, 1.0], [2.0, 3.0]]]), 4, 4).data[0]
    assert (out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]) == (0.0, 1.0, 2.0, 3.0)
    # centre pixels: source coordinates 0.25 / 0.75 along each axis
    np.testing.assert_allclose(out[1:3, 1:3], [[0.75, 1.25], [1.75, 2.25]], atol=1e-15)


def test_upsample_identity_and_constant():
    x = np.random.default_rng(5).standard_normal((2, 3, 4))
    np.testing.assert_allclose(tt.bilinear_upsample(T(x), 3, 4).data, x, atol=1e-15)
    np.testing.assert_allclose(tt.bilinear_upsample(T(np.full((1, 2, 3), 0.7)), 8, 9).data, 0.7, atol=1e-15)
    with pytest.raises(ValueError):
        tt.bilinear_upsample(T(x), 0, 4)


@settings(max_examples=40, deadline=None)
@given(
    x=arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-5, 5)),
    fy=st.integers(1, 4),
    fx=st.integers(1, 4),
)
def test_upsample_matches_point_oracle_and_bounds(x, fy, fx):
    h, w = x.shape
    out = tt.bilinear_upsample(T(x), h * fy, w * fx).data
    np.testing.assert_allclose(out, bilinear_resize_points(x, h * fy, w * fx), atol=1e-12)
    assert out.min() >= x.min() - 1e-12 and out.max() <= x.max() + 1e-12


def test_l2_normalize_examples():
    np.testing.assert_allclose(tt.l2_normalize(T([3.0, 4.0])).data, [0.6, 0.8], rtol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(tt.l2_normalize(T(u)).data, u)
    np.testing.assert_array_equal(tt.l2_normalize(T(np.zeros(3))).data, np.zeros(3))


# ---------------------------------------------------------------------------
# tape and backward


def test_backward_sum_and_square():
    x = T(np.random.default_rng(6).standard_normal((2, 3)), grad=True)
    with Tape():
        backward(tt.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = T(3.0, grad=True)
    with Tape():
        grads = backward(tt.mul(y, y))
    assert y.grad == 6.0 and grads[y.tape_id].data == 6.0


def test_backward_errors():
    x = T(np.ones(3), grad=True)
    with Tape():
        with pytest.raises(AutodiffError, match="scalar"):
            backward(tt.scale(x, 2.0))
    with pytest.raises(AutodiffError, match="tape"):
        backward(tt.tsum(x))
    with Tape() as tape:
        loss = tt.tsum(tt.mul(x, x))
        assert len(tape) == 2
    assert len(tape) == 0  # the graph is released on exit
    with pytest.raises(AutodiffError, match="closed"):
        backward(loss)


def test_shared_input_gradients_accumulate():
    x = T([1.0, 2.0], grad=True)
    with Tape():
        backward(tt.tsum(tt.add(tt.mul(x, x), tt.scale(x, 3.0))))
    np.testing.assert_array_equal(x.grad, [5.0, 7.0])


def test_leaf_tensors_are_immutable_and_finite():
    x = T([1.0, 2.0])
    with pytest.raises(ValueError):
        x.data[0] = 5.0
    with pytest.raises(ValueError, match="finite"):
        T([1.0, np.nan])
    with pytest.raises(ValueError, match="rank"):
        T(np.zeros((1, 1, 1, 1, 1)))


def test_forward_is_deterministic():
    rng = np.random.default_rng(7)
    x, k = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
    a = tt.softmax(tt.conv2d(T(x), T(k)), axis=-1).data
    b = tt.softmax(tt.conv2d(T(x), T(k)), axis=-1).data
    assert a.tobytes() == b.tobytes()


def test_custom_op_through_apply_op():
    def cube(x):
        return tt.apply_op("cube", (x,), x.data**3, lambda g: (3 * g * x.data**2,))

    rep = grad_check(lambda x: tt.tsum(cube(x)), T(np.random.default_rng(8).standard_normal(5)))
    assert rep.passed


# ---------------------------------------------------------------------------
# gradient checks for every registered op, 20 seeds each


def _op_cases(rng):
    """(op name, function of the differentiable inputs, inputs) per registered op."""
    r = rng.standard_normal
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    w = Tensor(r((3, 4)))  # fixed weights turn array outputs into a scalar

    def red(y):
        wt = Tensor(rng.standard_normal(y.shape)) if y.shape not in cache else cache[y.shape]
        cache[y.shape] = wt
        return tt.tsum(tt.mul(y, wt))

    cache: dict = {}
    return [
        ("conv2d", lambda x, k, b: red(tt.conv2d(x, k, bias=b)), [r((2, 5, 4)), r((3, 2, 3, 3)), r(3)]),
        ("conv2d", lambda x, k: red(tt.conv2d(x, k, depthwise=True)), [r((2, 2, 5, 5)), r((2, 1, 5, 1))]),
        ("matmul", lambda a, b: red(tt.matmul(a, b)), [r((2, 3, 4)), r((4, 2))]),
        ("softmax", lambda x: red(tt.softmax(x, axis=-1)), [r((3, 5))]),
        ("log_softmax", lambda x: red(tt.log_softmax(x, axis=0)), [r((3, 5))]),
        ("sigmoid", lambda x: red(tt.sigmoid(x)), [3 * r((3, 4))]),
        ("tanh", lambda x: red(tt.tanh(x)), [r((3, 4))]),
        ("log", lambda x: red(tt.log(x)), [pos(3, 4)]),
        ("add", lambda a, b: red(tt.add(a, b)), [r((3, 4)), r(4)]),
        ("sub", lambda a, b: red(tt.sub(a, b)), [r((3, 1)), r((3, 4))]),
        ("mul", lambda a, b: red(tt.mul(a, b)), [r((2, 3, 4)), r((3, 1))]),
        ("scale", lambda x: red(tt.scale(x, -1.7)), [r((3, 4))]),
        ("add_scalar", lambda x: red(tt.add_scalar(x, 0.3)), [r((3, 4))]),
        ("clip_min", lambda x: red(tt.clip_min(x, 0.0)), [np.sign(r((3, 4))) * pos(3, 4)]),
        ("global_avg_pool", lambda x: red(tt.global_avg_pool(x)), [r((2, 3, 4, 4))]),
        ("bilinear_upsample", lambda x: red(tt.bilinear_upsample(x, 7, 9)), [r((2, 3, 4))]),
        ("l2_normalize", lambda x: red(tt.l2_normalize(x, axis=-3)), [r((2, 3, 3, 3))]),
        ("reshape", lambda x: red(tt.mul(tt.reshape(x, (3, 4)), w)), [r((2, 6))]),
        ("swapaxes", lambda x: red(tt.swapaxes(x, 0, 2)), [r((2, 3, 4))]),
        ("concat", lambda a, b: red(tt.concat([a, b], axis=1)), [r((2, 3)), r((2, 4))]),
        ("take", lambda x: red(tt.take(x, 1, axis=-1)), [r((3, 2))]),
        ("sum", lambda x: red(tt.tsum(x, axis=(0, 2))), [r((2, 3, 4))]),
        ("mean", lambda x: red(tt.tmean(x, axis=1)), [r((2, 3, 4))]),
    ]


def test_every_registered_op_has_a_gradient_case():
    names = {name for name, _, _ in _op_cases(np.random.default_rng(0))}
    assert names == set(tt.OPS)


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_every_op(seed):
    rng = np.random.default_rng(1000 + seed)
    failures = []
    for name, fn, inputs in _op_cases(rng):
        rep = grad_check(fn, [Tensor(a) for a in inputs], eps=1e-5, tol=1e-4)
        if not rep.passed:
            failures.append(f"{name}: {rep}")
    assert not failures, failures
