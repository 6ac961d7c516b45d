import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qvae import autograd as ag
from qvae.autograd import Adam, AdamState, ShapeError, Tensor, adam_step

from conftest import gradcheck


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# ------------------------------------------------------------ elementwise


def test_sigmoid_at_zero():
    assert ag.sigmoid(T([0.0])).data[0] == 0.5


def test_relu_definition():
    out = ag.relu(T([-3.2, 3.2])).data
    np.testing.assert_array_equal(out, [0.0, 3.2])


def test_sigmoid_derivative_matches_finite_difference():
    x = T([0.0], grad=True)
    ag.backward(ag.sum(ag.sigmoid(x)))
    h = 1e-4
    fd = (1 / (1 + np.exp(-h)) - 1 / (1 + np.exp(h))) / (2 * h)
    assert x.grad[0] == pytest.approx(0.25, abs=1e-12)
    assert abs(x.grad[0] - fd) < 1e-6


def test_sigmoid_extremes_finite():
    out = ag.sigmoid(Tensor(np.array([-1000.0, 1000.0], np.float32))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 1.0])


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: ag.add(a, b),
        lambda a, b: ag.sub(a, b),
        lambda a, b: ag.mul(a, b),
    ],
    ids=["add", "sub", "mul"],
)
def test_binary_gradients(op, rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    gradcheck(lambda x, y: ag.sum(ag.mul(op(x, y), op(x, y))), [a, b])


@pytest.mark.parametrize(
    "op,low",
    [
        (ag.neg, -2.0),
        (ag.exp, -2.0),
        (ag.log, 0.2),
        (ag.relu, -2.0),
        (ag.sigmoid, -4.0),
        (ag.square, -2.0),
    ],
    ids=lambda v: getattr(v, "__name__", ""),
)
def test_unary_gradients(op, low, rng):
    a = rng.uniform(low, 2.0, size=(5, 3))
    # keep relu away from its kink
    a[np.abs(a) < 1e-3] = 0.5
    gradcheck(lambda x: ag.sum(ag.mul(op(x), T(rng_weights(a.shape)))), [a])


def rng_weights(shape):
    return np.linspace(-1.0, 1.5, int(np.prod(shape))).reshape(shape)


def test_scalar_broadcast_only(rng):
    a = T(rng.normal(size=(2, 2)), grad=True)
    out = ag.sum(ag.mul(ag.add(a, 1.5), 2.0))
    ag.backward(out)
    np.testing.assert_array_equal(a.grad, np.full((2, 2), 2.0))
    with pytest.raises(ShapeError):
        ag.add(a, np.ones(2))


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        ag.add(T(np.ones((2, 3))), T(np.ones((3, 2))))


def test_clamp_gradient_zero_outside():
    x = T([-20.0, 0.0, 20.0], grad=True)
    ag.backward(ag.sum(ag.clamp(x, -10, 10)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


# ----------------------------------------------------------------- matmul


def test_matmul_identity(rng):
    X = rng.normal(size=(3, 3))
    np.testing.assert_array_equal(ag.matmul(T(np.eye(3)), T(X)).data, X)


def test_matmul_hand_case():
    out = ag.matmul(T([[1, 2], [3, 4]]), T([[1], [1]])).data
    np.testing.assert_array_equal(out, [[3], [7]])


def test_matmul_gradient(rng):
    gradcheck(lambda a, b: ag.sum(ag.matmul(a, b)), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])
    gradcheck(
        lambda a, b: ag.sum(ag.square(ag.matmul(a, b))),
        [rng.normal(size=(2, 3)), rng.normal(size=(3, 5))],
    )


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        ag.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_linear_gradient(rng):
    gradcheck(
        lambda x, w, b: ag.sum(ag.square(ag.linear(x, w, b))),
        [rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)],
    )


# ------------------------------------------------------------ convolutions


def conv2d_loops(x, w, stride, pad):
    """Direct-summation cross-correlation, independent of the im2col path."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


def test_conv2d_sum_of_ones():
    out = ag.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv2d_delta_kernel_is_identity(rng):
    x = rng.normal(size=(2, 1, 5, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ag.conv2d(T(x), T(k), padding=1).data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_direct_sum(stride, pad, rng):
    x, w = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(
        ag.conv2d(T(x), T(w), stride=stride, padding=pad).data, conv2d_loops(x, w, stride, pad), atol=1e-12
    )


def test_conv2d_gradient(rng):
    gradcheck(
        lambda x, w, b: ag.sum(ag.square(ag.conv2d(x, w, b, stride=1, padding=1))),
        [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)],
    )
    gradcheck(
        lambda x, w: ag.sum(ag.square(ag.conv2d(x, w, stride=2, padding=1))),
        [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3))],
    )


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError):
        ag.conv2d(T(np.ones((1, 1, 2, 2))), T(np.ones((1, 1, 3, 3))))


def test_conv_transpose_doubling_geometry():
    out = ag.conv_transpose2d(T(np.ones((1, 2, 4, 4))), T(np.ones((2, 3, 4, 4))), stride=2, padding=1)
    assert out.shape == (1, 3, 8, 8)


def test_conv_transpose_single_value():
    out = ag.conv_transpose2d(T([[[[2.5]]]]), T(np.ones((1, 1, 2, 2))), stride=1, padding=0)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.5))


@pytest.mark.parametrize(
    "H,k,s,p", [(4, 4, 2, 1), (3, 3, 1, 1), (5, 3, 2, 0), (2, 2, 1, 0), (6, 4, 2, 1)]
)
def test_conv_adjoint_identity(H, k, s, p, rng):
    C, O, B = 3, 2, 2
    w = rng.normal(size=(O, C, k, k))
    Hout = (H - 1) * s - 2 * p + k
    X = rng.normal(size=(B, C, Hout, Hout))
    Y_shape = ag.conv2d(T(X), T(w), stride=s, padding=p).shape
    assert Y_shape[2] == H
    Y = rng.normal(size=Y_shape)
    lhs = np.sum(ag.conv2d(T(X), T(w), stride=s, padding=p).data * Y)
    # conv2d weight (O, C, k, k) is read by conv_transpose as (in=O, out=C)
    rhs = np.sum(X * ag.conv_transpose2d(T(Y), T(w), stride=s, padding=p).data)
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


def test_conv_transpose_gradient(rng):
    gradcheck(
        lambda x, w, b: ag.sum(ag.square(ag.conv_transpose2d(x, w, b, stride=2, padding=1))),
        [rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(3, 2, 4, 4)), rng.normal(size=2)],
    )


def test_conv_transpose_nonpositive_extent():
    with pytest.raises(ShapeError):
        ag.conv_transpose2d(T(np.ones((1, 1, 1, 1))), T(np.ones((1, 1, 1, 1))), stride=1, padding=1)


# ----------------------------------------------------------------- maxpool


def test_maxpool_definition():
    assert ag.maxpool2d(T([[[[1, 2], [3, 4]]]])).data.item() == 4


def test_maxpool_constant_image():
    out = ag.maxpool2d(T(np.full((1, 1, 8, 8), 0.3))).data
    np.testing.assert_array_equal(out, np.full((1, 1, 4, 4), 0.3))


def test_maxpool_routes_gradient_to_argmax():
    x = T([[[[1.0, 5.0], [3.0, 4.0]]]], grad=True)
    ag.backward(ag.sum(ag.maxpool2d(x)))
    np.testing.assert_array_equal(x.grad, [[[[0, 1], [0, 0]]]])


def test_maxpool_ties_first_index_wins():
    x = T(np.full((1, 1, 2, 2), 7.0), grad=True)
    ag.backward(ag.sum(ag.maxpool2d(x)))
    np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])


def test_maxpool_gradient(rng):
    gradcheck(lambda x: ag.sum(ag.square(ag.maxpool2d(x))), [rng.normal(size=(2, 2, 4, 6))])


def test_maxpool_indivisible():
    with pytest.raises(ShapeError):
        ag.maxpool2d(T(np.ones((1, 1, 3, 4))))


# ----------------------------------------------------------------- losses


def test_bce_half():
    out = ag.bce_sum(T(np.full(4, 0.5)), np.full(4, 0.5))
    assert out.item() == pytest.approx(4 * np.log(2), rel=1e-12)
    assert out.item() == pytest.approx(2.7726, abs=1e-4)


def test_bce_clamped_boundary_is_finite():
    out = ag.bce_sum(T([0.0, 1.0, 1e-7]), np.array([1.0, 0.0, 1.0]))
    assert np.isfinite(out.item())


def test_bce_gradient(rng):
    p = rng.uniform(0.05, 0.95, size=8)
    t = rng.uniform(0, 1, size=8)
    gradcheck(lambda x: ag.bce_sum(x, t), [p])


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        ag.bce_sum(T(np.full(4, 0.5)), np.full(3, 0.5))


def test_softmax_cross_entropy_gradient(rng):
    labels = np.array([0, 2, 1, 2])
    gradcheck(lambda z: ag.softmax_cross_entropy(z, labels), [rng.normal(size=(4, 3))])


def test_mean_and_reshape_gradients(rng):
    gradcheck(lambda x: ag.mean(ag.square(ag.reshape(x, (6, 2)))), [rng.normal(size=(3, 4))])


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    w = T(np.arange(5.0), grad=True)
    ag.backward(ag.sum(w))
    np.testing.assert_array_equal(w.grad, np.ones(5))


def test_backward_power_rule():
    w = T([1.0, 2.0], grad=True)
    ag.backward(ag.sum(ag.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_accumulates_across_calls():
    w = T([1.0, 2.0], grad=True)
    loss = ag.sum(ag.mul(w, w))
    ag.backward(loss)
    ag.backward(loss)
    np.testing.assert_array_equal(w.grad, [4.0, 8.0])


def test_backward_visits_each_node_once():
    w = T([1.0], grad=True)
    h = ag.mul(w, w)  # shared by both branches below
    loss = ag.sum(ag.add(ag.exp(h), ag.log(ag.add(h, 1.0))))
    visited = ag.backward(loss)
    assert visited == 7  # w, h, exp, add(h,1), log, add, sum
    expected = np.exp(1.0) * 2 + 2 / 2.0
    assert w.grad[0] == pytest.approx(expected, rel=1e-12)


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        ag.backward(ag.mul(T([1.0, 2.0], grad=True), 2.0))


def test_two_layer_perceptron_gradient(rng):
    x = rng.normal(size=(5, 4))
    y = rng.uniform(0.1, 0.9, size=(5, 1))

    def net(w1, b1, w2, b2):
        h = ag.relu(ag.linear(T(x), w1, b1))
        return ag.bce_sum(ag.sigmoid(ag.linear(h, w2, b2)), y)

    gradcheck(net, [rng.normal(size=(4, 6)), rng.normal(size=6) * 0.1, rng.normal(size=(6, 1)), rng.normal(size=1)])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 5), st.integers(0, 10_000))
def test_linear_gradcheck_property(n, m, k, seed):
    r = np.random.default_rng(seed)
    gradcheck(
        lambda a, b: ag.sum(ag.sigmoid(ag.matmul(a, b))),
        [r.normal(size=(n, k)), r.normal(size=(k, m))],
    )


# -------------------------------------------------------------------- adam


def test_adam_first_step_is_minus_lr():
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.ones(3)
    st_ = AdamState.zeros_like(p)
    adam_step(p, st_, lr=1e-3)
    np.testing.assert_allclose(p.data, -1e-3 / (1 + 1e-8), rtol=1e-12)
    assert st_.t == 1


def test_adam_zero_gradient_keeps_param():
    p = Tensor(np.array([0.5, -0.25]), requires_grad=True)
    st_ = AdamState.zeros_like(p)
    adam_step(p, st_, lr=1e-3)
    np.testing.assert_array_equal(p.data, [0.5, -0.25])
    assert st_.t == 1


def test_adam_two_step_trajectory():
    g = 0.3
    p = Tensor(np.array([1.0]), requires_grad=True)
    st_ = AdamState.zeros_like(p)
    m = v = 0.0
    theta = 1.0
    for t in (1, 2):
        p.grad = np.array([g])
        adam_step(p, st_, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert abs(st_.m[0] - m) < 1e-7 and abs(st_.v[0] - v) < 1e-7
    assert abs(p.data[0] - theta) < 1e-7


def test_adam_lr_zero_is_noop(rng):
    p = Tensor(rng.normal(size=(4,)).astype(np.float32), requires_grad=True)
    before = p.data.copy()
    opt = Adam([p], lr=0.0)
    for _ in range(3):
        p.grad = rng.normal(size=4).astype(np.float32)
        opt.step()
    np.testing.assert_array_equal(p.data, before)
    assert opt.states[0].t == 3


def test_adam_missing_gradient():
    p = Tensor(np.zeros(2))
    with pytest.raises(ValueError, match="no gradient"):
        adam_step(p, AdamState.zeros_like(p), 1e-3)
