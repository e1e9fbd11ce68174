import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stadv import tensor as T
from stadv.gradcheck import numerical_gradient, relative_error
from stadv.tensor import ShapeError, TapeError, Tensor


def grad_of(fn, *arrays_in):
    ts = [Tensor(a, requires_grad=True) for a in arrays_in]
    fn(*ts).backward()
    return [t.grad for t in ts]


def fd_check(fn, x, tol=1e-6, h=1e-3):
    """Analytic vs central-difference gradient of scalar fn at x."""
    (analytic,) = grad_of(fn, x)
    numeric = numerical_gradient(lambda a: float(fn(Tensor(a)).data), x, h)
    err = relative_error(analytic, numeric)
    assert err <= tol, err


# --- elementwise ---------------------------------------------------------------


def test_add_elementwise():
    assert np.array_equal((Tensor([1, 2]) + Tensor([3, 4])).data, [4, 6])


def test_sqrt_value_and_grad():
    x = Tensor([4.0], requires_grad=True)
    y = T.sqrt(x)
    assert y.data[0] == 2.0
    y.sum().backward()
    assert x.grad[0] == 0.25


def test_sqrt_grad_at_zero_is_zero():
    x = Tensor([0.0], requires_grad=True)
    T.sqrt(x).sum().backward()
    assert x.grad[0] == 0.0


def test_abs_grad_sign():
    x = Tensor([-3.0], requires_grad=True)
    abs(x).sum().backward()
    assert x.grad[0] == -1.0


def test_abs_and_relu_subgradient_at_zero():
    x = Tensor([0.0, 0.0], requires_grad=True)
    (abs(x) + T.relu(x)).sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_scalar_broadcast_and_reverse_ops():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (2.0 - x) * 3.0 + 1.0 / x
    y.sum().backward()
    assert np.allclose(y.data, [4.0, 0.5])
    assert np.allclose(x.grad, [-3 - 1.0, -3 - 0.25])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
    assert "(2, 3)" in str(err.value) and "(3, 2)" in str(err.value)
    assert err.value.shapes == ((2, 3), (3, 2))


def test_maximum_routes_gradient():
    a = Tensor([1.0, 5.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0, 2.0], requires_grad=True)
    T.maximum(a, b).sum().backward()
    assert np.array_equal(a.grad, [0, 1, 0])
    assert np.array_equal(b.grad, [1, 0, 1])  # tie goes to b


@pytest.mark.parametrize(
    "fn",
    [
        lambda a: (a * a * a).sum(),
        lambda a: (a / (a * a + 1.0)).sum(),
        lambda a: T.sqrt(a * a + 0.5).sum(),
        lambda a: T.exp(a * 0.3).sum(),
        lambda a: T.log(a * a + 1.0).sum(),
        lambda a: T.tanh(a).sum(),
        lambda a: abs(a).sum(),
        lambda a: T.maximum(a, 0.1).sum(),
        lambda a: T.amax(a * 2.0),
        lambda a: T.amax(a, axis=1).sum(),
        lambda a: (a.transpose(1, 0) * a.transpose(1, 0)).sum(axis=0).sum(),
        lambda a: a[1:, ::2].sum() + a[0, 1] * a[2, 2],
        lambda a: T.take(a, [0, 0, 2], axis=1).sum(),
        lambda a: T.bias_add(a, Tensor(np.arange(3.0)), axis=1).sum(),
    ],
)
def test_elementwise_and_shape_ops_match_finite_differences(fn):
    x = np.random.default_rng(1).uniform(0.2, 1.5, (3, 3))
    x[0, 0] = -0.7
    fd_check(fn, x)


# --- matmul --------------------------------------------------------------------


def test_matmul_identity_and_dot():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_gradients_vs_finite_differences():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    w = rng.standard_normal((3, 2))
    ga, gb = grad_of(lambda p, q: ((p @ q) * w).sum(), a, b)
    na = numerical_gradient(lambda p: float(np.sum((p @ b) * w)), a)
    nb = numerical_gradient(lambda q: float(np.sum((a @ q) * w)), b)
    assert relative_error(ga, na) <= 1e-6
    assert relative_error(gb, nb) <= 1e-6


# --- conv2d ----------------------------------------------------------------------


def direct_conv(x, w, stride, pad):
    """Loop-based cross-correlation used as an independent oracle."""
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = x[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data.tolist() == [[[[9.0]]]]


def test_conv_delta_image_reproduces_flipped_kernel():
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    out = T.conv2d(Tensor(x), Tensor(k)).data[0, 0]
    # cross-correlation: the response to a centred delta is the kernel rotated 180 degrees
    assert np.array_equal(out, k[0, 0, ::-1, ::-1])
    assert np.array_equal(out, direct_conv(x, k, 1, 0)[0, 0])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv_matches_direct_evaluation(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w = rng.standard_normal((2, 3, 7, 7)), rng.standard_normal((4, 3, 3, 3))
    assert np.allclose(T.conv2d(Tensor(x), Tensor(w), stride, pad).data, direct_conv(x, w, stride, pad))


@pytest.mark.parametrize("channels", [(2, 3), (3, 2)])  # both input-gradient paths
@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_gradients_vs_finite_differences(stride, pad, channels):
    c, f = channels
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((1, c, 5, 5)), rng.standard_normal((f, c, 3, 3))
    mix = rng.standard_normal(T.conv2d(Tensor(x), Tensor(w), stride, pad).shape)
    gx, gw = grad_of(lambda a, b: (T.conv2d(a, b, stride, pad) * mix).sum(), x, w)
    nx = numerical_gradient(lambda a: float(np.sum(direct_conv(a, w, stride, pad) * mix)), x)
    nw = numerical_gradient(lambda b: float(np.sum(direct_conv(x, b, stride, pad) * mix)), w)
    assert relative_error(gx, nx) <= 1e-5
    assert relative_error(gw, nw) <= 1e-5


def test_conv_floors_partial_stride_and_rejects_oversized_kernel():
    rng = np.random.default_rng(9)
    x, w = rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2)
    assert out.shape == (2, 3, 2, 2)
    assert np.allclose(out.data, direct_conv(x, w, 2, 0))
    mix = rng.standard_normal(out.shape)
    gx, _ = grad_of(lambda a, b: (T.conv2d(a, b, 2, 0) * mix).sum(), x, w)
    nx = numerical_gradient(lambda a: float(np.sum(direct_conv(a, w, 2, 0) * mix)), x)
    assert relative_error(gx, nx) <= 1e-5
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# --- avgpool -------------------------------------------------------------------


def test_avgpool_constant_image_unchanged():
    x = np.full((1, 2, 5, 5), 0.37)
    assert np.allclose(T.avgpool2d(Tensor(x), 3, same=True).data, x)


def test_avgpool_center_spike():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 9.0
    out = T.avgpool2d(Tensor(x), 3, same=True).data[0, 0]
    assert out[1, 1] == 1.0
    # with edge replication each border window still sees the centre exactly once
    assert np.allclose(out, 1.0)


def test_avgpool_valid_mode_and_window_check():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = T.avgpool2d(Tensor(x), 2).data[0, 0]
    assert np.array_equal(out, [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ShapeError):
        T.avgpool2d(Tensor(np.ones((1, 1, 2, 2))), 3)


@pytest.mark.parametrize("same", [False, True])
def test_avgpool_gradient_vs_finite_differences(same):
    x = np.random.default_rng(2).standard_normal((1, 2, 6, 6))
    mix = np.random.default_rng(3).standard_normal(T.avgpool2d(Tensor(x), 3, stride=1, same=same).shape)
    fd_check(lambda a: (T.avgpool2d(a, 3, stride=1, same=same) * mix).sum(), x)


# --- heads -----------------------------------------------------------------------


def test_softmax_symmetric():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_and_positive(z):
    p = T.softmax(Tensor(z)).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(p > 0)


def test_cross_entropy_saturated_prediction():
    assert T.cross_entropy(Tensor([0.0, 40.0, 0.0]), 1).data < 1e-15


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor([0.0, 1.0]), 2)
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor([[0.0, 1.0]]), [-1])


def test_cross_entropy_gradient():
    z = np.random.default_rng(4).standard_normal((5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    fd_check(lambda a: T.cross_entropy(a, labels), z)
    fd_check(lambda a: T.cross_entropy(a, labels, reduction="sum"), z)
    fd_check(lambda a: T.cross_entropy(a.reshape(-1)[:4], 2), z)
    fd_check(lambda a: (T.log_softmax(a) * T.softmax(a * 0.5)).sum(), z)


# --- backward semantics ----------------------------------------------------------


def test_sum_and_square_grads():
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(grad_of(lambda a: a.sum(), x)[0], np.ones(3))
    assert np.array_equal(grad_of(lambda a: (a * a).sum(), x)[0], 2 * x)


def test_shared_input_accumulates_both_paths():
    x = Tensor(3.0, requires_grad=True)
    y = x * 2.0
    (y * y + y).backward()  # d/dx (4x^2 + 2x) = 8x + 2
    assert x.grad == 26.0


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_graph_is_consumed_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(TapeError):
        loss.backward()
    # reusing an intermediate from a consumed graph is also refused
    y = x * 3.0
    y.sum().backward()
    with pytest.raises(TapeError):
        (y * 2.0).sum().backward()


def test_all_requires_grad_nodes_get_grads():
    x = Tensor(np.ones(3), requires_grad=True)
    h = x * 2.0
    out = (h * h).sum()
    out.backward()
    assert h.grad is not None and h.grad.shape == h.shape
    assert x.grad is not None


def test_no_grad_inputs_are_left_alone():
    x = Tensor(np.ones(3))
    w = Tensor(np.ones(3), requires_grad=True)
    (x * w).sum().backward()
    assert x.grad is None
    assert np.array_equal(w.grad, np.ones(3))


def test_composite_network_gradient():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 1, 6, 6))
    k = rng.standard_normal((3, 1, 3, 3)) * 0.5
    w = rng.standard_normal((48, 4)) * 0.3
    labels = np.array([1, 3])

    def net(a, b, c):
        h = T.relu(T.conv2d(a, b))
        return T.cross_entropy(h.reshape(2, -1) @ c, labels)

    ga, gb, gc = grad_of(net, x, k, w)
    for g, idx in ((ga, 0), (gb, 1), (gc, 2)):
        base = [x, k, w]

        def f(v, idx=idx, base=base):
            args = list(base)
            args[idx] = v
            return float(net(*[Tensor(a) for a in args]).data)

        assert relative_error(g, numerical_gradient(f, base[idx])) <= 1e-4
