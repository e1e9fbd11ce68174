import numpy as np
import pytest

from stadv.gradcheck import numerical_gradient, relative_error
from stadv.models import (
    MODEL_NAMES,
    Classifier,
    Conv,
    Dense,
    Dropout,
    GlobalAvgPool,
    Relu,
    ResidualBlock,
    build_model,
    predict,
)
from stadv.tensor import ShapeError, Tensor, softmax


class FixedLogits:
    """Stand-in classifier that returns canned logits."""

    def __init__(self, z):
        self.z = np.asarray(z, dtype=float)

    def forward(self, x, train=False, rng=None, params=None):
        return Tensor(np.tile(self.z, (len(x), 1)))


def small_net(seed=0):
    layers = [Conv(4, 3, 3), Relu(), Dropout(0.5), Dense(6), Relu(), Dense(3)]
    return Classifier("small", layers, (8, 8, 2), num_classes=3).init_weights(seed)


def test_model_a_matches_table():
    assert build_model("A").summary() == [
        "Conv(64,5,5) + Relu",
        "Conv(64,5,5) + Relu",
        "Dropout(0.25)",
        "FC(128) + Relu",
        "Dropout(0.5)",
        "FC(10) + Softmax",
    ]


def test_model_b_has_no_hidden_fc():
    rows = build_model("B").summary()
    assert rows == [
        "Conv(64,8,8) + Relu",
        "Dropout(0.2)",
        "Conv(128,6,6) + Relu",
        "Conv(128,5,5) + Relu",
        "Dropout(0.5)",
        "FC(10) + Softmax",
    ]
    assert [r for r in rows if r.startswith("FC")] == ["FC(10) + Softmax"]


def test_model_c_matches_table():
    assert build_model("C").summary() == [
        "Conv(128,3,3) + Relu",
        "Conv(64,3,3) + Relu",
        "Dropout(0.25)",
        "FC(128) + Relu",
        "Dropout(0.5)",
        "FC(10) + Softmax",
    ]


def test_parameter_counts():
    # hand counts for valid, stride-1 convolutions on 28x28x1
    a = (64 * 25 + 64) + (64 * 64 * 25 + 64) + (20 * 20 * 64 * 128 + 128) + (128 * 10 + 10)
    b = (64 * 64 + 64) + (128 * 64 * 36 + 128) + (128 * 128 * 25 + 128) + (12 * 12 * 128 * 10 + 10)
    c = (128 * 9 + 128) + (64 * 128 * 9 + 64) + (24 * 24 * 64 * 128 + 128) + (128 * 10 + 10)
    assert build_model("A").parameter_count() == a == 3_382_346
    assert build_model("B").parameter_count() == b
    assert build_model("C").parameter_count() == c
    assert build_model("resnet_small").parameter_count() <= 500_000


def test_unknown_name():
    with pytest.raises(ValueError, match="unknown model"):
        build_model("D")
    assert set(MODEL_NAMES) == {"A", "B", "C", "resnet_small"}


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_logit_shapes(name):
    m = build_model(name)
    x = np.random.default_rng(0).random((2,) + m.input_shape)
    assert m.logits(x).shape == (2, 10)


def test_geometry_validated_at_construction():
    with pytest.raises(ShapeError):
        Classifier("bad", [Conv(4, 9, 9), Dense(10)], (8, 8, 1))
    with pytest.raises(ShapeError):
        Classifier("bad", [Dense(7)], (8, 8, 1), num_classes=10)
    m = Classifier("odd", [Conv(4, 2, 2, stride=2), Dense(3)], (5, 5, 1), num_classes=3)
    assert m.manifest["1.w"] == (2 * 2 * 4, 3)


def test_input_geometry_checked():
    m = small_net()
    with pytest.raises(ShapeError):
        m.logits(np.zeros((1, 8, 8, 3)))


def test_eval_mode_deterministic():
    m = small_net(1)
    x = np.random.default_rng(2).random((1, 8, 8, 2))
    pair = np.concatenate([x, x])
    z = m.logits(pair)
    assert np.array_equal(z[0], z[1])
    assert np.array_equal(m.logits(x), m.logits(x))


def test_train_mode_uses_dropout():
    m = small_net(1)
    x = np.random.default_rng(2).random((4, 8, 8, 2))
    a = m.logits(x, mode="train", rng=np.random.default_rng(0))
    b = m.logits(x, mode="train", rng=np.random.default_rng(1))
    assert not np.array_equal(a, b)
    with pytest.raises(ValueError):
        m.logits(x, mode="train")


def test_inverted_dropout_statistics():
    rng = np.random.default_rng(0)
    layer = Dropout(0.25)
    x = Tensor(np.ones((200, 500)))
    y = layer.forward(x, {}, True, rng).data
    kept = y != 0
    assert abs(kept.mean() - 0.75) < 0.01
    assert np.allclose(y[kept], 1 / 0.75)
    assert layer.forward(x, {}, False, rng) is x


@pytest.mark.parametrize("seed", range(5))
def test_input_gradient(seed):
    m = small_net(seed)
    x = np.random.default_rng(seed).random((2, 8, 8, 2))
    xt = Tensor(x, requires_grad=True)
    m.forward(xt).sum().backward()
    num = numerical_gradient(lambda v: float(m.logits(v).sum()), x, h=1e-6)
    assert relative_error(xt.grad, num) <= 1e-4


def test_residual_input_gradient():
    layers = [ResidualBlock(3, 2), GlobalAvgPool(), Dense(4)]
    m = Classifier("res", layers, (6, 6, 2), num_classes=4).init_weights(3)
    x = np.random.default_rng(5).random((1, 6, 6, 2))
    xt = Tensor(x, requires_grad=True)
    m.forward(xt).sum().backward()
    num = numerical_gradient(lambda v: float(m.logits(v).sum()), x, h=1e-6)
    assert relative_error(xt.grad, num) <= 1e-4


def test_weight_gradient():
    m = small_net(4)
    x = np.random.default_rng(6).random((3, 8, 8, 2))
    params = {k: Tensor(v, requires_grad=True) for k, v in m.weights.items()}
    m.forward(x, params=params).sum().backward()
    key = "0.w"
    base = m.weights[key].copy()

    def f(w):
        m.weights[key] = w
        return float(m.logits(x).sum())

    num = numerical_gradient(f, base, h=1e-5)
    m.weights[key] = base
    assert relative_error(params[key].grad, num) <= 1e-4


def test_predict_examples():
    x = np.zeros((1, 1, 1))
    assert predict(FixedLogits([1, 9, 3]), x) == 1
    assert predict(FixedLogits([5, 5]), x) == 0
    assert list(predict(FixedLogits([2, 7, 7]), np.zeros((3, 1, 1, 1)))) == [1, 1, 1]


def test_predict_equals_argmax_softmax():
    m = small_net(7)
    x = np.random.default_rng(8).random((20, 8, 8, 2))
    p = softmax(m.logits(x), axis=1).data
    assert np.array_equal(predict(m, x), np.argmax(p, axis=1))


def test_copy_is_independent():
    m = small_net(0)
    c = m.copy()
    c.weights["0.w"][...] = 0
    assert not np.all(m.weights["0.w"] == 0)


def test_init_is_seeded():
    a, b = build_model("C", seed=3), build_model("C", seed=3)
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)
    c = build_model("C", seed=4)
    assert not np.array_equal(a.weights["0.w"], c.weights["0.w"])
