import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stadv.attacks import AttackOutcome
from stadv.defenses import DEFENSES, BlurDefended, evaluate_defense, mean_blur_restore
from stadv.gradcheck import numerical_gradient, relative_error
from stadv.metrics import flow_l2_metric, flow_tv_metric, mean_std, neighbour_sq_sum
from stadv.models import Classifier, Conv, Dense, Relu, predict
from stadv.tensor import Tensor


def brute_sq_sum(f):
    h, w, _ = f.shape
    acc = 0.0
    for u in range(h):
        for v in range(w):
            for a, b in ((u - 1, v), (u + 1, v), (u, v - 1), (u, v + 1)):
                if 0 <= a < h and 0 <= b < w:
                    acc += float(np.sum((f[u, v] - f[a, b]) ** 2))
    return acc


def window_mean_oracle(x):
    """Edge-replicated 3x3 mean by explicit loops on a 2-d array."""
    h, w = x.shape
    out = np.empty_like(x)
    for u in range(h):
        for v in range(w):
            vals = [x[min(max(u + a, 0), h - 1), min(max(v + b, 0), w - 1)] for a in (-1, 0, 1) for b in (-1, 0, 1)]
            out[u, v] = np.mean(vals)
    return out


# blur


def test_constant_image_unchanged():
    x = np.full((5, 6, 3), 0.37)
    assert np.allclose(mean_blur_restore(x), x, rtol=0, atol=1e-15)


def test_delta_image_centre_divided_by_nine():
    x = np.zeros((3, 3))
    x[1, 1] = 1.0
    out = mean_blur_restore(x)
    assert out[1, 1] == pytest.approx(1 / 9)


def test_blur_not_idempotent():
    x = np.zeros((5, 5))
    x[2, 2] = 1.0
    once = mean_blur_restore(x)
    assert not np.allclose(mean_blur_restore(once), once)


def test_blur_matches_loop_oracle():
    x = np.random.default_rng(0).random((6, 7))
    assert np.allclose(mean_blur_restore(x), window_mean_oracle(x), rtol=0, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(x=arrays(np.float64, (2, 5, 4, 3), elements=st.floats(-2, 2)))
def test_blur_commutes_with_channel_slicing(x):
    full = mean_blur_restore(x)
    for c in range(3):
        assert np.allclose(full[..., c], mean_blur_restore(x[..., c : c + 1])[..., 0], rtol=0, atol=1e-14)


def test_blur_shapes():
    for shape in [(4, 4), (4, 4, 2), (3, 4, 4, 2)]:
        assert mean_blur_restore(np.zeros(shape)).shape == shape


def small_model(seed=0):
    layers = [Conv(3, 3, 3), Relu(), Dense(4)]
    return Classifier("small", layers, (7, 7, 1), num_classes=4).init_weights(seed)


def test_blur_defended_composite():
    m = small_model(1)
    d = BlurDefended(m)
    x = np.random.default_rng(2).random((3, 7, 7, 1))
    assert np.allclose(d.logits(x), m.logits(mean_blur_restore(x)))
    assert np.array_equal(predict(d, x), predict(m, mean_blur_restore(x)))
    xt = Tensor(x, requires_grad=True)
    d.forward(xt).sum().backward()
    num = numerical_gradient(lambda v: float(d.logits(v).sum()), x, h=1e-6)
    assert relative_error(xt.grad, num) <= 1e-4


# defense evaluation


def _outcome(method, img, success, y, target=None, pred=-1):
    return AttackOutcome(method, img, success, y, target, prediction=pred)


def test_evaluate_none_uses_stored_flags():
    m = small_model(3)
    rng = np.random.default_rng(4)
    imgs = rng.random((6, 7, 7, 1))
    preds = predict(m, imgs)
    outs = [_outcome("fgsm", imgs[i], bool(i % 2), 0, pred=int(preds[i])) for i in range(6)]
    rep = evaluate_defense(m, "none", outs, [0] * 6, seed=5)
    assert rep.success_rates["fgsm"] == 0.5
    assert rep.recovered_accuracy["fgsm"] == np.mean(preds == 0)
    assert rep.sample_count == 6 and rep.seed == 5
    rec = rep.to_record()
    assert rec["defense"] == "none" and rec["counts"] == {"fgsm": 6}


def test_evaluate_blur_reclassifies():
    m = small_model(3)
    rng = np.random.default_rng(6)
    imgs = rng.random((8, 7, 7, 1))
    labels = [int(v) for v in rng.integers(0, 4, 8)]
    outs = [_outcome("stadv" if i < 4 else "cw", imgs[i], True, labels[i], target=(labels[i] + 1) % 4) for i in range(8)]
    rep = evaluate_defense(m, "blur", outs, labels)
    blurred = predict(m, mean_blur_restore(imgs))
    for name, sl in (("stadv", slice(0, 4)), ("cw", slice(4, 8))):
        y = np.array(labels[sl])
        t = (y + 1) % 4
        assert rep.recovered_accuracy[name] == np.mean(blurred[sl] == y)
        assert rep.success_rates[name] == np.mean(blurred[sl] == t)
        assert 0 <= rep.success_rates[name] <= 1


def test_evaluate_errors():
    m = small_model()
    with pytest.raises(ValueError):
        evaluate_defense(m, "blur", [_outcome("cw", np.zeros((7, 7, 1)), True, 0)], [0, 1])
    with pytest.raises(ValueError):
        evaluate_defense(m, "jpeg", [], [])
    assert set(DEFENSES) == {"none", "blur", "advtrain-fgsm", "advtrain-ens", "advtrain-pgd"}


# flow metrics


def test_metric_examples():
    f = np.zeros((1, 2, 2))
    f[0, 1] = (1.0, 0.0)
    assert flow_tv_metric(f) == 1.0
    assert flow_tv_metric(np.full((5, 4, 2), 2.5)) == 0.0
    assert flow_l2_metric(np.zeros((3, 3, 2))) == 0.0
    for n in (1, 4, 9):
        g = np.zeros((n, n, 2))
        g[..., 0] = 1.0
        assert flow_l2_metric(g) == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_tv_squared_times_n_matches_bruteforce(seed):
    f = np.random.default_rng(seed).normal(size=(4, 4, 2))
    assert flow_tv_metric(f) ** 2 * 16 == pytest.approx(brute_sq_sum(f), rel=1e-12)
    assert neighbour_sq_sum(f) == pytest.approx(brute_sq_sum(f), rel=1e-12)


def test_l2_permutation_invariant_tv_not():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(4, 4, 2))
    perm = rng.permutation(16)
    g = f.reshape(16, 2)[perm].reshape(4, 4, 2)
    assert flow_l2_metric(g) == pytest.approx(flow_l2_metric(f), rel=1e-12)
    smooth = np.zeros((1, 4, 2))
    smooth[0, :, 0] = [0, 1, 2, 3]
    jumbled = smooth[:, [0, 2, 1, 3]]
    assert flow_l2_metric(jumbled) == flow_l2_metric(smooth)
    assert flow_tv_metric(jumbled) != flow_tv_metric(smooth)


def test_metric_rejects_bad_shape():
    with pytest.raises(ValueError):
        flow_tv_metric(np.zeros((3, 3)))


def test_mean_std():
    assert mean_std([]) == (0.0, 0.0)
    assert mean_std([1.0, 3.0]) == (2.0, 1.0)
