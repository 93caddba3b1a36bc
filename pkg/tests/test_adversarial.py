import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kanbeats import adversarial as adv
from kanbeats.errors import NumericError

from gradcheck import joint_check
from oracles import fd_grad, fd_noise, grad_mismatch

finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=finite), st.sampled_from([0.0, 0.3, 1.0]))
def test_grl_exact(x, lam):
    out = adv.grl_forward(x)
    assert out.tobytes() == x.tobytes()
    g = x[::-1].copy()
    back = adv.grl_backward(g, lam)
    npt.assert_array_equal(back, -lam * g)


def test_grl_schedules():
    ganin = adv.GrlConfig(lam=2.0, schedule="ganin", gamma=10.0)
    assert ganin.value(0.0) == 0.0
    assert abs(ganin.value(1.0) - 2.0 * (2 / (1 + math.exp(-10)) - 1)) < 1e-15
    assert abs(ganin.value(0.5) - 2.0 * (2 / (1 + math.exp(-5)) - 1)) < 1e-15
    values = [ganin.value(p) for p in np.linspace(0, 1, 11)]
    assert values == sorted(values)
    assert adv.GrlConfig(lam=0.3, schedule="constant").value(0.7) == 0.3
    with pytest.raises(ValueError):
        adv.GrlConfig(schedule="cosine")
    with pytest.raises(ValueError):
        adv.GrlConfig(lam=-1.0)


def test_sigmoid_stable():
    z = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    s = adv.sigmoid(z)
    assert np.all(np.isfinite(s))
    npt.assert_allclose(s[1:4], 1 / (1 + np.exp(-z[1:4])))
    assert s[0] == 0.0 and s[-1] == 1.0


def test_bce_values_and_clip():
    loss, grad = adv.bce(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert abs(loss - math.log(2)) < 1e-15
    npt.assert_allclose(grad, [-1.0, 1.0])
    loss, grad = adv.bce(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert abs(loss + math.log(1e-7)) < 1e-9
    assert np.all(np.isfinite(grad)) and not grad.any()


def test_bce_gradients_fd():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, 6)
    y = rng.integers(0, 2, 6).astype(float)
    _, g = adv.bce(p, y)
    numeric = fd_grad(lambda: adv.bce(p, y)[0], p)
    assert grad_mismatch(g, numeric)[0].size == 0
    z = rng.normal(size=6) * 3
    _, gz = adv.bce_from_logits(z, y)
    numeric = fd_grad(lambda: adv.bce_from_logits(z, y)[0], z)
    assert grad_mismatch(gz, numeric)[0].size == 0


def test_classifier_shapes_and_gradients():
    rng = np.random.default_rng(1)
    clf = adv.init_classifier(5, 32, rng_seed=2)
    assert clf.hidden.weight.shape == (32, 5) and clf.output.weight.shape == (1, 32)
    feat = rng.normal(size=(7, 5))
    cache = adv.classifier_forward(clf, feat)
    assert cache.prob.shape == (7,)
    assert np.all((cache.prob > 0) & (cache.prob < 1))
    w = rng.normal(size=7)
    g_feat, grads = adv.classifier_backward(clf, cache, w)
    objective = lambda: float(w @ adv.classifier_forward(clf, feat).logit)
    noise = fd_noise(np.sum(np.abs(w * cache.logit)))
    assert grad_mismatch(g_feat, fd_grad(objective, feat), noise=noise)[0].size == 0
    for name, arr in clf.parameters().items():
        assert grad_mismatch(grads[name], fd_grad(objective, arr), noise=noise)[0].size == 0


@pytest.mark.parametrize("seed", range(4))
def test_joint_loss_gradients(seed):
    checked, failed, worst, _ = joint_check(seed, sample=40)
    assert failed == 0, worst


def test_joint_loss_gradients_every_entry():
    assert joint_check(7, lam=1.0)[1] == 0


def test_joint_loss_composition():
    rng = np.random.default_rng(3)
    clf = adv.init_classifier(4, 8, rng_seed=0)
    feat = rng.normal(size=(4, 4))
    fc = rng.normal(size=(4, 3))
    tgt = rng.normal(size=(4, 3))
    labels = np.array([1, 0, 1, 0])
    res = adv.joint_loss(clf, feat, fc, tgt, labels, lam=0.3)
    # forecast term only sees primary rows
    assert abs(res.forecast_loss - np.mean(np.abs(fc[[0, 2]] - tgt[[0, 2]]))) < 1e-15
    assert not res.grad_forecast[[1, 3]].any()
    prob = adv.classifier_forward(clf, feat).prob
    assert abs(res.domain_loss - adv.bce(prob, labels)[0]) < 1e-15
    assert res.loss == res.forecast_loss + res.domain_loss
    # the reversal flips and scales the classifier's feature gradient
    _, g_logit = adv.bce_from_logits(adv.classifier_forward(clf, feat).logit, labels)
    g_feat, _ = adv.classifier_backward(clf, adv.classifier_forward(clf, feat), g_logit)
    npt.assert_array_equal(res.grad_feature, -0.3 * g_feat)
    both = adv.joint_loss(clf, feat, fc, tgt, labels, lam=0.3, supervised=np.ones(4, bool))
    assert abs(both.forecast_loss - np.mean(np.abs(fc - tgt))) < 1e-15


def test_joint_loss_errors():
    clf = adv.init_classifier(2, 4, rng_seed=0)
    feat = np.zeros((2, 2))
    with pytest.raises(ValueError):
        adv.joint_loss(clf, feat, np.zeros((2, 1)), np.zeros((2, 1)), [1, 2], 1.0)
    with pytest.raises(NumericError):
        adv.joint_loss(clf, feat, np.array([[np.nan], [0.0]]), np.zeros((2, 1)), [1, 0], 1.0)


def test_mae_loss_mask():
    f = np.array([[1.0, 2.0], [3.0, 5.0]])
    t = np.zeros((2, 2))
    loss, grad = adv.mae_loss(f, t, np.array([False, True]))
    assert loss == 4.0
    npt.assert_array_equal(grad, [[0, 0], [0.5, 0.5]])
    assert adv.mae_loss(f, t, np.array([False, False]))[0] == 0.0
