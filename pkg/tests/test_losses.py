import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cartseg.diffcore import Tensor
from cartseg.losses import TverskyParams, soft_dice, tversky_index, tversky_loss

from .oracles import central_differences, gradient_mismatches


def T(pred, truth, **kw):
    return tversky_index(Tensor(np.asarray(pred, dtype=np.float64)), np.asarray(truth), TverskyParams(**kw)).item()


def test_perfect_prediction():
    g = (np.random.default_rng(0).random((4, 4, 4)) < 0.2).astype(float)
    assert abs(T(g, g) - 1) < 1e-6
    assert tversky_loss(Tensor(g[None, None]), g[None, None]).item() == pytest.approx(0, abs=1e-6)


def test_hand_case_one_tp_seven_fp():
    truth = np.zeros(8)
    truth[0] = 1
    # TP=1, FN=0, FP=7 -> 1 / (1 + 0.6 * 7) = 1 / 5.2
    assert abs(T(np.ones(8), truth) - 1 / 5.2) < 1e-6
    assert abs(T(np.ones(8), truth, epsilon=1e-12) - 1 / 5.2) < 1e-9


def test_all_wrong_prediction_loss_near_one():
    g = np.zeros((1, 1, 4, 4, 4))
    g[0, 0, 1, 1, 1] = 1
    assert tversky_loss(Tensor(1 - g), g).item() == pytest.approx(1, abs=1e-6)


def test_equal_weights_reduce_to_soft_dice():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p = rng.random((6, 6, 6))
        g = (rng.random((6, 6, 6)) < 0.3).astype(float)
        t = T(p, g, alpha=0.5, beta=0.5, epsilon=1e-300)
        assert abs(t - soft_dice(p, g)) <= 1e-12


def test_empty_truth_and_empty_prediction_is_one():
    assert T(np.zeros(10), np.zeros(10)) == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        T(np.zeros(4), np.zeros(5))


def test_invalid_params():
    with pytest.raises(ValueError):
        TverskyParams(alpha=0, beta=0)
    with pytest.raises(ValueError):
        TverskyParams(epsilon=0)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    p = rng.uniform(0.05, 0.95, size=(2, 1, 3, 3, 3))
    g = (rng.random(p.shape) < 0.3).astype(float)
    pt = Tensor(p, requires_grad=True)
    tversky_loss(pt, g).backward()
    (num,) = central_differences(lambda: tversky_loss(Tensor(p), g).item(), [p])
    bad, worst = gradient_mismatches(pt.grad, num)
    assert bad == 0, worst


def test_batch_loss_is_mean_of_per_sample_losses():
    rng = np.random.default_rng(3)
    p = rng.random((3, 1, 4, 4, 4))
    g = (rng.random(p.shape) < 0.2).astype(float)
    per = [1 - T(p[i], g[i]) for i in range(3)]
    assert tversky_loss(Tensor(p), g).item() == pytest.approx(np.mean(per), abs=1e-12)


probs = arrays(np.float64, 12, elements=st.floats(0, 1))
masks = arrays(np.int8, 12, elements=st.integers(0, 1))


@settings(max_examples=200, deadline=None)
@given(probs, masks)
def test_index_in_unit_interval(p, g):
    t = T(p, g)
    assert 0 <= t <= 1 + 1e-12


@settings(max_examples=200, deadline=None)
@given(probs, masks, st.integers(0, 11), st.floats(0, 1))
def test_monotone_in_each_probability(p, g, i, bump):
    raised = p.copy()
    raised[i] = min(1.0, p[i] + bump)
    before, after = T(p, g), T(raised, g)
    if g[i] == 1:
        assert after >= before - 1e-12
    else:
        assert after <= before + 1e-12


def _layout(tp, fn, fp, tn=3):
    pred = np.array([1.0] * tp + [0.0] * fn + [1.0] * fp + [0.0] * tn)
    truth = np.array([1] * (tp + fn) + [0] * (fp + tn))
    return pred, truth


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(0, 30), st.integers(0, 30))
def test_false_positives_cost_more_than_false_negatives(tp, fn, fp):
    # same error mass, one unit moved from FN to FP
    before = T(*_layout(tp, fn + 1, fp))
    after = T(*_layout(tp, fn, fp + 1))
    assert after < before
