"""Cross-entropy + Dice objective and the Adam update."""

import numpy as np
import pytest

from src.levit_unet.errors import ConfigurationError, InputError, TrainingDivergedError
from src.levit_unet.gradcheck import grad_check
from src.levit_unet.losses import combined_loss, cross_entropy, one_hot, soft_dice_loss
from src.levit_unet.optim import Adam, AdamState, adam_step
from src.levit_unet.tensor import Tensor, parameter


def _logits(n=2, k=3, h=4, w=5, seed=0, requires_grad=True):
    return Tensor(np.random.default_rng(seed).normal(size=(n, k, h, w)).astype(np.float32), requires_grad=requires_grad)


def _labels(n=2, k=3, h=4, w=5, seed=1):
    return np.random.default_rng(seed).integers(0, k, size=(n, h, w))


def test_one_hot_layout():
    t = one_hot(np.array([[[0, 2]]]), 3)
    assert t.shape == (1, 3, 1, 2)
    np.testing.assert_array_equal(t[0, :, 0, 1], [0, 0, 1])


def test_cross_entropy_matches_numpy():
    logits, labels = _logits(requires_grad=False), _labels()
    x = logits.data.astype(np.float64)
    log_p = x - x.max(axis=1, keepdims=True)
    log_p -= np.log(np.exp(log_p).sum(axis=1, keepdims=True))
    expected = -np.take_along_axis(log_p, labels[:, None], axis=1).mean()
    assert cross_entropy(logits, labels).item() == pytest.approx(expected, rel=1e-5)


def test_perfect_prediction_has_near_zero_dice_loss():
    labels = _labels()
    logits = Tensor(one_hot(labels, 3) * 50.0)
    assert soft_dice_loss(logits, labels).item() == pytest.approx(0.0, abs=1e-4)
    assert cross_entropy(logits, labels).item() == pytest.approx(0.0, abs=1e-4)


def test_absent_class_counts_as_matched_when_not_predicted():
    labels = np.zeros((1, 4, 4), dtype=np.int64)
    logits = Tensor(one_hot(labels, 2) * 50.0)
    assert soft_dice_loss(logits, labels).item() == pytest.approx(0.0, abs=1e-4)


def test_combined_loss_weights_and_gradients():
    logits, labels = _logits(), _labels()
    ce = cross_entropy(logits, labels).item()
    dice = soft_dice_loss(logits, labels).item()
    assert combined_loss(logits, labels, 0.3, 0.7).item() == pytest.approx(0.3 * ce + 0.7 * dice, rel=1e-5)
    report = grad_check(lambda: combined_loss(logits, labels), [logits], tol=1e-4)
    assert report.passed, report.summary()


def test_loss_rejects_bad_targets():
    logits = _logits()
    with pytest.raises(InputError, match="lie in"):
        combined_loss(logits, np.full((2, 4, 5), 3))
    with pytest.raises(InputError, match="integers"):
        combined_loss(logits, np.zeros((2, 4, 5), dtype=np.float32))
    with pytest.raises(ConfigurationError, match="does not match"):
        combined_loss(logits, np.zeros((2, 4, 4), dtype=np.int64))


def test_adam_first_step_moves_by_lr():
    p = parameter(np.array([1.0, -2.0, 0.5]))
    state = AdamState(lr=0.1, weight_decay=0.0)
    adam_step({"p": p}, {"p": np.array([3.0, -0.5, 1e-3], dtype=np.float32)}, state)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 0.4], rtol=1e-4)
    assert state.step == 1


def test_adam_zero_gradient_zero_decay_leaves_parameter():
    p = parameter(np.array([1.0, 2.0]))
    adam_step({"p": p}, {"p": np.zeros(2, dtype=np.float32)}, AdamState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_decoupled_weight_decay():
    p = parameter(np.array([2.0]))
    adam_step({"p": p}, {"p": np.zeros(1, dtype=np.float32)}, AdamState(lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0], rtol=1e-6)


def test_adam_matches_reference_over_several_steps():
    rng = np.random.default_rng(0)
    p = parameter(rng.normal(size=4))
    ref = p.data.astype(np.float64)
    m = v = np.zeros(4)
    state = AdamState(lr=0.01, weight_decay=1e-4)
    for t in range(1, 6):
        g = rng.normal(size=4).astype(np.float32)
        adam_step({"p": p}, {"p": g}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8) - 0.01 * 1e-4 * ref
    np.testing.assert_allclose(p.data, ref, rtol=1e-5, atol=1e-6)


def test_adam_skips_parameters_without_gradient():
    a, b = parameter(np.ones(2)), parameter(np.ones(2))
    a.grad = np.ones(2, dtype=np.float32)
    opt = Adam([("a", a), ("b", b)], lr=0.1)
    opt.step()
    assert "b" not in opt.state.first_moment
    np.testing.assert_array_equal(b.data, [1.0, 1.0])
    assert not np.array_equal(a.data, [1.0, 1.0])
    opt.zero_grad()
    assert a.grad is None


def test_nan_gradient_aborts_without_touching_parameters():
    a, b = parameter(np.ones(2)), parameter(np.ones(2))
    state = AdamState(lr=0.1)
    with pytest.raises(TrainingDivergedError, match="'b'"):
        adam_step({"a": a, "b": b}, {"a": np.ones(2, dtype=np.float32), "b": np.array([np.nan, 0.0])}, state)
    np.testing.assert_array_equal(a.data, [1.0, 1.0])
    assert state.step == 0
