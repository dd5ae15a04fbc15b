import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mhri import autograd as ag
from mhri.autograd import Tensor
from mhri.errors import ConfigError, ContractError
from mhri.model import ScenePrediction
from mhri.scene import ScenePriorParams, scene_loss, scene_prior, scene_prior_table


def prediction(speaker_logits, listener_logits):
    s = Tensor(np.asarray(speaker_logits, float), requires_grad=True)
    l = Tensor(np.asarray(listener_logits, float), requires_grad=True)
    return ScenePrediction(s, ag.softmax(s, -1), l, ag.sigmoid(l))


def test_first_utterance_prior_uniform():
    np.testing.assert_allclose(scene_prior(None).probs, [1 / 3] * 3)


def test_prior_after_h1():
    np.testing.assert_allclose(scene_prior(0).probs, [0.1, 0.45, 0.45])


@pytest.mark.parametrize("prev", [None, 0, 1, 2])
def test_alpha_third_is_uniform(prev):
    np.testing.assert_allclose(scene_prior(prev, ScenePriorParams(1 / 3)).probs, [1 / 3] * 3)


@given(st.floats(1e-6, 1 - 1e-6), st.sampled_from([None, 0, 1, 2]))
def test_prior_is_distribution(alpha, prev):
    p = scene_prior(prev, ScenePriorParams(alpha)).probs
    assert np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-12


def test_alpha_bounds():
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ConfigError):
            ScenePriorParams(bad)


def test_prior_table_matches_scalar():
    table = scene_prior_table(np.array([-1, 0, 2]))
    np.testing.assert_allclose(table[1], [0.1, 0.45, 0.45])
    np.testing.assert_allclose(table[2], [0.45, 0.45, 0.1])


def test_kl_hand_example():
    # two utterances, uniform predictions; the second has prior [0.1, 0.45, 0.45]
    pred = prediction(np.zeros((2, 3)), np.zeros((2, 3)))
    priors = scene_prior_table(np.array([-1, 0]))
    terms = scene_loss(pred, np.array([0, 1]), np.array([[0, 1, 0], [1, 0, 0]]), np.ones(2, bool), priors)
    second = (1 / 3) * (math.log(10 / 3) + 2 * math.log(20 / 27))
    assert second == pytest.approx(0.201255, abs=1e-6)
    # masked mean over the two positions; the first one matches its prior exactly
    assert terms.components()[1] == pytest.approx(second / 2, abs=1e-12)


def test_uniform_vs_uniform_prior_is_zero():
    pred = prediction(np.zeros((3, 3)), np.zeros((3, 3)))
    terms = scene_loss(pred, np.zeros(3, int), np.tile([0, 1, 0], (3, 1)), np.ones(3, bool),
                       scene_prior_table(np.full(3, -1)))
    assert terms.components()[1] == 0.0


def test_perfect_predictions_near_zero_ce():
    speaker = np.array([0, 1, 2])
    listeners = np.array([[0, 0, 1], [1, 0, 1], [1, 0, 0]])
    pred = prediction(np.eye(3)[speaker] * 40 - 20, listeners * 40.0 - 20)
    terms = scene_loss(pred, speaker, listeners, np.ones(3, bool), None, lambda_s=0.0, use_kl=False)
    assert float(terms.total.data) < 1e-6


def test_lambda_zero_is_bitwise_ce():
    rng = np.random.default_rng(0)
    pred = prediction(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
    args = (np.array([0, 1, 2, 0]), np.array([[0, 1, 1], [1, 0, 0], [0, 1, 0], [0, 0, 1]]), np.ones(4, bool))
    priors = scene_prior_table(np.array([-1, 0, 1, 2]))
    with_kl = scene_loss(pred, *args, priors, lambda_s=0.0)
    plain = scene_loss(pred, *args, None, use_kl=False)
    assert with_kl.total.data.tobytes() == plain.total.data.tobytes()


def test_own_listener_bit_ignored():
    listeners = np.array([[0, 1, 0]])
    a = scene_loss(prediction([[0.0, 0, 0]], [[5.0, 0, 0]]), np.array([0]), listeners, np.ones(1, bool), None,
                   use_kl=False)
    b = scene_loss(prediction([[0.0, 0, 0]], [[-5.0, 0, 0]]), np.array([0]), listeners, np.ones(1, bool), None,
                   use_kl=False)
    assert float(a.total.data) == float(b.total.data)


def test_masked_positions_get_no_gradient():
    rng = np.random.default_rng(1)
    pred = prediction(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
    mask = np.array([True, True, False])
    terms = scene_loss(pred, np.array([0, 1, 2]), np.array([[0, 0, 1], [1, 0, 0], [1, 0, 0]]), mask,
                       scene_prior_table(np.array([-1, 0, 1])))
    terms.total.backward()
    assert not pred.speaker_logits.grad[2].any()
    assert not pred.listener_logits.grad[2].any()


def test_one_hot_replacement_never_increases_ce():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(4, 3))
    speaker = np.array([2, 0, 1, 1])
    listeners = np.array([[1, 0, 0], [0, 0, 1], [1, 0, 1], [0, 0, 1]])
    base = scene_loss(prediction(logits, np.zeros((4, 3))), speaker, listeners, np.ones(4, bool), None, use_kl=False)
    for j in range(4):
        better = logits.copy()
        better[j] = np.eye(3)[speaker[j]] * 50
        new = scene_loss(prediction(better, np.zeros((4, 3))), speaker, listeners, np.ones(4, bool), None,
                         use_kl=False)
        assert float(new.total.data) <= float(base.total.data)


def test_shape_mismatch():
    pred = prediction(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ContractError):
        scene_loss(pred, np.zeros(3, int), np.zeros((2, 3)), np.ones(2, bool), None, use_kl=False)
    with pytest.raises(ContractError):
        scene_loss(pred, np.zeros(2, int), np.zeros((2, 3)), np.ones(2, bool), None)


def test_negative_lambda():
    pred = prediction(np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(ConfigError):
        scene_loss(pred, np.zeros(1, int), np.array([[0, 1, 0]]), np.ones(1, bool), None, lambda_s=-1.0)
