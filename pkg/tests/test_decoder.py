import logging

import numpy as np
import pytest

import oracles
from conftest import check_grads
from fusiontransnet import tensor as T
from fusiontransnet.decoder import balanced_multimodal_loss, magnitude, mode_loss, predict_od
from fusiontransnet.errors import ConfigError, DataError, DimensionError


def test_predict_identity():
    u = np.hstack([np.eye(3), np.eye(3)])
    np.testing.assert_array_equal(predict_od(u, np.eye(3)).data, np.eye(3))


def test_predict_zero_destination(rng):
    u = np.hstack([rng.normal(size=(4, 2)), np.zeros((4, 2))])
    assert (predict_od(u, rng.normal(size=(4, 4))).data == 0).all()


def test_predict_matches_double_loop(rng):
    for _ in range(20):
        u, w = rng.normal(size=(4, 6)), rng.normal(size=(4, 4))
        np.testing.assert_allclose(predict_od(u, w).data, oracles.bilinear(u, w), rtol=0, atol=1e-12)


def test_predict_batched(rng):
    u, w = rng.normal(size=(3, 4, 6)), rng.normal(size=(4, 4))
    out = predict_od(u, w).data
    for b in range(3):
        np.testing.assert_allclose(out[b], oracles.bilinear(u[b], w), atol=1e-12)


def test_predict_errors(rng):
    with pytest.raises(ConfigError):
        predict_od(np.zeros((3, 5)), np.eye(3))
    with pytest.raises(DimensionError):
        predict_od(np.zeros((3, 4)), np.eye(2))


def test_mode_loss_values(rng):
    m = rng.normal(size=(3, 3))
    assert mode_loss(m, m).item() == 0.0
    assert mode_loss(np.zeros((2, 2)), np.ones((2, 2))).item() == 1.0
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    brute = sum((a[i, j] - b[i, j]) ** 2 for i in range(4) for j in range(4)) / 16
    assert abs(mode_loss(a, b).item() - brute) < 1e-12
    with pytest.raises(DimensionError):
        mode_loss(np.zeros((2, 2)), np.zeros((3, 3)))


def test_magnitude():
    assert magnitude(np.ones((3, 3))) == 1.0


def test_balanced_hand_example():
    truths = [np.full((2, 2), 2.0), np.full((2, 2), 0.5)]
    total = balanced_multimodal_loss([4.0, 1.0], truths, [1.0, 1.0]).item()
    assert abs(total - 4.0) < 1e-15


def test_balanced_single_mode(rng):
    truth = rng.uniform(0.1, 1, size=(3, 3))
    total = balanced_multimodal_loss([0.7], [truth], [1.0]).item()
    assert abs(total - 0.7 / truth.mean()) < 1e-14


def test_balanced_zero_target_policies(caplog):
    truths = [np.zeros((2, 2)), np.ones((2, 2))]
    with caplog.at_level(logging.WARNING):
        total = balanced_multimodal_loss([3.0, 2.0], truths, [1.0, 1.0], names=["taxi", "bus"]).item()
    assert total == 2.0
    assert "taxi" in caplog.text
    with pytest.raises(DataError):
        balanced_multimodal_loss([3.0, 2.0], truths, [1.0, 1.0], zero_target="error")


def test_balanced_rejects_bad_eta():
    with pytest.raises(ConfigError):
        balanced_multimodal_loss([1.0], [np.ones((2, 2))], [0.0])


def test_joint_scaling_relation(rng):
    pred, truth = rng.uniform(0, 1, size=(3, 3)), rng.uniform(0.1, 1, size=(3, 3))
    s = 3.7
    base_loss = mode_loss(pred, truth).item()
    scaled_loss = mode_loss(s * pred, s * truth).item()
    assert abs(scaled_loss - s * s * base_loss) < 1e-12
    assert abs(magnitude(s * truth) - s * magnitude(truth)) < 1e-12
    base = balanced_multimodal_loss([base_loss], [truth], [1.0]).item()
    scaled = balanced_multimodal_loss([scaled_loss], [s * truth], [1.0]).item()
    assert abs(scaled - s * base) < 1e-12


def test_balanced_loss_decoder_gradient(rng):
    w = [T.Tensor(rng.normal(size=(3, 3)), requires_grad=True) for _ in range(2)]
    u = [rng.normal(size=(2, 3, 4)) for _ in range(2)]
    truths = [rng.uniform(0.1, 1, size=(2, 3, 3)) for _ in range(2)]

    def build():
        losses = [mode_loss(predict_od(u[m], w[m]), truths[m]) for m in range(2)]
        return balanced_multimodal_loss(losses, truths, [1.0, 2.5])

    check_grads(build, w)
