import numpy as np
import pytest

from core.errors import ValidationError
from core.model import (LsmModel, MultiTaskModel, assign_clusters, augment, compose, decision_values, predict,
                        score)


def test_augment_appends_constant():
    np.testing.assert_array_equal(augment([2.0, 3.0]), [2.0, 3.0, 1.0])
    np.testing.assert_array_equal(augment([[1.0], [2.0]]), [[1.0, 1.0], [2.0, 1.0]])


def test_score_picks_best_subclassifier():
    m = LsmModel(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    assert score(m, augment([2.0, 3.0])) == (3.0, 1)


def test_score_ties_go_to_lowest_index():
    m = LsmModel.zeros(3, 2)
    assert score(m, augment([1.0, -1.0])) == (0.0, 0)


def test_predict_is_strict():
    m = LsmModel.zeros(2, 1)
    assert predict(m, augment([5.0])) == -1
    m = LsmModel(np.array([[0.0, 0.5]]))
    assert predict(m, augment([5.0])) == 1


def test_bias_lives_in_last_component():
    m = LsmModel(np.array([[0.0, 0.0, -2.0]]))
    np.testing.assert_allclose(decision_values(m, augment(np.ones((3, 2)))), [-2.0, -2.0, -2.0])


def test_dimension_mismatch_is_rejected():
    m = LsmModel.zeros(2, 3)
    with pytest.raises(ValidationError):
        m.scores(augment([1.0, 2.0]))


def test_model_validation():
    with pytest.raises(ValidationError):
        LsmModel(np.zeros((0, 3)))
    with pytest.raises(ValidationError):
        LsmModel(np.array([[np.inf, 0.0]]))
    with pytest.raises(ValidationError):
        MultiTaskModel(np.zeros((2, 3)), np.zeros((1, 3, 3)))


def test_scaling_scales_scores(rng):
    m = LsmModel(rng.normal(size=(3, 4)))
    X = augment(rng.normal(size=(5, 3)))
    np.testing.assert_allclose(m.scaled(2.5).scores(X), 2.5 * m.scores(X))


def test_assign_clusters_uses_argmax():
    m = LsmModel(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    np.testing.assert_array_equal(assign_clusters(m, augment(np.array([[2.0], [-3.0], [0.0]]))), [0, 1, 0])
    with pytest.raises(ValidationError):
        assign_clusters(m, np.zeros((0, 2)))


def test_compose_adds_bias(rng):
    mt = MultiTaskModel(rng.normal(size=(2, 3)), rng.normal(size=(4, 2, 3)))
    np.testing.assert_allclose(compose(mt, 2).weights, mt.shared + mt.bias[2])
    np.testing.assert_array_equal(mt.visual_world().weights, mt.shared)
    with pytest.raises(ValidationError):
        compose(mt, 4)


def test_multitask_shape_accessors():
    mt = MultiTaskModel.zeros(K=3, T=2, dim=5)
    assert (mt.K, mt.T, mt.dim) == (3, 2, 5)
    assert mt.max_bias_norm() == 0.0


def test_models_are_immutable():
    m = LsmModel.zeros(1, 1)
    with pytest.raises(ValueError):
        m.weights[0, 0] = 1.0
