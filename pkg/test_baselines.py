"""
Tests for the NORMA and r-Pegasos reference solvers
"""
import numpy as np
import pytest

from dsgd.baselines import (
    fixed_features,
    norma_train,
    norma_train_with_checkpoints,
    rpegasos_train,
)
from dsgd.data_io import Dataset, synth_classification, synth_regression
from dsgd.feature_streams import BlockCache, KernelSpec, featurize_stack
from dsgd.losses import LossSpec
from dsgd.predictor import predict
from dsgd.trainer import TrainConfig, train

LINEAR = KernelSpec("linear")
SQUARE = LossSpec("square")


def _linear_regression(n=40, d=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, (n, d))
    return Dataset(X, X @ np.array([1.0, -1.0, 0.5]) + 0.1 * rng.standard_normal(n))


def test_identity_features_give_identical_trajectories():
    data = _linear_regression()
    run_config = TrainConfig(theta=1.0, nu=0.1, batch_size=2, block_size=3, iterations=300, base_seed=1)
    dsgd_model = train(data, run_config, LINEAR, SQUARE)
    norma_model = norma_train(data, run_config, LINEAR, SQUARE)
    pegasos_model = rpegasos_train(data, 3, run_config, LINEAR, SQUARE)

    reference = predict(dsgd_model, data.X)
    np.testing.assert_allclose(norma_model.predict(data.X), reference, rtol=0, atol=1e-10)
    np.testing.assert_allclose(pegasos_model.predict(data.X), reference, rtol=0, atol=1e-10)


def test_memory_counts():
    data = synth_regression(64, 0)
    run_config = TrainConfig(batch_size=4, block_size=8, iterations=10)
    kernel = KernelSpec("gaussian")
    assert norma_train(data, run_config, kernel).coefficient_count == 10 * 4 * (2 + 1)
    assert train(data, run_config, kernel, SQUARE).coefficient_count == 10 * 8
    assert rpegasos_train(data, 16, run_config, kernel, SQUARE).coefficient_count == 16


def test_zero_iterations_predict_zero():
    data = synth_regression(8, 0)
    run_config = TrainConfig(iterations=0, block_size=4)
    np.testing.assert_array_equal(norma_train(data, run_config, KernelSpec("gaussian")).predict(data.X), np.zeros(8))
    model = rpegasos_train(data, 8, run_config, KernelSpec("gaussian"), SQUARE)
    np.testing.assert_array_equal(model.predict(data.X), np.zeros(8))


def test_norma_storage_grows_and_snapshots():
    data = synth_regression(32, 1)
    run_config = TrainConfig(batch_size=3, iterations=9, eval_schedule=(1, 5, 9))
    result = norma_train_with_checkpoints(data, run_config, KernelSpec("gaussian"))
    assert sorted(result.snapshots) == [1, 5, 9]
    assert result.snapshots[5].points.shape == (15, 2)
    assert result.model.points.shape == (27, 2)
    assert len(result.metrics) == 3


def test_unsupervised_losses_are_rejected():
    data = synth_regression(8, 0)
    with pytest.raises(ValueError):
        norma_train(data, TrainConfig(), KernelSpec("gaussian"), LossSpec("novelty"))
    with pytest.raises(ValueError):
        rpegasos_train(data, 8, TrainConfig(), KernelSpec("gaussian"), LossSpec("kl_density_ratio"))


def test_fixed_features_reuse_trainer_blocks():
    kernel = KernelSpec("gaussian")
    X = np.random.default_rng(0).normal(size=(5, 2))
    stacked = fixed_features(kernel, X, 32, 16, 7)
    cache = BlockCache(kernel, 2, 16, 7)
    expected = featurize_stack(cache.blocks(range(2)), kernel, X) * np.sqrt(0.5)
    np.testing.assert_allclose(stacked, expected, rtol=1e-12)
    assert fixed_features(kernel, X, 10, 16, 7).shape == (5, 10)
    with pytest.raises(ValueError):
        fixed_features(kernel, X, 0, 16, 7)


def test_pegasos_hinge_stays_in_ball():
    data = synth_classification(200, 0)
    nu = 0.5
    run_config = TrainConfig(theta=2.0, nu=nu, batch_size=8, block_size=32, iterations=30)
    model = rpegasos_train(data, 64, run_config, KernelSpec("gaussian", bandwidth=2.0))
    assert np.linalg.norm(model.weights) <= 1.0 / np.sqrt(nu) + 1e-12
    assert model.predict(data.X).shape == (200,)
