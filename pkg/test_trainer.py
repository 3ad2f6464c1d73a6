"""
Tests for the doubly stochastic training loop
"""
import io
import json

import numpy as np
import pytest

from dsgd.analysis import convergence_curve
from dsgd.data_io import Dataset, synth_density_ratio, synth_grid, synth_regression, synth_target
from dsgd.errors import DivergenceError
from dsgd.feature_streams import STREAM_DATA, KernelSpec, derive_stream
from dsgd.losses import LossSpec
from dsgd.predictor import predict, predict_averaged
from dsgd.trainer import (
    MetricsStream,
    TrainConfig,
    TrainState,
    coefficient_weights,
    decay_scale,
    draw_batch,
    log_spaced_schedule,
    train,
    train_step,
    train_with_checkpoints,
)

LINEAR = KernelSpec("linear")
SQUARE = LossSpec("square")


def _single_point(x=1.0, y=1.0):
    return Dataset(np.array([[x]]), np.array([y]))


def _linear_regression(n=50, d=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, (n, d))
    y = X @ np.arange(1.0, d + 1.0) + 0.1 * rng.standard_normal(n)
    return Dataset(X, y)


def _run(state, data, steps):
    for block_index in range(state.t, state.t + steps):
        train_step(state, state.sample_batch(data), block_index)
    return state


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(theta=0.0)
    with pytest.raises(ValueError):
        TrainConfig(nu=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(iterations=4, eval_schedule=(2, 1))
    with pytest.raises(ValueError):
        TrainConfig(iterations=4, eval_schedule=(8,))
    assert TrainConfig(theta=2.0).step_size(4) == 0.5


def test_log_spaced_schedule():
    assert log_spaced_schedule(10) == (1, 2, 4, 8, 10)
    assert log_spaced_schedule(0) == ()


def test_zero_iterations_gives_zero_function():
    data = synth_regression(8, 0)
    model = train(data, TrainConfig(iterations=0, block_size=8), KernelSpec("gaussian"), SQUARE)
    assert model.iteration_count == 0
    np.testing.assert_array_equal(predict(model, data.X), np.zeros(8))


def test_first_block_on_constant_feature_is_theta():
    run_config = TrainConfig(theta=2.0, nu=0.5, batch_size=1, block_size=1, iterations=1)
    model = train(_single_point(), run_config, LINEAR, SQUARE)
    assert model.effective_coefficients()[0, 0, 0] == pytest.approx(2.0)


def test_hinge_step_with_satisfied_margin_adds_zero_block():
    run_config = TrainConfig(theta=2.0, nu=0.5, batch_size=1, block_size=1, iterations=2)
    state = TrainState(1, LINEAR, LossSpec("hinge"), run_config)
    _run(state, _single_point(), 1)
    assert state.scores(np.ones((1, 1)))[0, 0] == pytest.approx(2.0)
    _run(state, _single_point(), 1)
    assert state.coeffs[1, 0, 0] == 0.0


def test_unit_decay_zeroes_earlier_blocks():
    run_config = TrainConfig(theta=3.0, nu=1.0, batch_size=1, block_size=1, iterations=3)
    state = _run(TrainState(1, LINEAR, SQUARE, run_config), _single_point(y=0.5), 3)
    effective = state.effective_coefficients()[:, 0, 0]
    assert effective[0] == 0.0 and effective[1] == 0.0
    assert effective[2] != 0.0
    assert state.scale_resets == 1


def test_decay_scale_reset_and_fold():
    stored = np.ones(3)
    assert decay_scale(stored, 0.5, 0.0) == (1.0, "reset")
    assert np.all(stored == 0.0)
    stored = np.ones(3)
    scale, action = decay_scale(stored, 1e-6, 1e-7)
    assert (scale, action) == (1.0, "fold")
    np.testing.assert_allclose(stored, 1e-13)
    assert decay_scale(np.ones(2), 0.5, 0.5) == (0.25, "")


def test_decay_by_rounding_residue_resets():
    factor = 1.0 - (0.1 + 0.2) / 0.3
    assert factor != 0.0
    stored = np.ones(4)
    assert decay_scale(stored, 0.5, factor) == (1.0, "reset")
    assert np.all(stored == 0.0)


def test_novelty_threshold_moves():
    run_config = TrainConfig(theta=1.0, nu=0.5, batch_size=1, block_size=1, iterations=2)
    state = TrainState(1, LINEAR, LossSpec("novelty"), run_config)
    _run(state, _single_point(y=0.0), 1)
    assert state.tau == pytest.approx(0.5)
    assert state.coeffs[0, 0, 0] == 0.0
    _run(state, _single_point(y=0.0), 1)
    assert state.tau == pytest.approx(0.25)
    assert state.effective_coefficients()[1, 0, 0] == pytest.approx(0.5)


def test_training_is_deterministic():
    data = synth_regression(64, 2)
    run_config = TrainConfig(batch_size=8, block_size=16, iterations=20, base_seed=5, averaging=True)
    kernel = KernelSpec("gaussian", bandwidth=1.5)
    first = train(data, run_config, kernel, SQUARE)
    second = train(data, run_config, kernel, SQUARE)
    assert first.identical_to(second)
    assert not first.identical_to(train(data, TrainConfig(batch_size=8, block_size=16, iterations=20, base_seed=6),
                                        kernel, SQUARE))


def test_model_is_immutable():
    model = train(synth_regression(16, 0), TrainConfig(batch_size=4, block_size=4, iterations=3),
                  KernelSpec("gaussian"), SQUARE)
    with pytest.raises(ValueError):
        model.coeff_blocks[0, 0, 0] = 1.0
    assert model.coefficient_count == 3 * 4


def test_scale_folding_matches_closed_form_weights():
    theta, nu, steps = 1.5, 1.0, 200
    q = 0.5
    run_config = TrainConfig(theta=theta, nu=nu, batch_size=1, block_size=1, iterations=steps)
    state = _run(TrainState(1, LINEAR, LossSpec("quantile", quantile=q), run_config), _single_point(y=1e12), steps)
    expected = coefficient_weights(steps, theta, nu) * (-q)
    np.testing.assert_allclose(state.effective_coefficients()[:, 0, 0], expected, rtol=1e-12, atol=1e-300)


def test_coefficient_weights_closed_forms():
    np.testing.assert_allclose(coefficient_weights(10, 1.0, 1.0), -0.1)
    assert coefficient_weights(10, 2.0, 1.0)[0] == 0.0
    for product in (1.0, 2.0, 3.0):
        for t in (1, 5, 50):
            assert np.max(np.abs(coefficient_weights(t, product, 1.0))) <= product / t * (1 + 1e-12)
    with pytest.raises(ValueError):
        coefficient_weights(0, 1.0, 1.0)


def test_identity_features_match_linear_sgd():
    data = _linear_regression()
    run_config = TrainConfig(theta=1.0, nu=0.1, batch_size=4, block_size=3, iterations=300, base_seed=3)
    model = train(data, run_config, LINEAR, SQUARE)

    sampler = derive_stream(3, 0, STREAM_DATA)
    w = np.zeros(3)
    for t in range(1, 301):
        batch = draw_batch(sampler, data, 4, SQUARE)
        gamma = 1.0 / t
        grad = (batch.X @ w - batch.y) @ batch.X / 4
        w = (1.0 - gamma * 0.1) * w - gamma * grad

    learned = model.effective_coefficients()[:, 0, :].sum(axis=0)
    np.testing.assert_allclose(learned, w, rtol=0, atol=1e-10)
    np.testing.assert_allclose(predict(model, data.X), data.X @ w, rtol=0, atol=1e-10)


def test_zero_gradients_decay_by_product():
    # hinge with the margin met after step one: later gradients vanish
    run_config = TrainConfig(theta=2.0, nu=0.1, batch_size=1, block_size=1, iterations=6)
    state = _run(TrainState(1, LINEAR, LossSpec("hinge"), run_config), _single_point(y=1.0), 1)
    first = state.effective_coefficients()[0, 0, 0]
    _run(state, _single_point(y=1.0), 5)
    decay = np.prod([1.0 - 2.0 / t * 0.1 for t in range(2, 7)])
    assert np.count_nonzero(state.coeffs[1:]) == 0
    assert state.effective_coefficients()[0, 0, 0] == pytest.approx(first * decay, rel=1e-12)


def test_averaged_iterate_at_first_step_equals_last():
    data = synth_regression(16, 0)
    run_config = TrainConfig(batch_size=4, block_size=8, iterations=1, averaging=True)
    model = train(data, run_config, KernelSpec("gaussian"), SQUARE)
    np.testing.assert_allclose(predict_averaged(model, data.X), predict(model, data.X), rtol=1e-12, atol=1e-15)


def test_averaged_coefficients_are_running_mean():
    data = _linear_regression(n=20)
    snapshots = train_with_checkpoints(
        data, TrainConfig(batch_size=2, block_size=3, iterations=5, averaging=True, eval_schedule=(1, 2, 3, 4, 5)),
        LINEAR, SQUARE,
    ).snapshots
    functions = [snapshots[t].effective_coefficients()[:, 0, :].sum(axis=0) for t in range(1, 6)]
    averaged = snapshots[5].avg_coeff_blocks[:, 0, :].sum(axis=0)
    np.testing.assert_allclose(averaged, np.mean(functions, axis=0), rtol=1e-12)


def test_multiclass_training_has_one_row_per_class():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 2))
    data = Dataset(X, np.arange(30) % 3, "multiclass", n_classes=3)
    model = train(data, TrainConfig(batch_size=5, block_size=8, iterations=4), KernelSpec("gaussian"),
                  LossSpec("multiclass_logistic", n_classes=3))
    assert model.coeff_blocks.shape == (4, 3, 8)
    assert predict(model, X).shape == (30, 3)


def test_density_ratio_training_runs():
    data = synth_density_ratio(32, 0)
    result = train_with_checkpoints(data, TrainConfig(batch_size=8, block_size=16, iterations=10),
                                    KernelSpec("gaussian"), LossSpec("kl_density_ratio"))
    assert result.model.iteration_count == 10
    assert np.all(np.isfinite(predict(result.model, data.X)))


def test_large_theta_diverges():
    run_config = TrainConfig(theta=1e6, nu=1e-6, batch_size=1, block_size=1, iterations=500)
    with pytest.raises(DivergenceError) as info:
        train(_single_point(), run_config, LINEAR, SQUARE)
    assert info.value.iteration > 1


def test_metrics_stream_records_checkpoints():
    data = synth_regression(40, 0)
    sink = io.StringIO()
    result = train_with_checkpoints(
        data, TrainConfig(batch_size=4, block_size=8, iterations=8, eval_schedule=(0, 4, 8)),
        KernelSpec("gaussian"), SQUARE, holdout=synth_regression(10, 1), metrics_sink=sink,
    )
    records = [json.loads(line) for line in sink.getvalue().splitlines()]
    assert [r["iteration"] for r in records] == [0, 4, 8]
    assert records[0]["train_loss"] is None
    assert records[-1]["holdout_error"] is not None
    assert sorted(result.snapshots) == [0, 4, 8]


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        train(Dataset(np.zeros((0, 1)), np.zeros(0)), TrainConfig(), LINEAR, SQUARE)
    with pytest.raises(ValueError):
        train(_single_point(y=0.5), TrainConfig(block_size=1), LINEAR, LossSpec("hinge"))
    with pytest.raises(ValueError):
        train(_single_point(), TrainConfig(block_size=2), LINEAR, SQUARE)
    state = TrainState(1, LINEAR, SQUARE, TrainConfig(block_size=1))
    with pytest.raises(ValueError):
        train_step(state, state.sample_batch(_single_point()), 3)


def test_averaged_iterate_curve_is_smoother():
    data = synth_regression(512, 0)
    grid = synth_grid(9)
    run_config = TrainConfig(theta=1.0, batch_size=8, block_size=32, iterations=256,
                             eval_schedule=tuple(range(16, 257)), averaging=True)
    snapshots = train_with_checkpoints(data, run_config, KernelSpec("gaussian"), SQUARE).snapshots
    last = convergence_curve(snapshots, grid, synth_target)["error"].to_numpy()
    averaged = convergence_curve(snapshots, grid, synth_target, averaged=True)["error"].to_numpy()
    assert np.sum(np.abs(np.diff(averaged))) < np.sum(np.abs(np.diff(last)))


def test_density_ratio_metrics_keep_negative_losses():
    stream = MetricsStream(None)
    stream.emit(3, 0.1, -2.0)
    assert stream.records[0]["train_loss"] == -2.0
