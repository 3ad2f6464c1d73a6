"""
Tests for prediction from regenerated blocks and the model file format
"""
import io

import numpy as np
import pandas as pd
import pytest

from dsgd.data_io import Dataset, synth_regression
from dsgd.errors import ModelFormatError
from dsgd.feature_streams import BlockCache, KernelSpec, sample_block
from dsgd.losses import LossSpec
from dsgd.predictor import (
    holdout_error,
    load,
    model_from_bytes,
    model_to_bytes,
    predict,
    predict_averaged,
    save,
    write_predictions_csv,
)
from dsgd.trainer import Model, TrainConfig, train

GAUSSIAN = KernelSpec("gaussian", bandwidth=1.5)
SQUARE = LossSpec("square")


@pytest.fixture(scope="module")
def trained():
    data = synth_regression(64, 0)
    run_config = TrainConfig(batch_size=8, block_size=16, iterations=12, base_seed=9, averaging=True)
    return data, train(data, run_config, GAUSSIAN, SQUARE)


def _model(coeffs, kernel=GAUSSIAN, scale=1.0, dim=1):
    coeffs = np.asarray(coeffs, dtype=np.float64)
    return Model(kernel=kernel, loss=SQUARE, base_seed=4, theta=1.0, nu=1e-6, block_size=coeffs.shape[2],
                 dim=dim, iteration_count=coeffs.shape[0], scale=scale, coeff_blocks=coeffs)


def test_single_block_matches_hand_computation():
    model = _model([[[0.3, -0.2]]], scale=2.0)
    block = sample_block(GAUSSIAN, 1, 2, 4, 0)
    x = 0.7
    phi = np.cos(block.frequencies[:, 0] * x / 1.5 + block.offsets)
    expected = 2.0 * (0.3 * phi[0] - 0.2 * phi[1])
    assert predict(model, np.array([[x]]))[0] == pytest.approx(expected, rel=1e-12)


def test_empty_model_predicts_zero():
    model = _model(np.zeros((0, 1, 4)))
    np.testing.assert_array_equal(predict(model, np.ones((3, 1))), np.zeros(3))


def test_prediction_is_linear_in_coefficients():
    rng = np.random.default_rng(0)
    c1, c2 = rng.normal(size=(3, 1, 4)), rng.normal(size=(3, 1, 4))
    X = rng.normal(size=(5, 1))
    combined = predict(_model(c1 + c2), X)
    np.testing.assert_allclose(combined, predict(_model(c1), X) + predict(_model(c2), X), rtol=1e-10, atol=1e-12)


def test_prediction_does_not_depend_on_cache(trained):
    data, model = trained
    first = predict(model, data.X)
    cache = BlockCache(model.kernel, model.dim, model.block_size, model.base_seed)
    second = predict(model, data.X, cache=cache)
    third = predict(model, data.X, cache=cache)
    assert first.tobytes() == second.tobytes() == third.tobytes()


def test_dimension_mismatch_is_rejected(trained):
    _, model = trained
    with pytest.raises(ValueError):
        predict(model, np.zeros((2, 3)))


def test_averaged_prediction_needs_averaging():
    with pytest.raises(ValueError):
        predict_averaged(_model(np.ones((1, 1, 2))), np.zeros((1, 1)))


def test_round_trip_is_bit_exact(trained):
    data, model = trained
    buffer = io.BytesIO()
    save(model, buffer)
    buffer.seek(0)
    loaded = load(buffer)
    assert loaded.identical_to(model)
    assert predict(loaded, data.X).tobytes() == predict(model, data.X).tobytes()
    assert predict_averaged(loaded, data.X).tobytes() == predict_averaged(model, data.X).tobytes()


def test_saved_file_predicts_on_new_data(tmp_path, trained):
    _, model = trained
    path = tmp_path / "models" / "krr.dsgd"
    save(model, path)
    fresh = synth_regression(10, 123)
    assert predict(load(path), fresh.X).shape == (10,)
    assert holdout_error(load(path), fresh) >= 0.0


def test_corrupted_byte_is_rejected(trained):
    _, model = trained
    raw = bytearray(model_to_bytes(model))
    raw[len(raw) // 2] ^= 0xFF
    with pytest.raises(ModelFormatError):
        model_from_bytes(bytes(raw))


def test_truncated_and_foreign_files_are_rejected(trained, tmp_path):
    _, model = trained
    raw = model_to_bytes(model)
    with pytest.raises(ModelFormatError):
        model_from_bytes(raw[:-10])
    with pytest.raises(ModelFormatError):
        model_from_bytes(raw[:10])
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"NOTMODEL" + raw[8:])
    with pytest.raises(ModelFormatError):
        load(tmp_path / "absent.dsgd")


def test_multiclass_and_novelty_fields_survive_round_trip():
    rng = np.random.default_rng(1)
    data = Dataset(rng.normal(size=(20, 2)), np.arange(20) % 3, "multiclass", n_classes=3)
    loss = LossSpec("multiclass_logistic", n_classes=3)
    model = train(data, TrainConfig(batch_size=4, block_size=8, iterations=3), GAUSSIAN, loss)
    assert model_from_bytes(model_to_bytes(model)).identical_to(model)

    novelty = train(data.with_task("novelty"), TrainConfig(batch_size=4, block_size=8, iterations=3),
                    GAUSSIAN, LossSpec("novelty"))
    loaded = model_from_bytes(model_to_bytes(novelty))
    assert loaded.tau == novelty.tau


def test_prediction_csv_layout():
    buffer = io.StringIO()
    write_predictions_csv(np.array([0.5, -1.25]), buffer)
    frame = pd.read_csv(io.StringIO(buffer.getvalue()))
    assert list(frame.columns) == ["row", "score"]
    assert frame["score"].tolist() == [0.5, -1.25]

    buffer = io.StringIO()
    write_predictions_csv(np.zeros((2, 3)), buffer, n_outputs=3)
    assert buffer.getvalue().splitlines()[0] == "row,score_0,score_1,score_2"

    buffer = io.StringIO()
    write_predictions_csv(np.zeros(0), buffer)
    assert buffer.getvalue().strip() == "row,score"
