"""
End-to-end tests of the command line entry point
"""
import json

import pandas as pd
import pytest

from dsgd.cli import EXIT_AUDIT_FAILED, EXIT_DATA, EXIT_OK, EXIT_USAGE, main, parse_bandwidth, parse_budget
from dsgd.errors import UsageError


def test_synth_is_reproducible(tmp_path):
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["synth", "--n", "16", "--seed", "1", "--out", str(first)]) == EXIT_OK
    assert main(["synth", "--n", "16", "--seed", "1", "--out", str(second)]) == EXIT_OK
    assert first.read_bytes() == second.read_bytes()
    assert len(pd.read_csv(first)) == 16


def test_missing_required_flag_is_usage_error():
    assert main(["train"]) == EXIT_USAGE
    assert main(["unknown-command"]) == EXIT_USAGE


def test_train_then_predict(tmp_path):
    data = tmp_path / "train.csv"
    model = tmp_path / "model.dsgd"
    scores = tmp_path / "scores.csv"
    metrics = tmp_path / "metrics.jsonl"
    assert main(["synth", "--n", "40", "--seed", "2", "--out", str(data)]) == EXIT_OK
    assert main([
        "train", "--data", str(data), "--format", "csv", "--model-out", str(model),
        "--iters", "16", "--batch-size", "8", "--block-size", "16", "--bandwidth", "median:1",
        "--holdout", "0.25", "--average", "--metrics", str(metrics),
    ]) == EXIT_OK
    assert main(["predict", "--model", str(model), "--data", str(data), "--format", "csv",
                 "--out", str(scores), "--averaged"]) == EXIT_OK

    frame = pd.read_csv(scores)
    assert list(frame.columns) == ["row", "score"]
    assert len(frame) == 40
    records = [json.loads(line) for line in metrics.read_text().splitlines()]
    assert records[-1]["iteration"] == 16


def test_predict_with_missing_model_is_data_error(tmp_path):
    data = tmp_path / "rows.csv"
    main(["synth", "--n", "4", "--out", str(data)])
    assert main(["predict", "--model", str(tmp_path / "none.dsgd"), "--data", str(data),
                 "--format", "csv", "--out", str(tmp_path / "out.csv")]) == EXIT_DATA


def test_train_with_bad_targets_is_data_error(tmp_path):
    data = tmp_path / "train.csv"
    main(["synth", "--n", "8", "--out", str(data)])
    assert main(["train", "--data", str(data), "--format", "csv", "--loss", "hinge",
                 "--model-out", str(tmp_path / "m.dsgd")]) == EXIT_DATA


def test_audit_exit_codes(tmp_path):
    out = tmp_path / "audit.jsonl"
    assert main(["audit", "--check", "coefficients", "--theta", "1", "--nu", "1", "--t-max", "500",
                 "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text().splitlines()[0])["passed"] is True
    assert main(["audit", "--check", "coefficients", "--theta", "0.5", "--nu", "1"]) == EXIT_USAGE
    assert main(["audit", "--check", "features", "--families", "gaussian", "--r-max", "4096",
                 "--out", str(out)]) == EXIT_OK
    assert EXIT_AUDIT_FAILED == 1


def test_feature_audit_covers_orders_and_degrees(tmp_path):
    out = tmp_path / "features.jsonl"
    assert main(["audit", "--check", "features", "--families", "arc_cosine,polynomial_sketch",
                 "--degrees", "1", "2", "--r-max", "4096", "--out", str(out)]) == EXIT_OK
    names = [json.loads(line)["name"] for line in out.read_text().splitlines()]
    assert names == [
        "unbiasedness:arc_cosine0", "unbiasedness:arc_cosine1",
        "unbiasedness:polynomial_sketch_p1", "unbiasedness:polynomial_sketch_p2",
    ]


def test_unwritable_output_is_data_error(tmp_path):
    assert main(["synth", "--n", "4", "--out", str(tmp_path)]) == EXIT_DATA


def test_bench_rejects_unknown_solver():
    assert main(["bench", "--solvers", "dsgd,sdca"]) == EXIT_USAGE


def test_bench_writes_table(tmp_path):
    out = tmp_path / "bench.csv"
    assert main([
        "bench", "--n", "200", "--solvers", "dsgd,norma,rpegasos", "--r", "16",
        "--block-size", "16", "--batch-size", "8", "--bandwidth", "1.0", "--out", str(out),
    ]) == EXIT_OK
    table = pd.read_csv(out)
    assert table["solver"].tolist() == ["dsgd", "norma", "rpegasos"]
    assert table["iterations"].tolist() == [20, 20, 20]
    assert table.loc[2, "coefficient_memory"] == 16


def test_gp_operator_run(tmp_path):
    out = tmp_path / "gp.csv"
    assert main([
        "gp", "--n", "64", "--grid", "4", "--iters", "16", "--batch-size", "8", "--block-size", "16",
        "--method", "operator", "--bandwidth", "1.0", "--out", str(out),
    ]) == EXIT_OK
    frame = pd.read_csv(out)
    assert len(frame) == 16
    assert {"closed_form_mean", "closed_form_var", "estimated_mean", "estimated_var"} <= set(frame.columns)


def test_flag_parsers():
    assert parse_bandwidth("2.5") == (2.5, None)
    assert parse_bandwidth("median:0.1") == (None, 0.1)
    assert parse_budget("one-pass") is None
    assert parse_budget("seconds:3") == 3.0
    with pytest.raises(UsageError):
        parse_bandwidth("median:x")
    with pytest.raises(UsageError):
        parse_budget("forever")
