"""
Doubly Stochastic Kernel Machines - Command Line
================================================

    python -m dsgd train   --data train.svm --kernel gaussian --bandwidth median:0.1 --model-out m.dsgd
    python -m dsgd predict --model m.dsgd --data test.svm --out scores.csv
    python -m dsgd gp      --n 2048 --sigma2 0.1 --out gp.csv
    python -m dsgd bench   --solvers dsgd,norma,rpegasos --budget one-pass
    python -m dsgd synth   --n 16 --seed 1 --out synth.csv
    python -m dsgd audit   --check coefficients --theta 1 --nu 1

Exit codes: 0 success, 1 failed audit, 2 usage, 3 data or I/O, 4 divergence.
"""

import argparse
import contextlib
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from dsgd import config
from dsgd.analysis import (
    all_loss_audits,
    audit_r_values,
    coefficient_bound_audit,
    scale_folding_audit,
    unbiasedness_audit,
)
from dsgd.baselines import norma_train_with_checkpoints, rpegasos_train_with_checkpoints
from dsgd.data_io import (
    Dataset,
    load_dataset,
    split,
    synth_classification,
    synth_density_ratio,
    synth_grid,
    synth_regression,
    task_for_loss,
    write_csv,
    write_libsvm,
)
from dsgd.errors import DataError, DivergenceError, UsageError
from dsgd.feature_streams import FAMILIES, SHIFT_INVARIANT, KernelSpec, bandwidth_from_median
from dsgd.gp_posterior import (
    NU_RULES,
    closed_form_posterior,
    ds_posterior_mean,
    ds_variance_testpoints,
    operator_variance,
    run_variance_operator,
    testpoint_variance,
)
from dsgd.losses import LOSS_KINDS, LossSpec, check_targets, prediction_error
from dsgd.predictor import holdout_error, load, predict, predict_averaged, save, write_predictions_csv
from dsgd.trainer import TrainConfig, log_spaced_schedule, train_with_checkpoints

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_AUDIT_FAILED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

SOLVERS = ("dsgd", "norma", "rpegasos")
AUDIT_CHECKS = ("coefficients", "scale", "features", "losses", "all")


def status(message: str):
    print(message, file=sys.stderr)


# ============================================================================
# FLAG HELPERS
# ============================================================================

def parse_bandwidth(raw: str) -> Tuple[Optional[float], Optional[float]]:
    """'<value>' -> (value, None); 'median:<mult>' -> (None, mult)."""
    if raw.startswith("median:"):
        try:
            multiplier = float(raw.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad median multiplier in --bandwidth {raw!r}") from None
        if not multiplier > 0:
            raise UsageError("median multiplier must be > 0")
        return None, multiplier
    try:
        value = float(raw)
    except ValueError:
        raise UsageError(f"--bandwidth must be a number or median:<mult>, got {raw!r}") from None
    if not value > 0:
        raise UsageError("--bandwidth must be > 0")
    return value, None


def parse_budget(raw: str) -> Optional[float]:
    """'one-pass' -> None; 'seconds:<s>' -> s."""
    if raw == "one-pass":
        return None
    if raw.startswith("seconds:"):
        try:
            seconds = float(raw.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad --budget {raw!r}") from None
        if not seconds > 0:
            raise UsageError("--budget seconds must be > 0")
        return seconds
    raise UsageError(f"--budget must be one-pass or seconds:<s>, got {raw!r}")


def build_kernel(args, data: Dataset) -> KernelSpec:
    bandwidth, multiplier = parse_bandwidth(args.bandwidth)
    if args.kernel in SHIFT_INVARIANT and multiplier is not None:
        bandwidth = bandwidth_from_median(data.X, multiplier, args.seed, config.MEDIAN_PAIR_BUDGET)
        logger.info("Median heuristic bandwidth: %.6g (x%g)", bandwidth, multiplier)
    return KernelSpec(
        family=args.kernel,
        bandwidth=bandwidth if bandwidth is not None else 1.0,
        order=args.order,
        degree=args.degree,
        bias=args.bias,
        sketch_dim=args.sketch_dim,
    )


def build_loss(args) -> LossSpec:
    return LossSpec(args.loss, n_classes=args.classes, epsilon=args.epsilon, quantile=args.quantile)


def load_for_loss(path: str, fmt: str, loss: LossSpec) -> Dataset:
    task, n_classes = task_for_loss(loss)
    data = load_dataset(path, fmt, task=task, n_classes=n_classes)
    if loss.kind not in ("novelty",):
        try:
            check_targets(loss, data.y)
        except ValueError as e:
            raise DataError(str(e)) from None
    return data


@contextlib.contextmanager
def open_text_sink(path: Optional[str]):
    if path is None:
        yield None
    elif path == "-":
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            yield f


def _synthetic_for_loss(loss: LossSpec, n: int, seed: int) -> Dataset:
    if loss.kind in ("hinge", "squared_hinge", "logistic"):
        return synth_classification(n, seed)
    if loss.kind == "kl_density_ratio":
        return synth_density_ratio(n, seed)
    if loss.kind == "multiclass_logistic":
        raise UsageError("synthetic data has no multiclass variant; pass --data")
    return synth_regression(n, seed)


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_train(args) -> int:
    loss = build_loss(args)
    data = load_for_loss(args.data, args.format, loss)
    holdout = None
    if args.holdout:
        data, holdout = split(data, args.holdout, args.seed)
    kernel = build_kernel(args, data)
    block_size = data.d if kernel.family == "linear" else args.block_size

    train_config = TrainConfig(
        theta=args.theta,
        nu=args.nu,
        batch_size=args.batch_size,
        block_size=block_size,
        iterations=args.iters,
        base_seed=args.seed,
        eval_schedule=log_spaced_schedule(args.iters) if (args.metrics or holdout is not None) else (),
        averaging=args.average,
    )
    with open_text_sink(args.metrics) as sink:
        result = train_with_checkpoints(
            data, train_config, kernel, loss,
            holdout=holdout, metrics_sink=sink, record_snapshots=False, verbose=args.verbose,
        )
    save(result.model, args.model_out)
    status(f"✅ Trained {result.model.iteration_count} iterations in {result.elapsed:.2f}s -> {args.model_out}")
    if holdout is not None:
        err = holdout_error(result.model, holdout, averaged=args.average)
        status(f"   holdout error: {err:.6g} (n={holdout.n})")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load(args.model)
    n_features = model.dim if args.format == "libsvm" else None
    data = load_dataset(args.data, args.format, task="regression", n_features=n_features)
    if data.n > 0 and data.d != model.dim:
        raise DataError(f"data dimension {data.d} does not match model dimension {model.dim}")
    X = data.X if data.n > 0 else np.zeros((0, model.dim))
    scores = predict_averaged(model, X) if args.averaged else predict(model, X)
    with open_text_sink(args.out) as sink:
        write_predictions_csv(scores, sink, model.n_outputs)
    status(f"✅ Wrote {len(X)} predictions to {args.out}")
    return EXIT_OK


def cmd_gp(args) -> int:
    loss = LossSpec("square")
    if args.data:
        data = load_for_loss(args.data, args.format, loss)
    else:
        data = synth_regression(args.n, args.seed)
    kernel = build_kernel(args, data)
    Xstar = synth_grid(args.grid) if data.d == 2 else data.X[: args.grid ** 2]
    train_config = TrainConfig(
        theta=args.theta,
        nu=config.DEFAULT_NU,
        batch_size=args.batch_size,
        block_size=args.block_size,
        iterations=args.iters,
        base_seed=args.seed,
    )

    exact_mean, exact_var = closed_form_posterior(data.X, data.y, Xstar, kernel, args.sigma2)
    mean_model = ds_posterior_mean(data, train_config, kernel, args.sigma2, args.nu_rule, verbose=args.verbose)
    est_mean = predict(mean_model, Xstar)

    if args.method == "operator":
        op_config = replace(train_config, iterations=min(args.iters, config.MAX_OPERATOR_ITERATIONS))
        state, _ = run_variance_operator(data, op_config, kernel, args.sigma2, verbose=args.verbose)
        estimate = operator_variance(state, Xstar)
    else:
        models = ds_variance_testpoints(data, Xstar, train_config, kernel, args.sigma2, args.nu_rule,
                                        verbose=args.verbose)
        estimate = testpoint_variance(models, Xstar, kernel)

    frame = pd.DataFrame(Xstar, columns=[f"x{j + 1}" for j in range(Xstar.shape[1])])
    frame["closed_form_mean"] = exact_mean
    frame["closed_form_var"] = exact_var
    frame["estimated_mean"] = est_mean
    frame["estimated_var"] = estimate.variance
    with open_text_sink(args.out) as sink:
        frame.to_csv(sink if sink is not None else sys.stdout, index=False, float_format="%.17g")
    if estimate.clamped:
        status(f"⚠️ {estimate.clamped} variance estimates clamped")
    status(f"✅ GP posterior on {len(Xstar)} test points "
           f"(mean RMSE {np.sqrt(np.mean((est_mean - exact_mean) ** 2)):.4g})")
    return EXIT_OK


def cmd_bench(args) -> int:
    solvers = [s.strip() for s in args.solvers.split(",") if s.strip()]
    unknown = [s for s in solvers if s not in SOLVERS]
    if unknown or not solvers:
        raise UsageError(f"unknown solver(s) {unknown}; choose from {', '.join(SOLVERS)}")
    budget = parse_budget(args.budget)

    loss = build_loss(args)
    data = load_for_loss(args.data, args.format, loss) if args.data else _synthetic_for_loss(loss, args.n, args.seed)
    train_data, holdout = split(data, args.holdout, args.seed)
    kernel = build_kernel(args, train_data)
    block_size = train_data.d if kernel.family == "linear" else args.block_size

    iterations = math.ceil(train_data.n / args.batch_size) if budget is None else args.iters
    train_config = TrainConfig(
        theta=args.theta,
        nu=args.nu,
        batch_size=args.batch_size,
        block_size=block_size,
        iterations=iterations,
        base_seed=args.seed,
        eval_schedule=(iterations,) if iterations > 0 else (),
        budget_seconds=budget,
    )

    rows = []
    with open_text_sink(args.metrics) as sink:
        for solver in solvers:
            if solver == "dsgd":
                result = train_with_checkpoints(train_data, train_config, kernel, loss, metrics_sink=sink,
                                                record_snapshots=False, verbose=args.verbose)
                model, elapsed = result.model, result.elapsed
                err = holdout_error(model, holdout)
            elif solver == "norma":
                result = norma_train_with_checkpoints(train_data, train_config, kernel, loss, metrics_sink=sink,
                                                      record_snapshots=False, verbose=args.verbose)
                model, elapsed = result.model, result.elapsed
                err = _baseline_error(model, holdout)
            else:
                result = rpegasos_train_with_checkpoints(train_data, args.r, train_config, kernel, loss,
                                                         metrics_sink=sink, record_snapshots=False,
                                                         verbose=args.verbose)
                model, elapsed = result.model, result.elapsed
                err = _baseline_error(model, holdout)
            rows.append({
                "solver": solver,
                "iterations": model.iteration_count,
                "wall_time": elapsed,
                "coefficient_memory": model.coefficient_count,
                "holdout_error": err,
            })
            status(f"✅ {solver}: {model.iteration_count} iterations, {elapsed:.2f}s, error {err:.4g}")

    table = pd.DataFrame(rows, columns=["solver", "iterations", "wall_time", "coefficient_memory", "holdout_error"])
    with open_text_sink(args.out) as out:
        table.to_csv(out if out is not None else sys.stdout, index=False)
    return EXIT_OK


def _baseline_error(model, holdout: Dataset) -> float:
    return prediction_error(model.loss, model.predict(holdout.X), holdout.y)


def cmd_synth(args) -> int:
    if args.kind == "regression":
        data = synth_regression(args.n, args.seed, noiseless=args.noiseless)
    elif args.kind == "classification":
        data = synth_classification(args.n, args.seed)
    else:
        data = synth_density_ratio(args.n, args.seed)
    with open_text_sink(args.out) as sink:
        target = sink if sink is not None else sys.stdout
        if args.format == "csv":
            write_csv(data, target)
        else:
            write_libsvm(data, target)
    status(f"✅ Generated {data.n} {args.kind} rows")
    return EXIT_OK


def _audit_specs(args) -> List[KernelSpec]:
    """Every kernel the features check covers; arc_cosine runs both orders."""
    specs = []
    for family in (f.strip() for f in args.families.split(",")):
        if family == "arc_cosine":
            specs.extend(KernelSpec(family, order=n) for n in (0, 1))
        elif family == "polynomial_sketch":
            specs.extend(KernelSpec(family, sketch_dim=args.sketch_dim, degree=p) for p in args.degrees)
        else:
            specs.append(KernelSpec(family))
    return specs


def cmd_audit(args) -> int:
    checks = AUDIT_CHECKS[:-1] if args.check == "all" else (args.check,)
    results = []
    for check in checks:
        if check == "coefficients":
            results.append(coefficient_bound_audit(args.theta, args.nu, args.t_max))
        elif check == "scale":
            results.append(scale_folding_audit(args.theta, args.nu, min(args.t_max, 200)))
        elif check == "features":
            for spec in _audit_specs(args):
                r_values = audit_r_values(spec, r_max=args.r_max)
                results.append(unbiasedness_audit(spec, r_values, seed=args.seed))
        elif check == "losses":
            results.extend(all_loss_audits(seed=args.seed))

    with open_text_sink(args.out) as sink:
        target = sink if sink is not None else sys.stdout
        for result in results:
            target.write(result.to_json() + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        status(f"❌ Failed audits: {', '.join(failed)}")
        return EXIT_AUDIT_FAILED
    status(f"✅ {len(results)} audits passed")
    return EXIT_OK


# ============================================================================
# PARSER
# ============================================================================

def _add_kernel_flags(p: argparse.ArgumentParser):
    p.add_argument("--kernel", choices=FAMILIES, default="gaussian")
    p.add_argument("--bandwidth", default=f"median:{config.DEFAULT_MEDIAN_MULTIPLIER}",
                   help="kernel bandwidth value, or median:<mult> for mult x median pairwise distance")
    p.add_argument("--order", type=int, default=0, help="arc-cosine order (0 or 1)")
    p.add_argument("--degree", type=int, default=2, help="polynomial sketch degree")
    p.add_argument("--bias", type=float, default=0.0, help="polynomial sketch bias c")
    p.add_argument("--sketch-dim", type=int, default=64)


def _add_training_flags(p: argparse.ArgumentParser):
    p.add_argument("--loss", choices=LOSS_KINDS, default="square")
    p.add_argument("--classes", type=int, default=2, help="class count for multiclass_logistic")
    p.add_argument("--epsilon", type=float, default=0.0, help="eps-insensitive width")
    p.add_argument("--quantile", type=float, default=0.5, help="quantile level")
    p.add_argument("--theta", type=float, default=config.DEFAULT_THETA)
    p.add_argument("--nu", type=float, default=config.DEFAULT_NU)
    p.add_argument("--batch-size", type=int, default=config.DEFAULT_BATCH_SIZE)
    p.add_argument("--block-size", type=int, default=config.DEFAULT_BLOCK_SIZE)
    p.add_argument("--iters", type=int, default=config.DEFAULT_ITERATIONS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsgd", description="Doubly stochastic kernel machines")
    parser.add_argument("--threads", type=int, default=None, help=f"thread cap (default {config.THREADS})")
    parser.add_argument("--log-level", default=None)
    parser.add_argument("--verbose", action="store_true", help="show progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=("libsvm", "csv"), default="libsvm")
    _add_kernel_flags(p)
    _add_training_flags(p)
    p.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p.add_argument("--model-out", required=True)
    p.add_argument("--holdout", type=float, default=None, help="holdout fraction in (0, 1)")
    p.add_argument("--average", action="store_true", help="keep the running-average iterate")
    p.add_argument("--metrics", default=None, help="JSON-lines metrics file ('-' for stdout)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score rows with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=("libsvm", "csv"), default="libsvm")
    p.add_argument("--out", required=True)
    p.add_argument("--averaged", action="store_true", help="use the running-average iterate")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gp", help="GP posterior: closed form vs doubly stochastic estimates")
    p.add_argument("--data", default=None)
    p.add_argument("--format", choices=("libsvm", "csv"), default="csv")
    p.add_argument("--n", type=int, default=2 ** 11, help="synthetic size when --data is absent")
    p.add_argument("--sigma2", type=float, default=0.1)
    p.add_argument("--grid", type=int, default=32, help="test grid points per axis")
    p.add_argument("--method", choices=("testpoint", "operator"), default="testpoint")
    p.add_argument("--nu-rule", choices=NU_RULES, default=NU_RULES[0])
    _add_kernel_flags(p)
    p.add_argument("--theta", type=float, default=config.DEFAULT_THETA)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--block-size", type=int, default=512)
    p.add_argument("--iters", type=int, default=config.DEFAULT_ITERATIONS)
    p.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gp)

    p = sub.add_parser("bench", help="compare solvers under a stopping criterion")
    p.add_argument("--data", default=None)
    p.add_argument("--format", choices=("libsvm", "csv"), default="libsvm")
    p.add_argument("--n", type=int, default=2 ** 12, help="synthetic size when --data is absent")
    p.add_argument("--solvers", default=",".join(SOLVERS))
    p.add_argument("--budget", default="one-pass", help="one-pass or seconds:<s>")
    p.add_argument("--r", type=int, default=2 ** 8, help="r-Pegasos feature count")
    p.add_argument("--holdout", type=float, default=0.2)
    _add_kernel_flags(p)
    _add_training_flags(p)
    p.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p.add_argument("--metrics", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate synthetic data")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p.add_argument("--kind", choices=("regression", "classification", "density_ratio"), default="regression")
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--format", choices=("libsvm", "csv"), default="csv")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("audit", help="run implementation audits")
    p.add_argument("--check", choices=AUDIT_CHECKS, default="all")
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--nu", type=float, default=1.0)
    p.add_argument("--t-max", type=int, default=10 ** 4)
    p.add_argument("--families", default="gaussian,laplacian,cauchy,hellinger,arc_cosine,polynomial_sketch")
    p.add_argument("--sketch-dim", type=int, default=64)
    p.add_argument("--degrees", type=int, nargs="+", default=[1, 2, 3], help="polynomial sketch degrees to audit")
    p.add_argument("--r-max", type=int, default=config.AUDIT_MAX_FEATURES, help="largest feature count on the audit grid")
    p.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_audit)

    return parser


# ============================================================================
# ENTRY POINT
# ============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    config.setup_logging(args.log_level)
    for issue in config.validate_config():
        logger.warning(issue)
    threads = args.threads if args.threads is not None else config.THREADS
    if threads < 1:
        status("❌ --threads must be >= 1")
        return EXIT_USAGE
    config.THREADS = threads

    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as e:
        status(f"❌ {e}")
        return EXIT_USAGE
    except DataError as e:
        status(f"❌ {e}")
        return EXIT_DATA
    except DivergenceError as e:
        status(f"❌ {e}")
        return EXIT_DIVERGENCE
    except ValueError as e:
        status(f"❌ {e}")
        return EXIT_USAGE
    except OSError as e:
        status(f"❌ {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
