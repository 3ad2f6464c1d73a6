"""
Doubly Stochastic Kernel Machines - Baselines
=============================================

Reference solvers for the comparison runs:

- NORMA: functional SGD with exact kernel evaluations. Every sampled point
  is stored with its coefficient, so memory grows with t * B * (d + 1).
- r-Pegasos: SGD on a fixed linearisation with r random features drawn
  once from the same feature streams as the doubly stochastic trainer.

Both follow the trainer's schedule gamma_t = theta / t, its batch sampler
and its metrics stream, so runs with matching seeds see the same batches.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, TextIO

import numpy as np
from tqdm import tqdm

from dsgd import config
from dsgd.data_io import Dataset
from dsgd.errors import DivergenceError
from dsgd.feature_streams import (
    STREAM_DATA,
    BlockCache,
    KernelSpec,
    derive_stream,
    featurize,
    featurize_stack,
    kernel_matrix,
    sample_block,
)
from dsgd.losses import LossSpec, batch_loss_grads, batch_loss_values, check_targets, prediction_error
from dsgd.trainer import MetricsStream, TrainConfig, decay_scale, draw_batch

logger = logging.getLogger(__name__)

UNSUPPORTED_LOSSES = ("novelty", "kl_density_ratio")


def _check_supervised(data: Dataset, loss: LossSpec, solver: str):
    if loss.kind in UNSUPPORTED_LOSSES:
        raise ValueError(f"{solver} baseline supports supervised losses only, got {loss.kind!r}")
    if data.n == 0:
        raise ValueError("cannot train on an empty dataset")
    check_targets(loss, data.y)


def _as_outputs(loss: LossSpec, scores: np.ndarray) -> np.ndarray:
    return scores if loss.n_outputs > 1 else scores[:, 0]


@dataclass
class BaselineResult:
    """Final model, checkpoint snapshots and timing of one baseline run."""

    model: Any
    snapshots: Dict[int, Any] = field(default_factory=dict)
    elapsed: float = 0.0
    stopped_early: bool = False
    metrics: List[Dict[str, Any]] = field(default_factory=list)


# ============================================================================
# NORMA
# ============================================================================

@dataclass(frozen=True, eq=False)
class NormaModel:
    """Stored points with scalar (or per-class) coefficients times a global scale."""

    kernel: KernelSpec
    loss: LossSpec
    dim: int
    iteration_count: int
    scale: float
    points: np.ndarray
    coeffs: np.ndarray

    @property
    def coefficient_count(self) -> int:
        """Stored numbers: every point's d entries plus its coefficient(s)."""
        return int(self.points.size + self.coeffs.size)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"input dimension {X.shape[1]} does not match model dimension {self.dim}")
        if self.points.shape[0] == 0:
            scores = np.zeros((X.shape[0], self.coeffs.shape[1]))
        else:
            scores = self.scale * (kernel_matrix(self.kernel, X, self.points) @ self.coeffs)
        return _as_outputs(self.loss, scores)


def norma_train_with_checkpoints(
    data: Dataset,
    train_config: TrainConfig,
    kernel: KernelSpec,
    loss: LossSpec = LossSpec("square"),
    holdout: Optional[Dataset] = None,
    metrics_sink: Optional[TextIO] = None,
    record_snapshots: bool = True,
    verbose: bool = False,
) -> BaselineResult:
    """
    NORMA with exact kernels: f_t = sum over stored points a_j k(x_j, .).

    Each iteration appends the batch points with coefficients
    -gamma_t l'(f(x_b), y_b) / B and decays all earlier ones by
    (1 - gamma_t nu) through the same global scale as the trainer.
    """
    _check_supervised(data, loss, "NORMA")
    B = train_config.batch_size
    C = loss.n_outputs
    capacity = max(1, min(train_config.iterations, config.INITIAL_BLOCK_CAPACITY)) * B
    points = np.zeros((capacity, data.d))
    coeffs = np.zeros((capacity, C))
    stored = 0
    scale = 1.0
    t = 0

    sampler = derive_stream(train_config.base_seed, 0, STREAM_DATA)
    stream = MetricsStream(metrics_sink, "norma")
    checkpoints = set(train_config.eval_schedule)
    snapshots: Dict[int, NormaModel] = {}
    last_loss = float("nan")
    start = time.perf_counter()
    stopped_early = False

    def snapshot() -> NormaModel:
        return NormaModel(kernel, loss, data.d, t, scale, points[:stored].copy(), coeffs[:stored].copy())

    def checkpoint():
        model = snapshot()
        holdout_err = None
        if holdout is not None and holdout.n > 0:
            holdout_err = prediction_error(loss, model.predict(holdout.X), holdout.y)
        stream.emit(t, time.perf_counter() - start, last_loss, holdout_err)
        if record_snapshots:
            snapshots[t] = model

    if 0 in checkpoints:
        checkpoint()

    for step in tqdm(range(1, train_config.iterations + 1), desc="Training (norma)", disable=not verbose):
        batch = draw_batch(sampler, data, B, loss)
        gamma = train_config.step_size(step)
        if stored:
            scores = scale * (kernel_matrix(kernel, batch.X, points[:stored]) @ coeffs[:stored])
        else:
            scores = np.zeros((B, C))
        if not np.all(np.isfinite(scores)):
            raise DivergenceError(step, "f(x) overflowed")

        last_loss = float(np.mean(batch_loss_values(loss, _as_outputs(loss, scores), batch.y)))
        grads = batch_loss_grads(loss, _as_outputs(loss, scores), batch.y).reshape(B, C)

        scale, _ = decay_scale(coeffs[:stored], scale, 1.0 - gamma * train_config.nu)
        if stored + B > points.shape[0]:
            points = np.concatenate([points, np.zeros_like(points)])
            coeffs = np.concatenate([coeffs, np.zeros_like(coeffs)])
        points[stored:stored + B] = batch.X
        coeffs[stored:stored + B] = -gamma * grads / B / scale
        stored += B
        t = step

        if t in checkpoints:
            checkpoint()
        if train_config.budget_seconds is not None and time.perf_counter() - start >= train_config.budget_seconds:
            stopped_early = t < train_config.iterations
            break

    elapsed = time.perf_counter() - start
    logger.info("NORMA: %d iterations in %.2fs (%d stored points)", t, elapsed, stored)
    return BaselineResult(snapshot(), snapshots, elapsed, stopped_early, stream.records)


def norma_train(
    data: Dataset,
    train_config: TrainConfig,
    kernel: KernelSpec,
    loss: LossSpec = LossSpec("square"),
    verbose: bool = False,
) -> NormaModel:
    """Train NORMA and return the support-vector style model."""
    return norma_train_with_checkpoints(data, train_config, kernel, loss, record_snapshots=False, verbose=verbose).model


# ============================================================================
# r-PEGASOS
# ============================================================================

@dataclass(frozen=True, eq=False)
class LinearFeatureModel:
    """Weights over a fixed set of r random features."""

    kernel: KernelSpec
    loss: LossSpec
    base_seed: int
    block_size: int
    n_features: int
    dim: int
    iteration_count: int
    weights: np.ndarray

    @property
    def coefficient_count(self) -> int:
        return int(self.weights.size)

    def features(self, X: np.ndarray) -> np.ndarray:
        return fixed_features(self.kernel, X, self.n_features, self.block_size, self.base_seed)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"input dimension {X.shape[1]} does not match model dimension {self.dim}")
        return _as_outputs(self.loss, self.features(X) @ self.weights.T)


def fixed_features(kernel: KernelSpec, X: np.ndarray, r: int, block_size: int, base_seed: int) -> np.ndarray:
    """
    r features built from the trainer's streams: blocks 0..r/block_size - 1
    side by side (rescaled to 1/sqrt(r) overall), or a single block of
    width r when r is not a multiple of the block size.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if r < 1:
        raise ValueError(f"feature count must be >= 1, got {r}")
    if r % block_size == 0:
        cache = BlockCache(kernel, X.shape[1], block_size, base_seed)
        n_blocks = r // block_size
        return featurize_stack(cache.blocks(range(n_blocks)), kernel, X) * np.sqrt(block_size / r)
    block = sample_block(kernel, X.shape[1], r, base_seed, 0)
    return featurize(block, kernel, X)


def rpegasos_train_with_checkpoints(
    data: Dataset,
    r: int,
    train_config: TrainConfig,
    kernel: KernelSpec,
    loss: LossSpec = LossSpec("hinge"),
    holdout: Optional[Dataset] = None,
    metrics_sink: Optional[TextIO] = None,
    record_snapshots: bool = True,
    verbose: bool = False,
) -> BaselineResult:
    """
    w <- (1 - gamma_t nu) w - gamma_t mean_b l'(w . z(x_b), y_b) z(x_b).

    Hinge loss adds the projection onto the ball of radius 1 / sqrt(nu).
    """
    _check_supervised(data, loss, "r-Pegasos")
    B = train_config.batch_size
    C = loss.n_outputs
    weights = np.zeros((C, r))
    radius = 1.0 / np.sqrt(train_config.nu) if train_config.nu > 0 else np.inf
    t = 0

    def features(X):
        return fixed_features(kernel, X, r, train_config.block_size, train_config.base_seed)

    sampler = derive_stream(train_config.base_seed, 0, STREAM_DATA)
    stream = MetricsStream(metrics_sink, "rpegasos")
    checkpoints = set(train_config.eval_schedule)
    snapshots: Dict[int, LinearFeatureModel] = {}
    last_loss = float("nan")
    start = time.perf_counter()
    stopped_early = False

    def snapshot() -> LinearFeatureModel:
        return LinearFeatureModel(
            kernel, loss, train_config.base_seed, train_config.block_size, r, data.d, t, weights.copy()
        )

    def checkpoint():
        model = snapshot()
        holdout_err = None
        if holdout is not None and holdout.n > 0:
            holdout_err = prediction_error(loss, model.predict(holdout.X), holdout.y)
        stream.emit(t, time.perf_counter() - start, last_loss, holdout_err)
        if record_snapshots:
            snapshots[t] = model

    if 0 in checkpoints:
        checkpoint()

    for step in tqdm(range(1, train_config.iterations + 1), desc="Training (rpegasos)", disable=not verbose):
        batch = draw_batch(sampler, data, B, loss)
        gamma = train_config.step_size(step)
        Z = features(batch.X)
        scores = Z @ weights.T
        if not np.all(np.isfinite(scores)):
            raise DivergenceError(step, "f(x) overflowed")

        last_loss = float(np.mean(batch_loss_values(loss, _as_outputs(loss, scores), batch.y)))
        grads = batch_loss_grads(loss, _as_outputs(loss, scores), batch.y).reshape(B, C)
        weights = (1.0 - gamma * train_config.nu) * weights - gamma * (grads.T @ Z) / B

        if loss.kind == "hinge":
            norm = np.linalg.norm(weights)
            if norm > radius:
                weights *= radius / norm
        t = step

        if t in checkpoints:
            checkpoint()
        if train_config.budget_seconds is not None and time.perf_counter() - start >= train_config.budget_seconds:
            stopped_early = t < train_config.iterations
            break

    elapsed = time.perf_counter() - start
    logger.info("r-Pegasos: %d iterations in %.2fs (r=%d)", t, elapsed, r)
    return BaselineResult(snapshot(), snapshots, elapsed, stopped_early, stream.records)


def rpegasos_train(
    data: Dataset,
    r: int,
    train_config: TrainConfig,
    kernel: KernelSpec,
    loss: LossSpec = LossSpec("hinge"),
    verbose: bool = False,
) -> LinearFeatureModel:
    """Train r-Pegasos and return the linear model over r fixed features."""
    return rpegasos_train_with_checkpoints(data, r, train_config, kernel, loss, record_snapshots=False,
                                           verbose=verbose).model
