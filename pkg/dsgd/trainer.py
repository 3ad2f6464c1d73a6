"""
Doubly Stochastic Kernel Machines - Trainer
===========================================

The doubly stochastic functional gradient loop:

    for t = 1..T:
        sample a batch (x_b, y_b) uniformly with replacement
        regenerate feature block t from (seed, t)
        f(x_b) = sum_{i<t} alpha_i . phi_i(x_b)
        alpha_t = -gamma_t mean_b l'(f(x_b), y_b) phi_t(x_b)
        alpha_i = (1 - gamma_t nu) alpha_i  for i < t

with gamma_t = theta / t. The decay of all earlier blocks is carried by a
single global scale factor, so each iteration touches O(1) stored blocks
besides the new one. Stored coefficients times the scale are the effective
alphas at all times.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, TextIO, Tuple

import numpy as np
from tqdm import tqdm

from dsgd import config
from dsgd.data_io import Dataset
from dsgd.errors import DivergenceError
from dsgd.feature_streams import (
    STREAM_DATA,
    BlockCache,
    KernelSpec,
    block_scores,
    derive_stream,
    featurize,
)
from dsgd.losses import (
    LossSpec,
    batch_loss_grads,
    batch_loss_values,
    check_targets,
    density_ratio_grad,
    novelty_grads,
    prediction_error,
)

logger = logging.getLogger(__name__)


# ============================================================================
# CONFIGURATION AND MODEL
# ============================================================================

@dataclass(frozen=True)
class TrainConfig:
    """
    Step-size schedule, batch/block sizes and iteration budget.

    nu = 0 is accepted (unregularised runs); a positive theta * nu is what
    the convergence guarantees assume.
    """

    theta: float = config.DEFAULT_THETA
    nu: float = config.DEFAULT_NU
    batch_size: int = config.DEFAULT_BATCH_SIZE
    block_size: int = config.DEFAULT_BLOCK_SIZE
    iterations: int = config.DEFAULT_ITERATIONS
    base_seed: int = config.DEFAULT_SEED
    eval_schedule: Tuple[int, ...] = ()
    averaging: bool = False
    budget_seconds: Optional[float] = None

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be > 0, got {self.theta}")
        if self.nu < 0:
            raise ValueError(f"nu must be >= 0, got {self.nu}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        schedule = tuple(int(c) for c in self.eval_schedule)
        if list(schedule) != sorted(schedule) or len(set(schedule)) != len(schedule):
            raise ValueError("eval_schedule must be strictly ascending")
        if schedule and (schedule[0] < 0 or schedule[-1] > self.iterations):
            raise ValueError(f"eval_schedule entries must lie in [0, {self.iterations}]")
        if self.budget_seconds is not None and not self.budget_seconds > 0:
            raise ValueError(f"budget_seconds must be > 0, got {self.budget_seconds}")
        object.__setattr__(self, "eval_schedule", schedule)

    def step_size(self, t: int) -> float:
        """gamma_t = theta / t for 1-based t."""
        return self.theta / t


def log_spaced_schedule(iterations: int, start: int = 1, per_octave: int = 1) -> Tuple[int, ...]:
    """Checkpoints 2^k (optionally subdivided) up to and including `iterations`."""
    points = set()
    if iterations < 1:
        return ()
    k = 0
    while 2 ** k <= iterations:
        for s in range(per_octave):
            value = int(round(2 ** (k + s / per_octave)))
            if start <= value <= iterations:
                points.add(value)
        k += 1
    points.add(iterations)
    return tuple(sorted(points))


@dataclass(frozen=True, eq=False)
class Model:
    """
    Trained predictor.

    coeff_blocks has shape (t, C, r) with C = 1 except for multiclass; the
    effective coefficients of block i are coeff_blocks[i] * scale. Feature
    parameters are never stored, only the seed that regenerates them.
    """

    kernel: KernelSpec
    loss: LossSpec
    base_seed: int
    theta: float
    nu: float
    block_size: int
    dim: int
    iteration_count: int
    scale: float
    coeff_blocks: np.ndarray
    avg_coeff_blocks: Optional[np.ndarray] = None
    tau: Optional[float] = None

    def __post_init__(self):
        coeffs = np.asarray(self.coeff_blocks, dtype=np.float64)
        if coeffs.ndim != 3 or coeffs.shape[0] != self.iteration_count or coeffs.shape[2] != self.block_size:
            raise ValueError(
                f"coeff_blocks shape {coeffs.shape} does not match "
                f"t={self.iteration_count}, r={self.block_size}"
            )
        coeffs.flags.writeable = False
        object.__setattr__(self, "coeff_blocks", coeffs)
        if self.avg_coeff_blocks is not None:
            avg = np.asarray(self.avg_coeff_blocks, dtype=np.float64)
            if avg.shape != coeffs.shape:
                raise ValueError("avg_coeff_blocks must match coeff_blocks in shape")
            avg.flags.writeable = False
            object.__setattr__(self, "avg_coeff_blocks", avg)

    @property
    def n_outputs(self) -> int:
        return self.coeff_blocks.shape[1]

    @property
    def has_average(self) -> bool:
        return self.avg_coeff_blocks is not None

    @property
    def coefficient_count(self) -> int:
        """Stored coefficient numbers: t * r (t * r * C for multiclass)."""
        return int(self.coeff_blocks.size)

    def effective_coefficients(self) -> np.ndarray:
        return self.coeff_blocks * self.scale

    def identical_to(self, other: "Model") -> bool:
        """Bitwise equality of every field."""
        same_avg = (self.avg_coeff_blocks is None) == (other.avg_coeff_blocks is None) and (
            self.avg_coeff_blocks is None
            or self.avg_coeff_blocks.tobytes() == other.avg_coeff_blocks.tobytes()
        )
        return (
            self.kernel == other.kernel
            and self.loss == other.loss
            and self.base_seed == other.base_seed
            and _same_float(self.theta, other.theta)
            and _same_float(self.nu, other.nu)
            and self.block_size == other.block_size
            and self.dim == other.dim
            and self.iteration_count == other.iteration_count
            and _same_float(self.scale, other.scale)
            and self.coeff_blocks.shape == other.coeff_blocks.shape
            and self.coeff_blocks.tobytes() == other.coeff_blocks.tobytes()
            and same_avg
            and ((self.tau is None and other.tau is None)
                 or (self.tau is not None and other.tau is not None and _same_float(self.tau, other.tau)))
        )


def _same_float(a: float, b: float) -> bool:
    return np.float64(a).tobytes() == np.float64(b).tobytes()


# ============================================================================
# METRICS STREAM
# ============================================================================

class MetricsStream:
    """
    Line-delimited JSON progress records tagged with the solver name.

    train_loss is the mean batch objective as the loss defines it; for
    kl_density_ratio that is exp(f) on numerator points minus f on
    denominator points, which goes negative once f is large on the latter.
    """

    def __init__(self, sink: Optional[TextIO], solver: str = "dsgd"):
        self.sink = sink
        self.solver = solver
        self.records: List[Dict[str, Any]] = []

    def emit(self, iteration: int, elapsed: float, train_loss: float, holdout_error: Optional[float] = None):
        record = {
            "solver": self.solver,
            "iteration": int(iteration),
            "elapsed": float(elapsed),
            "train_loss": None if train_loss is None or np.isnan(train_loss) else float(train_loss),
            "holdout_error": None if holdout_error is None or np.isnan(holdout_error) else float(holdout_error),
        }
        self.records.append(record)
        if self.sink is not None:
            self.sink.write(json.dumps(record) + "\n")
            self.sink.flush()


# ============================================================================
# TRAINING STATE
# ============================================================================

@dataclass
class Batch:
    """One sampled batch: rows, their targets and the indices they came from."""

    X: np.ndarray
    y: np.ndarray
    indices: np.ndarray


def draw_batch(sampler: np.random.Generator, data: Dataset, batch_size: int, loss: LossSpec) -> Batch:
    """Uniform sampling with replacement; density-ratio data draws z ~ Bernoulli(0.5) first."""
    if loss.kind == "kl_density_ratio":
        p_rows = np.flatnonzero(data.y == 0.0)
        q_rows = np.flatnonzero(data.y == 1.0)
        z = sampler.integers(0, 2, size=batch_size)
        from_p = p_rows[sampler.integers(0, len(p_rows), size=batch_size)]
        from_q = q_rows[sampler.integers(0, len(q_rows), size=batch_size)]
        indices = np.where(z == 1, from_q, from_p)
        return Batch(data.X[indices], z.astype(np.float64), indices)
    indices = sampler.integers(0, data.n, size=batch_size)
    return Batch(data.X[indices], data.y[indices], indices)


class TrainState:
    """
    Mutable state of one training run.

    Owns the block cache, the growing coefficient array, the global scale
    factor, the optional running average and the novelty threshold.
    """

    def __init__(self, dim: int, kernel: KernelSpec, loss: LossSpec, train_config: TrainConfig):
        self.dim = dim
        self.kernel = kernel
        self.loss = loss
        self.config = train_config
        self.cache = BlockCache(kernel, dim, train_config.block_size, train_config.base_seed)
        capacity = max(1, min(train_config.iterations, config.INITIAL_BLOCK_CAPACITY))
        self._coeffs = np.zeros((capacity, loss.n_outputs, train_config.block_size))
        self._avg = np.zeros_like(self._coeffs) if train_config.averaging else None
        self.t = 0
        self.scale = 1.0
        self.tau = 0.0 if loss.kind == "novelty" else None
        self.sampler = derive_stream(train_config.base_seed, 0, STREAM_DATA)
        self.last_batch_loss = float("nan")
        self.saturations = 0
        self.scale_folds = 0
        self.scale_resets = 0

    # ------------------------------------------------------------------
    @property
    def coeffs(self) -> np.ndarray:
        """Stored (unscaled) coefficient blocks of the iterations run so far."""
        return self._coeffs[: self.t]

    def effective_coefficients(self) -> np.ndarray:
        return self._coeffs[: self.t] * self.scale

    def scores(self, X: np.ndarray) -> np.ndarray:
        """f(X) over all blocks so far, shape (batch, C)."""
        if self.t == 0:
            return np.zeros((np.atleast_2d(X).shape[0], self.loss.n_outputs))
        raw = block_scores(self.cache, self._coeffs[: self.t], X, config.PREDICT_CHUNK_BLOCKS)
        return self.scale * raw

    def _ensure_capacity(self):
        if self.t < self._coeffs.shape[0]:
            return
        grow = max(self._coeffs.shape[0], 1)
        pad = np.zeros((grow,) + self._coeffs.shape[1:])
        self._coeffs = np.concatenate([self._coeffs, pad])
        if self._avg is not None:
            self._avg = np.concatenate([self._avg, np.zeros_like(pad)])

    # ------------------------------------------------------------------
    def sample_batch(self, data: Dataset) -> Batch:
        return draw_batch(self.sampler, data, self.config.batch_size, self.loss)

    def to_model(self) -> Model:
        """Immutable snapshot of the current iterate."""
        return Model(
            kernel=self.kernel,
            loss=self.loss,
            base_seed=self.config.base_seed,
            theta=self.config.theta,
            nu=self.config.nu,
            block_size=self.config.block_size,
            dim=self.dim,
            iteration_count=self.t,
            scale=self.scale,
            coeff_blocks=self._coeffs[: self.t].copy(),
            avg_coeff_blocks=None if self._avg is None else self._avg[: self.t].copy(),
            tau=self.tau,
        )


# ============================================================================
# ONE ITERATION
# ============================================================================

def decay_scale(stored: np.ndarray, scale: float, factor: float) -> Tuple[float, str]:
    """
    Multiply the global scale by `factor`.

    A factor within config.SCALE_FOLD_THRESHOLD of zero (1 - gamma nu
    computed as 1 - 1.0000000000000002, say) or a product that underflows
    to zero clears the stored blocks in place and resets the scale to 1
    ("reset"); a scale below the threshold is multiplied into them instead
    ("fold"). Returns the new scale and the action taken.
    """
    if abs(factor) < config.SCALE_FOLD_THRESHOLD:
        stored[...] = 0.0
        return 1.0, "reset"
    scale *= factor
    if scale == 0.0:
        stored[...] = 0.0
        return 1.0, "reset"
    if abs(scale) < config.SCALE_FOLD_THRESHOLD:
        stored *= scale
        return 1.0, "fold"
    return scale, ""


def _gradient_weights(state: TrainState, scores: np.ndarray, batch: Batch) -> Tuple[np.ndarray, float, float]:
    """
    Per-point weights g_b (shape (B, C)) with alpha_t = -gamma * factor *
    mean_b g_b phi_t(x_b), plus the factor (2 for the density ratio).
    """
    loss = state.loss
    kind = loss.kind

    if kind == "novelty":
        steps = [novelty_grads(float(u), state.tau) for u in scores[:, 0]]
        weights = np.array([-float(s.alpha_sign) for s in steps])[:, None]
        tau_move = float(np.mean([s.tau_step(state.config.nu) for s in steps]))
        return weights, 1.0, tau_move

    if kind == "kl_density_ratio":
        weights = np.empty((len(batch.y), 1))
        for b, (u, z) in enumerate(zip(scores[:, 0], batch.y.astype(int))):
            # the sampled point is y ~ Q when z = 1, x ~ P when z = 0
            step = density_ratio_grad(f_x=float(u), f_y=float(u), z=int(z))
            if step.saturated:
                state.saturations += 1
            weights[b, 0] = step.coef_y if z == 1 else -step.coef_x
        return weights, 2.0, 0.0

    grads = batch_loss_grads(loss, scores if loss.n_outputs > 1 else scores[:, 0], batch.y)
    return grads.reshape(len(batch.y), loss.n_outputs), 1.0, 0.0


def train_step(state: TrainState, batch: Batch, block_index: int) -> TrainState:
    """
    Run one iteration on a given batch using feature block `block_index`.

    block_index must equal the number of iterations already run (blocks are
    0-based, so iteration t uses block t - 1 and gamma_t = theta / t).
    """
    if block_index != state.t:
        raise ValueError(f"block_index {block_index} does not match the iteration count {state.t}")
    t = block_index + 1
    gamma = state.config.step_size(t)
    nu = state.config.nu

    scores = state.scores(batch.X)
    if not np.all(np.isfinite(scores)):
        raise DivergenceError(t, "f(x) overflowed")

    targets = np.full(len(batch.y), state.tau) if state.loss.kind == "novelty" else batch.y
    if state.loss.n_outputs > 1:
        state.last_batch_loss = float(np.mean(batch_loss_values(state.loss, scores, targets)))
    else:
        state.last_batch_loss = float(np.mean(batch_loss_values(state.loss, scores[:, 0], targets)))

    weights, factor, tau_move = _gradient_weights(state, scores, batch)
    features = featurize(state.cache.get(block_index), state.kernel, batch.X)
    alpha = -gamma * factor * (weights.T @ features) / len(batch.y)
    if not np.all(np.isfinite(alpha)):
        raise DivergenceError(t, "coefficient overflow")

    # decay every earlier block through the global scale
    state.scale, action = decay_scale(state._coeffs[: state.t], state.scale, 1.0 - gamma * nu)
    if action == "reset":
        state.scale_resets += 1
    elif action == "fold":
        state.scale_folds += 1
        logger.debug("Folded scale into stored blocks at iteration %d", t)

    state._ensure_capacity()
    state._coeffs[state.t] = alpha / state.scale

    if state.loss.kind == "novelty":
        state.tau += gamma * tau_move

    state.t += 1

    if state._avg is not None:
        n = state.t
        current = state._coeffs[:n] * state.scale
        state._avg[:n] = state._avg[:n] * ((n - 1) / n) + current / n

    return state


# ============================================================================
# TRAINING LOOP
# ============================================================================

@dataclass
class TrainResult:
    """Final model plus checkpoint snapshots and run counters."""

    model: Model
    snapshots: Dict[int, Model] = field(default_factory=dict)
    elapsed: float = 0.0
    stopped_early: bool = False
    saturations: int = 0
    scale_folds: int = 0
    scale_resets: int = 0
    metrics: List[Dict[str, Any]] = field(default_factory=list)


def _validate_inputs(data: Dataset, loss: LossSpec):
    if data.n == 0:
        raise ValueError("cannot train on an empty dataset")
    if loss.kind == "kl_density_ratio":
        groups = set(np.unique(data.y).tolist())
        if groups != {0.0, 1.0}:
            raise ValueError("density-ratio training needs samples from both groups (labels 0 and 1)")
    elif loss.kind != "novelty":
        check_targets(loss, data.y)


def train_with_checkpoints(
    data: Dataset,
    train_config: TrainConfig,
    kernel: KernelSpec,
    loss: LossSpec,
    holdout: Optional[Dataset] = None,
    metrics_sink: Optional[TextIO] = None,
    record_snapshots: bool = True,
    solver_name: str = "dsgd",
    verbose: bool = False,
) -> TrainResult:
    """
    Run the full loop, snapshotting the model at every eval_schedule entry.

    Args:
        data: training set
        train_config: schedule, sizes, seed and checkpoints
        kernel: kernel family
        loss: loss kind
        holdout: optional dataset scored at each checkpoint
        metrics_sink: optional text sink for line-delimited progress records
        record_snapshots: keep a Model per checkpoint
        solver_name: tag written into the metrics records
        verbose: show a progress bar

    Returns:
        TrainResult with the final model
    """
    _validate_inputs(data, loss)
    if kernel.family == "linear" and train_config.block_size != data.d:
        raise ValueError(f"linear kernel needs block_size == d ({data.d}), got {train_config.block_size}")
    if train_config.nu == 0:
        logger.warning("Training with nu = 0: no regularisation")

    state = TrainState(data.d, kernel, loss, train_config)
    stream = MetricsStream(metrics_sink, solver_name)
    checkpoints = set(train_config.eval_schedule)
    snapshots: Dict[int, Model] = {}
    start = time.perf_counter()
    stopped_early = False

    def checkpoint():
        elapsed = time.perf_counter() - start
        holdout_err = None
        if holdout is not None and holdout.n > 0:
            scores = state.scores(holdout.X)
            holdout_err = prediction_error(loss, scores if loss.n_outputs > 1 else scores[:, 0], holdout.y)
        stream.emit(state.t, elapsed, state.last_batch_loss, holdout_err)
        if record_snapshots:
            snapshots[state.t] = state.to_model()

    if 0 in checkpoints:
        checkpoint()

    for block_index in tqdm(range(train_config.iterations), desc=f"Training ({solver_name})", disable=not verbose):
        batch = state.sample_batch(data)
        train_step(state, batch, block_index)
        if state.t in checkpoints:
            checkpoint()
        if train_config.budget_seconds is not None and time.perf_counter() - start >= train_config.budget_seconds:
            stopped_early = state.t < train_config.iterations
            break

    elapsed = time.perf_counter() - start
    if state.saturations:
        logger.warning("Density-ratio exp saturated %d times (cap exp(%g))", state.saturations, config.DENSITY_RATIO_EXP_CAP)
    logger.info("Trained %d iterations in %.2fs (%d coefficients)", state.t, elapsed, state.coeffs.size)

    return TrainResult(
        model=state.to_model(),
        snapshots=snapshots,
        elapsed=elapsed,
        stopped_early=stopped_early,
        saturations=state.saturations,
        scale_folds=state.scale_folds,
        scale_resets=state.scale_resets,
        metrics=stream.records,
    )


def train(
    data: Dataset,
    train_config: TrainConfig,
    kernel: KernelSpec,
    loss: LossSpec,
    holdout: Optional[Dataset] = None,
    metrics_sink: Optional[TextIO] = None,
    verbose: bool = False,
) -> Model:
    """Train and return the final model (deterministic given data order and config)."""
    result = train_with_checkpoints(
        data,
        train_config,
        kernel,
        loss,
        holdout=holdout,
        metrics_sink=metrics_sink,
        record_snapshots=False,
        verbose=verbose,
    )
    return result.model


# ============================================================================
# CLOSED-FORM COEFFICIENT WEIGHTS
# ============================================================================

def coefficient_weights(t: int, theta: float, nu: float) -> np.ndarray:
    """
    a_t^i = -gamma_i prod_{j=i+1}^t (1 - gamma_j nu) for i = 1..t.

    With a fixed per-iteration gradient these are the weights the
    scale-folded coefficients must reproduce.
    """
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    steps = np.arange(1, t + 1, dtype=np.float64)
    gammas = theta / steps
    factors = (steps - theta * nu) / steps
    suffix = np.ones(t)
    if t > 1:
        suffix[:-1] = np.cumprod(factors[:0:-1])[::-1]
    return -gammas * suffix
