"""
Doubly Stochastic Kernel Machines - GP Posterior
================================================

Gaussian-process regression posterior, exactly (dense Cholesky solve) and
by doubly stochastic gradients:

- mean: square-loss training with a GP-specific nu
- variance, operator form: an upper-triangular coefficient matrix over
  pairs of single random features drawn from two independent streams
- variance, test-point form: one square-loss model per test point x*
  trained on targets k(x*, x_j)
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy import linalg
from tqdm import tqdm

from dsgd import config
from dsgd.data_io import Dataset
from dsgd.feature_streams import (
    STREAM_DATA,
    STREAM_FEATURES,
    STREAM_PAIRED_FEATURES,
    BlockCache,
    KernelSpec,
    derive_stream,
    featurize,
    featurize_stack,
    kernel_diagonal,
    kernel_matrix,
)
from dsgd.losses import LossSpec
from dsgd.predictor import predict
from dsgd.trainer import Model, TrainConfig, train, train_with_checkpoints

logger = logging.getLogger(__name__)

NU_RULES = ("twice_noise", "noise_per_sample")
SQUARE_LOSS = LossSpec("square")


# ============================================================================
# CLOSED FORM
# ============================================================================

def closed_form_posterior(
    X: np.ndarray,
    y: np.ndarray,
    Xstar: np.ndarray,
    kernel: KernelSpec,
    sigma2: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact posterior mean k*^T (K + s2 I)^-1 y and variance
    k(x*, x*) - k*^T (K + s2 I)^-1 k* at every test row.
    """
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be > 0, got {sigma2}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = X.shape[0]
    if n > config.MAX_DENSE_GP:
        raise ValueError(f"dense posterior limited to n <= {config.MAX_DENSE_GP}, got {n}")

    K = kernel_matrix(kernel, X, X)
    factor = linalg.cho_factor(K + sigma2 * np.eye(n), lower=True)
    weights = linalg.cho_solve(factor, y)

    K_star = kernel_matrix(kernel, Xstar, X)
    means = K_star @ weights
    solved = linalg.cho_solve(factor, K_star.T)
    variances = kernel_diagonal(kernel, Xstar) - np.einsum("ij,ji->i", K_star, solved)
    return means, np.maximum(variances, 0.0)


# ============================================================================
# POSTERIOR MEAN
# ============================================================================

def gp_nu(sigma2: float, n: int, nu_rule: str = "twice_noise") -> float:
    """
    Regularisation for the GP estimators.

    "twice_noise": nu = 2 sigma^2. "noise_per_sample": nu = sigma^2 / n, whose optimum
    under the averaged square loss coincides with the closed-form mean.
    """
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be > 0, got {sigma2}")
    if nu_rule == "twice_noise":
        return 2.0 * sigma2
    if nu_rule == "noise_per_sample":
        return sigma2 / n
    raise ValueError(f"unknown nu_rule {nu_rule!r} (expected one of {', '.join(NU_RULES)})")


def gp_train_config(train_config: TrainConfig, sigma2: float, n: int, nu_rule: str = "twice_noise") -> TrainConfig:
    return replace(train_config, nu=gp_nu(sigma2, n, nu_rule))


def ds_posterior_mean(
    data: Dataset,
    train_config: TrainConfig,
    kernel: KernelSpec,
    sigma2: float,
    nu_rule: str = "twice_noise",
    verbose: bool = False,
) -> Model:
    """Square-loss training with nu from gp_nu."""
    return train(data, gp_train_config(train_config, sigma2, data.n, nu_rule), kernel, SQUARE_LOSS, verbose=verbose)


# ============================================================================
# VARIANCE: OPERATOR FORM
# ============================================================================

class VarianceEstimate(NamedTuple):
    """Clamped variances plus how many raw estimates fell outside [0, k(x*, x*)]."""

    variance: np.ndarray
    clamped: int


def _clamp_variance(raw: np.ndarray, prior: np.ndarray, label: str) -> VarianceEstimate:
    outside = int(np.count_nonzero((raw < 0.0) | (raw > prior)))
    if outside:
        logger.warning("%s: %d variance estimates clamped to [0, k(x*, x*)]", label, outside)
    return VarianceEstimate(np.clip(raw, 0.0, prior), outside)


@dataclass
class VarianceOperatorState:
    """
    theta[i, j] for i <= j over the first t iterations (upper triangular).

    Block i of the omega stream and block j of the omega' stream are single
    random features regenerated from the same base seed with different
    stream tags.
    """

    kernel: KernelSpec
    dim: int
    base_seed: int
    theta: np.ndarray = field(default_factory=lambda: np.zeros((16, 16)))
    t: int = 0

    def __post_init__(self):
        self._primary = BlockCache(self.kernel, self.dim, 1, self.base_seed, STREAM_FEATURES)
        self._paired = BlockCache(self.kernel, self.dim, 1, self.base_seed, STREAM_PAIRED_FEATURES)

    @property
    def coefficients(self) -> np.ndarray:
        return self.theta[: self.t, : self.t]

    @property
    def memory(self) -> int:
        """Stored theta entries, t (t + 1) / 2."""
        return self.t * (self.t + 1) // 2

    def primary_features(self, X: np.ndarray) -> np.ndarray:
        return featurize_stack(self._primary.blocks(range(self.t)), self.kernel, X)

    def paired_features(self, X: np.ndarray) -> np.ndarray:
        return featurize_stack(self._paired.blocks(range(self.t)), self.kernel, X)

    def _grow(self):
        size = self.theta.shape[0]
        if self.t < size:
            return
        grown = np.zeros((2 * size, 2 * size))
        grown[:size, :size] = self.theta
        self.theta = grown


def ds_variance_operator_step(
    state: VarianceOperatorState,
    x_t: np.ndarray,
    gamma_t: float,
    sigma2: float,
    n: int,
) -> VarianceOperatorState:
    """
    One update with the sample x_t:

        theta_it = -gamma_t sum_{j=i}^{t-1} theta_ij phi'_j(x_t) phi'_t(x_t)   (i < t)
        theta_ij = (1 - gamma_t sigma^2 / n) theta_ij                          (i <= j < t)
        theta_tt = gamma_t phi_t(x_t) phi'_t(x_t)

    The new column uses the coefficients from before the decay.
    """
    if state.t >= config.MAX_OPERATOR_ITERATIONS:
        raise ValueError(f"variance operator is capped at {config.MAX_OPERATOR_ITERATIONS} iterations")
    x_t = np.asarray(x_t, dtype=np.float64).reshape(1, -1)
    k = state.t
    state._grow()

    paired_new = featurize(state._paired.get(k), state.kernel, x_t)[0, 0]
    primary_new = featurize(state._primary.get(k), state.kernel, x_t)[0, 0]

    if k > 0:
        paired_prev = state.paired_features(x_t)[0]
        previous = state.theta[:k, :k]
        state.theta[:k, k] = -gamma_t * (previous @ paired_prev) * paired_new
        previous *= 1.0 - gamma_t * sigma2 / n

    state.theta[k, k] = gamma_t * primary_new * paired_new
    state.t = k + 1
    return state


def operator_variance(state: VarianceOperatorState, Xstar: np.ndarray) -> VarianceEstimate:
    """k(x*, x*) - sum_{i<=j} theta_ij phi_i(x*) phi'_j(x*), clamped."""
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=np.float64))
    prior = kernel_diagonal(state.kernel, Xstar)
    if state.t == 0:
        return VarianceEstimate(prior, 0)
    primary = state.primary_features(Xstar)
    paired = state.paired_features(Xstar)
    operator = np.einsum("mi,ij,mj->m", primary, state.coefficients, paired)
    return _clamp_variance(prior - operator, prior, "operator variance")


def run_variance_operator(
    data: Dataset,
    train_config: TrainConfig,
    kernel: KernelSpec,
    sigma2: float,
    Xstar: Optional[np.ndarray] = None,
    verbose: bool = False,
) -> Tuple[VarianceOperatorState, Dict[int, VarianceEstimate]]:
    """
    Run train_config.iterations operator steps on samples drawn uniformly
    with replacement; when Xstar is given, evaluate the variance at every
    eval_schedule checkpoint.
    """
    if train_config.iterations > config.MAX_OPERATOR_ITERATIONS:
        raise ValueError(
            f"variance operator needs iterations <= {config.MAX_OPERATOR_ITERATIONS}, got {train_config.iterations}"
        )
    state = VarianceOperatorState(kernel, data.d, train_config.base_seed)
    sampler = derive_stream(train_config.base_seed, 0, STREAM_DATA)
    checkpoints = set(train_config.eval_schedule) if Xstar is not None else set()
    curve: Dict[int, VarianceEstimate] = {}

    if 0 in checkpoints:
        curve[0] = operator_variance(state, Xstar)
    for step in tqdm(range(1, train_config.iterations + 1), desc="Variance operator", disable=not verbose):
        row = data.X[sampler.integers(0, data.n)]
        ds_variance_operator_step(state, row, train_config.step_size(step), sigma2, data.n)
        if step in checkpoints:
            curve[step] = operator_variance(state, Xstar)
    return state, curve


# ============================================================================
# VARIANCE: PER TEST POINT
# ============================================================================

def testpoint_dataset(data: Dataset, x_star: np.ndarray, kernel: KernelSpec) -> Dataset:
    """Training rows with targets k(x*, x_j)."""
    targets = kernel_matrix(kernel, np.reshape(x_star, (1, -1)), data.X)[0]
    return Dataset(data.X, targets, "regression")


def _testpoint_jobs(data, Xstar, train_config, kernel, sigma2, nu_rule, fit, verbose):
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=np.float64))
    gp_config = gp_train_config(train_config, sigma2, data.n, nu_rule)

    def job(i: int):
        return fit(testpoint_dataset(data, Xstar[i], kernel), gp_config)

    workers = max(1, min(config.THREADS, Xstar.shape[0]))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(tqdm(pool.map(job, range(Xstar.shape[0])), total=Xstar.shape[0],
                            desc="Test-point models", disable=not verbose))
    return results


def ds_variance_testpoints(
    data: Dataset,
    Xstar: np.ndarray,
    train_config: TrainConfig,
    kernel: KernelSpec,
    sigma2: float,
    nu_rule: str = "twice_noise",
    verbose: bool = False,
) -> List[Model]:
    """
    One square-loss model per test point, trained independently (in a
    thread pool capped at config.THREADS). Model i estimates
    k*_i^T (K + s2 I)^-1 k(., x*_i).
    """
    return _testpoint_jobs(
        data, Xstar, train_config, kernel, sigma2, nu_rule,
        lambda ds, cfg: train(ds, cfg, kernel, SQUARE_LOSS),
        verbose,
    )


def testpoint_variance(models: List[Model], Xstar: np.ndarray, kernel: KernelSpec) -> VarianceEstimate:
    """k(x*_i, x*_i) - f_i(x*_i), clamped."""
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=np.float64))
    if len(models) != Xstar.shape[0]:
        raise ValueError(f"{len(models)} models for {Xstar.shape[0]} test points")
    prior = kernel_diagonal(kernel, Xstar)
    fitted = np.array([predict(model, Xstar[i])[0] for i, model in enumerate(models)])
    return _clamp_variance(prior - fitted, prior, "test-point variance")


def testpoint_variance_curve(
    data: Dataset,
    Xstar: np.ndarray,
    train_config: TrainConfig,
    kernel: KernelSpec,
    sigma2: float,
    nu_rule: str = "twice_noise",
    verbose: bool = False,
) -> Dict[int, VarianceEstimate]:
    """Test-point variance at every eval_schedule checkpoint."""
    results = _testpoint_jobs(
        data, Xstar, train_config, kernel, sigma2, nu_rule,
        lambda ds, cfg: train_with_checkpoints(ds, cfg, kernel, SQUARE_LOSS),
        verbose,
    )
    return {
        t: testpoint_variance([r.snapshots[t] for r in results], Xstar, kernel)
        for t in train_config.eval_schedule
    }
