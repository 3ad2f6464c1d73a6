"""
Doubly Stochastic Kernel Machines - Losses
==========================================

Loss values and (sub)gradients l'(u, y) for every supported kernel machine,
in the form the trainer consumes: the new coefficient block is
-gamma_t * mean_b l'(f(x_b), y_b) phi(x_b).

Target conventions per kind:
- hinge, squared_hinge, logistic: y in {-1, +1}
- multiclass_logistic: y is a class index 0..C-1, u is a C-vector
- square, huber, eps_insensitive, quantile: y real
- novelty: y is the current threshold tau
- kl_density_ratio: y is the Bernoulli draw z in {0, 1}; u is f at the
  sample drawn from the matching distribution. Its value is exp(u) for
  z = 1 and -u for z = 0, a signed objective with no lower bound at 0

Kinks break ties toward the branch written with ">=": hinge and
eps-insensitive give 0, quantile gives 1 - tau, novelty gives 0.
"""

from dataclasses import dataclass, asdict
from typing import Any, Dict, NamedTuple, Union

import numpy as np
from scipy.special import expit, logsumexp, softmax

from dsgd import config

LOSS_KINDS = (
    "hinge",
    "squared_hinge",
    "logistic",
    "multiclass_logistic",
    "square",
    "huber",
    "eps_insensitive",
    "quantile",
    "novelty",
    "kl_density_ratio",
)

SIGN_TARGETS = ("hinge", "squared_hinge", "logistic")
REAL_TARGETS = ("square", "huber", "eps_insensitive", "quantile", "novelty")
CLASSIFICATION = SIGN_TARGETS + ("multiclass_logistic",)


@dataclass(frozen=True)
class LossSpec:
    """Loss kind plus its parameters (class count, epsilon, quantile level)."""

    kind: str
    n_classes: int = 2
    epsilon: float = 0.0
    quantile: float = 0.5

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"Unknown loss kind: {self.kind!r} (expected one of {', '.join(LOSS_KINDS)})")
        if self.kind == "multiclass_logistic" and self.n_classes < 2:
            raise ValueError(f"multiclass_logistic needs C >= 2, got {self.n_classes}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 < self.quantile < 1.0:
            raise ValueError(f"quantile level must lie in (0, 1), got {self.quantile}")

    @property
    def n_outputs(self) -> int:
        return self.n_classes if self.kind == "multiclass_logistic" else 1

    @property
    def is_classification(self) -> bool:
        return self.kind in CLASSIFICATION

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "LossSpec":
        return cls(
            kind=str(payload["kind"]),
            n_classes=int(payload.get("n_classes", 2)),
            epsilon=float(payload.get("epsilon", 0.0)),
            quantile=float(payload.get("quantile", 0.5)),
        )


# ============================================================================
# TARGET CHECKS
# ============================================================================

def check_targets(spec: LossSpec, y: Union[np.ndarray, float, int]) -> np.ndarray:
    """Validate targets against the loss kind; returns them as an array."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    kind = spec.kind
    if kind in SIGN_TARGETS and not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError(f"{kind} loss needs targets in {{-1, +1}}")
    if kind == "multiclass_logistic":
        if not np.all((y == np.round(y)) & (y >= 0) & (y < spec.n_classes)):
            raise ValueError(f"multiclass_logistic needs class indices in [0, {spec.n_classes})")
    if kind == "kl_density_ratio" and not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("kl_density_ratio needs targets z in {0, 1}")
    return y


def _as_scores(spec: LossSpec, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if spec.kind == "multiclass_logistic":
        u = np.atleast_2d(u)
        if u.shape[1] != spec.n_classes:
            raise ValueError(f"expected {spec.n_classes} class scores, got shape {u.shape}")
        return u
    return np.atleast_1d(u)


# ============================================================================
# BATCH LOSSES AND GRADIENTS
# ============================================================================

def batch_loss_values(spec: LossSpec, U, Y) -> np.ndarray:
    """Per-point loss values for a batch."""
    U = _as_scores(spec, U)
    Y = check_targets(spec, Y)
    kind = spec.kind

    if kind == "hinge":
        return np.maximum(0.0, 1.0 - Y * U)
    if kind == "squared_hinge":
        return 0.5 * np.maximum(0.0, 1.0 - Y * U) ** 2
    if kind == "logistic":
        return np.logaddexp(0.0, -Y * U)
    if kind == "multiclass_logistic":
        labels = Y.astype(int)
        return logsumexp(U, axis=1) - U[np.arange(U.shape[0]), labels]
    if kind == "square":
        return 0.5 * (U - Y) ** 2
    if kind == "huber":
        residual = np.abs(U - Y)
        return np.where(residual <= 1.0, 0.5 * residual ** 2, residual - 0.5)
    if kind == "eps_insensitive":
        return np.maximum(0.0, np.abs(U - Y) - spec.epsilon)
    if kind == "quantile":
        tau = spec.quantile
        return np.maximum(tau * (Y - U), (1.0 - tau) * (U - Y))
    if kind == "novelty":
        return np.maximum(0.0, Y - U)
    if kind == "kl_density_ratio":
        return np.where(Y == 1.0, np.exp(np.minimum(U, config.DENSITY_RATIO_EXP_CAP)), -U)
    raise ValueError(f"Unknown loss kind: {kind!r}")


def batch_loss_grads(spec: LossSpec, U, Y) -> np.ndarray:
    """
    Per-point derivative of the loss in u.

    Shape (n,) for scalar losses and (n, C) for multiclass, where row b is
    softmax(u_b) - onehot(y_b); the coefficient update is its negation
    times gamma.
    """
    U = _as_scores(spec, U)
    Y = check_targets(spec, Y)
    kind = spec.kind

    if kind == "hinge":
        return np.where(Y * U >= 1.0, 0.0, -Y)
    if kind == "squared_hinge":
        return np.where(Y * U >= 1.0, 0.0, U - Y)
    if kind == "logistic":
        return -Y * expit(-Y * U)
    if kind == "multiclass_logistic":
        grads = softmax(U, axis=1)
        grads[np.arange(U.shape[0]), Y.astype(int)] -= 1.0
        return grads
    if kind == "square":
        return U - Y
    if kind == "huber":
        residual = U - Y
        return np.where(np.abs(residual) <= 1.0, residual, np.sign(residual))
    if kind == "eps_insensitive":
        residual = U - Y
        return np.where(np.abs(residual) <= spec.epsilon, 0.0, np.sign(residual))
    if kind == "quantile":
        return np.where(U >= Y, 1.0 - spec.quantile, -spec.quantile)
    if kind == "novelty":
        return np.where(U >= Y, 0.0, -1.0)
    if kind == "kl_density_ratio":
        return np.where(Y == 1.0, np.exp(np.minimum(U, config.DENSITY_RATIO_EXP_CAP)), -1.0)
    raise ValueError(f"Unknown loss kind: {kind!r}")


# ============================================================================
# SCALAR API
# ============================================================================

def loss_value(spec: LossSpec, u, y) -> float:
    """Loss at a single point (u is a C-vector for multiclass)."""
    return float(batch_loss_values(spec, u, y)[0])


def loss_grad(spec: LossSpec, u, y) -> Union[float, np.ndarray]:
    """Subgradient of loss_value in u at a single point."""
    grads = batch_loss_grads(spec, u, y)
    if spec.kind == "multiclass_logistic":
        return grads[0]
    return float(grads[0])


# ============================================================================
# NOVELTY DETECTION AND DENSITY RATIO
# ============================================================================

class NoveltyStep(NamedTuple):
    """Case selector of the joint (alpha, tau) novelty update."""

    alpha_sign: int
    tau_up: bool

    def tau_step(self, nu: float) -> float:
        """Multiplier of gamma_t in the tau update: +nu or -(1 - nu)."""
        return nu if self.tau_up else -(1.0 - nu)


def novelty_grads(f_x: float, tau_prev: float) -> NoveltyStep:
    """f(x) >= tau: no new coefficient, tau moves up; else alpha = +gamma phi(x), tau moves down."""
    if f_x >= tau_prev:
        return NoveltyStep(alpha_sign=0, tau_up=True)
    return NoveltyStep(alpha_sign=1, tau_up=False)


class DensityRatioGrad(NamedTuple):
    """
    Coefficients of phi(y) and phi(x), before the -2 gamma scaling:
    alpha = -2 gamma (coef_y phi(y) - coef_x phi(x)).
    """

    coef_y: float
    coef_x: float
    saturated: bool = False


def density_ratio_grad(f_x: float, f_y: float, z: int, cap: float = None) -> DensityRatioGrad:
    """KL density-ratio step for one Bernoulli draw z; exp(f_y) saturates at exp(cap)."""
    if z not in (0, 1):
        raise ValueError(f"z must be 0 or 1, got {z}")
    cap = config.DENSITY_RATIO_EXP_CAP if cap is None else cap
    if z == 1:
        saturated = f_y > cap
        return DensityRatioGrad(coef_y=float(np.exp(min(f_y, cap))), coef_x=0.0, saturated=saturated)
    return DensityRatioGrad(coef_y=0.0, coef_x=1.0)


# ============================================================================
# PREDICTION ERROR
# ============================================================================

def prediction_error(spec: LossSpec, scores: np.ndarray, y: np.ndarray) -> float:
    """
    Task error of raw scores: 0-1 error for classification losses, mean
    squared error otherwise.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        return float("nan")
    if spec.kind == "multiclass_logistic":
        return float(np.mean(np.argmax(np.atleast_2d(scores), axis=1) != y))
    scores = scores.reshape(-1)
    if spec.kind in SIGN_TARGETS:
        return float(np.mean(np.where(scores >= 0.0, 1.0, -1.0) != y))
    return float(np.mean((scores - y) ** 2))
