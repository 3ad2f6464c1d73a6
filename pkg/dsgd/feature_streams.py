"""
Doubly Stochastic Kernel Machines - Random Feature Streams
==========================================================

Seed-addressable random features for every supported kernel family, plus
the exact kernels they approximate.

A block of r features is a pure function of (base_seed, block_index,
KernelSpec, r, d): the parameters are drawn from a counter-based Philox
stream keyed by the seed pair, so any block can be regenerated at any time
without storing it. Only the (seed, index) address is ever persisted.

Families and their sampling densities:
- gaussian:  omega ~ N(0, I),            phi = sqrt(2) cos(omega.x/sigma + b)
- laplacian: omega_i ~ Cauchy(0, 1),     phi = sqrt(2) cos(omega.x/sigma + b)
- cauchy:    omega_i ~ Laplace(0, 1),    phi = 2^(d/2) sqrt(2) cos(omega.x/sigma + b)
             (the kernel prod 2/(1 + delta_i^2) peaks at 2^d, not 1)
- hellinger: omega_i uniform on {-1,+1}, phi = omega.sqrt(x)
- arc_cosine (order n in {0, 1}): omega ~ N(0, I),
             phi = sqrt(2) (omega.x)^n max(0, omega.x)
- polynomial_sketch: TensorSketch of degree p over [x, sqrt(c)]
- linear:    deterministic identity map (r must equal d)
"""

from dataclasses import dataclass, field, asdict
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import scipy.sparse as sps
from scipy.spatial.distance import pdist
from sklearn.metrics.pairwise import (
    laplacian_kernel,
    linear_kernel,
    polynomial_kernel,
    rbf_kernel,
)

FAMILIES = (
    "gaussian",
    "laplacian",
    "cauchy",
    "hellinger",
    "arc_cosine",
    "polynomial_sketch",
    "linear",
)
SHIFT_INVARIANT = ("gaussian", "laplacian", "cauchy")

MASK64 = (1 << 64) - 1

# 2^d overflows float64 past this
MAX_CAUCHY_DIM = 1000

# Counter tags: the top word of the Philox counter separates the purposes a
# (seed, index) pair is used for, so the streams never overlap.
STREAM_FEATURES = 0
STREAM_PAIRED_FEATURES = 1
STREAM_DATA = 2
STREAM_SPLIT = 3
STREAM_AUX = 4


# ============================================================================
# KERNEL SPECIFICATION
# ============================================================================

@dataclass(frozen=True)
class KernelSpec:
    """
    Kernel family plus hyperparameters.

    bandwidth applies to the shift-invariant families only; inputs are
    divided by it before the unit-scale densities are used.
    """

    family: str
    bandwidth: float = 1.0
    order: int = 0
    degree: int = 2
    bias: float = 0.0
    sketch_dim: int = 64

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(
                f"Unsupported kernel family: {self.family!r} (expected one of {', '.join(FAMILIES)})"
            )
        if self.family in SHIFT_INVARIANT and not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.family == "arc_cosine" and self.order not in (0, 1):
            raise ValueError(f"arc_cosine order must be 0 or 1, got {self.order}")
        if self.degree < 1:
            raise ValueError(f"degree must be >= 1, got {self.degree}")
        if self.bias < 0:
            raise ValueError(f"bias must be >= 0, got {self.bias}")
        if self.sketch_dim < 1:
            raise ValueError(f"sketch_dim must be >= 1, got {self.sketch_dim}")

    @property
    def is_random(self) -> bool:
        return self.family != "linear"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "KernelSpec":
        return cls(
            family=str(payload["family"]),
            bandwidth=float(payload.get("bandwidth", 1.0)),
            order=int(payload.get("order", 0)),
            degree=int(payload.get("degree", 2)),
            bias=float(payload.get("bias", 0.0)),
            sketch_dim=int(payload.get("sketch_dim", 64)),
        )


@dataclass(frozen=True, eq=False)
class FeatureBlock:
    """Materialised parameters of one block of r random features."""

    block_index: int
    r: int
    d: int
    frequencies: Optional[np.ndarray] = None
    offsets: Optional[np.ndarray] = None
    sign_rows: Optional[np.ndarray] = None
    sketch_hashes: Optional[np.ndarray] = None
    sketch_signs: Optional[np.ndarray] = None

    @property
    def n_sketches(self) -> int:
        return 0 if self.sketch_hashes is None else self.sketch_hashes.shape[0]

    def same_parameters(self, other: "FeatureBlock") -> bool:
        """Bitwise parameter equality (used to check regeneration)."""
        if (self.block_index, self.r, self.d) != (other.block_index, other.r, other.d):
            return False
        for name in ("frequencies", "offsets", "sign_rows", "sketch_hashes", "sketch_signs"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or a.tobytes() != b.tobytes()):
                return False
        return True


# ============================================================================
# STREAMS
# ============================================================================

def derive_stream(base_seed: int, block_index: int, tag: int = STREAM_FEATURES) -> np.random.Generator:
    """
    Counter-based random stream addressed by (base_seed, block_index).

    The Philox key is the 128-bit pair (base_seed, block_index) and the
    counter starts at (0, 0, 0, tag); the output is a pure function of
    those three numbers.
    """
    if block_index < 0:
        raise ValueError(f"block_index must be nonnegative, got {block_index}")
    key = np.array([int(base_seed) & MASK64, int(block_index) & MASK64], dtype=np.uint64)
    counter = np.array([0, 0, 0, int(tag) & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def _sketch_count(spec: KernelSpec, r: int) -> int:
    if r % spec.sketch_dim != 0:
        raise ValueError(
            f"polynomial_sketch block size r={r} must be a multiple of sketch_dim={spec.sketch_dim}"
        )
    return r // spec.sketch_dim


def sample_block(
    spec: KernelSpec,
    d: int,
    r: int,
    base_seed: int,
    block_index: int,
    tag: int = STREAM_FEATURES,
) -> FeatureBlock:
    """
    Draw the parameters of block `block_index` for the given family.

    Args:
        spec: kernel family and hyperparameters
        d: input dimension
        r: number of features in the block
        base_seed: run seed
        block_index: block address (the iteration number during training)
        tag: stream purpose; paired GP streams use STREAM_PAIRED_FEATURES

    Returns:
        FeatureBlock with read-only parameter arrays
    """
    if r < 1 or d < 1:
        raise ValueError(f"block needs r >= 1 and d >= 1, got r={r}, d={d}")

    family = spec.family
    if family == "linear":
        if r != d:
            raise ValueError(f"linear feature map needs r == d, got r={r}, d={d}")
        return FeatureBlock(block_index=block_index, r=r, d=d)

    rng = derive_stream(base_seed, block_index, tag)
    params: Dict[str, np.ndarray] = {}

    if family in ("gaussian", "arc_cosine"):
        params["frequencies"] = rng.standard_normal((r, d))
    elif family == "laplacian":
        params["frequencies"] = rng.standard_cauchy((r, d))
    elif family == "cauchy":
        params["frequencies"] = rng.laplace(0.0, 1.0, (r, d))
    elif family == "hellinger":
        params["sign_rows"] = rng.integers(0, 2, size=(r, d)).astype(np.float64) * 2.0 - 1.0
    elif family == "polynomial_sketch":
        m = _sketch_count(spec, r)
        shape = (m, spec.degree, d + 1)
        params["sketch_hashes"] = rng.integers(0, spec.sketch_dim, size=shape)
        params["sketch_signs"] = rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
    else:  # pragma: no cover - KernelSpec already validated the family
        raise ValueError(f"Unsupported kernel family: {family!r}")

    if family in SHIFT_INVARIANT:
        params["offsets"] = rng.uniform(0.0, 2.0 * np.pi, size=r)

    for arr in params.values():
        arr.flags.writeable = False
    return FeatureBlock(block_index=block_index, r=r, d=d, **params)


class BlockCache:
    """
    In-memory memo of regenerated blocks for one (spec, d, r, seed) run.

    Never persisted; dropping it cannot change any output because blocks
    regenerate bit-identically.
    """

    def __init__(self, spec: KernelSpec, d: int, r: int, base_seed: int, tag: int = STREAM_FEATURES):
        self.spec = spec
        self.d = d
        self.r = r
        self.base_seed = base_seed
        self.tag = tag
        self._blocks: Dict[int, FeatureBlock] = {}

    def get(self, block_index: int) -> FeatureBlock:
        block = self._blocks.get(block_index)
        if block is None:
            block = sample_block(self.spec, self.d, self.r, self.base_seed, block_index, self.tag)
            self._blocks[block_index] = block
        return block

    def blocks(self, indices: Iterable[int]) -> List[FeatureBlock]:
        return [self.get(i) for i in indices]

    def clear(self):
        self._blocks.clear()

    def __len__(self) -> int:
        return len(self._blocks)


# ============================================================================
# FEATURIZATION
# ============================================================================

def _as_batch(X: np.ndarray, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"dimension mismatch: expected {d} columns, got shape {X.shape}")
    return X


def _check_nonnegative(X: np.ndarray):
    if np.any(X < 0):
        raise ValueError("hellinger kernel requires nonnegative inputs")


def cauchy_peak(d: int) -> float:
    """k(x, x) = 2^d for the cauchy kernel in d dimensions."""
    if d > MAX_CAUCHY_DIM:
        raise ValueError(f"cauchy kernel peaks at 2^d and overflows for d > {MAX_CAUCHY_DIM}, got d={d}")
    return 2.0 ** d


def _cosine_features(X: np.ndarray, spec: KernelSpec, frequencies: np.ndarray, offsets: np.ndarray, r: int) -> np.ndarray:
    scale = np.sqrt(2.0 / r)
    if spec.family == "cauchy":
        scale *= np.sqrt(cauchy_peak(X.shape[1]))
    return scale * np.cos((X / spec.bandwidth) @ frequencies.T + offsets)


def _count_sketches(X: np.ndarray, hashes: np.ndarray, signs: np.ndarray, width: int) -> np.ndarray:
    """
    Every count sketch of one tensor factor at once.

    hashes and signs have shape (n_sketches, dim); sketch s sends input
    coordinate k to bucket s * width + hashes[s, k], so one sparse product
    covers the whole block. Returns shape (batch, n_sketches, width).
    """
    m, dim = hashes.shape
    rows = np.tile(np.arange(dim), m)
    cols = (np.arange(m)[:, None] * width + hashes).ravel()
    S = sps.csr_matrix((signs.ravel(), (rows, cols)), shape=(dim, m * width))
    return np.asarray(S.T @ X.T).T.reshape(X.shape[0], m, width)


def _tensor_sketch_batch(X: np.ndarray, spec: KernelSpec, block: FeatureBlock) -> np.ndarray:
    """All TensorSketches of a block: shape (batch, n_sketches, sketch_dim)."""
    width = spec.sketch_dim
    augmented = np.hstack([X, np.full((X.shape[0], 1), np.sqrt(spec.bias))])
    factors = (
        _count_sketches(augmented, block.sketch_hashes[:, j], block.sketch_signs[:, j], width)
        for j in range(spec.degree)
    )
    if spec.degree == 1:
        return next(factors)
    spectrum = None
    for cs in factors:
        transformed = np.fft.rfft(cs, axis=2)
        spectrum = transformed if spectrum is None else spectrum * transformed
    return np.fft.irfft(spectrum, n=width, axis=2)


def tensor_sketch(x: np.ndarray, spec: KernelSpec, block: FeatureBlock, sketch: int = 0) -> np.ndarray:
    """
    TensorSketch of a single point: p count sketches of [x, sqrt(c)] combined
    by circular convolution. Inner products of sketches are unbiased for
    (<x, x'> + c)^p.
    """
    if spec.family != "polynomial_sketch":
        raise ValueError(f"tensor_sketch needs a polynomial_sketch kernel, got {spec.family!r}")
    X = _as_batch(x, block.d)
    if not 0 <= sketch < block.n_sketches:
        raise ValueError(f"sketch index {sketch} out of range for {block.n_sketches} sketches")
    return _tensor_sketch_batch(X, spec, block)[0, sketch]


def featurize(block: FeatureBlock, spec: KernelSpec, X: np.ndarray) -> np.ndarray:
    """
    Feature matrix of a block, shape (batch, r).

    Random families are scaled so that Phi(x) . Phi(x') estimates k(x, x')
    without bias for the whole block (1/sqrt(r) per feature, or
    1/sqrt(#sketches) for TensorSketch).
    """
    X = _as_batch(X, block.d)
    family = spec.family
    r = block.r

    if family in SHIFT_INVARIANT:
        return _cosine_features(X, spec, block.frequencies, block.offsets, r)

    if family == "arc_cosine":
        projection = X @ block.frequencies.T
        if spec.order == 0:
            return np.sqrt(2.0 / r) * (projection > 0).astype(np.float64)
        return np.sqrt(2.0 / r) * np.maximum(projection, 0.0)

    if family == "hellinger":
        _check_nonnegative(X)
        return (np.sqrt(X) @ block.sign_rows.T) / np.sqrt(r)

    if family == "polynomial_sketch":
        sketches = _tensor_sketch_batch(X, spec, block)
        return sketches.reshape(X.shape[0], -1) / np.sqrt(block.n_sketches)

    if family == "linear":
        return X.copy()

    raise ValueError(f"Unsupported kernel family: {family!r}")


def featurize_stack(blocks: List[FeatureBlock], spec: KernelSpec, X: np.ndarray) -> np.ndarray:
    """Features of several equally sized blocks side by side, shape (batch, len(blocks) * r)."""
    if not blocks:
        return np.zeros((np.asarray(X).shape[0], 0))
    if spec.family in SHIFT_INVARIANT or spec.family == "arc_cosine":
        stacked = FeatureBlock(
            block_index=blocks[0].block_index,
            r=blocks[0].r,
            d=blocks[0].d,
            frequencies=np.vstack([b.frequencies for b in blocks]),
            offsets=None if blocks[0].offsets is None else np.concatenate([b.offsets for b in blocks]),
        )
        X = _as_batch(X, stacked.d)
        if spec.family in SHIFT_INVARIANT:
            return _cosine_features(X, spec, stacked.frequencies, stacked.offsets, stacked.r)
        projection = X @ stacked.frequencies.T
        if spec.order == 0:
            return np.sqrt(2.0 / stacked.r) * (projection > 0).astype(np.float64)
        return np.sqrt(2.0 / stacked.r) * np.maximum(projection, 0.0)
    return np.hstack([featurize(b, spec, X) for b in blocks])


# ============================================================================
# EXACT KERNELS
# ============================================================================

def kernel_matrix(spec: KernelSpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Exact Gram matrix k(X_i, Y_j) after bandwidth scaling."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    family = spec.family

    if family == "gaussian":
        return rbf_kernel(X, Y, gamma=1.0 / (2.0 * spec.bandwidth ** 2))
    if family == "laplacian":
        return laplacian_kernel(X, Y, gamma=1.0 / spec.bandwidth)
    if family == "cauchy":
        peak = cauchy_peak(X.shape[1])
        delta = (X[:, None, :] - Y[None, :, :]) / spec.bandwidth
        return peak * np.prod(1.0 / (1.0 + delta ** 2), axis=2)
    if family == "hellinger":
        _check_nonnegative(X)
        _check_nonnegative(Y)
        return np.sqrt(X) @ np.sqrt(Y).T
    if family == "arc_cosine":
        nx = np.linalg.norm(X, axis=1)[:, None]
        ny = np.linalg.norm(Y, axis=1)[None, :]
        denom = nx * ny
        with np.errstate(invalid="ignore", divide="ignore"):
            cos_t = np.where(denom > 0, (X @ Y.T) / np.where(denom > 0, denom, 1.0), 1.0)
        theta = np.arccos(np.clip(cos_t, -1.0, 1.0))
        if spec.order == 0:
            return np.where(denom > 0, 1.0 - theta / np.pi, 0.0)
        return denom / np.pi * (np.sin(theta) + (np.pi - theta) * np.cos(theta))
    if family == "polynomial_sketch":
        return polynomial_kernel(X, Y, degree=spec.degree, gamma=1.0, coef0=spec.bias)
    if family == "linear":
        return linear_kernel(X, Y)
    raise ValueError(f"Unsupported kernel family: {family!r}")


def exact_kernel(spec: KernelSpec, x: np.ndarray, x_prime: np.ndarray) -> float:
    """Closed-form k(x, x') for one pair of points."""
    return float(kernel_matrix(spec, np.reshape(x, (1, -1)), np.reshape(x_prime, (1, -1)))[0, 0])


def kernel_diagonal(spec: KernelSpec, X: np.ndarray) -> np.ndarray:
    """k(x, x) for every row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if spec.family in SHIFT_INVARIANT:
        peak = cauchy_peak(X.shape[1]) if spec.family == "cauchy" else 1.0
        return np.full(X.shape[0], peak)
    return np.array([exact_kernel(spec, row, row) for row in X])


# ============================================================================
# BANDWIDTH HEURISTIC
# ============================================================================

def median_heuristic(X: np.ndarray, pair_budget: int, stream: np.random.Generator) -> float:
    """
    Median Euclidean distance over up to `pair_budget` distinct pairs.

    All pairs are used when there are no more than the budget; otherwise
    pairs are sampled uniformly from the stream. Multipliers (0.1x, 4x) are
    the caller's business.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if n < 2:
        raise ValueError(f"median heuristic needs at least 2 points, got {n}")
    if pair_budget < 1:
        raise ValueError(f"pair_budget must be positive, got {pair_budget}")

    if n * (n - 1) // 2 <= pair_budget:
        distances = pdist(X)
    else:
        i = stream.integers(0, n, size=pair_budget)
        j = stream.integers(0, n - 1, size=pair_budget)
        j[j >= i] += 1
        distances = np.linalg.norm(X[i] - X[j], axis=1)
    return float(np.median(distances))


def bandwidth_from_median(X: np.ndarray, multiplier: float, seed: int, pair_budget: int = 2 ** 14) -> float:
    """multiplier x median pairwise distance; rejects a zero result."""
    median = median_heuristic(X, pair_budget, derive_stream(seed, 0, STREAM_AUX))
    bandwidth = multiplier * median
    if not bandwidth > 0:
        raise ValueError("median heuristic gave a zero bandwidth (all points identical?)")
    return bandwidth


# ============================================================================
# FUNCTION EVALUATION OVER BLOCKS
# ============================================================================

def block_scores(cache: BlockCache, coeffs: np.ndarray, X: np.ndarray, chunk: int = 64) -> np.ndarray:
    """
    sum_i coeffs[i] . Phi_i(X) over blocks 0..t-1, shape (batch, C).

    coeffs has shape (t, C, r). Blocks are visited in index order in chunks
    of `chunk`; training and prediction use the same chunk so their sums
    agree bitwise.
    """
    X = _as_batch(X, cache.d)
    t, n_outputs, r = coeffs.shape
    out = np.zeros((X.shape[0], n_outputs))
    for start in range(0, t, chunk):
        stop = min(start + chunk, t)
        features = featurize_stack(cache.blocks(range(start, stop)), cache.spec, X)
        weights = coeffs[start:stop].transpose(1, 0, 2).reshape(n_outputs, -1)
        out += features @ weights.T
    return out
