"""
Doubly Stochastic Kernel Machines - Data I/O
============================================

Dataset container, libsvm/CSV readers and writers, synthetic generators and
seeded train/holdout splitting.

Sparse libsvm rows are densified; every feature map consumes dense vectors.
"""

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, TextIO, Tuple, Union

import numpy as np
import pandas as pd

from dsgd import config
from dsgd.errors import DataError
from dsgd.feature_streams import STREAM_AUX, STREAM_SPLIT, derive_stream
from dsgd.losses import LossSpec

TASKS = ("regression", "binary", "multiclass", "novelty", "density_ratio")


# ============================================================================
# DATASET
# ============================================================================

@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Dense rows with targets.

    targets are real values (regression), +-1 (binary), class indices
    0..C-1 (multiclass), ignored (novelty) or group labels 0/1 marking
    samples of P and Q (density_ratio).
    """

    X: np.ndarray
    y: np.ndarray
    task: str = "regression"
    n_classes: Optional[int] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if X.ndim != 2:
            raise DataError(f"rows must form a 2-D array, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise DataError(f"{X.shape[0]} rows but {y.shape[0]} targets")
        if X.shape[1] > config.MAX_INPUT_DIM:
            raise DataError(f"dimension {X.shape[1]} exceeds the dense limit {config.MAX_INPUT_DIM}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("dataset contains non-finite entries")
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        if self.task == "multiclass":
            if self.n_classes is None or self.n_classes < 2:
                raise DataError("multiclass datasets need n_classes >= 2")
            if not np.all((y == np.round(y)) & (y >= 0) & (y < self.n_classes)):
                raise DataError(f"class indices must lie in [0, {self.n_classes})")
        if self.task == "density_ratio" and not np.all(np.isin(y, (0.0, 1.0))):
            raise DataError("density_ratio datasets need group labels in {0, 1}")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = np.asarray(list(indices), dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.task, self.n_classes)

    def with_task(self, task: str, n_classes: Optional[int] = None) -> "Dataset":
        return Dataset(self.X, self.y, task, n_classes)


def task_for_loss(loss: LossSpec) -> Tuple[str, Optional[int]]:
    """Dataset task tag implied by a loss kind."""
    if loss.kind in ("hinge", "squared_hinge", "logistic"):
        return "binary", None
    if loss.kind == "multiclass_logistic":
        return "multiclass", loss.n_classes
    if loss.kind == "novelty":
        return "novelty", None
    if loss.kind == "kl_density_ratio":
        return "density_ratio", None
    return "regression", None


# ============================================================================
# LIBSVM
# ============================================================================

def _format_float(value: float) -> str:
    value = float(value)
    if value.is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


def parse_libsvm(
    stream: Union[TextIO, Iterable[str]],
    task: str = "regression",
    n_classes: Optional[int] = None,
    n_features: Optional[int] = None,
) -> Dataset:
    """
    Parse "label idx:val ..." lines (1-based, strictly ascending indices).

    Args:
        stream: text stream or iterable of lines
        task: dataset task tag
        n_classes: class count for multiclass
        n_features: force the dimension (must cover the largest index)

    Returns:
        Dense Dataset with d = max index seen; absent entries are 0
    """
    labels = []
    rows = []
    max_index = 0

    for line_no, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise DataError(f"bad label {tokens[0]!r}", line=line_no) from None

        entries = {}
        previous = 0
        for token in tokens[1:]:
            index_text, sep, value_text = token.partition(":")
            if not sep:
                raise DataError(f"expected idx:val, got {token!r}", line=line_no)
            try:
                index = int(index_text)
                value = float(value_text)
            except ValueError:
                raise DataError(f"malformed entry {token!r}", line=line_no) from None
            if index < 1:
                raise DataError(f"indices are 1-based, got {index}", line=line_no)
            if index <= previous:
                raise DataError(f"indices must be ascending ({index} after {previous})", line=line_no)
            previous = index
            entries[index] = value

        max_index = max(max_index, previous)
        labels.append(label)
        rows.append(entries)

    d = max(max_index, n_features or 0, 1)
    if n_features is not None and n_features < max_index:
        raise DataError(f"n_features={n_features} is smaller than the largest index {max_index}")
    if d > config.MAX_INPUT_DIM:
        raise DataError(f"dimension {d} exceeds the dense limit {config.MAX_INPUT_DIM}")

    X = np.zeros((len(rows), d))
    for i, entries in enumerate(rows):
        for index, value in entries.items():
            X[i, index - 1] = value
    return Dataset(X, np.asarray(labels, dtype=np.float64), task, n_classes)


def write_libsvm(dataset: Dataset, stream: TextIO):
    """Write nonzero entries with shortest round-trip decimal formatting."""
    for label, row in zip(dataset.y, dataset.X):
        parts = [_format_float(label)]
        parts.extend(f"{j + 1}:{repr(float(v))}" for j, v in enumerate(row) if v != 0.0)
        stream.write(" ".join(parts) + "\n")


# ============================================================================
# CSV
# ============================================================================

def read_csv(
    source: Union[str, Path, TextIO],
    task: str = "regression",
    n_classes: Optional[int] = None,
) -> Dataset:
    """Read a CSV with header "y,x1,...,xd" (round-trip float parsing)."""
    try:
        df = pd.read_csv(source, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise DataError("CSV input is empty (a header row is required)") from None
    if len(df.columns) < 2 or df.columns[0] != "y":
        raise DataError(f"CSV header must be 'y,x1,...,xd', got {list(df.columns)}")
    try:
        values = df.to_numpy(dtype=np.float64)
    except ValueError as e:
        raise DataError(f"non-numeric CSV entry: {e}") from None
    return Dataset(values[:, 1:], values[:, 0], task, n_classes)


def write_csv(dataset: Dataset, stream: Union[str, Path, TextIO]):
    """Write a CSV with header "y,x1,...,xd"; floats keep full precision."""
    columns = ["y"] + [f"x{j + 1}" for j in range(dataset.d)]
    df = pd.DataFrame(np.column_stack([dataset.y, dataset.X]), columns=columns)
    df.to_csv(stream, index=False)


def load_dataset(
    path: Union[str, Path],
    fmt: str = "libsvm",
    task: str = "regression",
    n_classes: Optional[int] = None,
    n_features: Optional[int] = None,
) -> Dataset:
    """Dispatch on format name ("libsvm" or "csv"); n_features pads libsvm rows."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    if fmt == "libsvm":
        with open(path, "r") as f:
            return parse_libsvm(f, task=task, n_classes=n_classes, n_features=n_features)
    if fmt == "csv":
        return read_csv(path, task=task, n_classes=n_classes)
    raise DataError(f"unknown data format {fmt!r} (expected libsvm or csv)")


def dataset_to_text(dataset: Dataset, fmt: str = "csv") -> str:
    buffer = io.StringIO()
    if fmt == "csv":
        write_csv(dataset, buffer)
    else:
        write_libsvm(dataset, buffer)
    return buffer.getvalue()


# ============================================================================
# SYNTHETIC DATA
# ============================================================================

def synth_target(X: np.ndarray) -> np.ndarray:
    """Noiseless generating function y = cos(0.5 pi |x|) exp(-0.1 pi |x|)."""
    radius = np.linalg.norm(np.atleast_2d(X), axis=1)
    return np.cos(0.5 * np.pi * radius) * np.exp(-0.1 * np.pi * radius)


def synth_regression(n: int, seed: int, noiseless: bool = False) -> Dataset:
    """
    n points uniform on [-5, 5]^2 with targets synth_target(x) + 0.1 e.

    The noise is drawn either way, so the noiseless variant shares its
    inputs with the noisy one for the same (n, seed).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = derive_stream(seed, 0, STREAM_AUX)
    X = rng.uniform(-5.0, 5.0, size=(n, 2))
    noise = rng.standard_normal(n)
    y = synth_target(X)
    if not noiseless:
        y = y + 0.1 * noise
    return Dataset(X, y, "regression")


def synth_classification(n: int, seed: int) -> Dataset:
    """Binary labels sign(synth_target(x)) on the same input law."""
    base = synth_regression(n, seed, noiseless=True)
    labels = np.where(base.y >= 0.0, 1.0, -1.0)
    return Dataset(base.X, labels, "binary")


def synth_density_ratio(n: int, seed: int, shift: float = 1.0, dim: int = 2) -> Dataset:
    """
    n samples from P = N(0, I) (label 0) and n from Q = N(shift * 1, I) (label 1).

    The true log ratio is log q/p (x) = shift * sum(x) - dim * shift^2 / 2.
    """
    rng = derive_stream(seed, 1, STREAM_AUX)
    P = rng.standard_normal((n, dim))
    Q = rng.standard_normal((n, dim)) + shift
    X = np.vstack([P, Q])
    y = np.concatenate([np.zeros(n), np.ones(n)])
    return Dataset(X, y, "density_ratio")


def true_log_density_ratio(X: np.ndarray, shift: float = 1.0) -> np.ndarray:
    X = np.atleast_2d(X)
    return shift * X.sum(axis=1) - X.shape[1] * shift ** 2 / 2.0


def synth_grid(points_per_axis: int) -> np.ndarray:
    """Regular evaluation grid over [-5, 5]^2."""
    axis = np.linspace(-5.0, 5.0, points_per_axis)
    xx, yy = np.meshgrid(axis, axis)
    return np.column_stack([xx.ravel(), yy.ravel()])


# ============================================================================
# SPLITTING
# ============================================================================

def split(dataset: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded disjoint (train, holdout) partition; holdout gets round(n * fraction) rows."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"holdout fraction must lie in (0, 1), got {fraction}")
    n = dataset.n
    order = derive_stream(seed, 0, STREAM_SPLIT).permutation(n)
    n_holdout = int(round(n * fraction))
    if n >= 2:
        n_holdout = min(max(n_holdout, 1), n - 1)
    holdout_idx = np.sort(order[:n_holdout])
    train_idx = np.sort(order[n_holdout:])
    return dataset.subset(train_idx), dataset.subset(holdout_idx)
