"""
Doubly Stochastic Kernel Machines - Predictor
=============================================

Evaluates a trained model by regenerating every feature block from the
model's seed, and reads/writes the binary model file.

Model file layout (all integers little-endian):

    magic       8 bytes   b"DSGDMODL"
    version     uint32
    endianness  2 bytes   b"LE"
    header_len  uint32
    header      UTF-8 JSON: kernel, loss and scalar fields
    coeffs      t * C * r float64 LE
    avg_coeffs  t * C * r float64 LE (only when the header says so)
    checksum    32 bytes  sha256 of everything above
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Optional, TextIO, Union

import numpy as np
import pandas as pd

from dsgd import config
from dsgd.data_io import Dataset
from dsgd.errors import ModelFormatError
from dsgd.feature_streams import BlockCache, KernelSpec, block_scores
from dsgd.losses import LossSpec, prediction_error
from dsgd.trainer import Model

logger = logging.getLogger(__name__)

_PREAMBLE = struct.Struct("<8sI2sI")
_CHECKSUM_BYTES = 32


# ============================================================================
# PREDICTION
# ============================================================================

def _check_dimension(model: Model, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ValueError(f"input dimension {X.shape[-1] if X.ndim else 0} does not match model dimension {model.dim}")
    return X


def _evaluate(model: Model, coeffs: np.ndarray, scale: float, X: np.ndarray, cache: Optional[BlockCache]) -> np.ndarray:
    X = _check_dimension(model, X)
    if model.iteration_count == 0 or X.shape[0] == 0:
        scores = np.zeros((X.shape[0], model.n_outputs))
    else:
        if cache is None:
            cache = BlockCache(model.kernel, model.dim, model.block_size, model.base_seed)
        scores = scale * block_scores(cache, coeffs, X, config.PREDICT_CHUNK_BLOCKS)
    return scores if model.n_outputs > 1 else scores[:, 0]


def predict(model: Model, X: np.ndarray, cache: Optional[BlockCache] = None) -> np.ndarray:
    """
    f(x) for every row of X.

    Returns shape (batch,) or (batch, C) for multiclass. A cache may be
    passed to reuse regenerated blocks across calls; outputs do not depend
    on it.
    """
    return _evaluate(model, model.coeff_blocks, model.scale, X, cache)


def predict_averaged(model: Model, X: np.ndarray, cache: Optional[BlockCache] = None) -> np.ndarray:
    """Evaluate the running-average iterate (1/t) sum_i f_i."""
    if not model.has_average:
        raise ValueError("model was trained without averaging")
    return _evaluate(model, model.avg_coeff_blocks, 1.0, X, cache)


def holdout_error(model: Model, dataset: Dataset, averaged: bool = False) -> float:
    """MSE for regression-type losses, 0-1 error for classification."""
    scores = predict_averaged(model, dataset.X) if averaged else predict(model, dataset.X)
    return prediction_error(model.loss, scores, dataset.y)


# ============================================================================
# MODEL FILE
# ============================================================================

def _header(model: Model) -> dict:
    return {
        "kernel": model.kernel.to_dict(),
        "loss": model.loss.to_dict(),
        "base_seed": int(model.base_seed),
        "theta": float(model.theta),
        "nu": float(model.nu),
        "block_size": int(model.block_size),
        "dim": int(model.dim),
        "iteration_count": int(model.iteration_count),
        "n_outputs": int(model.n_outputs),
        "scale": float(model.scale),
        "tau": None if model.tau is None else float(model.tau),
        "has_average": model.has_average,
    }


def model_to_bytes(model: Model) -> bytes:
    header = json.dumps(_header(model), sort_keys=True).encode("utf-8")
    parts = [
        _PREAMBLE.pack(config.MODEL_MAGIC, config.MODEL_FORMAT_VERSION, config.MODEL_ENDIAN_TAG, len(header)),
        header,
        model.coeff_blocks.astype("<f8").tobytes(),
    ]
    if model.has_average:
        parts.append(model.avg_coeff_blocks.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def model_from_bytes(raw: bytes) -> Model:
    if len(raw) < _PREAMBLE.size + _CHECKSUM_BYTES:
        raise ModelFormatError(f"model file truncated ({len(raw)} bytes)")
    magic, version, endian, header_len = _PREAMBLE.unpack_from(raw, 0)
    if magic != config.MODEL_MAGIC:
        raise ModelFormatError(f"not a model file (magic {magic!r})")
    if version != config.MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version} (expected {config.MODEL_FORMAT_VERSION})")
    if endian != config.MODEL_ENDIAN_TAG:
        raise ModelFormatError(f"unsupported endianness tag {endian!r}")

    body, checksum = raw[:-_CHECKSUM_BYTES], raw[-_CHECKSUM_BYTES:]
    if hashlib.sha256(body).digest() != checksum:
        raise ModelFormatError("checksum mismatch (file corrupted or truncated)")

    start = _PREAMBLE.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"unreadable model header: {e}") from None

    shape = (header["iteration_count"], header["n_outputs"], header["block_size"])
    count = int(np.prod(shape))
    offset = start + header_len
    expected = offset + count * 8 * (2 if header["has_average"] else 1)
    if len(body) != expected:
        raise ModelFormatError(f"payload is {len(body)} bytes, expected {expected}")

    coeffs = np.frombuffer(body, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
    avg = None
    if header["has_average"]:
        avg = np.frombuffer(body, dtype="<f8", count=count, offset=offset + count * 8).astype(np.float64).reshape(shape)

    return Model(
        kernel=KernelSpec.from_dict(header["kernel"]),
        loss=LossSpec.from_dict(header["loss"]),
        base_seed=header["base_seed"],
        theta=header["theta"],
        nu=header["nu"],
        block_size=header["block_size"],
        dim=header["dim"],
        iteration_count=header["iteration_count"],
        scale=header["scale"],
        coeff_blocks=coeffs,
        avg_coeff_blocks=avg,
        tau=header["tau"],
    )


def save(model: Model, sink: Union[str, Path, BinaryIO]):
    """Write the model file to a path or binary stream."""
    payload = model_to_bytes(model)
    if isinstance(sink, (str, Path)):
        Path(sink).parent.mkdir(parents=True, exist_ok=True)
        with open(sink, "wb") as f:
            f.write(payload)
        logger.info("Saved model (%d blocks) to %s", model.iteration_count, sink)
    else:
        sink.write(payload)


def load(source: Union[str, Path, BinaryIO]) -> Model:
    """Read a model file; raises ModelFormatError on any inconsistency."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ModelFormatError(f"model file not found: {path}")
        raw = path.read_bytes()
    else:
        raw = source.read()
    return model_from_bytes(raw)


# ============================================================================
# PREDICTION CSV
# ============================================================================

def write_predictions_csv(scores: np.ndarray, sink: Union[str, Path, TextIO], n_outputs: int = 1):
    """Rows of (row index, score) or (row index, score_0..score_{C-1})."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1, n_outputs)
    columns = ["score"] if n_outputs == 1 else [f"score_{c}" for c in range(n_outputs)]
    df = pd.DataFrame(scores, columns=columns)
    df.insert(0, "row", np.arange(scores.shape[0]))
    df.to_csv(sink, index=False, float_format="%.17g")
