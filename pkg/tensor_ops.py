"""
Dense numeric kernel for mcqa-lens
numpy float32 arrays are the tensor type; every public op rejects non-finite values
"""

import logging
from typing import Sequence, Union

import numpy as np
from scipy.special import erf, logsumexp

from config import Config
from errors import DimensionError, NumericError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
ArrayLike = Union[np.ndarray, Sequence[float], Sequence[Sequence[float]]]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _floating(values: ArrayLike) -> np.ndarray:
    """Coerce to float32 unless the caller already works in float64 (gradient checks do)"""
    array = np.asarray(values)
    if array.dtype == np.float64 and isinstance(values, np.ndarray):
        return array
    return array.astype(np.float32, copy=False)


def check_finite(name: str, array: np.ndarray) -> np.ndarray:
    """Raise NumericError naming the tensor if it holds NaN or Inf"""
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NumericError(f"{name} contains {bad} non-finite value(s)")
    return array


def as_tensor(values: ArrayLike, name: str = "tensor") -> Tensor:
    """Build a finite float32 tensor from nested sequences or arrays"""
    array = np.ascontiguousarray(np.asarray(values, dtype=np.float32))
    if array.ndim == 0 or any(extent <= 0 for extent in array.shape):
        raise DimensionError(f"{name} must have positive extents, got shape {array.shape}")
    return check_finite(name, array)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of [m x k] and [k x n]"""
    a = _floating(a)
    b = _floating(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    check_finite("matmul lhs", a)
    check_finite("matmul rhs", b)
    return check_finite("matmul result", np.matmul(a, b))


def softmax(v: ArrayLike) -> Tensor:
    """Softmax of a 1-D tensor with max subtraction"""
    v = _floating(v)
    if v.ndim != 1 or v.shape[0] < 1:
        raise DimensionError(f"softmax expects a non-empty vector, got shape {v.shape}")
    return softmax_rows(v)


def softmax_rows(x: ArrayLike) -> Tensor:
    """Softmax over the last axis"""
    x = check_finite("softmax input", _floating(x))
    shifted = x - np.max(x, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def log_softmax(x: ArrayLike) -> Tensor:
    """Log-softmax over the last axis, computed without materializing the softmax"""
    x = check_finite("log_softmax input", _floating(x))
    return x - logsumexp(x, axis=-1, keepdims=True).astype(x.dtype)


def layer_norm(v: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = Config.LAYER_NORM_EPS) -> Tensor:
    """gain * (v - mean) / sqrt(var + eps) + bias over the last axis, population variance"""
    v = check_finite("layer_norm input", _floating(v))
    gain = _floating(gain)
    bias = _floating(bias)
    d = v.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs width >= 2, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias shapes {gain.shape}/{bias.shape} do not match width {d}")
    if eps <= 0:
        raise DimensionError(f"layer_norm eps must be positive, got {eps}")
    mean = np.mean(v, axis=-1, keepdims=True)
    centered = v - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    normed = centered / np.sqrt(var + v.dtype.type(eps))
    return normed * gain + bias


def gelu(v: ArrayLike) -> Tensor:
    """Exact GELU, x * Phi(x) with Phi from the error function"""
    v = check_finite("gelu input", _floating(v))
    return v * (0.5 * (1.0 + erf(v / v.dtype.type(_SQRT2)))).astype(v.dtype)


def gelu_grad(v: ArrayLike) -> Tensor:
    """Derivative of exact GELU: Phi(x) + x * phi(x)"""
    v = check_finite("gelu_grad input", _floating(v))
    cdf = 0.5 * (1.0 + erf(v / v.dtype.type(_SQRT2)))
    pdf = v.dtype.type(_INV_SQRT_2PI) * np.exp(-0.5 * v * v)
    return (cdf + v * pdf).astype(v.dtype)


def cross_entropy(logits: ArrayLike, target: int) -> float:
    """-log softmax(logits)[target] in log space"""
    logits = _floating(logits)
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy expects a vector of logits, got shape {logits.shape}")
    n = logits.shape[0]
    if not 0 <= target < n:
        raise DimensionError(f"cross_entropy target {target} out of range for {n} logits")
    check_finite("cross_entropy logits", logits)
    return float(logsumexp(logits) - logits[target])
