"""
Dense numeric kernel for the inference engine.

Every matrix is a C-contiguous ``numpy.float32`` array. The cached and
uncached execution paths rely on a row of any result never depending on how
many other rows were computed alongside it, so that both agree bit for bit.

Row reductions accumulate in float64 left to right. Matrix products split each
operand into integer-valued float64 slices, scaled by a power of two per row
(left operand) or per column (right operand). Every slice product is an exact
integer sum whatever order BLAS adds it in, and the slice products are combined
in a fixed order.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from dcache.exceptions import ContractViolation

Matrix = np.ndarray

NORM_FLOOR = 1e-12
F64_MANTISSA = 53
SLICES = 2


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Build a float32 matrix from nested sequences or an array."""
    m = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    if m.ndim == 1 and m.size == 0:
        m = m.reshape(0, cols if cols is not None else 0)
    if m.ndim != 2:
        raise ContractViolation(f"expected a 2-d matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ContractViolation(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ContractViolation(f"expected {cols} cols, got {m.shape[1]}")
    return _finite(m)


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=np.float32)


def _finite(m: np.ndarray) -> np.ndarray:
    if not np.isfinite(m).all():
        raise ContractViolation("non-finite value in matrix")
    return m


def _require_2d(m: np.ndarray, name: str) -> None:
    if not isinstance(m, np.ndarray) or m.ndim != 2:
        raise ContractViolation(f"{name} must be a 2-d array")


def row_sum(m: np.ndarray) -> np.ndarray:
    """Sum over the last axis, accumulating columns left to right in float64."""
    cols = np.ascontiguousarray(np.moveaxis(np.asarray(m, dtype=np.float64), -1, 0))
    return np.add.reduce(cols, axis=0)


def _slice_bits(inner: int) -> int:
    # k products of two slice integers must sum exactly inside a float64 mantissa
    return (F64_MANTISSA - max(1, math.ceil(math.log2(max(inner, 2))))) // 2 - 1


def _split(x: np.ndarray, axis: int, bits: int):
    """Integer-valued slices of ``x`` scaled by a power of two per line along ``axis``."""
    _, exp = np.frexp(np.max(np.abs(x), axis=axis, keepdims=True))
    rest = np.ldexp(x, -exp)
    slices = []
    for s in range(1, SLICES + 1):
        piece = np.trunc(np.ldexp(rest, bits * s))
        slices.append(piece)
        rest = rest - np.ldexp(piece, -bits * s)
    return slices, exp


def _exact_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inner = a.shape[-1]
    if inner == 0:
        return np.zeros(a.shape[:-1] + b.shape[-1:], dtype=np.float64)
    bits = _slice_bits(inner)
    a_slices, a_exp = _split(a.astype(np.float64), -1, bits)
    b_slices, b_exp = _split(b.astype(np.float64), -2, bits)
    acc = np.zeros(a.shape[:-1] + b.shape[-1:], dtype=np.float64)
    for s, a_s in enumerate(a_slices, start=1):
        for t, b_t in enumerate(b_slices, start=1):
            acc += np.ldexp(np.matmul(a_s, b_t), -bits * (s + t))
    return np.ldexp(acc, a_exp + b_exp)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"cannot multiply {a.shape} by {b.shape}")
    return _finite(_exact_dot(a, b).astype(np.float32))


def batched_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-batch product of (n, m, k) by (n, k, p) with the matmul accumulation rule."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ContractViolation(f"cannot batch-multiply {a.shape} by {b.shape}")
    return _finite(_exact_dot(a, b).astype(np.float32))


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    x = np.ascontiguousarray(m, dtype=np.float64)
    if x.shape[-1] == 0:
        return np.zeros(x.shape, dtype=np.float32)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / row_sum(e)[..., None]
    return _finite(out.astype(np.float32))


def layer_norm(m: Matrix, eps: float = 1e-5) -> Matrix:
    _require_2d(m, "m")
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    if m.shape[1] < 1:
        raise ContractViolation("layer_norm needs at least one column")
    x = m.astype(np.float64)
    n = x.shape[1]
    centered = x - (row_sum(x) / n)[:, None]
    var = row_sum(centered * centered) / n
    out = centered / np.sqrt(var + eps)[:, None]
    return _finite(np.ascontiguousarray(out.astype(np.float32)))


def gelu(m: np.ndarray) -> np.ndarray:
    # tanh approximation
    x = np.ascontiguousarray(m, dtype=np.float64)
    out = 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x * x * x)))
    return _finite(out.astype(np.float32))


def _pair(u, v) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rowwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity of matching rows; rows with a near-zero norm score 0."""
    x, y = _pair(a, b)
    if x.ndim != 2:
        raise ContractViolation("rowwise_cosine expects 2-d inputs")
    dot = row_sum(x * y)
    nx = np.sqrt(row_sum(x * x))
    ny = np.sqrt(row_sum(y * y))
    degenerate = (nx < NORM_FLOOR) | (ny < NORM_FLOOR)
    denom = np.where(degenerate, 1.0, nx * ny)
    sims = np.where(degenerate, 0.0, dot / denom)
    return np.clip(sims, -1.0, 1.0)


def rowwise_l2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    x, y = _pair(a, b)
    if x.ndim != 2:
        raise ContractViolation("rowwise_l2 expects 2-d inputs")
    d = x - y
    return np.sqrt(row_sum(d * d))


def cosine_similarity(u: Sequence[float], v: Sequence[float]) -> float:
    a, b = _pair(u, v)
    if a.ndim != 1:
        raise ContractViolation("cosine_similarity expects vectors")
    return float(rowwise_cosine(a[None, :], b[None, :])[0])


def l2_distance(u: Sequence[float], v: Sequence[float]) -> float:
    a, b = _pair(u, v)
    if a.ndim != 1:
        raise ContractViolation("l2_distance expects vectors")
    return float(rowwise_l2(a[None, :], b[None, :])[0])


def validate_indices(idx: Iterable[int], length: int) -> np.ndarray:
    """Return ``idx`` as an intp array after checking it is strictly ascending and in range."""
    arr = np.asarray(list(idx), dtype=np.int64)
    if arr.ndim != 1:
        raise ContractViolation("index list must be flat")
    if arr.size:
        if arr[0] < 0 or arr[-1] >= length:
            raise ContractViolation(f"index out of range for length {length}: {arr.tolist()}")
        if np.any(np.diff(arr) <= 0):
            raise ContractViolation(f"indices must be unique and ascending: {arr.tolist()}")
    return arr.astype(np.intp)


def gather_rows(m: Matrix, idx: Iterable[int]) -> Matrix:
    _require_2d(m, "m")
    sel = validate_indices(idx, m.shape[0])
    return np.ascontiguousarray(m[sel])


def scatter_rows(dst: Matrix, idx: Iterable[int], src: Matrix) -> Matrix:
    _require_2d(dst, "dst")
    _require_2d(src, "src")
    sel = validate_indices(idx, dst.shape[0])
    if src.shape != (sel.size, dst.shape[1]):
        raise ContractViolation(
            f"source shape {src.shape} does not fit {sel.size} rows of width {dst.shape[1]}"
        )
    out = dst.copy()
    if sel.size:
        out[sel] = src.astype(dst.dtype, copy=False)
    return out


def concat_rows(top: Matrix, bottom: Matrix) -> Matrix:
    return np.ascontiguousarray(np.concatenate((top, bottom), axis=0))
