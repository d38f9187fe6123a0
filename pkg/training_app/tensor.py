"""
Dense real-array kernels.

Tensors are plain C-contiguous numpy arrays. The helpers here add the shape
contracts the engine relies on (dimension and rank errors naming the offending
shapes) on top of numpy's kernels.
"""
import hashlib
from typing import Optional

import numpy as np
from django.conf import settings

from .exceptions import DimensionError, RankError

DTYPES = {
    'float32': np.float32,
    'float64': np.float64,
}


def default_dtype() -> np.dtype:
    name = getattr(settings, 'TENSOR_DTYPE', 'float32')
    return np.dtype(DTYPES.get(name, np.float32))


def as_tensor(data, dtype: Optional[np.dtype] = None) -> np.ndarray:
    return np.ascontiguousarray(data, dtype=dtype or default_dtype())


def _require_rank(a: np.ndarray, rank: int, op: str) -> None:
    if a.ndim != rank:
        raise RankError(f'{op} expects rank-{rank} input, got rank {a.ndim}', a.shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """c[i][j] = sum_l a[i][l] * b[l][j]."""
    _require_rank(a, 2, 'matmul')
    _require_rank(b, 2, 'matmul')
    if a.shape[1] != b.shape[0]:
        raise DimensionError('matmul inner dimensions disagree', a.shape, b.shape)
    return a @ b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError('hadamard operands differ in shape', a.shape, b.shape)
    return a * b


def outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    _require_rank(u, 1, 'outer')
    _require_rank(v, 1, 'outer')
    return np.outer(u, v)


def transpose(a: np.ndarray) -> np.ndarray:
    _require_rank(a, 2, 'transpose')
    return np.ascontiguousarray(a.T)


def flatten_rows(a: np.ndarray) -> np.ndarray:
    """Flatten every batch row; conv maps come out channel-major then row-major."""
    return a.reshape(a.shape[0], -1)


def checksum(a: np.ndarray) -> str:
    digest = hashlib.sha256()
    digest.update(str(a.dtype).encode())
    digest.update(str(a.shape).encode())
    digest.update(np.ascontiguousarray(a).tobytes())
    return digest.hexdigest()


def first_non_finite(named: dict) -> Optional[str]:
    for name, value in named.items():
        if not np.all(np.isfinite(value)):
            return name
    return None
