"""
Deterministic random generation.

SplitMix64 drives every random tensor in the engine: trainable-weight
initialization, the fixed local classifiers M / K, the feedback-alignment
backward weights, dropout masks and epoch shuffles. Fixed matrices are never
stored; they are regenerated from a 64-bit seed plus their shape.
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from django.db import models

from .exceptions import ArgumentError, DimensionError
from .tensor import default_dtype, transpose

logger = logging.getLogger(__name__)

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_1 = 0xBF58476D1CE4E5B9
MIX_2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX_1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_2) & MASK64
    return z ^ (z >> 31)


def next_u64(state: int) -> Tuple[int, int]:
    """One SplitMix64 step. Returns (output, advanced state)."""
    state = (int(state) + GOLDEN_GAMMA) & MASK64
    return _mix64(state), state


def splitmix64_stream(state: int, count: int) -> Tuple[np.ndarray, int]:
    """
    The next `count` SplitMix64 outputs as a uint64 array.

    Output k (1-based) only depends on state + k * gamma, so the whole stream
    is produced in one vectorized pass and equals `count` calls to next_u64.
    """
    state = int(state) & MASK64
    steps = np.arange(1, count + 1, dtype=np.uint64)
    z = steps * np.uint64(GOLDEN_GAMMA) + np.uint64(state)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_2)
    z = z ^ (z >> np.uint64(31))
    return z, (state + count * GOLDEN_GAMMA) & MASK64


def uniform01(u: np.ndarray) -> np.ndarray:
    """Map u64 draws to [0, 1): u / 2**64 truncated to 53 bits."""
    return (u >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def derive_seed(base: int, stream: int) -> int:
    """Independent per-layer / per-epoch seed from a base seed."""
    state = (int(base) + (int(stream) + 1) * GOLDEN_GAMMA) & MASK64
    return _mix64(state)


def glorot_limit(fan_in: int, fan_out: int) -> float:
    if fan_in < 1 or fan_out < 1:
        raise ArgumentError(f'Glorot fans must be >= 1, got fan_in={fan_in}, fan_out={fan_out}')
    return math.sqrt(6.0 / (fan_in + fan_out))


def glorot_uniform(seed: int, fan_in: int, fan_out: int, *shape: int, dtype=None) -> np.ndarray:
    """I.i.d. uniform on [-L, L), L = sqrt(6 / (fan_in + fan_out)), filled row-major."""
    limit = glorot_limit(fan_in, fan_out)
    count = int(np.prod(shape)) if shape else 1
    u, _ = splitmix64_stream(seed, count)
    values = uniform01(u) * (2.0 * limit) - limit
    return values.reshape(shape).astype(dtype or default_dtype())


def uniform_tensor(seed: int, shape: Sequence[int], low: float = -1.0, high: float = 1.0, dtype=None) -> np.ndarray:
    count = int(np.prod(shape))
    u, _ = splitmix64_stream(seed, count)
    return (low + (high - low) * uniform01(u)).reshape(tuple(shape)).astype(dtype or default_dtype())


class FeedbackMode(models.TextChoices):
    SYMMETRIC = 'symmetric', 'Symmetric (K = M^T)'
    SIGN_CONCORDANT = 'sign_concordant', 'Sign-concordant K'
    TRAINABLE = 'trainable', 'Trainable M, K = M^T'
    FULLY_RANDOM_K = 'fully_random_k', 'Independent random K'


@dataclass(frozen=True)
class ClassifierSeed:
    seed: int
    rows: int
    cols: int
    mode: str = FeedbackMode.SYMMETRIC
    k_seed: Optional[int] = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ArgumentError(f'Classifier shape must be positive, got {self.rows}x{self.cols}')
        if self.mode not in FeedbackMode.values:
            raise ArgumentError(f'Unknown feedback mode: {self.mode}')
        if self.needs_k_seed and self.k_seed is None:
            raise ArgumentError(f'Feedback mode {self.mode} needs its own k_seed')

    @property
    def needs_k_seed(self) -> bool:
        return self.mode in (FeedbackMode.SIGN_CONCORDANT, FeedbackMode.FULLY_RANDOM_K)

    def to_manifest(self) -> dict:
        entry = {'seed': self.seed, 'rows': self.rows, 'cols': self.cols, 'mode': str(self.mode)}
        if self.needs_k_seed:
            entry['k_seed'] = self.k_seed
        return entry

    @classmethod
    def from_manifest(cls, entry: dict) -> 'ClassifierSeed':
        return cls(
            seed=int(entry['seed']),
            rows=int(entry['rows']),
            cols=int(entry['cols']),
            mode=entry['mode'],
            k_seed=int(entry['k_seed']) if entry.get('k_seed') is not None else None,
        )


def make_classifier(spec: ClassifierSeed, dtype=None) -> Tuple[np.ndarray, np.ndarray]:
    """Regenerate (M: C x N, K: N x C) for one local classifier."""
    rows, cols = spec.rows, spec.cols
    M = glorot_uniform(spec.seed, cols, rows, rows, cols, dtype=dtype)
    if spec.mode == FeedbackMode.SIGN_CONCORDANT:
        magnitudes = np.abs(glorot_uniform(spec.k_seed, cols, rows, cols, rows, dtype=dtype))
        K = np.ascontiguousarray(magnitudes * np.sign(M.T))
    elif spec.mode == FeedbackMode.FULLY_RANDOM_K:
        K = glorot_uniform(spec.k_seed, cols, rows, cols, rows, dtype=dtype)
    else:
        K = transpose(M)
    return M, K


def feedback_shape(forward_shape: Sequence[int]) -> Tuple[int, ...]:
    """Backward tensor shape for a forward weight: dense N x M -> M x N, conv swaps channels."""
    if len(forward_shape) == 2:
        out_dim, in_dim = forward_shape
        return (in_dim, out_dim)
    if len(forward_shape) == 4:
        out_ch, in_ch, kh, kw = forward_shape
        return (in_ch, out_ch, kh, kw)
    raise DimensionError('Feedback weights need a dense (rank 2) or conv (rank 4) boundary', forward_shape)


def make_fa_feedback(seed: int, layer_shapes: Iterable[Sequence[int]], dtype=None) -> List[np.ndarray]:
    """One fixed Glorot tensor per boundary, in forward order."""
    feedback = []
    for index, forward_shape in enumerate(layer_shapes):
        if any(int(d) < 1 for d in forward_shape):
            raise DimensionError(f'Boundary {index} has a non-positive dimension', forward_shape)
        shape = feedback_shape(forward_shape)
        receptive = int(np.prod(shape[2:])) if len(shape) == 4 else 1
        fan_in = shape[1] * receptive
        fan_out = shape[0] * receptive
        feedback.append(
            glorot_uniform(derive_seed(seed, index), fan_in, fan_out, *shape, dtype=dtype)
        )
    logger.debug(f'Generated {len(feedback)} feedback-alignment tensors from seed {seed}')
    return feedback
