"""
Optimizers and losses.

Losses return the batch-summed loss together with e_s = dE/ds. Optimizers
receive per-group parameter / gradient dicts and update parameters in place;
under local-error learning every layer is its own group, so each keeps its own
ADAM step count.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .exceptions import ArgumentError, DimensionError

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ADAM_LR = 1e-3


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_update(
    state: AdamState,
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    lr: float = ADAM_LR,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise DimensionError(f'Gradient for {name} does not match its parameter', g.shape, params[name].shape)
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, g in grads.items():
        param = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)


class Adam:
    def __init__(self, lr: float = ADAM_LR, beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.states: Dict[str, AdamState] = {}

    def step(self, group: str, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        state = self.states.setdefault(group, AdamState())
        adam_update(state, params, grads, self.lr, self.beta1, self.beta2, self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, group: str, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if params[name].shape != g.shape:
                raise DimensionError(f'Gradient for {name} does not match its parameter', g.shape, params[name].shape)
            params[name] -= (self.lr * g).astype(params[name].dtype, copy=False)


class GradientRecorder:
    """Captures the gradients a learning rule hands over without applying them."""

    def __init__(self):
        self.grads: Dict[str, Dict[str, np.ndarray]] = {}

    def step(self, group: str, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        recorded = self.grads.setdefault(group, {})
        for name, g in grads.items():
            recorded[name] = recorded.get(name, 0) + np.array(g, copy=True)


def _check_labels(s: np.ndarray, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    if s.ndim != 2 or t.shape[0] != s.shape[0]:
        raise DimensionError('Scores must be batch x C with one label per row', s.shape, t.shape)
    if t.size and (t.min() < 0 or t.max() >= s.shape[1]):
        raise ArgumentError(f'Labels must lie in [0, {s.shape[1]}), got range [{t.min()}, {t.max()}]')
    return t


def softmax(s: np.ndarray) -> np.ndarray:
    shifted = s - s.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_xent(s: np.ndarray, t) -> Tuple[float, np.ndarray]:
    """Sum over the batch of -log p[t]; e_s = p - onehot(t)."""
    t = _check_labels(s, t)
    shifted = s - s.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    rows = np.arange(s.shape[0])
    loss = float(-log_p[rows, t].sum())
    e_s = np.exp(log_p)
    e_s[rows, t] -= 1.0
    return loss, e_s.astype(s.dtype, copy=False)


def squared_hinge(s: np.ndarray, t) -> Tuple[float, np.ndarray]:
    """One-vs-all: E = sum_j max(0, 1 - tau_j s_j)^2 with tau_t = +1, else -1."""
    t = _check_labels(s, t)
    tau = -np.ones_like(s)
    tau[np.arange(s.shape[0]), t] = 1.0
    margin = np.maximum(0.0, 1.0 - tau * s)
    loss = float((margin * margin).sum())
    e_s = -2.0 * tau * margin
    return loss, e_s.astype(s.dtype, copy=False)


LOSSES = {
    'softmax_xent': softmax_xent,
    'squared_hinge': squared_hinge,
}


def get_loss(name: str):
    try:
        return LOSSES[name]
    except KeyError:
        raise ArgumentError(f'Unknown loss "{name}"; expected one of {sorted(LOSSES)}') from None
