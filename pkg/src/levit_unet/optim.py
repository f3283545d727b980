"""
Adam with decoupled weight decay.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .errors import TrainingDivergedError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]], state: AdamState) -> None:
    """One bias-corrected Adam update, plus a separate -lr·wd·param decay term.

    Parameters without a gradient (dead branches) are left untouched. A
    non-finite gradient raises before any parameter is modified.
    """
    for name, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            logger.error(f"Non-finite gradient for parameter '{name}' at step {state.step + 1}")
            raise TrainingDivergedError(f"non-finite gradient for parameter '{name}'")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        grad = grad.astype(np.float32, copy=False)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data, dtype=np.float32)
            v = np.zeros_like(param.data, dtype=np.float32)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        decay = state.lr * state.weight_decay * param.data
        param.data = (param.data - update - decay).astype(np.float32)


class Adam:
    """Convenience wrapper binding AdamState to a fixed set of named parameters."""

    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], state: Optional[AdamState] = None, **hyper):
        self.params: Dict[str, Tensor] = dict(named_params)
        self.state = state if state is not None else AdamState(**hyper)

    def step(self) -> None:
        adam_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
