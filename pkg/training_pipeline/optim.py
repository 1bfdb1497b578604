"""Adam with global-norm gradient clipping."""

import logging
from typing import Dict, Mapping, Tuple

import numpy as np

from tensor_engine import ParameterSet

logger = logging.getLogger(__name__)


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return dict(grads), total
    factor = max_norm / total
    return {name: g * factor for name, g in grads.items()}, total


class Adam:
    def __init__(self, params: ParameterSet, learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.m = {name: np.zeros_like(t.data, dtype=np.float64) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data, dtype=np.float64) for name, t in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for name, t in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(t.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * np.square(g)
            update = (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + self.eps)
            t.data = (t.data - self.learning_rate * update).astype(np.float32)
