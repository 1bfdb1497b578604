"""Named, seeded collections of learnable tensors."""

import logging
from typing import Dict, Iterator, List, Mapping, Tuple

import numpy as np

from .main import ShapeMismatch, Tensor

logger = logging.getLogger(__name__)

EMBEDDING_STD = 0.02


class ParameterSet:
    """Ordered name → Tensor registry.

    Tensors are drawn from one seeded generator in registration order, so the
    same seed and the same registration sequence give identical parameters.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._tensors: Dict[str, Tensor] = {}

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"Parameter already registered: {name}")
        t = Tensor(data.astype(np.float32), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def matrix(self, name: str, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
        """Glorot-uniform [fan_in × fan_out] weight, scaled by ``gain``."""
        bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
        return self._register(name, self.rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def bias(self, name: str, width: int) -> Tensor:
        return self._register(name, np.zeros((1, width)))

    def embedding(self, name: str, rows: int, width: int) -> Tensor:
        return self._register(name, self.rng.normal(0.0, EMBEDDING_STD, size=(rows, width)))

    def constant(self, name: str, shape: Tuple[int, ...], value: float = 0.0) -> Tensor:
        return self._register(name, np.full(shape, value))

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._tensors.items())

    def tensors(self) -> List[Tensor]:
        return list(self._tensors.values())

    def with_prefix(self, prefix: str) -> List[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    @property
    def element_count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Replace every tensor's values; names and shapes must match exactly.

        Nothing is modified unless the whole state validates.
        """
        from .checkpoint import MissingTensor, UnexpectedTensor

        missing = [n for n in self._tensors if n not in state]
        if missing:
            raise MissingTensor(f"Checkpoint lacks {len(missing)} tensor(s): {', '.join(missing)}")
        extra = [n for n in state if n not in self._tensors]
        if extra:
            raise UnexpectedTensor(f"Checkpoint has {len(extra)} unknown tensor(s): {', '.join(extra)}")
        mismatched = [
            f"{n} expected {self._tensors[n].shape} got {tuple(np.shape(state[n]))}"
            for n in self._tensors if tuple(np.shape(state[n])) != self._tensors[n].shape
        ]
        if mismatched:
            raise ShapeMismatch("Checkpoint shape mismatch: " + "; ".join(mismatched))
        for name, t in self._tensors.items():
            t.data = np.array(state[name], dtype=np.float32)
        logger.debug(f"Loaded {len(self._tensors)} tensors into parameter set")
