"""Gradient-descent optimizers for encoder and predictor parameters.

Weight decay is coupled L2 regularization: `weight_decay * theta` is added to
the gradient before the moment updates. Moment buffers are float32 arrays
so that they survive a checkpoint round trip bit for bit; the arithmetic
of each step runs in float64.
"""

import abc
import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

from lfr_tabular.config import OptimizerSettings
from lfr_tabular.errors import NumericalError, ShapeError
from lfr_tabular.tensor import Tensor

logger = logging.getLogger(__name__)


class Optimizer(abc.ABC):
    """Base class: owns a parameter list and its per-parameter buffers."""

    kind = "optimizer"

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0

    def zero_grad(self) -> None:
        """Drop every parameter gradient."""
        for p in self.params:
            p.grad = None

    def _checked_grads(self) -> List[Tuple[int, Tensor, np.ndarray]]:
        """Return (index, param, grad) for params with a gradient.

        Raises:
            NumericalError: If a gradient contains NaN or Inf.
            ShapeError: If a gradient's shape differs from its parameter's.
        """
        out = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if p.grad.shape != p.shape:
                raise ShapeError(
                    "Gradient shape mismatch", f"{p.name}: {p.grad.shape} vs {p.shape}"
                )
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(
                    "Non-finite gradient", f"parameter {p.name or f'#{i}'}"
                )
            out.append((i, p, p.grad.astype(np.float64)))
        return out

    def step(self) -> None:
        """Apply one update to every parameter that has a gradient."""
        updates = self._checked_grads()
        self.step_count += 1
        for i, p, g in updates:
            theta = p.data.astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * theta
            p.data[...] = self._update(i, theta, g).astype(p.dtype)

    @abc.abstractmethod
    def _update(self, i: int, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Return the new value of parameter `i`."""

    @abc.abstractmethod
    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Buffers keyed by `<slot>.<index>`."""

    @abc.abstractmethod
    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Restore buffers written by `state_arrays`."""

    def reset(self) -> None:
        """Zero every buffer and the step count."""
        self.step_count = 0
        self.load_state_arrays(
            {k: np.zeros_like(v) for k, v in self.state_arrays().items()}
        )

    def _load_slot(
        self, arrays: Dict[str, np.ndarray], slot: str, target: List[np.ndarray]
    ) -> None:
        for i, buf in enumerate(target):
            key = f"{slot}.{i}"
            if key not in arrays or np.shape(arrays[key]) != buf.shape:
                raise ShapeError("Optimizer buffer mismatch", key)
            buf[...] = arrays[key]


class Adam(Optimizer):
    """Adam with bias correction and coupled L2 weight decay."""

    kind = "adam"

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = eps
        # float32 buffers round-trip exactly through checkpoints; the
        # recurrences below run in float64.
        self.m = [np.zeros(p.shape, dtype=np.float32) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float32) for p in self.params]

    def _update(self, i: int, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        t = self.step_count
        m = self.beta1 * self.m[i].astype(np.float64) + (1.0 - self.beta1) * g
        v = self.beta2 * self.v[i].astype(np.float64) + (1.0 - self.beta2) * g * g
        self.m[i][...] = m
        self.v[i][...] = v
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"m.{i}": m.copy() for i, m in enumerate(self.m)}
        arrays.update({f"v.{i}": v.copy() for i, v in enumerate(self.v)})
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        self._load_slot(arrays, "m", self.m)
        self._load_slot(arrays, "v", self.v)


class SGD(Optimizer):
    """Stochastic gradient descent with optional heavy-ball momentum."""

    kind = "sgd"

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-2,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
    ) -> None:
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum
        self.velocity = [np.zeros(p.shape, dtype=np.float32) for p in self.params]

    def _update(self, i: int, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.momentum:
            g = self.momentum * self.velocity[i].astype(np.float64) + g
            self.velocity[i][...] = g
        return theta - self.lr * g

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {f"velocity.{i}": b.copy() for i, b in enumerate(self.velocity)}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        self._load_slot(arrays, "velocity", self.velocity)


def build_optimizer(settings: OptimizerSettings, params: Sequence[Tensor]) -> Optimizer:
    """Create the optimizer described by `settings`."""
    if settings.kind == "adam":
        return Adam(
            params,
            lr=settings.lr,
            betas=settings.betas,
            eps=settings.eps,
            weight_decay=settings.weight_decay,
        )
    return SGD(
        params,
        lr=settings.lr,
        momentum=settings.momentum,
        weight_decay=settings.weight_decay,
    )
