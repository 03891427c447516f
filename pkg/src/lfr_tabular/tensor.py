"""Dense tensors with define-by-run reverse-mode differentiation.

A `Tensor` wraps a row-major numpy array (float32 unless a dtype is given)
and an optional gradient. Differentiable operations are `Function`
subclasses; applying one records a node on the calling thread's `GradTape`
whenever an input requires a gradient. `backward` replays the tape in
reverse, accumulates gradients into every tensor that requires one and
clears the tape.

Operations preserve the dtype of their inputs, so the same graph can be
evaluated in float64 for finite-difference checks (see `gradcheck`).
Reductions and matrix products accumulate in float64.

Example:
    ```python
    w = Tensor(np.ones((3, 2)), requires_grad=True)
    x = Tensor(np.arange(6).reshape(2, 3))
    loss = relu(x @ w).sum()
    loss.backward()
    print(w.grad)
    ```
"""

import abc
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from lfr_tabular.errors import GradientError, ShapeError

DEFAULT_DTYPE = np.float32
DEFAULT_EPS = 1e-12

Grads = Tuple[Optional[np.ndarray], ...]


class Tensor:
    """A dense array that can take part in gradient computation.

    Attributes:
        data: The values, a numpy array of `dtype`.
        requires_grad: Whether gradients are accumulated for this tensor.
        grad: Gradient array of the same shape, populated by `backward`.
        name: Optional label used in diagnostics (for example parameter names).
    """

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[Any] = None,
    ) -> None:
        """Create a tensor from array-like data.

        Args:
            data: Array-like values; copied into a new array.
            requires_grad: Track gradients for this tensor.
            name: Optional label.
            dtype: numpy float dtype; float32 when omitted.
        """
        self.data: np.ndarray = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.creator: Optional["Function"] = None

    @classmethod
    def _from_op(
        cls, data: np.ndarray, requires_grad: bool, creator: Optional["Function"]
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out.creator = creator
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        """Dimension sizes."""
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        """Number of elements (product of the shape)."""
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        """numpy dtype of the stored values."""
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        """True when the tensor was not produced by a recorded operation."""
        return self.creator is None

    @property
    def T(self) -> "Tensor":
        """Transpose of a 2-D tensor."""
        return transpose(self)

    def item(self) -> float:
        """Return the value of a one-element tensor as a Python float."""
        if self.size != 1:
            raise ShapeError("item() needs a single element", f"shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a copy of the values."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Return a gradient-free tensor sharing no state with this one."""
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        """Drop any accumulated gradient."""
        self.grad = None

    def sum(self) -> "Tensor":
        """Sum of all elements."""
        return sum_all(self)

    def backward(self) -> None:
        """Backpropagate from this scalar tensor; see `backward`."""
        backward(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}, "
            f"requires_grad={self.requires_grad}{label})"
        )


@dataclass
class _Node:
    function: "Function"
    output: Tensor


@dataclass
class GradTape:
    """Ordered record of the operations executed since the last backward.

    A tape belongs to one thread. `enabled` is switched off by `no_grad`.
    """

    nodes: List[_Node] = field(default_factory=list)
    enabled: bool = True

    def record(self, function: "Function", output: Tensor) -> None:
        """Append an executed operation."""
        self.nodes.append(_Node(function, output))

    def clear(self) -> None:
        """Forget every recorded operation."""
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> GradTape:
    """Return the calling thread's tape, creating it on first use."""
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = GradTape()
        _local.tape = tape
    return tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on the calling thread's tape."""
    tape = current_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


class Function(abc.ABC):
    """Base class of differentiable operations.

    `forward` receives the input arrays and returns the output array;
    `backward` receives dL/d(output) and returns one gradient per input
    (None for inputs that need none).
    """

    def __init__(self, *inputs: Tensor) -> None:
        self.inputs = inputs

    @abc.abstractmethod
    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        """Compute the output array."""

    @abc.abstractmethod
    def backward(self, grad: np.ndarray) -> Grads:
        """Map dL/d(output) to dL/d(input) for every input."""

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        """Run the forward pass and record it on the tape when needed."""
        function = cls(*inputs)
        out_data = function.forward(*(t.data for t in inputs), **kwargs)
        tape = current_tape()
        requires_grad = tape.enabled and any(t.requires_grad for t in inputs)
        out = Tensor._from_op(
            out_data, requires_grad, function if requires_grad else None
        )
        if requires_grad:
            tape.record(function, out)
        return out


def _result_dtype(*arrays: np.ndarray) -> np.dtype:
    return np.result_type(*arrays)


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray, **kwargs: Any) -> np.ndarray:
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(
                "matmul dimension mismatch", f"{a.shape} x {b.shape}"
            )
        self.a, self.b = a, b
        dtype = _result_dtype(a, b)
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(dtype)

    def backward(self, grad: np.ndarray) -> Grads:
        g = grad.astype(np.float64)
        da = g @ self.b.astype(np.float64).T
        db = self.a.astype(np.float64).T @ g
        return da, db


class Add(Function):
    """Elementwise sum; `b` may be a row vector broadcast over the rows of `a`."""

    def forward(self, a: np.ndarray, b: np.ndarray, **kwargs: Any) -> np.ndarray:
        broadcast_row = b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]
        if a.shape != b.shape and not broadcast_row:
            raise ShapeError("add shape mismatch", f"{a.shape} + {b.shape}")
        self.broadcast_row = broadcast_row and a.shape != b.shape
        return (a + b).astype(_result_dtype(a, b))

    def backward(self, grad: np.ndarray) -> Grads:
        if self.broadcast_row:
            return grad, grad.sum(axis=0, dtype=np.float64)
        return grad, grad


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray, **kwargs: Any) -> np.ndarray:
        if a.shape != b.shape:
            raise ShapeError("sub shape mismatch", f"{a.shape} - {b.shape}")
        return (a - b).astype(_result_dtype(a, b))

    def backward(self, grad: np.ndarray) -> Grads:
        return grad, -grad


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray, **kwargs: Any) -> np.ndarray:
        if a.shape != b.shape:
            raise ShapeError("mul shape mismatch", f"{a.shape} * {b.shape}")
        self.a, self.b = a, b
        return (a * b).astype(_result_dtype(a, b))

    def backward(self, grad: np.ndarray) -> Grads:
        return grad * self.b, grad * self.a


class Scale(Function):
    def forward(self, a: np.ndarray, alpha: float = 1.0, **kwargs: Any) -> np.ndarray:
        self.alpha = alpha
        return (a * alpha).astype(a.dtype)

    def backward(self, grad: np.ndarray) -> Grads:
        return (grad * self.alpha,)


class Square(Function):
    def forward(self, a: np.ndarray, **kwargs: Any) -> np.ndarray:
        self.a = a
        return a * a

    def backward(self, grad: np.ndarray) -> Grads:
        return (2.0 * grad * self.a,)


class ReLU(Function):
    """max(0, x); the subgradient at exactly 0 is 0."""

    def forward(self, a: np.ndarray, **kwargs: Any) -> np.ndarray:
        self.mask = a > 0
        return np.where(self.mask, a, np.zeros((), dtype=a.dtype))

    def backward(self, grad: np.ndarray) -> Grads:
        return (np.where(self.mask, grad, 0.0),)


class SumAll(Function):
    def forward(self, a: np.ndarray, **kwargs: Any) -> np.ndarray:
        self.shape = a.shape
        return np.asarray(a.sum(dtype=np.float64), dtype=a.dtype)

    def backward(self, grad: np.ndarray) -> Grads:
        return (np.broadcast_to(grad, self.shape).copy(),)


class Transpose(Function):
    def forward(self, a: np.ndarray, **kwargs: Any) -> np.ndarray:
        if a.ndim != 2:
            raise ShapeError("transpose needs a 2-D tensor", f"shape {a.shape}")
        return np.ascontiguousarray(a.T)

    def backward(self, grad: np.ndarray) -> Grads:
        return (np.ascontiguousarray(grad.T),)


class RowL2Normalize(Function):
    """Divide every row by max(||row||_2, eps)."""

    def forward(
        self, a: np.ndarray, eps: float = DEFAULT_EPS, **kwargs: Any
    ) -> np.ndarray:
        if a.ndim != 2:
            raise ShapeError("row_l2_normalize needs a 2-D tensor", f"shape {a.shape}")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        a64 = a.astype(np.float64)
        norms = np.sqrt(np.sum(a64 * a64, axis=1, keepdims=True))
        self.clamped = norms < eps
        self.denom = np.where(self.clamped, eps, norms)
        self.out = a64 / self.denom
        return self.out.astype(a.dtype)

    def backward(self, grad: np.ndarray) -> Grads:
        g = grad.astype(np.float64)
        radial = np.sum(g * self.out, axis=1, keepdims=True)
        normalized = (g - self.out * radial) / self.denom
        # Clamped rows were divided by the constant eps.
        return (np.where(self.clamped, g / self.denom, normalized),)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m x p] and b [p x n]."""
    return MatMul.apply(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a 1-D `b` is broadcast over the rows of a 2-D `a`."""
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference of same-shaped tensors."""
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shaped tensors."""
    return Mul.apply(a, b)


def scale(a: Tensor, alpha: float) -> Tensor:
    """Multiply every element by a constant."""
    return Scale.apply(a, alpha=alpha)


def square(a: Tensor) -> Tensor:
    """Elementwise square."""
    return Square.apply(a)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    return ReLU.apply(a)


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, accumulated in float64."""
    return SumAll.apply(a)


def transpose(a: Tensor) -> Tensor:
    """Transpose of a 2-D tensor."""
    return Transpose.apply(a)


def row_l2_normalize(a: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Scale each row to unit L2 norm; rows with norm < eps are divided by eps."""
    return RowL2Normalize.apply(a, eps=eps)


def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar loss through the current tape.

    Every tensor on the path to `loss` that requires a gradient receives one
    (leaf gradients accumulate across calls until cleared). A recorded tensor
    that requires a gradient but does not reach `loss` gets zeros. The tape is
    cleared afterwards, so a second call without a new forward pass fails.

    Raises:
        GradientError: If `loss` is not a scalar, the tape is empty, or the
            loss does not depend on any tensor that requires a gradient.
    """
    tape = current_tape()
    if loss.size != 1:
        raise GradientError("backward() needs a scalar loss", f"shape {loss.shape}")
    if not tape.nodes:
        raise GradientError(
            "Gradient tape is empty",
            "backward() needs a fresh forward pass since the last call",
        )
    if not loss.requires_grad:
        tape.clear()
        raise GradientError(
            "Loss does not require a gradient",
            "no tensor on its path has requires_grad=True",
        )
    pending: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    try:
        for node in reversed(tape.nodes):
            grad = pending.pop(id(node.output), None)
            if grad is None:
                continue
            node.output.grad = grad
            input_grads = node.function.backward(grad)
            for tensor, input_grad in zip(node.function.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                input_grad = np.asarray(input_grad).astype(tensor.dtype, copy=False)
                if tensor.is_leaf:
                    if tensor.grad is None:
                        tensor.grad = input_grad.copy()
                    else:
                        tensor.grad = tensor.grad + input_grad
                else:
                    key = id(tensor)
                    if key in pending:
                        pending[key] = pending[key] + input_grad
                    else:
                        pending[key] = input_grad
        for node in tape.nodes:
            for tensor in (*node.function.inputs, node.output):
                if tensor.requires_grad and tensor.grad is None:
                    tensor.grad = np.zeros(tensor.shape, dtype=tensor.dtype)
    finally:
        tape.clear()


def numerical_gradient(
    fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-3
) -> np.ndarray:
    """Central finite-difference gradient of `fn()` with respect to `tensor`.

    `fn` is re-evaluated under `no_grad` with each element perturbed by +h
    and -h; the tensor is restored afterwards.
    """
    grad = np.zeros(tensor.shape, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = float(fn().item())
            flat[i] = original - h
            lower = float(fn().item())
            flat[i] = original
            grad.reshape(-1)[i] = (upper - lower) / (2.0 * h)
    return grad


def gradcheck(
    fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-3
) -> float:
    """Compare analytic and finite-difference gradients.

    Args:
        fn: Zero-argument callable building a scalar loss from `tensors`.
        tensors: Tensors with requires_grad=True; use float64 tensors for an
            accurate oracle.
        h: Finite-difference step.

    Returns:
        The largest norm-wise relative error over `tensors`.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn()
    backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        numeric = numerical_gradient(fn, t, h)
        scale_ = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale_))
    return worst
