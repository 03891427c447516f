"""Feed-forward networks used by learning from randomness.

- `EncoderModel`: the trainable representation network.
- `ProjectorModel`: a frozen, randomly initialized target network.
- `PredictorModel`: a small trainable head mapping representations to one
  projector's output space.

All three are stacks of `DenseLayer`s. Parameters are float32 `Tensor`s
named `<model>.layers.<i>.weight|bias`. Projector parameters are made
read-only after construction, so any attempt to update them fails loudly.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np

from lfr_tabular.errors import GradientError, ShapeError
from lfr_tabular.tensor import Tensor, add, matmul, no_grad, relu

logger = logging.getLogger(__name__)

Activation = Literal["relu", "none"]
InitScheme = Literal["default_uniform", "beta", "beta_with_dropout"]

DEFAULT_DROPOUT_RATE = 0.4


@dataclass(frozen=True)
class InitSpec:
    """How a projector's parameters are drawn.

    Attributes:
        scheme: `default_uniform`, `beta` or `beta_with_dropout`.
        dropout_rate: Fraction of weights zeroed; used only by
            `beta_with_dropout`.
        seed: 64-bit seed of the projector's private random stream.
    """

    scheme: InitScheme = "default_uniform"
    dropout_rate: float = DEFAULT_DROPOUT_RATE
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(
                f"dropout_rate must lie in [0, 1), got {self.dropout_rate}"
            )

    def generator(self) -> np.random.Generator:
        """Return the projector's Philox stream."""
        return np.random.Generator(np.random.Philox(key=self.seed))


class DenseLayer:
    """Affine map `x @ weight + bias` followed by an optional ReLU."""

    def __init__(
        self,
        fan_in: int,
        fan_out: int,
        activation: Activation = "relu",
        name: str = "layer",
    ) -> None:
        if fan_in < 1 or fan_out < 1:
            raise ShapeError("Layer widths must be positive", f"{fan_in} -> {fan_out}")
        self.fan_in = fan_in
        self.fan_out = fan_out
        self.activation: Activation = activation
        self.weight = Tensor(
            np.zeros((fan_in, fan_out)), requires_grad=True, name=f"{name}.weight"
        )
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.bias")

    @property
    def frozen(self) -> bool:
        """True once the parameters were made read-only."""
        return not self.weight.data.flags.writeable

    def parameters(self) -> List[Tensor]:
        """Weight and bias."""
        return [self.weight, self.bias]

    def freeze(self) -> None:
        """Make the parameters read-only and gradient-free."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
            p.data.setflags(write=False)

    def forward(self, x: Tensor) -> Tensor:
        """Apply the layer to a batch [m x fan_in]."""
        out = add(matmul(x, self.weight), self.bias)
        return relu(out) if self.activation == "relu" else out


def init_default_uniform(layer: DenseLayer, rng: np.random.Generator) -> None:
    """Draw weights and bias from Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(layer.fan_in)
    layer.weight.data[...] = rng.uniform(-bound, bound, size=layer.weight.shape)
    layer.bias.data[...] = rng.uniform(-bound, bound, size=layer.bias.shape)


def init_beta(layer: DenseLayer, rng: np.random.Generator) -> None:
    """Draw weights as 2*Beta(0.5, 0.5) - 1 (mass near -1 and 1); zero the bias."""
    layer.weight.data[...] = 2.0 * rng.beta(0.5, 0.5, size=layer.weight.shape) - 1.0
    layer.bias.data[...] = 0.0


def apply_weight_dropout(
    layer: DenseLayer, rate: float, rng: np.random.Generator
) -> None:
    """Zero each weight independently with probability `rate`.

    Applied once at construction; the mask is permanent because projectors are
    frozen afterwards.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    mask = rng.random(size=layer.weight.shape) < rate
    layer.weight.data[mask] = 0.0


class FeedForward:
    """An ordered stack of dense layers."""

    kind = "feedforward"

    def __init__(self, layers: Sequence[DenseLayer]) -> None:
        if not layers:
            raise ShapeError("A network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ShapeError(
                    "Consecutive layer widths do not match",
                    f"{prev.fan_out} -> {nxt.fan_in}",
                )
        self.layers = list(layers)

    @property
    def in_dim(self) -> int:
        """Input feature width."""
        return self.layers[0].fan_in

    @property
    def out_dim(self) -> int:
        """Output width."""
        return self.layers[-1].fan_out

    @property
    def widths(self) -> List[int]:
        """Input width followed by every layer's output width."""
        return [self.in_dim] + [layer.fan_out for layer in self.layers]

    def parameters(self) -> List[Tensor]:
        """Every parameter tensor, layer by layer."""
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        """(name, tensor) pairs in a stable order."""
        for i, layer in enumerate(self.layers):
            yield f"layers.{i}.weight", layer.weight
            yield f"layers.{i}.bias", layer.bias

    def zero_grad(self) -> None:
        """Drop accumulated gradients."""
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, trainable: bool) -> None:
        """Switch gradient tracking for every parameter."""
        for p in self.parameters():
            p.requires_grad = trainable
            if not trainable:
                p.grad = None

    def digest(self) -> str:
        """SHA-256 over parameter names, shapes and bytes."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode("utf-8"))
            h.update(str(p.shape).encode("utf-8"))
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Copies of the parameter arrays keyed by name."""
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Overwrite parameters from `state_arrays()` output.

        Raises:
            ShapeError: If a parameter is missing or has the wrong shape.
        """
        for name, p in self.named_parameters():
            if name not in arrays:
                raise ShapeError("Missing parameter", name)
            value = np.asarray(arrays[name])
            if value.shape != p.shape:
                raise ShapeError(
                    "Parameter shape mismatch", f"{name}: {value.shape} vs {p.shape}"
                )
            if not p.data.flags.writeable:
                raise GradientError("Parameter is frozen", name)
            p.data[...] = value

    def forward(self, x: Tensor) -> Tensor:
        """Run a batch [m x in_dim] through every layer.

        Raises:
            ShapeError: If the feature width does not match `in_dim`.
        """
        if len(x.shape) != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"{self.kind} input width mismatch",
                f"expected [m x {self.in_dim}], got {list(x.shape)}",
            )
        out = x
        for layer in self.layers:
            out = layer.forward(out)
        return out

    __call__ = forward


def _stack(
    widths: Sequence[int], prefix: str, final_activation: Activation = "none"
) -> List[DenseLayer]:
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        last = i == len(widths) - 2
        layers.append(
            DenseLayer(
                fan_in,
                fan_out,
                activation=final_activation if last else "relu",
                name=f"{prefix}.layers.{i}",
            )
        )
    return layers


class EncoderModel(FeedForward):
    """The representation network: ReLU hidden layers and a linear output."""

    kind = "encoder"

    @classmethod
    def build(
        cls,
        in_dim: int,
        latent_dim: int,
        hidden: int = 256,
        depth: int = 4,
        rng: Optional[np.random.Generator] = None,
    ) -> "EncoderModel":
        """Create an encoder with `depth` layers and default-uniform init."""
        widths = [in_dim] + [hidden] * (depth - 1) + [latent_dim]
        model = cls(_stack(widths, "encoder"))
        if rng is not None:
            for layer in model.layers:
                init_default_uniform(layer, rng)
        return model

    @property
    def latent_dim(self) -> int:
        """Width of the representation."""
        return self.out_dim


class PredictorModel(FeedForward):
    """A low-capacity head: one linear layer, or one hidden ReLU layer."""

    kind = "predictor"

    @classmethod
    def build(
        cls,
        latent_dim: int,
        out_dim: int,
        hidden: int = 0,
        rng: Optional[np.random.Generator] = None,
        index: int = 0,
    ) -> "PredictorModel":
        """Create a predictor head for projector `index`."""
        widths = [latent_dim, hidden, out_dim] if hidden else [latent_dim, out_dim]
        model = cls(_stack(widths, f"predictor.{index}"))
        if rng is not None:
            for layer in model.layers:
                init_default_uniform(layer, rng)
        return model


class ProjectorModel(FeedForward):
    """A frozen random target network.

    Parameters are drawn once from `init_spec` and then made read-only;
    `forward` never records gradients.
    """

    kind = "projector"

    def __init__(self, layers: Sequence[DenseLayer], init_spec: InitSpec) -> None:
        super().__init__(layers)
        self.init_spec = init_spec
        for layer in self.layers:
            layer.freeze()

    @property
    def frozen(self) -> bool:
        """Always true for a constructed projector."""
        return all(layer.frozen for layer in self.layers)

    @classmethod
    def build(
        cls,
        in_dim: int,
        out_dim: int,
        init_spec: InitSpec,
        hidden: int = 256,
        depth: int = 2,
        index: int = 0,
    ) -> "ProjectorModel":
        """Create and freeze a projector drawn from `init_spec`."""
        widths = [in_dim] + [hidden] * (depth - 1) + [out_dim]
        layers = _stack(widths, f"projector.{index}")
        rng = init_spec.generator()
        for layer in layers:
            if init_spec.scheme == "default_uniform":
                init_default_uniform(layer, rng)
            else:
                init_beta(layer, rng)
                if init_spec.scheme == "beta_with_dropout":
                    apply_weight_dropout(layer, init_spec.dropout_rate, rng)
        return cls(layers, init_spec)

    @classmethod
    def from_arrays(
        cls,
        widths: Sequence[int],
        arrays: Dict[str, np.ndarray],
        init_spec: InitSpec,
        index: int = 0,
    ) -> "ProjectorModel":
        """Rebuild a frozen projector from saved parameter arrays."""
        layers = _stack(widths, f"projector.{index}")
        for i, layer in enumerate(layers):
            layer.weight.data[...] = arrays[f"layers.{i}.weight"]
            layer.bias.data[...] = arrays[f"layers.{i}.bias"]
        return cls(layers, init_spec)

    def set_trainable(self, trainable: bool) -> None:
        """Projectors stay frozen; asking for gradients is an error."""
        if trainable:
            raise GradientError("Projector parameters are frozen")

    def forward(self, x: Tensor) -> Tensor:
        """Gradient-free forward pass."""
        with no_grad():
            return super().forward(x)

    __call__ = forward
