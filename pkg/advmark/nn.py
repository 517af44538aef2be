"""Parameter collections, initialization and the optimizer shared by both models"""
import logging
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from advmark import ops
from advmark.errors import ShapeError
from advmark.tensor import Tensor

logger = logging.getLogger(__name__)


class ModelParams(object):
    """Named, shaped float64 parameter arrays of one model

    Names are dotted paths such as ``encoder.conv0.weight``. Iteration order is
    insertion order, which is also the order tensors are written to disk.

    Args:
        arrays: Initial name -> array mapping.
        trained: Whether these parameters are the result of a training run.
    """

    def __init__(self, arrays: Optional[Mapping[str, np.ndarray]] = None, trained=False):
        self.arrays: Dict[str, np.ndarray] = {}
        for name, value in (arrays or {}).items():
            self.arrays[name] = np.array(value, dtype=np.float64)
        self.trained = trained

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self.arrays[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: value.shape for name, value in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            {name: value.copy() for name, value in self.arrays.items()},
            trained=self.trained,
        )

    def prefixed(self, prefix: str) -> "ModelParams":
        """The subset of parameters under ``prefix.``, with the prefix removed"""
        start = prefix + "."
        return ModelParams(
            {n[len(start) :]: v for n, v in self.arrays.items() if n.startswith(start)},
            trained=self.trained,
        )

    def leaves(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        """Wrap every array as a tensor leaf (sharing memory)"""
        return {
            name: Tensor(value, requires_grad=requires_grad, name=name)
            for name, value in self.arrays.items()
        }

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of names, shapes and values"""
        if list(self.arrays) != list(other.arrays):
            return False
        return all(
            self.arrays[n].shape == other.arrays[n].shape
            and np.array_equal(self.arrays[n], other.arrays[n])
            for n in self.arrays
        )


def init_conv(
    params: ModelParams,
    name: str,
    in_channels: int,
    out_channels: int,
    rng: np.random.Generator,
    kernel: int = 3,
    gain: float = 1.0,
):
    """He-normal conv weights and zero bias under ``name.weight`` / ``name.bias``"""
    fan_in = in_channels * kernel * kernel
    std = gain * np.sqrt(2.0 / fan_in)
    params[f"{name}.weight"] = rng.normal(
        0.0, std, size=(out_channels, in_channels, kernel, kernel)
    )
    params[f"{name}.bias"] = np.zeros(out_channels)


def init_linear(
    params: ModelParams,
    name: str,
    in_features: int,
    out_features: int,
    rng: np.random.Generator,
    bias: bool = True,
    gain: float = 1.0,
):
    std = gain * np.sqrt(1.0 / in_features)
    params[f"{name}.weight"] = rng.normal(0.0, std, size=(out_features, in_features))
    if bias:
        params[f"{name}.bias"] = np.zeros(out_features)


def conv_block(
    x: Tensor, leaves: Mapping[str, Tensor], name: str, stride: int = 1
) -> Tensor:
    """3×3 conv (zero padding 1) followed by relu"""
    out = ops.conv2d(
        x, leaves[f"{name}.weight"], leaves[f"{name}.bias"], stride=stride, padding=1
    )
    return ops.relu(out)


def check_image_batch(batch: Tensor, channels: int, op: str):
    if batch.ndim != 4 or batch.shape[1] != channels:
        raise ShapeError(op, batch.shape, (None, channels, None, None))


class SGD(object):
    """Stochastic gradient descent with momentum, updating arrays in place

    Args:
        params: The parameters to optimize.
        lr: Learning rate.
        momentum: Momentum coefficient.
    """

    def __init__(
        self,
        params: ModelParams,
        lr: float,
        momentum: float = 0.9,
    ):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.names = list(params)
        self.velocity = {n: np.zeros_like(params[n]) for n in self.names}

    def step(self, grads: Mapping[str, np.ndarray]):
        for name in self.names:
            grad = grads.get(name)
            if grad is None:
                continue
            velocity = self.velocity[name]
            velocity *= self.momentum
            velocity += grad
            self.params[name] -= self.lr * velocity
