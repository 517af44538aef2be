"""The op set the watermark codec, face embedder and attack are built from.

Convolution layout is N×C×H×W everywhere. Images enter as H×W×C arrays and
are moved into that layout with `image_to_batch`.
"""
import logging
from typing import Any, Dict, Optional, Sequence, Type

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from advmark.errors import DomainError, ShapeError
from advmark.tensor import ArrayLike, Function, Tensor, as_tensor

logger = logging.getLogger(__name__)


def _unbroadcast(grad: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape)


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return (
            _unbroadcast(grad, a.shape) if self.needs_grad[0] else None,
            _unbroadcast(grad, b.shape) if self.needs_grad[1] else None,
        )


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return (
            _unbroadcast(grad, a.shape) if self.needs_grad[0] else None,
            _unbroadcast(-grad, b.shape) if self.needs_grad[1] else None,
        )


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return (
            _unbroadcast(grad * b.data, a.shape) if self.needs_grad[0] else None,
            _unbroadcast(grad * a.data, b.shape) if self.needs_grad[1] else None,
        )


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        grad_a = grad_b = None
        if self.needs_grad[0]:
            grad_a = _unbroadcast(grad / b.data, a.shape)
        if self.needs_grad[1]:
            grad_b = _unbroadcast(-grad * a.data / (b.data * b.data), b.shape)
        return grad_a, grad_b


class ScalarMul(Function):
    name = "scalar_mul"

    def forward(self, x, scalar: float = 1.0):
        self.scalar = float(scalar)
        return x * self.scalar

    def backward(self, grad):
        return (grad * self.scalar,)


class Relu(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)

    def kink_signature(self):
        return self.mask


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        # Split by sign so exp never overflows
        out = np.empty_like(x)
        positive = x >= 0
        out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
        exp_x = np.exp(x[~positive])
        out[~positive] = exp_x / (1.0 + exp_x)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    name = "tanh"

    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Exp(Function):
    name = "exp"

    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    name = "log"

    def forward(self, x):
        if np.any(x <= 0):
            raise DomainError("log: input must be strictly positive")
        return np.log(x)

    def backward(self, grad):
        return (grad / self.inputs[0].data,)


class Clamp(Function):
    """Clip to [lo, hi]; the gradient is zero on and outside the bounds"""

    name = "clamp"

    def forward(self, x, lo: float = 0.0, hi: float = 1.0):
        if lo > hi:
            raise DomainError(f"clamp: lo ({lo}) must not exceed hi ({hi})")
        self.inside = (x > lo) & (x < hi)
        # 0 below, 1 inside, 2 above. Boundaries count as outside
        self.pattern = np.where(x <= lo, 0, np.where(x >= hi, 2, 1)).astype(np.int8)
        return np.clip(x, lo, hi)

    def backward(self, grad):
        return (grad * self.inside,)

    def kink_signature(self):
        return self.pattern


class Sum(Function):
    name = "sum"

    def forward(self, x, axis=None, keepdims: bool = False):
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, x, axis=None, keepdims: bool = False):
        self.axis = axis
        self.keepdims = keepdims
        out = x.sum(axis=axis, keepdims=keepdims)
        self.count = x.size // max(1, np.asarray(out).size)
        return np.asarray(out) / self.count

    def backward(self, grad):
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, shape).copy(),)


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape=()):
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(self.name, x.shape, shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, x, axes=None):
        if axes is not None and sorted(axes) != list(range(x.ndim)):
            raise ShapeError(self.name, x.shape, axes)
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
        return np.ascontiguousarray(x.transpose(self.axes))

    def backward(self, grad):
        return (grad.transpose(np.argsort(self.axes)),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis: int = 0):
        ndim = arrays[0].ndim
        axis = axis % ndim
        for other in arrays[1:]:
            if other.ndim != ndim or any(
                other.shape[i] != arrays[0].shape[i] for i in range(ndim) if i != axis
            ):
                raise ShapeError(self.name, arrays[0].shape, other.shape)
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        parts = np.split(grad, self.splits, axis=self.axis)
        return tuple(
            part if needed else None for part, needed in zip(parts, self.needs_grad)
        )


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(self.name, a.shape, b.shape)
        return a @ b

    def backward(self, grad):
        a, b = self.inputs
        return (
            grad @ b.data.T if self.needs_grad[0] else None,
            a.data.T @ grad if self.needs_grad[1] else None,
        )


class Linear(Function):
    """x @ weight.T + bias, with x of shape N×in and weight of shape out×in"""

    name = "linear"

    def forward(self, x, weight, bias=None):
        if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
            raise ShapeError(self.name, x.shape, weight.shape)
        out = x @ weight.T
        if bias is not None:
            if bias.shape != (weight.shape[0],):
                raise ShapeError(self.name, weight.shape, bias.shape)
            out = out + bias
        return out

    def backward(self, grad):
        x, weight = self.inputs[0], self.inputs[1]
        grads = [
            grad @ weight.data if self.needs_grad[0] else None,
            grad.T @ x.data if self.needs_grad[1] else None,
        ]
        if len(self.inputs) == 3:
            grads.append(grad.sum(axis=0) if self.needs_grad[2] else None)
        return tuple(grads)


class Conv2d(Function):
    """2-D cross-correlation with square kernels, stride and zero padding

    x is N×C×H×W, weight is O×C×k×k, bias has O entries.
    """

    name = "conv2d"

    def forward(self, x, weight, bias=None, stride: int = 1, padding: int = 0):
        if (
            x.ndim != 4
            or weight.ndim != 4
            or x.shape[1] != weight.shape[1]
            or weight.shape[2] != weight.shape[3]
        ):
            raise ShapeError(self.name, x.shape, weight.shape)
        if bias is not None and bias.shape != (weight.shape[0],):
            raise ShapeError(self.name, weight.shape, bias.shape)
        if stride < 1 or padding < 0:
            raise DomainError(
                f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}"
            )

        k = weight.shape[2]
        _, _, height, width = x.shape
        if height + 2 * padding < k or width + 2 * padding < k:
            raise ShapeError(self.name, x.shape, weight.shape)

        padded = x
        if padding:
            padded = np.pad(
                x, ((0, 0), (0, 0), (padding, padding), (padding, padding))
            )
        # N×C×Ho×Wo×k×k view over the padded input
        windows = sliding_window_view(padded, (k, k), axis=(2, 3))[
            :, :, ::stride, ::stride
        ]
        out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias[None, :, None, None]

        self.stride = stride
        self.padding = padding
        self.padded_shape = padded.shape
        self.windows = windows
        return np.ascontiguousarray(out)

    def backward(self, grad):
        x, weight = self.inputs[0], self.inputs[1]
        k = weight.shape[2]
        s, p = self.stride, self.padding
        out_h, out_w = grad.shape[2], grad.shape[3]

        grad_x = grad_w = grad_b = None
        if self.needs_grad[0]:
            grad_padded = np.zeros(self.padded_shape)
            for i in range(k):
                for j in range(k):
                    # N×Ho×Wo×C contribution of kernel tap (i, j)
                    tap = np.tensordot(grad, weight.data[:, :, i, j], axes=([1], [0]))
                    grad_padded[
                        :, :, i : i + s * out_h : s, j : j + s * out_w : s
                    ] += tap.transpose(0, 3, 1, 2)
            height, width = x.shape[2], x.shape[3]
            grad_x = grad_padded[:, :, p : p + height, p : p + width]
        if self.needs_grad[1]:
            grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        if len(self.inputs) == 3 and self.needs_grad[2]:
            grad_b = grad.sum(axis=(0, 2, 3))

        grads = [grad_x, grad_w]
        if len(self.inputs) == 3:
            grads.append(grad_b)
        return tuple(grads)


class GlobalAvgPool(Function):
    name = "global_avg_pool"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(self.name, x.shape)
        self.count = x.shape[2] * x.shape[3]
        return x.sum(axis=(2, 3)) / self.count

    def backward(self, grad):
        shape = self.inputs[0].shape
        return (np.broadcast_to(grad[:, :, None, None] / self.count, shape).copy(),)


class L2Norm(Function):
    name = "l2_norm"

    def forward(self, x, axis=None, keepdims: bool = False):
        self.axis = axis
        self.keepdims = keepdims
        self.out = np.sqrt(np.asarray((x * x).sum(axis=axis, keepdims=keepdims)))
        return self.out

    def backward(self, grad):
        x = self.inputs[0].data
        out = self.out
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
            out = np.expand_dims(out, self.axis)
        # The norm is not differentiable at zero; use the zero subgradient there
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, grad * x / safe, 0.0),)


class BCEWithLogits(Function):
    """Mean bitwise binary cross-entropy on logits, in log-sum-exp form"""

    name = "bce_loss"

    def forward(self, logits, targets):
        if logits.shape != targets.shape:
            raise ShapeError(self.name, logits.shape, targets.shape)
        if not np.all((targets == 0.0) | (targets == 1.0)):
            raise DomainError("bce_loss: targets must be 0 or 1")
        losses = (
            np.maximum(logits, 0.0)
            - logits * targets
            + np.log1p(np.exp(-np.abs(logits)))
        )
        return np.asarray(losses.mean())

    def backward(self, grad):
        logits, targets = self.inputs[0].data, self.inputs[1].data
        n = logits.size
        probs = np.empty_like(logits)
        positive = logits >= 0
        probs[positive] = 1.0 / (1.0 + np.exp(-logits[positive]))
        exp_l = np.exp(logits[~positive])
        probs[~positive] = exp_l / (1.0 + exp_l)
        return (
            grad * (probs - targets) / n if self.needs_grad[0] else None,
            grad * (-logits) / n if self.needs_grad[1] else None,
        )


class CrossEntropy(Function):
    """Mean softmax cross-entropy of N×K logits against integer labels"""

    name = "cross_entropy"

    def forward(self, logits, labels=None):
        labels = np.asarray(labels, dtype=np.int64)
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError(self.name, logits.shape, labels.shape)
        if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
            raise DomainError("cross_entropy: label out of range")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_z
        self.labels = labels
        self.probs = np.exp(log_probs)
        rows = np.arange(logits.shape[0])
        return np.asarray(-log_probs[rows, labels].mean())

    def backward(self, grad):
        n = self.probs.shape[0]
        d_logits = self.probs.copy()
        d_logits[np.arange(n), self.labels] -= 1.0
        return (grad * d_logits / n,)


# Functional wrappers


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Add.apply(a, b)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Sub.apply(a, b)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Mul.apply(a, b)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Div.apply(a, b)


def scalar_mul(x: ArrayLike, scalar: float) -> Tensor:
    return ScalarMul.apply(x, scalar=scalar)


def relu(x: ArrayLike) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: ArrayLike) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x: ArrayLike) -> Tensor:
    return Tanh.apply(x)


def exp(x: ArrayLike) -> Tensor:
    return Exp.apply(x)


def log(x: ArrayLike) -> Tensor:
    return Log.apply(x)


def clamp(x: ArrayLike, lo: float, hi: float) -> Tensor:
    return Clamp.apply(x, lo=lo, hi=hi)


def sum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(x, axes=axes)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    if bias is None:
        return Linear.apply(x, weight)
    return Linear.apply(x, weight, bias)


def conv2d(
    x: ArrayLike,
    weight: ArrayLike,
    bias: Optional[ArrayLike] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    if bias is None:
        return Conv2d.apply(x, weight, stride=stride, padding=padding)
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def global_avg_pool(x: ArrayLike) -> Tensor:
    return GlobalAvgPool.apply(x)


def l2_norm(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return L2Norm.apply(x, axis=axis, keepdims=keepdims)


def normalize(x: ArrayLike, axis: int = -1) -> Tensor:
    """Scale `x` to unit L2 norm along `axis`"""
    return div(x, l2_norm(x, axis=axis, keepdims=True))


def cross_entropy(logits: ArrayLike, labels: Sequence[int]) -> Tensor:
    return CrossEntropy.apply(logits, labels=np.asarray(labels))


def image_to_batch(image: ArrayLike) -> Tensor:
    """H×W×C image (or N×H×W×C stack) to the N×C×H×W convolution layout"""
    image = as_tensor(image)
    if image.ndim == 3:
        image = reshape(image, (1,) + image.shape)
    if image.ndim != 4:
        raise ShapeError("image_to_batch", image.shape)
    return transpose(image, (0, 3, 1, 2))


def batch_to_image(batch: ArrayLike) -> Tensor:
    """N×C×H×W back to N×H×W×C (or H×W×C when N is 1)"""
    batch = as_tensor(batch)
    if batch.ndim != 4:
        raise ShapeError("batch_to_image", batch.shape)
    images = transpose(batch, (0, 2, 3, 1))
    if images.shape[0] == 1:
        return reshape(images, images.shape[1:])
    return images


# Losses and similarity


def cosine_similarity(a: ArrayLike, b: ArrayLike) -> Tensor:
    """aᵀb / (‖a‖‖b‖) for two vectors of equal length

    Raises:
        ShapeError: If the vectors differ in length.
        DomainError: If either vector has zero norm.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.size != b.size:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    a = reshape(a, (a.size,))
    b = reshape(b, (b.size,))
    norm_a = l2_norm(a)
    norm_b = l2_norm(b)
    if norm_a.item() == 0.0 or norm_b.item() == 0.0:
        raise DomainError("cosine_similarity: zero-norm input (degenerate embedding)")
    return div(sum(mul(a, b)), mul(norm_a, norm_b))


def mse_loss(x: ArrayLike, y: ArrayLike) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError("mse_loss", x.shape, y.shape)
    diff = sub(x, y)
    return mean(mul(diff, diff))


def bce_loss(logits: ArrayLike, targets: ArrayLike) -> Tensor:
    return BCEWithLogits.apply(logits, targets)


OPS: Dict[str, Type[Function]] = {
    "conv2d": Conv2d,
    "linear": Linear,
    "matmul": MatMul,
    "relu": Relu,
    "sigmoid": Sigmoid,
    "tanh": Tanh,
    "exp": Exp,
    "log": Log,
    "add": Add,
    "sub": Sub,
    "mul": Mul,
    "div": Div,
    "scalar_mul": ScalarMul,
    "clamp": Clamp,
    "concat": Concat,
    "mean": Mean,
    "sum": Sum,
    "global_avg_pool": GlobalAvgPool,
    "l2_norm": L2Norm,
    "reshape": Reshape,
    "transpose": Transpose,
}


def forward_op(kind: str, *inputs: ArrayLike, **attrs: Any) -> Tensor:
    """Run the op registered under `kind` on `inputs`

    Raises:
        DomainError: If no op is registered under that name.
    """
    try:
        op = OPS[kind]
    except KeyError:
        raise DomainError(f"Unknown op kind '{kind}'")
    return op.apply(*inputs, **attrs)
