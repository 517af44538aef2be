"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops executed while a `Tape` is active (``with Tape() as tape: ...``) are
recorded whenever one of their inputs requires a gradient. The active tape is
tracked per thread, so separate threads can build and differentiate separate
graphs over shared read-only parameter arrays.
"""
import logging
import threading
from typing import (
    Any,
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from advmark.errors import DomainError

logger = logging.getLogger(__name__)

_local = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    """Returns the innermost tape entered on this thread, if any"""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor(object):
    """A float64 array that may take part in differentiation

    Args:
        data: Anything numpy can turn into a float64 array. Float64 arrays are
            wrapped without copying.
        requires_grad: Whether gradients should be tracked for this tensor.
        name: Optional label, used in error messages and by `grad_check`.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str = None):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DomainError(
                f"item() needs a single-element tensor, got shape {self.shape}"
            )
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's data, outside of any graph"""
        return Tensor(self.data)

    # Arithmetic sugar. The op implementations live in advmark.ops

    def __add__(self, other: ArrayLike) -> "Tensor":
        from advmark import ops

        return ops.add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        from advmark import ops

        return ops.add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        from advmark import ops

        return ops.sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        from advmark import ops

        return ops.sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        from advmark import ops

        if isinstance(other, (int, float)):
            return ops.scalar_mul(self, other)
        return ops.mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        from advmark import ops

        return ops.div(self, other)

    def __neg__(self) -> "Tensor":
        from advmark import ops

        return ops.scalar_mul(self, -1.0)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap `value` as a constant tensor unless it already is one"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Function(object):
    """A differentiable op

    Subclasses implement `forward` on plain arrays and `backward`, which maps the
    gradient of the output to one gradient per input (None where the input
    does not require one).
    """

    name = "op"

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.needs_grad = tuple(t.requires_grad for t in inputs)
        self.output: Optional[Tensor] = None

    def forward(self, *arrays: np.ndarray, **attrs: Any) -> np.ndarray:
        raise NotImplementedError(f"{self.name}: forward not implemented")

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError(f"{self.name}: backward not implemented")

    def kink_signature(self) -> Optional[np.ndarray]:
        """Activation pattern of a piecewise op (None for smooth ops)

        Two evaluations with equal signatures lie on the same smooth piece.
        """
        return None

    @classmethod
    def apply(cls, *inputs: ArrayLike, **attrs: Any) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(*tensors)
        out_data = fn.forward(*(t.data for t in tensors), **attrs)
        out = Tensor(out_data, requires_grad=any(fn.needs_grad))

        tape = active_tape()
        if tape is not None and out.requires_grad:
            fn.output = out
            tape.record(fn)
        return out


class Tape(object):
    """Ordered record of the ops executed while it was active

    Use as a context manager. Recording order is execution order, which is
    already a topological order of the graph.
    """

    def __init__(self):
        self.records: List[Function] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            # Out-of-order exit. Remove wherever it sits
            try:
                stack.remove(self)
            except ValueError:
                pass

    def record(self, fn: Function):
        self.records.append(fn)

    def kink_signatures(self) -> List[np.ndarray]:
        """Activation patterns of every recorded piecewise op, in order"""
        signatures = []
        for fn in self.records:
            signature = fn.kink_signature()
            if signature is not None:
                signatures.append(signature)
        return signatures

    def leaves(self) -> List[Tensor]:
        """Tensors requiring a gradient that were consumed but not produced here"""
        produced = {id(fn.output) for fn in self.records}
        seen = set()
        leaves = []
        for fn in self.records:
            for t in fn.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    leaves.append(t)
        return leaves

    def backward(
        self, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None
    ) -> Dict[Tensor, np.ndarray]:
        """Compute the gradient of a scalar `loss` w.r.t. leaf tensors

        Args:
            loss: A single-element tensor computed under this tape.
            wrt: The leaves to return gradients for. Defaults to every leaf
                requiring a gradient that appears on the tape.

        Returns:
            A dict from leaf tensor to its gradient array. Leaves that the loss
            does not depend on get a zero gradient.

        Raises:
            DomainError: If `loss` is not a scalar.
        """
        if loss.data.size != 1:
            raise DomainError(
                f"backward: loss must be a scalar, got shape {loss.shape}"
            )

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for fn in reversed(self.records):
            grad = grads.pop(id(fn.output), None)
            if grad is None:
                # The loss does not depend on this op
                continue

            input_grads = fn.backward(grad)
            for tensor, needed, input_grad in zip(
                fn.inputs, fn.needs_grad, input_grads
            ):
                if not needed or input_grad is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + input_grad
                else:
                    grads[key] = input_grad

        targets = list(wrt) if wrt is not None else self.leaves()
        result = {}
        for tensor in targets:
            grad = grads.get(id(tensor))
            if grad is None:
                grad = np.zeros_like(tensor.data)
            result[tensor] = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
        return result


def backward(
    tape: Tape, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None
) -> Dict[Tensor, np.ndarray]:
    """Gradient of `loss` w.r.t. the leaves recorded on `tape`"""
    return tape.backward(loss, wrt=wrt)


def _signatures_match(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    builder: Callable[[Dict[str, Tensor]], Tensor],
    point: Mapping[str, np.ndarray],
    fd_step: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> Optional[float]:
    """Compare analytic gradients against central finite differences

    Args:
        builder: Builds a scalar tensor from a dict of named leaf tensors.
        point: Named arrays at which to evaluate the gradient.
        fd_step: Finite-difference step.
        tolerance: Errors above this are logged as a warning.
        max_coords: If set, probe at most this many coordinates per leaf, drawn
            from a generator seeded with `seed`.
        seed: Seed for coordinate sampling.

    Returns:
        The maximum over probed coordinates of
        |analytic - numeric| / max(1, |numeric|), or None if every probed
        coordinate sits on a relu/clamp kink (the perturbation changes which
        piece of the function is active).

    Raises:
        DomainError: If the builder does not produce a scalar.
    """
    base_point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}

    def evaluate(values: Mapping[str, np.ndarray]):
        leaves = {
            k: Tensor(v, requires_grad=True, name=k) for k, v in values.items()
        }
        with Tape() as tape:
            out = builder(leaves)
        if out.data.size != 1:
            raise DomainError(
                f"grad_check: builder output must be a scalar, got shape {out.shape}"
            )
        return leaves, tape, out

    leaves, tape, out = evaluate(base_point)
    analytic = tape.backward(out, wrt=leaves.values())
    base_signature = tape.kink_signatures()

    rng = np.random.default_rng(seed)
    max_error = None
    skipped = 0
    for name, value in base_point.items():
        grad = analytic[leaves[name]].reshape(-1)
        coords = np.arange(value.size)
        if max_coords is not None and value.size > max_coords:
            coords = np.sort(rng.choice(value.size, size=max_coords, replace=False))

        for coord in coords:
            samples = []
            reliable = True
            for direction in (1.0, -1.0):
                shifted = dict(base_point)
                probe = value.copy().reshape(-1)
                probe[coord] += direction * fd_step
                shifted[name] = probe.reshape(value.shape)
                _, probe_tape, probe_out = evaluate(shifted)
                if not _signatures_match(
                    base_signature, probe_tape.kink_signatures()
                ):
                    reliable = False
                    break
                samples.append(probe_out.item())

            if not reliable:
                skipped += 1
                continue

            numeric = (samples[0] - samples[1]) / (2.0 * fd_step)
            error = abs(grad[coord] - numeric) / max(1.0, abs(numeric))
            max_error = error if max_error is None else max(max_error, error)

    if max_error is None:
        logger.warning(
            "grad_check: all %d probed coordinates sit on a kink, point skipped",
            skipped,
        )
        return None

    if skipped:
        logger.debug("grad_check: skipped %d coordinates on kinks", skipped)
    if max_error > tolerance:
        logger.warning(
            "grad_check: max relative error %.3e exceeds tolerance %.1e",
            max_error,
            tolerance,
        )
    return max_error
