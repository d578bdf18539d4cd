"""
Tensor and Tape
Reverse-mode differentiation core: n-dimensional float tensors and the tape
that records operations while a `Tape` context is active.
"""

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from gridner.core.config import settings
from gridner.core.exceptions import ConfigError, ContractError, NonFiniteError, ShapeError


_PRECISIONS = {"float64": np.float64, "float32": np.float32}
_default_dtype = _PRECISIONS.get(settings.DEFAULT_PRECISION, np.float64)
_generator = np.random.default_rng(0)
_active_tape: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)

# Op names whose backward rule is perturbed; used only by the gradcheck negative control.
_faulty_ops: set = set()


def set_default_dtype(precision: str) -> None:
    """
    Select the float width for tensors created from now on.

    Args:
        precision: "float64" or "float32"
    """
    global _default_dtype
    if precision not in _PRECISIONS:
        raise ConfigError(f"Unknown precision '{precision}'. Allowed: {sorted(_PRECISIONS)}")
    _default_dtype = _PRECISIONS[precision]


def get_default_dtype() -> type:
    return _default_dtype


def manual_seed(seed: int) -> None:
    """Reseed the module-level generator used by `create`."""
    global _generator
    _generator = np.random.default_rng(seed)


def get_generator() -> np.random.Generator:
    return _generator


class Tensor:
    """
    N-dimensional float array with an optional gradient buffer.

    Attributes:
        data: Values as a numpy array of the default float dtype
        requires_grad: Whether backward should produce a gradient for this tensor
        grad: Gradient of the last backward pass (accumulated), same shape as data
        name: Optional label, used in diagnostics
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __add__(self, other):
        from gridner.diffcore.ops import add
        return add(self, other)

    def __mul__(self, other):
        from gridner.diffcore.ops import mul
        return mul(self, other)

    def __matmul__(self, other):
        from gridner.diffcore.ops import matmul
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeEntry:
    """One recorded operation: inputs, output and the rule mapping output grad to input grads."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """
    Ordered record of differentiable operations.

    Operations append themselves while the tape is the active one, so entries are
    in topological order by construction.

    Usage:
        with Tape() as tape:
            loss = model_loss(params)
        backward(loss, tape)
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


@contextmanager
def no_record() -> Iterator[None]:
    """Run a block without recording, even inside an active tape."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn) -> Tensor:
    """
    Register an op's output on the active tape if any input needs a gradient.

    Args:
        op: Operation name
        inputs: Input tensors, in the order `backward_fn` returns their grads
        output: Freshly computed output tensor
        backward_fn: Maps the output grad to one grad (or None) per input

    Returns:
        Tensor: The same output, marked as requiring grad when recorded
    """
    if settings.DEBUG and not np.all(np.isfinite(output.data)):
        raise NonFiniteError(f"Non-finite values produced by '{op}'", detail={"op": op})

    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.entries.append(TapeEntry(op, tuple(inputs), output, backward_fn))
    return output


InitSpec = Union[str, Tuple]


def _fans(shape: Sequence[int]) -> Tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    return shape[-2] * receptive, shape[-1] * receptive


def create(
    shape: Sequence[int],
    init: InitSpec = "zeros",
    requires_grad: bool = False,
    name: Optional[str] = None,
    generator: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    Create a tensor with the given initializer.

    Args:
        shape: Dimension sizes, each >= 1
        init: "zeros", "ones", "xavier", ("constant", c), ("uniform", a, b) or ("normal", mean, std)
        requires_grad: Mark as a trainable leaf
        name: Optional label
        generator: Random source; defaults to the module-level seeded generator

    Returns:
        Tensor: New tensor
    """
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"All dimensions must be >= 1, got {list(shape)}")

    rng = generator if generator is not None else _generator
    kind = init if isinstance(init, str) else init[0]
    args = () if isinstance(init, str) else tuple(init[1:])

    if kind == "zeros":
        data = np.zeros(shape)
    elif kind == "ones":
        data = np.ones(shape)
    elif kind == "constant":
        data = np.full(shape, float(args[0]))
    elif kind == "uniform":
        low, high = args
        data = rng.uniform(low, high, size=shape)
    elif kind == "normal":
        mean, std = args
        data = rng.normal(mean, std, size=shape)
    elif kind == "xavier":
        fan_in, fan_out = _fans(shape)
        data = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    else:
        raise ConfigError(f"Unknown initializer '{kind}'")

    return Tensor(data, requires_grad=requires_grad, name=name)


def backward(loss: Tensor, tape: Tape) -> None:
    """
    Populate `.grad` of every requires_grad tensor the loss depends on.

    Replays the tape in reverse; gradients arriving over several paths are summed.
    Leaf gradients accumulate into any existing `.grad`, so calling backward for
    several losses before an optimizer step sums their gradients.

    Args:
        loss: Single-element tensor produced on `tape`
        tape: Tape that recorded the computation
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("Loss is not on the tape (no input requires grad)")

    grads = {id(loss): np.ones_like(loss.data)}
    produced = set()
    touched = {id(loss): loss}

    for entry in reversed(tape.entries):
        out_id = id(entry.output)
        produced.add(out_id)
        upstream = grads.get(out_id)
        if upstream is None:
            continue
        input_grads = entry.backward(upstream)
        perturb = entry.op in _faulty_ops
        for tensor, grad in zip(entry.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if perturb:
                grad = grad * 1.5 + 0.1
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = np.asarray(grad, dtype=tensor.data.dtype).reshape(tensor.shape)
                touched[key] = tensor

    for key, tensor in touched.items():
        grad = grads[key]
        if key not in produced and tensor.grad is not None:
            tensor.grad = tensor.grad + grad
        else:
            tensor.grad = np.array(grad, copy=True)
