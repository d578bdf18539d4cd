"""
Gradient Checking
Central finite differences against the tape's analytic gradients.
"""

from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from gridner.core.exceptions import ContractError
from gridner.diffcore import tensor as tensor_module
from gridner.diffcore.tensor import Tape, Tensor, backward, no_record


def grad_check(
    function: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-8,
    max_coords: Optional[int] = None,
    generator: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare analytic and numerical gradients of a scalar tensor program.

    The relative error per coordinate is |a - n| / max(|a|, |n|, floor), with
    n = (f(x + eps) - f(x - eps)) / (2 * eps).

    Args:
        function: Called as function(*inputs); must return a scalar tensor
        inputs: Tensors to differentiate with respect to (marked requires_grad)
        eps: Finite-difference step
        floor: Denominator floor for near-zero gradients
        max_coords: Check at most this many randomly chosen coordinates per input
        generator: Random source for coordinate sampling

    Returns:
        float: Maximum relative error over all checked coordinates
    """
    for tensor in inputs:
        tensor.data = np.ascontiguousarray(tensor.data)
        tensor.requires_grad = True
        tensor.grad = None

    with Tape() as tape:
        loss = function(*inputs)
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar program, got shape {loss.shape}")
    backward(loss, tape)

    rng = generator if generator is not None else np.random.default_rng(0)
    worst = 0.0
    with no_record():
        for tensor in inputs:
            analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            flat = tensor.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for k in coords:
                original = flat[k]
                flat[k] = original + eps
                plus = function(*inputs).item()
                flat[k] = original - eps
                minus = function(*inputs).item()
                flat[k] = original
                numeric = (plus - minus) / (2.0 * eps)
                exact = float(analytic.reshape(-1)[k])
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                worst = max(worst, error)
    return worst


@contextmanager
def injected_fault(op: str) -> Iterator[None]:
    """
    Corrupt the backward rule of one op for the duration of the block.

    Negative control for the gradient checker: a check under an injected
    fault must fail.
    """
    tensor_module._faulty_ops.add(op)
    try:
        yield
    finally:
        tensor_module._faulty_ops.discard(op)
