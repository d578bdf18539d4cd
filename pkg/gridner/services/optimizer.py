"""
Optimizer
Adam with two learning-rate groups, global-norm gradient clipping and optional
linear warmup.
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from gridner.core.exceptions import NonFiniteError, ShapeError
from gridner.models.params import ModelParams
from gridner.schemas.config import TrainConfig
from gridner.utils.logger import get_logger


logger = get_logger("optimizer")


@dataclass
class OptimState:
    """
    First/second moment estimates per parameter and the step counters.

    `step` is the global update count and drives warmup; it survives a resume.
    `moment_steps` counts the updates folded into each parameter's moments and
    drives bias correction, so moments that restart at zero are corrected as
    fresh ones.
    """

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    moment_steps: Dict[str, int] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams, step: int = 0) -> "OptimState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
            step=step,
        )


def global_norm(grads: Mapping[str, Optional[np.ndarray]]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None)))


def clip_by_global_norm(grads: Mapping[str, Optional[np.ndarray]],
                        max_norm: Optional[float]) -> Dict[str, Optional[np.ndarray]]:
    """Scale all gradients by max_norm / norm when the global norm exceeds max_norm."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {name: (g * factor if g is not None else None) for name, g in grads.items()}


def warmup_factor(step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, step / warmup_steps)


def adam_step(
    params: ModelParams,
    grads: Mapping[str, Optional[np.ndarray]],
    state: OptimState,
    config: TrainConfig,
    learning_rates: Optional[Mapping[str, float]] = None,
) -> float:
    """
    Apply one bias-corrected Adam update in place.

    Parameters in the encoder group use `lr_encoder`, all others `lr_heads`,
    unless `learning_rates` overrides a group. Parameters without a gradient
    (disabled branches) are left untouched, moments included.

    Args:
        params: Parameters to update
        grads: Name -> gradient (None for parameters the loss does not reach)
        state: Moments and step counter, updated in place
        config: Betas, epsilon, clipping and warmup settings
        learning_rates: Optional group -> learning rate override

    Returns:
        float: Global gradient norm before clipping

    Raises:
        NonFiniteError: If any gradient holds NaN or Inf; nothing is updated
    """
    for name, grad in grads.items():
        if grad is None:
            continue
        if grad.shape != params[name].shape:
            raise ShapeError(f"Gradient for '{name}' has shape {grad.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            logger.error(f"Non-finite gradient for parameter '{name}' at step {state.step + 1}")
            raise NonFiniteError(f"Non-finite gradient for parameter '{name}'", detail={"parameter": name})

    norm = global_norm(grads)
    clipped = clip_by_global_norm(grads, config.grad_clip_norm)

    state.step += 1
    rates = {"encoder": config.lr_encoder, "heads": config.lr_heads}
    rates.update(learning_rates or {})
    ramp = warmup_factor(state.step, config.warmup_steps)
    b1, b2 = config.beta1, config.beta2

    for name, grad in clipped.items():
        if grad is None:
            continue
        tensor = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        t = state.moment_steps[name] = state.moment_steps.get(name, 0) + 1
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * grad
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * grad * grad
        lr = rates[params.group_of(name)] * ramp
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return norm


class AdamOptimizer:
    """
    Stateful wrapper around `adam_step` for one parameter set.

    Args:
        params: Parameters to optimize
        config: Training settings
        start_step: Global step to resume warmup from; moments and their
            bias correction start fresh
        learning_rates: Optional per-group learning rate override
    """

    def __init__(self, params: ModelParams, config: TrainConfig, start_step: int = 0,
                 learning_rates: Optional[Mapping[str, float]] = None):
        self.params = params
        self.config = config
        self.state = OptimState.zeros_like(params, step=start_step)
        self.learning_rates = dict(learning_rates or {})

    @property
    def step_count(self) -> int:
        return self.state.step

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> float:
        """Update from the parameters' current `.grad`; returns the pre-clip gradient norm."""
        return adam_step(self.params, self.params.grads(), self.state, self.config, self.learning_rates)
