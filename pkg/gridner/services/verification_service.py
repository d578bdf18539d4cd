"""
Verification Service
Finite-difference gradient checks over every differentiable op and the full
model, with an optional injected backward fault as a negative control.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from gridner.core.exceptions import ConfigError
from gridner.diffcore import (
    LSTMWeights,
    Tensor,
    add,
    bilinear,
    bilstm,
    concat,
    conditional_affine,
    conv2d_dilated,
    dropout,
    embedding_lookup,
    gelu,
    grad_check,
    injected_fault,
    layer_norm,
    masked_cross_entropy,
    matmul,
    mul,
    pairwise_add,
    reshape,
    scale,
    slice_axis,
    softmax,
    sum_all,
    transpose,
)
from gridner.models.network import forward, loss
from gridner.models.params import ModelParams
from gridner.schemas.config import ModelConfig
from gridner.schemas.corpus import MrcInstance
from gridner.utils.logger import get_logger


logger = get_logger("gradcheck")

OP_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4

Program = Tuple[Callable[..., Tensor], List[Tensor]]


@dataclass
class GradCheckCase:
    """One check: `build(rng)` returns a scalar program and its inputs."""

    name: str
    op: str
    build: Callable[[np.random.Generator], Program]
    tolerance: float = OP_TOLERANCE
    floor: float = 1e-6
    max_coords: Optional[int] = None


@dataclass
class GradCheckRow:
    name: str
    error: float
    tolerance: float
    passed: bool


def _rand(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(weights)))


def _unary(op: Callable[[Tensor], Tensor], *shape: int) -> Callable[[np.random.Generator], Program]:
    def build(rng):
        x = _rand(rng, *shape)
        w = rng.normal(size=np.shape(op(Tensor(x.data)).data))
        return (lambda t: _weighted(op(t), w)), [x]
    return build


def _binary(op: Callable[[Tensor, Tensor], Tensor], shape_a, shape_b) -> Callable[[np.random.Generator], Program]:
    def build(rng):
        a, b = _rand(rng, *shape_a), _rand(rng, *shape_b)
        w = rng.normal(size=op(Tensor(a.data), Tensor(b.data)).shape)
        return (lambda x, y: _weighted(op(x, y), w)), [a, b]
    return build


def _build_layer_norm(rng):
    x, gamma, beta = _rand(rng, 4, 6), _rand(rng, 6), _rand(rng, 6)
    w = rng.normal(size=(4, 6))
    return (lambda a, g, b: _weighted(layer_norm(a, g, b), w)), [x, gamma, beta]


def _build_conditional_affine(rng):
    normed, gamma, beta = _rand(rng, 4, 3), _rand(rng, 5, 3), _rand(rng, 5, 3)
    w = rng.normal(size=(5, 4, 3))
    return (lambda n, g, b: _weighted(conditional_affine(n, g, b), w)), [normed, gamma, beta]


def _build_embedding(rng):
    table = _rand(rng, 7, 3)
    ids = rng.integers(0, 7, size=(2, 5))
    w = rng.normal(size=(2, 5, 3))
    return (lambda t: _weighted(embedding_lookup(t, ids), w)), [table]


def _build_bilinear(rng):
    x, u, z = _rand(rng, 4, 3), _rand(rng, 3, 2, 5), _rand(rng, 6, 5)
    w = rng.normal(size=(4, 6, 2))
    return (lambda a, b, c: _weighted(bilinear(a, b, c), w)), [x, u, z]


def _build_conv(rng):
    grid, kernel, bias = _rand(rng, 7, 7, 3), _rand(rng, 3, 3, 3, 2), _rand(rng, 2)
    w = rng.normal(size=(7, 7, 2))
    return (lambda g, k, b: _weighted(conv2d_dilated(g, k, 2, b), w)), [grid, kernel, bias]


def _build_bilstm(rng):
    seq = _rand(rng, 5, 3)
    weights = [_rand(rng, 3, 8), _rand(rng, 2, 8), _rand(rng, 8), _rand(rng, 3, 8), _rand(rng, 2, 8), _rand(rng, 8)]
    w = rng.normal(size=(5, 4))

    def program(x, *p):
        return _weighted(bilstm(x, LSTMWeights(*p[:3]), LSTMWeights(*p[3:])), w)

    return program, [seq] + weights


def _build_dropout(rng):
    x = _rand(rng, 4, 5)
    w = rng.normal(size=(4, 5))
    # A fresh generator per call keeps the keep-mask fixed across evaluations.
    return (lambda t: _weighted(dropout(t, 0.3, np.random.default_rng(7)), w)), [x]


def _build_cross_entropy(rng):
    logits = _rand(rng, 4, 4, 3)
    labels = rng.integers(0, 3, size=(4, 4))
    mask = np.triu(np.ones((4, 4), dtype=bool))
    return (lambda t: masked_cross_entropy(softmax(t, axis=-1), labels, mask)), [logits]


def _build_concat(rng):
    a, b = _rand(rng, 3, 2), _rand(rng, 3, 4)
    w = rng.normal(size=(3, 6))
    return (lambda x, y: _weighted(concat([x, y], axis=1), w)), [a, b]


def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        d_model=8, n_layers=1, n_heads=2, d_ff=8, d_type=4, d_lstm=4, d_biaffine=4,
        d_h=4, d_E_d=3, d_E_t=3, d_g=4, dropout=0.0, max_len=16,
    )


def tiny_instance(rng: np.random.Generator, vocab_size: int, n: int = 12, offset: int = 3) -> MrcInstance:
    """Synthetic 12-token instance with two answer spans in its context."""
    context = n - offset - 1
    token_ids = rng.integers(5, vocab_size, size=n)
    token_ids[0], token_ids[offset - 1], token_ids[-1] = 2, 3, 3
    mask = np.zeros((n, n), dtype=bool)
    mask[offset: offset + context, offset: offset + context] = np.triu(np.ones((context, context), dtype=bool))
    labels = np.zeros((n, n), dtype=np.int64)
    labels[offset + 1, offset + 3] = 1
    labels[offset + 2, offset + 2] = 1
    return MrcInstance(type_id=0, token_ids=token_ids, context_offset=offset, context_len=context,
                       label_grid=labels, loss_mask=mask, gold=((1, 3, "bod"), (2, 2, "bod")))


def _build_model(rng):
    config = tiny_model_config()
    params = ModelParams.initialize(config, 12, rng)
    for _, tensor in params.items():
        # Nonzero everywhere so that every path carries gradient.
        tensor.data = tensor.data + rng.normal(scale=0.1, size=tensor.shape)
    instance = tiny_instance(rng, 12)

    # grad_check perturbs the parameter tensors in place, so the program reads them from `params`.
    def program(*_):
        return loss(forward(instance, params, config).probs, instance, config)

    return program, [tensor for _, tensor in params.items()]


CASES: Dict[str, GradCheckCase] = {case.name: case for case in [
    GradCheckCase("matmul", "matmul", _binary(matmul, (3, 4), (4, 2))),
    GradCheckCase("transpose", "transpose", _unary(transpose, 3, 4)),
    GradCheckCase("reshape", "reshape", _unary(lambda t: reshape(t, (2, 6)), 3, 4)),
    GradCheckCase("slice", "slice", _unary(lambda t: slice_axis(t, 1, 3, axis=1), 3, 4)),
    GradCheckCase("sum", "sum", _unary(lambda t: scale(sum_all(t), 1.7), 3, 4)),
    GradCheckCase("add", "add", _binary(add, (3, 4), (3, 4))),
    GradCheckCase("add_bias", "add_bias", _binary(add, (3, 4), (4,))),
    GradCheckCase("mul", "mul", _binary(mul, (3, 4), (3, 4))),
    GradCheckCase("scale", "scale", _unary(lambda t: scale(t, -0.7), 3, 4)),
    GradCheckCase("concat", "concat", _build_concat),
    GradCheckCase("pairwise_add", "pairwise_add", _binary(pairwise_add, (3, 2), (4, 2))),
    GradCheckCase("softmax", "softmax", _unary(lambda t: softmax(t, axis=-1), 3, 5)),
    GradCheckCase("gelu", "gelu", _unary(gelu, 3, 4)),
    GradCheckCase("layer_norm", "layer_norm", _build_layer_norm),
    GradCheckCase("conditional_affine", "conditional_affine", _build_conditional_affine),
    GradCheckCase("dropout", "dropout", _build_dropout),
    GradCheckCase("embedding", "embedding", _build_embedding),
    GradCheckCase("bilinear", "bilinear", _build_bilinear),
    GradCheckCase("conv2d", "conv2d_dilated", _build_conv),
    GradCheckCase("bilstm", "bilstm", _build_bilstm),
    GradCheckCase("cross_entropy", "masked_cross_entropy", _build_cross_entropy),
    GradCheckCase("model", "bilinear", _build_model, tolerance=MODEL_TOLERANCE, floor=1e-5, max_coords=8),
]}


def run_gradcheck(names: Optional[Sequence[str]] = None, inject_fault: Optional[str] = None,
                  seed: int = 0) -> List[GradCheckRow]:
    """
    Run gradient checks.

    Args:
        names: Case names to run (default: all)
        inject_fault: Case name whose op gets a corrupted backward rule
        seed: Random seed for inputs and coordinate sampling

    Returns:
        One row per case, in suite order
    """
    selected = list(CASES) if not names else list(names)
    unknown = [n for n in selected + ([inject_fault] if inject_fault else []) if n not in CASES]
    if unknown:
        raise ConfigError(f"Unknown gradcheck op '{unknown[0]}'. Allowed: {', '.join(CASES)}")

    rows = []
    for name in selected:
        case = CASES[name]
        rng = np.random.default_rng([seed, len(rows)])
        function, inputs = case.build(rng)
        fault = CASES[inject_fault].op if inject_fault else None
        if fault is not None:
            with injected_fault(fault):
                error = grad_check(function, inputs, floor=case.floor, max_coords=case.max_coords, generator=rng)
        else:
            error = grad_check(function, inputs, floor=case.floor, max_coords=case.max_coords, generator=rng)
        row = GradCheckRow(name=name, error=error, tolerance=case.tolerance, passed=error < case.tolerance)
        logger.info(f"gradcheck {name}: max rel err {error:.3e} ({'pass' if row.passed else 'FAIL'})")
        rows.append(row)
    return rows


def render_rows(rows: Sequence[GradCheckRow]) -> str:
    lines = ["| op | max rel. error | tolerance | result |", "|---|---:|---:|---|"]
    for row in rows:
        lines.append(f"| {row.name} | {row.error:.3e} | {row.tolerance:.0e} | {'pass' if row.passed else 'FAIL'} |")
    return "\n".join(lines) + "\n"
