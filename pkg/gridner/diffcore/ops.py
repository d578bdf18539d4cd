"""
Differentiable Operations
Forward computations with their backward rules, recorded on the active tape.

Broadcasting is limited to adding a bias vector along the last axis; every
other operand pair must match in shape exactly.
"""

import math
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.special import ndtr

from gridner.core.exceptions import ConfigError, ContractError, IndexRangeError, ShapeError
from gridner.diffcore.tensor import Tensor, record


Scalar = Union[int, float]

LOG_FLOOR = 1e-12
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m,k] x [k,n] -> [m,n]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return record("matmul", (a, b), out, backward)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    out = Tensor(x.data.T.copy())
    return record("transpose", (x,), out, lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"Cannot reshape {original} to {tuple(shape)}") from exc
    out = Tensor(data.copy())
    return record("reshape", (x,), out, lambda g: (g.reshape(original),))


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(x.data[index].copy())

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return record("slice", (x,), out, backward)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.data))
    return record("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def elementwise(kind: str, a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    """
    Elementwise add, mul or scale.

    Args:
        kind: "add", "mul" or "scale"
        a: Left operand
        b: Same-shape tensor; for "add" also a vector matching a's last dim
           (bias broadcast); a Python scalar for "scale" (or as a constant for add/mul)

    Returns:
        Tensor: Elementwise result
    """
    if kind == "scale" or not isinstance(b, Tensor):
        if kind not in ("add", "mul", "scale"):
            raise ConfigError(f"Unknown elementwise kind '{kind}'")
        c = float(b)
        if kind == "add":
            out = Tensor(a.data + c)
            return record("add_scalar", (a,), out, lambda g: (g,))
        out = Tensor(a.data * c)
        return record("scale", (a,), out, lambda g: (g * c,))

    if kind == "add":
        if a.shape == b.shape:
            out = Tensor(a.data + b.data)
            return record("add", (a, b), out, lambda g: (g, g))
        if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
            out = Tensor(a.data + b.data)

            def backward(g):
                return g, g.reshape(-1, b.shape[0]).sum(axis=0)

            return record("add_bias", (a, b), out, backward)
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")

    if kind == "mul":
        if a.shape != b.shape:
            raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
        out = Tensor(a.data * b.data)
        return record("mul", (a, b), out, lambda g: (g * b.data, g * a.data))

    raise ConfigError(f"Unknown elementwise kind '{kind}'")


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise("add", a, b)


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise("mul", a, b)


def scale(a: Tensor, c: Scalar) -> Tensor:
    return elementwise("scale", a, c)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along `axis`; all other dims must agree."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise ShapeError(f"concat shape mismatch on axis {axis}: {[t.shape for t in tensors]}")

    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", tuple(tensors), out, backward)


def pairwise_add(a: Tensor, b: Tensor) -> Tensor:
    """out[i, j] = a[i] + b[j] for a: [N, C], b: [M, C] -> [N, M, C]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_add shape mismatch: {a.shape}, {b.shape}")
    out = Tensor(a.data[:, None, :] + b.data[None, :, :])
    return record("pairwise_add", (a, b), out, lambda g: (g.sum(axis=1), g.sum(axis=0)))


# ---------------------------------------------------------------------------
# Activations and normalization
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(p)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return record("softmax", (x,), out, backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF."""
    cdf = ndtr(x.data)
    out = Tensor(x.data * cdf)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return record("gelu", (x,), out, backward)


def _normalize(x: np.ndarray, eps: float):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    return centered * inv_std, inv_std


def _normalize_backward(dxhat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    return inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale by gamma and shift by beta."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be > 0")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match last dim {d}")
    xhat, inv_std = _normalize(x.data, eps)
    out = Tensor(gamma.data * xhat + beta.data)

    def backward(g):
        flat_g = g.reshape(-1, d)
        dgamma = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        dbeta = flat_g.sum(axis=0)
        return _normalize_backward(g * gamma.data, xhat, inv_std), dgamma, dbeta

    return record("layer_norm", (x, gamma, beta), out, backward)


def conditional_affine(normed: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """
    out[i, j] = gamma[i] * normed[j] + beta[i].

    Row-conditioned affine map used by the word-pair grid: each condition row i
    gets its own scale/shift applied to every normalized row j.
    """
    if normed.ndim != 2 or gamma.shape != beta.shape or gamma.ndim != 2 or gamma.shape[1] != normed.shape[1]:
        raise ShapeError(f"conditional_affine shape mismatch: {normed.shape}, {gamma.shape}, {beta.shape}")
    out = Tensor(gamma.data[:, None, :] * normed.data[None, :, :] + beta.data[:, None, :])

    def backward(g):
        d_normed = np.einsum("ijd,id->jd", g, gamma.data)
        d_gamma = np.einsum("ijd,jd->id", g, normed.data)
        return d_normed, d_gamma, g.sum(axis=1)

    return record("conditional_affine", (normed, gamma, beta), out, backward)


def dropout(x: Tensor, rate: float, generator: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is given (eval mode)."""
    if rate <= 0.0 or generator is None:
        return x
    keep = (generator.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * keep)
    return record("dropout", (x,), out, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Lookups and structured products
# ---------------------------------------------------------------------------

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` for an integer array of any shape -> [..., d]."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab, dim = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids[(ids < 0) | (ids >= vocab)].ravel()[0])
        raise IndexRangeError(f"Embedding id {bad} outside [0, {vocab})", detail={"id": bad})
    out = Tensor(table.data[ids].reshape(ids.shape + (dim,)))

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.ravel(), g.reshape(-1, dim))
        return (grad,)

    return record("embedding", (table,), out, backward)


def bilinear(x: Tensor, u: Tensor, z: Tensor) -> Tensor:
    """
    Class-wise bilinear form s_c = x^T U[:, c, :] z.

    Accepts single vectors (x: [d1], z: [d2] -> [C]) or row stacks
    (x: [N, d1], z: [M, d2] -> [N, M, C], every pair scored).
    """
    if u.ndim != 3 or x.ndim != z.ndim or x.ndim not in (1, 2):
        raise ShapeError(f"bilinear shape mismatch: {x.shape}, {u.shape}, {z.shape}")
    if x.shape[-1] != u.shape[0] or z.shape[-1] != u.shape[2]:
        raise ShapeError(f"bilinear dims do not match: {x.shape}, {u.shape}, {z.shape}")

    if x.ndim == 1:
        out = Tensor(np.einsum("a,acb,b->c", x.data, u.data, z.data))

        def backward(g):
            return (
                np.einsum("c,acb,b->a", g, u.data, z.data),
                np.einsum("c,a,b->acb", g, x.data, z.data),
                np.einsum("c,a,acb->b", g, x.data, u.data),
            )
    else:
        xu = np.einsum("ia,acb->icb", x.data, u.data)
        out = Tensor(np.einsum("icb,jb->ijc", xu, z.data))

        def backward(g):
            gz = np.einsum("ijc,jb->icb", g, z.data)
            return (
                np.einsum("icb,acb->ia", gz, u.data),
                np.einsum("ia,icb->acb", x.data, gz),
                np.einsum("ijc,icb->jb", g, xu),
            )

    return record("bilinear", (x, u, z), out, backward)


def conv2d_dilated(inp: Tensor, kernel: Tensor, dilation: int, bias: Tensor) -> Tensor:
    """
    3x3 dilated cross-correlation over an [H, W, c_in] grid with zero padding of
    width `dilation`, so the output keeps the input's spatial size.
    """
    if dilation <= 0:
        raise ConfigError(f"dilation must be a positive integer, got {dilation}")
    if inp.ndim != 3 or kernel.shape[:2] != (3, 3) or kernel.ndim != 4:
        raise ShapeError(f"conv2d_dilated expects [H,W,c_in] and [3,3,c_in,c_out], got {inp.shape}, {kernel.shape}")
    height, width, c_in = inp.shape
    if kernel.shape[2] != c_in or bias.shape != (kernel.shape[3],):
        raise ShapeError(f"conv2d_dilated channel mismatch: {inp.shape}, {kernel.shape}, {bias.shape}")

    d = dilation
    padded = np.pad(inp.data, ((d, d), (d, d), (0, 0)))
    out_data = np.zeros((height, width, kernel.shape[3]), dtype=inp.data.dtype)
    for ky in range(3):
        for kx in range(3):
            patch = padded[ky * d: ky * d + height, kx * d: kx * d + width, :]
            out_data += patch @ kernel.data[ky, kx]
    out = Tensor(out_data + bias.data)

    def backward(g):
        d_padded = np.zeros_like(padded)
        d_kernel = np.zeros_like(kernel.data)
        flat_g = g.reshape(-1, g.shape[-1])
        for ky in range(3):
            for kx in range(3):
                rows = slice(ky * d, ky * d + height)
                cols = slice(kx * d, kx * d + width)
                d_kernel[ky, kx] = padded[rows, cols, :].reshape(-1, c_in).T @ flat_g
                d_padded[rows, cols, :] += g @ kernel.data[ky, kx].T
        return d_padded[d: d + height, d: d + width, :], d_kernel, flat_g.sum(axis=0)

    return record("conv2d_dilated", (inp, kernel, bias), out, backward)


class LSTMWeights(NamedTuple):
    """One direction of an LSTM; gate blocks ordered input, forget, cell, output."""

    w_ih: Tensor  # [d_in, 4h]
    w_hh: Tensor  # [h, 4h]
    bias: Tensor  # [4h]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_forward(x: np.ndarray, w_ih: np.ndarray, w_hh: np.ndarray, bias: np.ndarray):
    steps = x.shape[0]
    hidden = w_hh.shape[0]
    h = np.zeros((steps + 1, hidden), dtype=x.dtype)
    c = np.zeros((steps + 1, hidden), dtype=x.dtype)
    gates = np.zeros((steps, 4, hidden), dtype=x.dtype)
    projected = x @ w_ih + bias
    for t in range(steps):
        z = (projected[t] + h[t] @ w_hh).reshape(4, hidden)
        i, f, o = _sigmoid(z[0]), _sigmoid(z[1]), _sigmoid(z[3])
        g = np.tanh(z[2])
        c[t + 1] = f * c[t] + i * g
        h[t + 1] = o * np.tanh(c[t + 1])
        gates[t] = (i, f, g, o)
    return h, c, gates


def _lstm_backward(dh_seq, x, w_ih, w_hh, h, c, gates):
    steps, hidden = dh_seq.shape
    dz = np.zeros((steps, 4 * hidden), dtype=x.dtype)
    dh_next = np.zeros(hidden, dtype=x.dtype)
    dc_next = np.zeros(hidden, dtype=x.dtype)
    for t in reversed(range(steps)):
        i, f, g, o = gates[t]
        tanh_c = np.tanh(c[t + 1])
        dh = dh_seq[t] + dh_next
        dc = dh * o * (1.0 - tanh_c * tanh_c) + dc_next
        dz[t] = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c[t] * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh * tanh_c * o * (1.0 - o),
        ])
        dc_next = dc * f
        dh_next = dz[t] @ w_hh.T
    return dz @ w_ih.T, x.T @ dz, h[:-1].T @ dz, dz.sum(axis=0)


def bilstm(seq: Tensor, forward: LSTMWeights, backward: LSTMWeights) -> Tensor:
    """
    Single-layer bidirectional LSTM with zero initial states.

    Args:
        seq: [N, d_in] input sequence
        forward: Left-to-right weights
        backward: Right-to-left weights

    Returns:
        Tensor: [N, 2 * h], forward hidden state then backward hidden state per position
    """
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ShapeError(f"bilstm expects a non-empty [N, d_in] sequence, got {seq.shape}")
    for weights in (forward, backward):
        hidden = weights.w_hh.shape[0]
        if weights.w_ih.shape != (seq.shape[1], 4 * hidden) or weights.w_hh.shape != (hidden, 4 * hidden) \
                or weights.bias.shape != (4 * hidden,):
            raise ShapeError("bilstm weight shapes do not match the input or each other")

    x = seq.data
    x_rev = x[::-1]
    fw = _lstm_forward(x, forward.w_ih.data, forward.w_hh.data, forward.bias.data)
    bw = _lstm_forward(x_rev, backward.w_ih.data, backward.w_hh.data, backward.bias.data)
    hidden_f = forward.w_hh.shape[0]
    out = Tensor(np.concatenate([fw[0][1:], bw[0][1:][::-1]], axis=1))

    def backward_fn(g):
        g_f, g_b = g[:, :hidden_f], g[:, hidden_f:][::-1]
        dx_f, dwi_f, dwh_f, db_f = _lstm_backward(g_f, x, forward.w_ih.data, forward.w_hh.data, *fw)
        dx_b, dwi_b, dwh_b, db_b = _lstm_backward(g_b, x_rev, backward.w_ih.data, backward.w_hh.data, *bw)
        return dx_f + dx_b[::-1], dwi_f, dwh_f, db_f, dwi_b, dwh_b, db_b

    inputs = (seq, forward.w_ih, forward.w_hh, forward.bias, backward.w_ih, backward.w_hh, backward.bias)
    return record("bilstm", inputs, out, backward_fn)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def masked_cross_entropy(probs: Tensor, labels, mask, normalization: str = "mask") -> Tensor:
    """
    Mean negative log-likelihood of `labels` over the cells where `mask` is true.

    Args:
        probs: [..., C] class distributions
        labels: Integer array matching probs' leading shape
        mask: Boolean array matching probs' leading shape
        normalization: "mask" divides by the number of unmasked cells,
            "grid" by the total number of cells

    Returns:
        Tensor: Scalar loss
    """
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    lead = probs.shape[:-1]
    if labels.shape != lead or mask.shape != lead:
        raise ShapeError(f"labels {labels.shape} / mask {mask.shape} do not match probs {probs.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("Loss mask is empty: no supervised cells")
    if normalization == "mask":
        denom = float(count)
    elif normalization == "grid":
        denom = float(mask.size)
    else:
        raise ConfigError(f"Unknown loss normalization '{normalization}'")
    n_classes = probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexRangeError(f"Label outside [0, {n_classes})")

    picked = np.take_along_axis(probs.data, labels[..., None], axis=-1)[..., 0]
    clamped = np.maximum(picked, LOG_FLOOR)
    out = Tensor(-np.sum(np.log(clamped)[mask]) / denom)

    def backward(g):
        grad = np.zeros_like(probs.data)
        live = mask & (picked > LOG_FLOOR)
        cell_grad = np.where(live, -1.0 / (denom * np.where(live, picked, 1.0)), 0.0)
        np.put_along_axis(grad, labels[..., None], (g * cell_grad)[..., None], axis=-1)
        return (grad,)

    return record("masked_cross_entropy", (probs,), out, backward)
