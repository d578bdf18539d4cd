"""
MRC Co-Prediction Network
Biaffine and word-pair-grid MLP branches over the fused encoder states, joined
by one softmax over the summed logits.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from gridner.core.exceptions import ShapeError
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
    layer_norm,
    masked_cross_entropy,
    matmul,
    mul,
    pairwise_add,
    reshape,
    slice_axis,
    softmax,
    transpose,
)
from gridner.models.encoder import encode, fuse_layers
from gridner.models.params import ModelParams
from gridner.schemas.config import ModelConfig
from gridner.schemas.corpus import MrcInstance, Vocab


DISTANCE_EDGES = (1, 2, 3, 4, 8, 16, 32, 64, 128)


@dataclass
class ScoreGrid:
    """Branch logits y', y'' and co-predicted probabilities y, each [N, N, C]."""

    biaffine_logits: Tensor
    mlp_logits: Tensor
    probs: Tensor


def _zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape))


def _linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return add(matmul(x, params[prefix + ".w"]), params[prefix + ".b"])


def _grid_linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    n, m, d = x.shape
    return reshape(add(matmul(reshape(x, (n * m, d)), weight), bias), (n, m, weight.shape[1]))


def cln(x: Tensor, cond: Tensor, params: ModelParams, prefix: str, eps: float = 1e-5) -> Tensor:
    """
    Conditional layer normalization with a single condition vector.

    gamma = cond W_gamma + b_gamma and beta = cond W_beta + b_beta scale and
    shift the standardized rows of x.

    Args:
        x: [N, d] rows to normalize
        cond: [d_cond] or [1, d_cond] condition
        params: Model parameters
        prefix: Parameter prefix, e.g. "cln_type."

    Returns:
        Tensor: [N, d]
    """
    w_gamma = params[prefix + "w_gamma"]
    if cond.shape[-1] != w_gamma.shape[0]:
        raise ShapeError(f"CLN condition dim {cond.shape[-1]} does not match projection input {w_gamma.shape[0]}")
    row = cond if cond.ndim == 2 else reshape(cond, (1, cond.shape[0]))
    d = w_gamma.shape[1]
    gamma = reshape(add(matmul(row, w_gamma), params[prefix + "b_gamma"]), (d,))
    beta = reshape(add(matmul(row, params[prefix + "w_beta"]), params[prefix + "b_beta"]), (d,))
    return layer_norm(x, gamma, beta, eps)


def grid_cln(hidden: Tensor, params: ModelParams, prefix: str = "cln_grid.", eps: float = 1e-5) -> Tensor:
    """
    Word-pair CLN: out[i, j] = gamma(h_i) * LayerNorm(h_j) + beta(h_i).

    Returns:
        Tensor: [N, N, d]
    """
    d = hidden.shape[1]
    normed = layer_norm(hidden, Tensor(np.ones(d)), Tensor(np.zeros(d)), eps)
    gamma = add(matmul(hidden, params[prefix + "w_gamma"]), params[prefix + "b_gamma"])
    beta = add(matmul(hidden, params[prefix + "w_beta"]), params[prefix + "b_beta"])
    return conditional_affine(normed, gamma, beta)


def biaffine_branch(hidden: Tensor, type_id: int, params: ModelParams, config: ModelConfig,
                    real_len: Optional[int] = None) -> Tensor:
    """
    Span scores y'_ij = x_i^T U x_j + W (x_i ; x_j) + b over start/end representations.

    The fused states are type-conditioned by CLN, run through a BiLSTM, and
    mapped to start (x_i) and end (x_j) vectors by GELU layers.

    Args:
        real_len: Number of leading non-pad rows; the BiLSTM runs over these
            only and pad rows get zero states

    Returns:
        Tensor: [N, N, C]; exact zeros when the branch is disabled
    """
    n, c = hidden.shape[0], config.n_classes
    if not config.use_biaffine:
        return _zeros(n, n, c)
    real = n if real_len is None else real_len
    if not 0 < real <= n:
        raise ShapeError(f"real_len {real_len} outside 1..{n}")

    type_vector = embedding_lookup(params["type_embedding"], np.array([type_id]))
    conditioned = cln(hidden, type_vector, params, "cln_type.", config.layer_norm_eps)
    if real < n:
        conditioned = slice_axis(conditioned, 0, real, axis=0)
    states = bilstm(
        conditioned,
        LSTMWeights(params["bilstm.fwd.w_ih"], params["bilstm.fwd.w_hh"], params["bilstm.fwd.bias"]),
        LSTMWeights(params["bilstm.bwd.w_ih"], params["bilstm.bwd.w_hh"], params["bilstm.bwd.bias"]),
    )
    if real < n:
        states = concat([states, _zeros(n - real, states.shape[1])], axis=0)
    starts = gelu(_linear(states, params, "biaffine.start"))
    ends = gelu(_linear(states, params, "biaffine.end"))

    b = config.d_biaffine
    pair_w = params["biaffine.W"]
    start_part = matmul(starts, transpose(slice_axis(pair_w, 0, b, axis=1)))
    end_part = matmul(ends, transpose(slice_axis(pair_w, b, 2 * b, axis=1)))
    scores = add(bilinear(starts, params["biaffine.U"], ends), pairwise_add(start_part, end_part))
    return add(scores, params["biaffine.b"])


def distance_bucket(distance) -> np.ndarray:
    """Bucket ids 0-9 for |distance|: 0, 1, 2, 3, 4-7, 8-15, 16-31, 32-63, 64-127, >=128."""
    return np.digitize(np.abs(np.asarray(distance)), DISTANCE_EDGES).astype(np.int64)


def region_ids(n: int) -> np.ndarray:
    """0 above the diagonal (i < j), 1 on it, 2 below."""
    i, j = np.indices((n, n))
    return np.where(i < j, 0, np.where(i == j, 1, 2)).astype(np.int64)


def word_pair_embeddings(hidden: Tensor, params: ModelParams,
                         config: ModelConfig) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Word-information grid V, distance grid E_d and region grid E_t.

    Returns:
        Tuple of tensors [N, N, d_h], [N, N, d_E_d], [N, N, d_E_t]; disabled
        embeddings are exact zeros
    """
    n = hidden.shape[0]
    grid = grid_cln(hidden, params, eps=config.layer_norm_eps)
    v = _grid_linear(grid, params["grid.proj_v.w"], params["grid.proj_v.b"])

    if config.use_distance_emb:
        i, j = np.indices((n, n))
        buckets = np.minimum(distance_bucket(j - i), config.n_dist_buckets - 1)
        e_d = embedding_lookup(params["grid.distance"], buckets)
    else:
        e_d = _zeros(n, n, config.d_E_d)

    if config.use_region_emb:
        e_t = embedding_lookup(params["grid.region"], np.minimum(region_ids(n), config.n_region_ids - 1))
    else:
        e_t = _zeros(n, n, config.d_E_t)
    return v, e_d, e_t


def mlp_branch(v: Tensor, e_d: Tensor, e_t: Tensor, params: ModelParams, config: ModelConfig,
               pair_mask: Optional[np.ndarray] = None,
               rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Grid scores y''_ij = MLP(Q_ij) with Q the concatenated dilated-conv outputs.

    G = GELU(Linear([V; E_d; E_t])); Q^l = GELU(DConv_l(G)) for dilations 1, 2, 3.
    Without convolution, Q = [G; G; G] feeds the same output layer.

    Args:
        pair_mask: [N, N] booleans, False at cells touching padding; those
            cells are zeroed before convolution
        rng: Dropout random source (train mode only)

    Returns:
        Tensor: [N, N, C]; exact zeros when the branch is disabled
    """
    n = v.shape[0]
    if not config.use_mlp_branch:
        return _zeros(n, n, config.n_classes)

    inputs = dropout(concat([v, e_d, e_t], axis=-1), config.dropout, rng)
    g = gelu(_grid_linear(inputs, params["grid.mlp.w"], params["grid.mlp.b"]))
    if pair_mask is not None and not pair_mask.all():
        g = mul(g, Tensor(np.broadcast_to(pair_mask[:, :, None], g.shape).astype(float)))

    if config.use_dconv:
        q = concat([
            gelu(conv2d_dilated(g, params[f"conv.{l}.kernel"], l, params[f"conv.{l}.bias"]))
            for l in (1, 2, 3)
        ], axis=-1)
    else:
        q = concat([g, g, g], axis=-1)
    return _grid_linear(q, params["output.w"], params["output.b"])


def co_predict(biaffine_logits: Tensor, mlp_logits: Tensor) -> Tensor:
    """Cellwise softmax over classes of y' + y''."""
    if biaffine_logits.shape != mlp_logits.shape:
        raise ShapeError(f"Branch logits differ in shape: {biaffine_logits.shape} vs {mlp_logits.shape}")
    return softmax(add(biaffine_logits, mlp_logits), axis=-1)


def loss(probs: Tensor, instance: MrcInstance, config: Optional[ModelConfig] = None) -> Tensor:
    """Masked cross-entropy over the instance's context upper triangle."""
    if probs.shape[:2] != instance.label_grid.shape:
        raise ShapeError(f"Probability grid {probs.shape} does not match instance grid {instance.label_grid.shape}")
    normalization = config.loss_normalization if config is not None else "mask"
    return masked_cross_entropy(probs, instance.label_grid, instance.loss_mask, normalization)


def forward(instance: MrcInstance, params: ModelParams, config: ModelConfig,
            train_mode: bool = False, rng: Optional[np.random.Generator] = None) -> ScoreGrid:
    """
    Full pipeline: encode, fuse, both branches, co-prediction.

    Args:
        instance: MRC instance
        params: Model parameters
        config: Model configuration
        train_mode: Enable dropout
        rng: Dropout random source

    Returns:
        ScoreGrid: Logits of both branches and the co-predicted probabilities
    """
    drop_rng = rng if train_mode else None
    layers = encode(instance.token_ids, params, config, train_mode=train_mode, rng=drop_rng)
    hidden = fuse_layers(layers, params["fusion.logits"])

    real = instance.token_ids != Vocab.PAD
    y_biaffine = biaffine_branch(hidden, instance.type_id, params, config, real_len=int(real.sum()))
    if config.use_mlp_branch:
        v, e_d, e_t = word_pair_embeddings(hidden, params, config)
        y_mlp = mlp_branch(v, e_d, e_t, params, config, pair_mask=real[:, None] & real[None, :], rng=drop_rng)
    else:
        n = instance.length
        y_mlp = _zeros(n, n, config.n_classes)
    return ScoreGrid(y_biaffine, y_mlp, co_predict(y_biaffine, y_mlp))
