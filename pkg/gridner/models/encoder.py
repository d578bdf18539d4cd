"""
Transformer Encoder
Small pre-norm transformer over character ids, trained from scratch, with
weighted fusion of all hidden layers and a tied-embedding masked-LM head.
"""

from typing import List, Optional

import numpy as np

from gridner.core.exceptions import ContractError, ShapeError
from gridner.diffcore import (
    Tensor,
    add,
    concat,
    dropout,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    slice_axis,
    softmax,
    transpose,
)
from gridner.models.params import ModelParams
from gridner.schemas.config import ModelConfig
from gridner.schemas.corpus import Vocab


MASK_VALUE = -1e30


def _linear(x: Tensor, params: ModelParams, weight: str, bias: str) -> Tensor:
    return add(matmul(x, params[weight]), params[bias])


def _attention(x: Tensor, params: ModelParams, prefix: str, config: ModelConfig,
               key_bias: Tensor, rng: Optional[np.random.Generator]) -> Tensor:
    q = _linear(x, params, prefix + "attn.wq", prefix + "attn.bq")
    k = _linear(x, params, prefix + "attn.wk", prefix + "attn.bk")
    v = _linear(x, params, prefix + "attn.wv", prefix + "attn.bv")
    head_dim = config.d_model // config.n_heads
    heads = []
    for h in range(config.n_heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh, kh, vh = (slice_axis(t, lo, hi, axis=1) for t in (q, k, v))
        scores = add(scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(head_dim)), key_bias)
        weights = dropout(softmax(scores, axis=-1), config.dropout, rng)
        heads.append(matmul(weights, vh))
    context = concat(heads, axis=1) if len(heads) > 1 else heads[0]
    return _linear(context, params, prefix + "attn.wo", prefix + "attn.bo")


def _block(x: Tensor, params: ModelParams, layer: int, config: ModelConfig,
           key_bias: Tensor, rng: Optional[np.random.Generator]) -> Tensor:
    prefix = f"encoder.{layer}."
    eps = config.layer_norm_eps
    normed = layer_norm(x, params[prefix + "ln1.gamma"], params[prefix + "ln1.beta"], eps)
    x = add(x, dropout(_attention(normed, params, prefix, config, key_bias, rng), config.dropout, rng))
    normed = layer_norm(x, params[prefix + "ln2.gamma"], params[prefix + "ln2.beta"], eps)
    hidden = gelu(_linear(normed, params, prefix + "ffn.w1", prefix + "ffn.b1"))
    return add(x, dropout(_linear(hidden, params, prefix + "ffn.w2", prefix + "ffn.b2"), config.dropout, rng))


def encode(token_ids: np.ndarray, params: ModelParams, config: ModelConfig,
           train_mode: bool = False, rng: Optional[np.random.Generator] = None) -> List[Tensor]:
    """
    Encode a token sequence.

    Args:
        token_ids: [N] integer ids
        params: Model parameters
        config: Model configuration
        train_mode: Enable dropout (needs `rng`)
        rng: Dropout random source

    Returns:
        List of L + 1 hidden-state tensors [N, d_model]; index 0 is the
        token + position embedding, index l the output of block l
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    n = token_ids.shape[0]
    if n > config.max_len:
        raise ContractError(f"Sequence of {n} tokens exceeds max_len={config.max_len}")
    if n < 1:
        raise ContractError("Cannot encode an empty sequence")
    drop_rng = rng if train_mode else None

    # Padding keys are excluded from every query's attention.
    key_bias = Tensor(np.broadcast_to(np.where(token_ids == Vocab.PAD, MASK_VALUE, 0.0), (n, n)))

    x = add(embedding_lookup(params["embed.token"], token_ids),
            embedding_lookup(params["embed.position"], np.arange(n)))
    x = dropout(x, config.dropout, drop_rng)
    layers = [x]
    for layer in range(config.n_layers):
        x = _block(x, params, layer, config, key_bias, drop_rng)
        layers.append(x)
    return layers


def fuse_layers(layer_outputs: List[Tensor], fusion_logits: Tensor) -> Tensor:
    """
    Convex combination of layer outputs, H = sum_l softmax(alpha)_l * layer_l.

    Args:
        layer_outputs: L + 1 tensors of identical shape [N, d]
        fusion_logits: [L + 1] unnormalized weights

    Returns:
        Tensor: [N, d]
    """
    shape = layer_outputs[0].shape
    if any(t.shape != shape for t in layer_outputs) or fusion_logits.shape != (len(layer_outputs),):
        raise ShapeError("fuse_layers needs equally shaped layers and one logit per layer")
    flat = concat([reshape(t, (1, -1)) for t in layer_outputs], axis=0)
    weights = softmax(reshape(fusion_logits, (1, len(layer_outputs))), axis=-1)
    return reshape(matmul(weights, flat), shape)


def mlm_logits(hidden: Tensor, params: ModelParams) -> Tensor:
    """Vocabulary logits from the tied token embedding, [N, d] -> [N, V]."""
    return add(matmul(hidden, transpose(params["embed.token"])), params["mlm.bias"])
