"""
Model Parameters
Named learnable tensors of the network, grouped for the two learning rates.
"""

from collections import OrderedDict
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from gridner.core.exceptions import CheckpointError
from gridner.diffcore import Tensor, create
from gridner.schemas.config import ModelConfig
from gridner.schemas.corpus import ENTITY_TYPES

Shape = Tuple[int, ...]

# Parameters under these prefixes train at the encoder learning rate.
ENCODER_PREFIXES = ("embed.", "encoder.", "mlm.")


def parameter_shapes(config: ModelConfig, vocab_size: int) -> "OrderedDict[str, Tuple[Shape, str]]":
    """
    Every parameter's shape and initializer as a pure function of the config.

    Returns:
        Ordered name -> (shape, init) where init is an initializer spec for `create`
    """
    d, c = config.d_model, config.n_classes
    specs: "OrderedDict[str, Tuple[Shape, str]]" = OrderedDict()

    specs["embed.token"] = ((vocab_size, d), "xavier")
    specs["embed.position"] = ((config.max_len, d), "xavier")
    for layer in range(config.n_layers):
        p = f"encoder.{layer}."
        specs[p + "ln1.gamma"] = ((d,), "ones")
        specs[p + "ln1.beta"] = ((d,), "zeros")
        for proj in ("wq", "wk", "wv", "wo"):
            specs[p + f"attn.{proj}"] = ((d, d), "xavier")
            specs[p + f"attn.b{proj[1]}"] = ((d,), "zeros")
        specs[p + "ln2.gamma"] = ((d,), "ones")
        specs[p + "ln2.beta"] = ((d,), "zeros")
        specs[p + "ffn.w1"] = ((d, config.d_ff), "xavier")
        specs[p + "ffn.b1"] = ((config.d_ff,), "zeros")
        specs[p + "ffn.w2"] = ((config.d_ff, d), "xavier")
        specs[p + "ffn.b2"] = ((d,), "zeros")
    specs["mlm.bias"] = ((vocab_size,), "zeros")

    specs["fusion.logits"] = ((config.n_layers + 1,), "zeros")
    specs["type_embedding"] = ((len(ENTITY_TYPES), config.d_type), "xavier")
    _cln_specs(specs, "cln_type.", config.d_type, d)

    h = config.d_lstm
    for direction in ("fwd", "bwd"):
        specs[f"bilstm.{direction}.w_ih"] = ((d, 4 * h), "xavier")
        specs[f"bilstm.{direction}.w_hh"] = ((h, 4 * h), "xavier")
        specs[f"bilstm.{direction}.bias"] = ((4 * h,), "zeros")
    b = config.d_biaffine
    specs["biaffine.start.w"] = ((2 * h, b), "xavier")
    specs["biaffine.start.b"] = ((b,), "zeros")
    specs["biaffine.end.w"] = ((2 * h, b), "xavier")
    specs["biaffine.end.b"] = ((b,), "zeros")
    specs["biaffine.U"] = ((b, c, b), "xavier")
    specs["biaffine.W"] = ((c, 2 * b), "xavier")
    specs["biaffine.b"] = ((c,), "zeros")

    _cln_specs(specs, "cln_grid.", d, d)
    specs["grid.proj_v.w"] = ((d, config.d_h), "xavier")
    specs["grid.proj_v.b"] = ((config.d_h,), "zeros")
    specs["grid.distance"] = ((config.n_dist_buckets, config.d_E_d), "xavier")
    specs["grid.region"] = ((config.n_region_ids, config.d_E_t), "xavier")
    specs["grid.mlp.w"] = ((config.d_h + config.d_E_d + config.d_E_t, config.d_g), "xavier")
    specs["grid.mlp.b"] = ((config.d_g,), "zeros")
    for dilation in (1, 2, 3):
        specs[f"conv.{dilation}.kernel"] = ((3, 3, config.d_g, config.d_g), "xavier")
        specs[f"conv.{dilation}.bias"] = ((config.d_g,), "zeros")
    specs["output.w"] = ((3 * config.d_g, c), "xavier")
    specs["output.b"] = ((c,), "zeros")
    return specs


def _cln_specs(specs, prefix: str, d_cond: int, d: int) -> None:
    # Zero projections: conditioning starts as plain layer norm.
    specs[prefix + "w_gamma"] = ((d_cond, d), "zeros")
    specs[prefix + "b_gamma"] = ((d,), "ones")
    specs[prefix + "w_beta"] = ((d_cond, d), "zeros")
    specs[prefix + "b_beta"] = ((d,), "zeros")


class ModelParams:
    """
    Ordered collection of all learnable tensors.

    Args:
        tensors: Ordered name -> Tensor
    """

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = tensors

    @classmethod
    def initialize(cls, config: ModelConfig, vocab_size: int,
                   generator: Optional[np.random.Generator] = None) -> "ModelParams":
        """
        Create freshly initialized parameters.

        Args:
            config: Model configuration
            vocab_size: Number of vocabulary entries
            generator: Random source for initializers

        Returns:
            ModelParams: New parameters, all marked requires_grad
        """
        tensors = OrderedDict(
            (name, create(shape, init, requires_grad=True, name=name, generator=generator))
            for name, (shape, init) in parameter_shapes(config, vocab_size).items()
        )
        return cls(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> List[str]:
        return list(self.tensors)

    @staticmethod
    def group_of(name: str) -> str:
        return "encoder" if name.startswith(ENCODER_PREFIXES) else "heads"

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data) for name, t in self.tensors.items())

    def load_state_dict(self, arrays: Mapping[str, np.ndarray], strict: bool = True,
                        only: Optional[Tuple[str, ...]] = None) -> List[str]:
        """
        Copy arrays into the parameters after checking names and shapes.

        Args:
            arrays: Name -> array, e.g. from a checkpoint
            strict: Require the name sets to be identical
            only: Load only names with one of these prefixes (others keep their values)

        Returns:
            List of names that were loaded

        Raises:
            CheckpointError: Unknown or missing name, or the first shape mismatch
        """
        unknown = [name for name in arrays if name not in self.tensors]
        if unknown:
            raise CheckpointError(f"Unknown parameter name in checkpoint: '{unknown[0]}'")
        if strict:
            missing = [name for name in self.tensors if name not in arrays]
            if missing:
                raise CheckpointError(f"Checkpoint is missing parameter '{missing[0]}'")

        selected = [n for n in self.tensors if n in arrays and (only is None or n.startswith(only))]
        for name in selected:
            expected = self.tensors[name].shape
            if tuple(arrays[name].shape) != expected:
                raise CheckpointError(
                    f"Shape mismatch for '{name}': checkpoint {list(arrays[name].shape)} vs config {list(expected)}",
                    detail={"tensor": name},
                )
        for name in selected:
            self.tensors[name].data = np.array(arrays[name], dtype=self.tensors[name].data.dtype)
        return selected

    def grads(self) -> Dict[str, Optional[np.ndarray]]:
        return {name: t.grad for name, t in self.tensors.items()}
