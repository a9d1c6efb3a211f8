"""Transformer encoder blocks on top of ``krts.autograd``.

Layers are post-norm: self-attention, residual, layer norm, then a ReLU
feed-forward, residual, layer norm. No positional encoding is added.
"""
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, model_validator

from krts.autograd import (
    Parameter, ShapeError, Tensor, dropout, layer_norm, linear, relu, softmax,
)

PADDING_VALUE = -1e9


class InitConfig(BaseModel):
    # "he": N(0, 2 / fan_in); "normal": N(0, std^2)
    scheme: str = "he"
    std: float = 1.0
    bias: float = 0.0

    @model_validator(mode="after")
    def _check_scheme(self):
        if self.scheme not in ("he", "normal"):
            raise ValueError(f"Unknown weight initialisation '{self.scheme}'")
        return self


class EncoderConfig(BaseModel):
    layers: int = 5
    heads: int = 7
    model_dim: int = 91
    ff_dim: int = 512
    dropout: float = 0.1
    activation: str = "relu"

    @model_validator(mode="after")
    def _check_heads(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(
                f"Model width {self.model_dim} is not divisible by {self.heads} heads"
            )
        if self.activation != "relu":
            raise ValueError(f"Unsupported activation '{self.activation}'")
        return self

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


def init_weight(
    name: str, shape, init: InitConfig, rng: np.random.Generator, dtype=np.float64,
) -> Parameter:
    fan_in = shape[0]
    std = math.sqrt(2.0 / fan_in) if init.scheme == "he" else init.std
    return Parameter(rng.normal(0.0, std, size=shape), name=name, dtype=dtype)


def init_bias(name: str, shape, init: InitConfig, dtype=np.float64) -> Parameter:
    return Parameter(np.full(shape, init.bias), name=name, dtype=dtype)


def zeros(name: str, shape, dtype=np.float64) -> Parameter:
    return Parameter(np.zeros(shape), name=name, dtype=dtype)


def ones(name: str, shape, dtype=np.float64) -> Parameter:
    return Parameter(np.ones(shape), name=name, dtype=dtype)


@dataclass
class AttentionWeights:
    heads: int
    w_q: Parameter
    b_q: Parameter
    w_k: Parameter
    b_k: Parameter
    w_v: Parameter
    b_v: Parameter
    w_o: Parameter
    b_o: Parameter

    @classmethod
    def create(
        cls, prefix: str, dim: int, heads: int, init: InitConfig, rng: np.random.Generator,
        dtype=np.float64,
    ) -> "AttentionWeights":
        return cls(
            heads=heads,
            w_q=init_weight(f"{prefix}.w_q", (dim, dim), init, rng, dtype),
            b_q=init_bias(f"{prefix}.b_q", (dim,), init, dtype),
            w_k=init_weight(f"{prefix}.w_k", (dim, dim), init, rng, dtype),
            b_k=init_bias(f"{prefix}.b_k", (dim,), init, dtype),
            w_v=init_weight(f"{prefix}.w_v", (dim, dim), init, rng, dtype),
            b_v=init_bias(f"{prefix}.b_v", (dim,), init, dtype),
            w_o=init_weight(f"{prefix}.w_o", (dim, dim), init, rng, dtype),
            b_o=init_bias(f"{prefix}.b_o", (dim,), init, dtype),
        )

    def parameters(self) -> List[Parameter]:
        return [
            self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v, self.w_o, self.b_o,
        ]


@dataclass
class EncoderLayerWeights:
    attention: AttentionWeights
    norm1_gain: Parameter
    norm1_bias: Parameter
    ff_w1: Parameter
    ff_b1: Parameter
    ff_w2: Parameter
    ff_b2: Parameter
    norm2_gain: Parameter
    norm2_bias: Parameter

    @classmethod
    def create(
        cls, prefix: str, config: EncoderConfig, init: InitConfig, rng: np.random.Generator,
        dtype=np.float64,
    ) -> "EncoderLayerWeights":
        d, ff = config.model_dim, config.ff_dim
        return cls(
            attention=AttentionWeights.create(
                f"{prefix}.attention", d, config.heads, init, rng, dtype,
            ),
            norm1_gain=ones(f"{prefix}.norm1.gain", (d,), dtype),
            norm1_bias=zeros(f"{prefix}.norm1.bias", (d,), dtype),
            ff_w1=init_weight(f"{prefix}.ff.w1", (d, ff), init, rng, dtype),
            ff_b1=init_bias(f"{prefix}.ff.b1", (ff,), init, dtype),
            ff_w2=init_weight(f"{prefix}.ff.w2", (ff, d), init, rng, dtype),
            ff_b2=init_bias(f"{prefix}.ff.b2", (d,), init, dtype),
            norm2_gain=ones(f"{prefix}.norm2.gain", (d,), dtype),
            norm2_bias=zeros(f"{prefix}.norm2.bias", (d,), dtype),
        )

    def parameters(self) -> List[Parameter]:
        return self.attention.parameters() + [
            self.norm1_gain, self.norm1_bias,
            self.ff_w1, self.ff_b1, self.ff_w2, self.ff_b2,
            self.norm2_gain, self.norm2_bias,
        ]


def create_encoder(
    config: EncoderConfig, init: InitConfig, rng: np.random.Generator, dtype=np.float64,
) -> List[EncoderLayerWeights]:
    return [
        EncoderLayerWeights.create(f"encoder.{i}", config, init, rng, dtype)
        for i in range(config.layers)
    ]


def multi_head_attention(
    x: Tensor, weights: AttentionWeights, valid: Optional[np.ndarray] = None,
) -> Tensor:
    """Self-attention over the entity axis of ``x`` (e×d or B×e×d).

    ``valid`` (B×e booleans) marks real rows; padded rows are never attended to.
    """
    unbatched = x.ndim == 2
    if unbatched:
        x = x.reshape(1, *x.shape)
    batch, entities, dim = x.shape
    heads = weights.heads
    if dim % heads != 0:
        raise ShapeError(f"Width {dim} is not divisible by {heads} heads")
    if weights.w_q.shape[0] != dim:
        raise ShapeError(f"Attention weights of width {weights.w_q.shape[0]} got input width {dim}")
    head_dim = dim // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, entities, heads, head_dim).transpose(0, 2, 1, 3)

    q = split(linear(x, weights.w_q, weights.b_q))
    k = split(linear(x, weights.w_k, weights.b_k))
    v = split(linear(x, weights.w_v, weights.b_v))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    if valid is not None:
        padding = np.where(valid, 0.0, PADDING_VALUE).astype(x.dtype)
        scores = scores + Tensor(padding[:, None, None, :])
    attention = softmax(scores, axis=-1)
    context = (attention @ v).transpose(0, 2, 1, 3).reshape(batch, entities, dim)
    out = linear(context, weights.w_o, weights.b_o)
    return out.reshape(entities, dim) if unbatched else out


def encoder_layer(
    x: Tensor,
    weights: EncoderLayerWeights,
    rate: float,
    rng: Optional[np.random.Generator],
    training: bool,
    valid: Optional[np.ndarray] = None,
) -> Tensor:
    attended = dropout(multi_head_attention(x, weights.attention, valid), rate, rng, training)
    x = layer_norm(x + attended, weights.norm1_gain, weights.norm1_bias)
    hidden = relu(linear(x, weights.ff_w1, weights.ff_b1))
    fed = dropout(linear(hidden, weights.ff_w2, weights.ff_b2), rate, rng, training)
    return layer_norm(x + fed, weights.norm2_gain, weights.norm2_bias)


def encode_stack(
    x: Tensor,
    config: EncoderConfig,
    weights: List[EncoderLayerWeights],
    rng: Optional[np.random.Generator],
    training: bool,
    valid: Optional[np.ndarray] = None,
) -> Tensor:
    if x.shape[-1] != config.model_dim:
        raise ShapeError(f"Encoder expects width {config.model_dim}, got {x.shape[-1]}")
    for layer in weights:
        x = encoder_layer(x, layer, config.dropout, rng, training, valid)
    return x
