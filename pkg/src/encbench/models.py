"""Inference-only forward passes for the supported encoder families.

The bert family and the roberta family (roberta and xlm-roberta share one
computation graph) differ here only in how position ids are built; the
xlm-roberta/roberta distinction is purely a tokenizer and vocabulary matter.
Dropout layers are identity: there is no training mode.

All heavy math goes through a :class:`encbench.backends.Backend`, so the
same forward runs on either backend. Input preparation (position ids, the
additive mask) is plain numpy; it is cheap and produces the tensors the
kernels consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backends import Backend
from .tensor import DType, ShapeError, Tensor

FAMILIES = ("bert", "roberta", "xlm-roberta")

# additive logit for masked keys; large enough that exp underflows to zero
# after row-max subtraction, finite so no NaN can leak out of the softmax
MASKED_LOGIT = -1.0e9


@dataclass(frozen=True)
class EncoderConfig:
    family: str
    hidden_size: int
    num_hidden_layers: int
    num_attention_heads: int
    intermediate_size: int
    vocab_size: int
    max_position_embeddings: int
    type_vocab_size: int
    layer_norm_eps: float
    pad_token_id: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        positive = (
            ("hidden_size", self.hidden_size),
            ("num_attention_heads", self.num_attention_heads),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
            ("max_position_embeddings", self.max_position_embeddings),
            ("type_vocab_size", self.type_vocab_size),
        )
        for name, value in positive:
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        # num_hidden_layers may be 0 for degenerate test configs
        if self.num_hidden_layers < 0:
            raise ValueError("num_hidden_layers must be >= 0")
        if self.layer_norm_eps <= 0:
            raise ValueError("layer_norm_eps must be positive")
        if self.hidden_size % self.num_attention_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_attention_heads {self.num_attention_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_attention_heads

    @property
    def max_sequence_length(self) -> int:
        limit = min(self.max_position_embeddings, 512)
        if self.family != "bert":
            # roberta position ids start at pad_token_id + 1
            limit = min(limit, self.max_position_embeddings - self.pad_token_id - 1)
        return limit


@dataclass(frozen=True)
class LayerWeights:
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    attn_out_w: Tensor
    attn_out_b: Tensor
    attn_ln_gamma: Tensor
    attn_ln_beta: Tensor
    ffn_in_w: Tensor
    ffn_in_b: Tensor
    ffn_out_w: Tensor
    ffn_out_b: Tensor
    ffn_ln_gamma: Tensor
    ffn_ln_beta: Tensor


@dataclass(frozen=True)
class EncoderWeights:
    word_embeddings: Tensor
    position_embeddings: Tensor
    token_type_embeddings: Tensor
    emb_ln_gamma: Tensor
    emb_ln_beta: Tensor
    layers: tuple[LayerWeights, ...]
    pooler_w: Optional[Tensor] = None
    pooler_b: Optional[Tensor] = None

    @property
    def has_pooler(self) -> bool:
        return self.pooler_w is not None

    def validate(self, config: EncoderConfig) -> None:
        h = config.hidden_size
        checks = [
            ("word_embeddings", self.word_embeddings, (config.vocab_size, h)),
            ("position_embeddings", self.position_embeddings,
             (config.max_position_embeddings, h)),
            ("token_type_embeddings", self.token_type_embeddings,
             (config.type_vocab_size, h)),
            ("emb_ln_gamma", self.emb_ln_gamma, (h,)),
            ("emb_ln_beta", self.emb_ln_beta, (h,)),
        ]
        if len(self.layers) != config.num_hidden_layers:
            raise ShapeError(
                f"weights hold {len(self.layers)} layers, config says "
                f"{config.num_hidden_layers}"
            )
        for n, layer in enumerate(self.layers):
            checks += [
                (f"layer.{n}.q_w", layer.q_w, (h, h)),
                (f"layer.{n}.ffn_in_w", layer.ffn_in_w, (config.intermediate_size, h)),
                (f"layer.{n}.ffn_out_w", layer.ffn_out_w, (h, config.intermediate_size)),
                (f"layer.{n}.ffn_ln_gamma", layer.ffn_ln_gamma, (h,)),
            ]
        if self.has_pooler:
            checks.append(("pooler_w", self.pooler_w, (h, h)))
        for name, t, want in checks:
            if t.shape != want:
                raise ShapeError(f"{name} has shape {t.shape}, expected {want}")


@dataclass(frozen=True)
class EncoderInput:
    input_ids: Tensor
    attention_mask: Tensor
    token_type_ids: Tensor

    def __post_init__(self):
        shape = self.input_ids.shape
        if len(shape) != 2:
            raise ShapeError(f"input_ids must be [batch, seq], got {shape}")
        for name, t in (("attention_mask", self.attention_mask),
                        ("token_type_ids", self.token_type_ids)):
            if t.shape != shape:
                raise ShapeError(f"{name} shape {t.shape} does not match input_ids {shape}")
            if t.dtype is not DType.I64:
                raise ShapeError(f"{name} must be I64")
        if self.input_ids.dtype is not DType.I64:
            raise ShapeError("input_ids must be I64")
        mask = self.attention_mask.data
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("attention_mask values must be 0 or 1")
        if (mask.sum(axis=1) < 1).any():
            raise ValueError("every row needs at least one unmasked position")

    @property
    def batch_size(self) -> int:
        return self.input_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.input_ids.shape[1]


@dataclass(frozen=True)
class EncoderOutput:
    last_hidden_state: Tensor
    pooler_output: Optional[Tensor] = None


def build_position_ids(input_ids: Tensor, attention_mask: Tensor,
                       config: EncoderConfig) -> Tensor:
    """Family-specific position ids.

    bert counts absolute positions 0..S-1. The roberta families place
    pad_token_id at padded positions and pad_token_id plus the running count
    of unmasked tokens at each real position.
    """
    b, s = input_ids.shape
    if config.family == "bert":
        pos = np.broadcast_to(np.arange(s, dtype=np.int64), (b, s))
        return Tensor.from_array(pos, DType.I64)
    mask = attention_mask.data
    running = np.cumsum(mask, axis=1)
    pos = np.where(mask == 1, config.pad_token_id + running, config.pad_token_id)
    return Tensor.from_array(pos.astype(np.int64), DType.I64)


def additive_attention_mask(attention_mask: Tensor) -> Tensor:
    """[B,S] 0/1 mask to [B,1,1,S] additive logits: 0 keeps, -1e9 drops."""
    mask = attention_mask.data
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("attention_mask values must be 0 or 1")
    b, s = mask.shape
    additive = np.where(mask == 1, 0.0, MASKED_LOGIT).astype(np.float32)
    return Tensor.from_array(additive.reshape(b, 1, 1, s), DType.F32)


def embed(inp: EncoderInput, weights: EncoderWeights, config: EncoderConfig,
          backend: Backend) -> Tensor:
    position_ids = build_position_ids(inp.input_ids, inp.attention_mask, config)
    words = backend.embedding_lookup(weights.word_embeddings, inp.input_ids)
    positions = backend.embedding_lookup(weights.position_embeddings, position_ids)
    types = backend.embedding_lookup(weights.token_type_embeddings, inp.token_type_ids)
    summed = backend.add(backend.add(words, positions), types)
    return backend.layer_norm(summed, weights.emb_ln_gamma, weights.emb_ln_beta,
                              config.layer_norm_eps)


def _split_heads(x: Tensor, config: EncoderConfig, backend: Backend) -> Tensor:
    b, s, _ = x.shape
    x = backend.reshape(x, (b, s, config.num_attention_heads, config.head_dim))
    return backend.transpose(x, (0, 2, 1, 3))


def multi_head_attention(hidden: Tensor, layer: LayerWeights, mask: Tensor,
                         config: EncoderConfig, backend: Backend) -> Tensor:
    b, s, h = hidden.shape
    q = _split_heads(backend.linear(hidden, layer.q_w, layer.q_b), config, backend)
    k = _split_heads(backend.linear(hidden, layer.k_w, layer.k_b), config, backend)
    v = _split_heads(backend.linear(hidden, layer.v_w, layer.v_b), config, backend)

    scores = backend.batched_matmul(q, backend.transpose(k, (0, 1, 3, 2)))
    scores = backend.scale(scores, 1.0 / math.sqrt(config.head_dim))
    scores = backend.add(scores, mask)
    probs = backend.softmax(scores, axis=-1)

    context = backend.batched_matmul(probs, v)
    context = backend.transpose(context, (0, 2, 1, 3))
    context = backend.reshape(context, (b, s, h))

    out = backend.linear(context, layer.attn_out_w, layer.attn_out_b)
    return backend.layer_norm(backend.add(hidden, out), layer.attn_ln_gamma,
                              layer.attn_ln_beta, config.layer_norm_eps)


def feed_forward(hidden: Tensor, layer: LayerWeights, config: EncoderConfig,
                 backend: Backend) -> Tensor:
    inner = backend.gelu(backend.linear(hidden, layer.ffn_in_w, layer.ffn_in_b))
    out = backend.linear(inner, layer.ffn_out_w, layer.ffn_out_b)
    return backend.layer_norm(backend.add(hidden, out), layer.ffn_ln_gamma,
                              layer.ffn_ln_beta, config.layer_norm_eps)


def forward(inp: EncoderInput, weights: EncoderWeights, config: EncoderConfig,
            backend: Backend) -> EncoderOutput:
    """Full encoder pass: embeddings, L transformer layers, optional pooler."""
    weights.validate(config)
    if inp.seq_len > config.max_sequence_length:
        raise ShapeError(
            f"sequence length {inp.seq_len} exceeds the supported maximum "
            f"{config.max_sequence_length} for this config"
        )
    mask = additive_attention_mask(inp.attention_mask)
    hidden = embed(inp, weights, config, backend)
    for layer in weights.layers:
        hidden = multi_head_attention(hidden, layer, mask, config, backend)
        hidden = feed_forward(hidden, layer, config, backend)

    pooled = None
    if weights.has_pooler:
        b, s, h = hidden.shape
        first = backend.reshape(backend.slice(hidden, [(0, b), (0, 1), (0, h)]), (b, h))
        pooled = backend.tanh(backend.linear(first, weights.pooler_w, weights.pooler_b))
    return EncoderOutput(last_hidden_state=hidden, pooler_output=pooled)
