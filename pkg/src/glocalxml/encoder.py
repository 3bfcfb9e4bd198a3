"""Pre-norm transformer encoder that keeps the hidden states of every layer."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import NumericError, RangeError, ValidationError
from .numerics import Rng, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    max_positions: int = 64
    vocab_size: int = 1000
    dropout: float = 0.0
    embed_std: float = 0.1

    def __post_init__(self):
        if self.num_layers < 0:
            raise ValidationError("num_layers must be >= 0")
        if self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ValidationError(
                f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.vocab_size < 3 or self.max_positions < 2:
            raise ValidationError("vocab_size must be >= 3 and max_positions >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def linear_init(rng: Rng, fan_in: int, fan_out: int, name: str) -> tuple[Tensor, Tensor]:
    w = _param(rng.normal((fan_in, fan_out), 1.0 / math.sqrt(fan_in)), f"{name}.weight")
    b = _param(np.zeros(fan_out), f"{name}.bias")
    return w, b


class EncoderLayer:
    def __init__(self, config: EncoderConfig, rng: Rng, prefix: str):
        d, f = config.model_dim, config.ffn_dim
        self.config = config
        self.wq, self.bq = linear_init(rng, d, d, f"{prefix}.attn.query")
        self.wk, self.bk = linear_init(rng, d, d, f"{prefix}.attn.key")
        self.wv, self.bv = linear_init(rng, d, d, f"{prefix}.attn.value")
        self.wo, self.bo = linear_init(rng, d, d, f"{prefix}.attn.output")
        self.w1, self.b1 = linear_init(rng, d, f, f"{prefix}.ffn.in")
        self.w2, self.b2 = linear_init(rng, f, d, f"{prefix}.ffn.out")
        self.ln1_gain = _param(np.ones(d), f"{prefix}.norm1.gain")
        self.ln1_bias = _param(np.zeros(d), f"{prefix}.norm1.bias")
        self.ln2_gain = _param(np.ones(d), f"{prefix}.norm2.gain")
        self.ln2_bias = _param(np.zeros(d), f"{prefix}.norm2.bias")

    def parameters(self) -> list[Tensor]:
        return [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
            self.w1, self.b1, self.w2, self.b2,
            self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias,
        ]

    def self_attention(self, x: Tensor, mask: np.ndarray) -> Tensor:
        B, S, d = x.shape
        h = self.config.num_heads
        dh = d // h

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, S, h, dh).transpose(0, 2, 1, 3)

        q = heads(x @ self.wq + self.bq)
        k = heads(x @ self.wk + self.bk)
        v = heads(x @ self.wv + self.bv)
        scores = q @ k.transpose(0, 1, 3, 2)
        # padded keys are dropped from every query's normaliser
        alpha = nx.softmax_rows(scores, mask[:, None, None, :], tau=math.sqrt(dh))
        ctx = (alpha @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
        return ctx @ self.wo + self.bo

    def __call__(self, x: Tensor, mask: np.ndarray, rng: Rng | None = None) -> Tensor:
        rate = self.config.dropout
        a = self.self_attention(nx.layer_norm(x, self.ln1_gain, self.ln1_bias), mask)
        x = x + nx.dropout(a, rate, rng)
        hidden = nx.gelu(nx.layer_norm(x, self.ln2_gain, self.ln2_bias) @ self.w1 + self.b1)
        return x + nx.dropout(hidden @ self.w2 + self.b2, rate, rng)


@dataclass
class HiddenStates:
    """Outputs ``H^(0) .. H^(N)``; ``H^(0)`` is token plus position embedding."""

    layers: list[Tensor]
    mask: np.ndarray

    @property
    def num_layers(self) -> int:
        return len(self.layers) - 1

    def layer(self, n: int) -> Tensor:
        if not 0 <= n <= self.num_layers:
            raise RangeError(f"layer {n} outside [0, {self.num_layers}]")
        return self.layers[n]


def layer(hidden_states: HiddenStates, n: int) -> Tensor:
    return hidden_states.layer(n)


class Encoder:
    """Token/position embeddings followed by ``num_layers`` pre-norm blocks."""

    def __init__(self, config: EncoderConfig, rng: Rng):
        self.config = config
        d = config.model_dim
        self.token_emb = _param(rng.normal((config.vocab_size, d), config.embed_std), "encoder.token_emb")
        self.pos_emb = _param(rng.normal((config.max_positions, d), config.embed_std), "encoder.pos_emb")
        self.layers = [EncoderLayer(config, rng, f"encoder.layers.{i}") for i in range(config.num_layers)]

    def parameters(self) -> list[Tensor]:
        params = [self.token_emb, self.pos_emb]
        for blk in self.layers:
            params.extend(blk.parameters())
        return params

    def embed(self, token_ids: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        token_ids = np.asarray(token_ids)
        if token_ids.ndim == 1:
            token_ids = token_ids[None, :]
        S = token_ids.shape[1]
        if S > self.config.max_positions:
            raise RangeError(f"sequence length {S} exceeds max_positions {self.config.max_positions}")
        if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= self.config.vocab_size):
            raise RangeError(f"token id outside [0, {self.config.vocab_size})")
        return nx.embedding(self.token_emb, token_ids) + self.pos_emb[:S]

    def encode_all_layers(self, h0: Tensor, mask: np.ndarray, rng: Rng | None = None) -> HiddenStates:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 1:
            mask = mask[None, :]
        states = [h0]
        x = h0
        for n, blk in enumerate(self.layers, start=1):
            x = blk(x, mask, rng)
            if not np.all(np.isfinite(x.data)):
                raise NumericError(f"non-finite activation in encoder layer {n}")
            states.append(x)
        return HiddenStates(states, mask)

    def __call__(self, token_ids: np.ndarray, mask: np.ndarray, rng: Rng | None = None) -> HiddenStates:
        return self.encode_all_layers(self.embed(token_ids, mask), mask, rng)
