"""Global ([CLS] vs label embedding) and local (label-word attention) classifiers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .encoder import linear_init
from .errors import DimensionError, DomainError, ValidationError
from .numerics import Rng, Tensor


def _param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class GlobalHead:
    """Sigmoid of the dot product between the last-layer [CLS] vector and each label.

    With ``pooler=True`` the [CLS] vector first goes through ``tanh(h W + b)``.
    """

    def __init__(self, model_dim: int, num_labels: int, rng: Rng, pooler: bool = False,
                 pooled_dim: int | None = None):
        self.model_dim = model_dim
        self.num_labels = num_labels
        self.pooler = pooler
        out_dim = model_dim if not pooler else (pooled_dim or model_dim)
        if pooler:
            self.pool_w, self.pool_b = linear_init(rng, model_dim, out_dim, "global.pooler")
        else:
            self.pool_w = self.pool_b = None
        self.label_emb = _param(rng.normal((num_labels, out_dim), 1.0 / math.sqrt(out_dim)),
                                "global.label_emb")

    def pooler_parameters(self) -> list[Tensor]:
        return [self.pool_w, self.pool_b] if self.pooler else []

    def classifier_parameters(self) -> list[Tensor]:
        return [self.label_emb]

    def parameters(self) -> list[Tensor]:
        return self.pooler_parameters() + self.classifier_parameters()

    def features(self, h_cls: Tensor) -> Tensor:
        if h_cls.ndim != 2 or h_cls.shape[1] != self.model_dim:
            raise DimensionError(f"global head expects [batch, {self.model_dim}], got {h_cls.shape}")
        if self.pooler:
            return nx.tanh(h_cls @ self.pool_w + self.pool_b)
        return h_cls

    def __call__(self, h_cls: Tensor) -> Tensor:
        return self.features(h_cls) @ self.label_emb.transpose()


def global_logits(head: GlobalHead, h_cls: Tensor) -> Tensor:
    return head(nx.as_tensor(h_cls))


@dataclass
class AttentionMap:
    """Label-word attention weights ``[batch, L, positions]``."""

    weights: np.ndarray
    mask: np.ndarray

    def dump(self, path: str | Path, doc_ids=None, min_weight: float = 0.0) -> None:
        """Write ``doc_id<TAB>label<TAB>position<TAB>weight`` rows for unmasked positions."""
        B, L, S = self.weights.shape
        doc_ids = list(range(B)) if doc_ids is None else list(doc_ids)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("doc_id\tlabel\tposition\tweight\n")
            for b in range(B):
                for lab in range(L):
                    for pos in np.flatnonzero(self.mask[b]):
                        w = self.weights[b, lab, pos]
                        if w >= min_weight:
                            fh.write(f"{doc_ids[b]}\t{lab}\t{pos}\t{w:.10g}\n")


class LocalHead:
    """Labels query the token keys of one encoder layer; an MLP scores the retrieved value.

    Scores ``<psi_K(h_i), e_j>`` are softmaxed over all unmasked positions
    (the [CLS] slot included) at temperature ``tau``.
    """

    def __init__(self, model_dim: int, num_labels: int, rng: Rng, tau: float = 1.0,
                 local_layer: int = 1, attn_dim: int | None = None, value_dim: int | None = None,
                 hidden_dim: int | None = None):
        if not tau > 0:
            raise DomainError(f"temperature must be positive, got {tau}")
        if local_layer < 0:
            raise ValidationError(f"local_layer must be >= 0, got {local_layer}")
        self.model_dim = model_dim
        self.num_labels = num_labels
        self.tau = float(tau)
        self.local_layer = local_layer
        da = attn_dim or model_dim
        dv = value_dim or model_dim
        dh = hidden_dim or model_dim
        self.key_w, self.key_b = linear_init(rng, model_dim, da, "local.key")
        self.value_w, self.value_b = linear_init(rng, model_dim, dv, "local.value")
        self.label_emb = _param(rng.normal((num_labels, da), 1.0 / math.sqrt(da)), "local.label_emb")
        self.mlp_w1, self.mlp_b1 = linear_init(rng, dv, dh, "local.mlp.hidden")
        self.mlp_w2, self.mlp_b2 = linear_init(rng, dh, 1, "local.mlp.out")

    def attention_parameters(self) -> list[Tensor]:
        return [self.key_w, self.key_b, self.value_w, self.value_b, self.label_emb]

    def mlp_parameters(self) -> list[Tensor]:
        return [self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]

    def parameters(self) -> list[Tensor]:
        return self.attention_parameters() + self.mlp_parameters()

    def _check(self, h_local: Tensor, mask: np.ndarray) -> np.ndarray:
        if h_local.ndim != 3 or h_local.shape[2] != self.model_dim:
            raise DimensionError(f"local head expects [batch, positions, {self.model_dim}], got {h_local.shape}")
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 1:
            mask = mask[None, :]
        if mask.shape != h_local.shape[:2]:
            raise DimensionError(f"mask shape {mask.shape} does not match {h_local.shape[:2]}")
        return mask

    def attention(self, h_local: Tensor, mask: np.ndarray) -> Tensor:
        mask = self._check(h_local, mask)
        keys = h_local @ self.key_w + self.key_b                  # [B, S, da]
        scores = self.label_emb @ keys.transpose(0, 2, 1)         # [B, L, S]
        return nx.softmax_rows(scores, mask[:, None, :], tau=self.tau)

    def pool(self, h_local: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Attention-weighted value vector per (document, label), plus the weights."""
        alpha = self.attention(h_local, mask)
        values = h_local @ self.value_w + self.value_b            # [B, S, dv]
        return alpha @ values, alpha                              # [B, L, dv]

    def __call__(self, h_local: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        pooled, alpha = self.pool(h_local, mask)
        hidden = nx.relu(pooled @ self.mlp_w1 + self.mlp_b1)
        logits = hidden @ self.mlp_w2 + self.mlp_b2               # [B, L, 1]
        B, L = logits.shape[:2]
        return logits.reshape(B, L), alpha


def label_attention(head: LocalHead, h_local: Tensor, mask: np.ndarray) -> AttentionMap:
    mask = np.asarray(mask, dtype=bool)
    alpha = head.attention(nx.as_tensor(h_local), mask)
    return AttentionMap(alpha.data, mask if mask.ndim == 2 else mask[None, :])


def local_logits(head: LocalHead, h_local: Tensor, mask: np.ndarray) -> tuple[Tensor, AttentionMap]:
    mask = np.asarray(mask, dtype=bool)
    logits, alpha = head(nx.as_tensor(h_local), mask)
    return logits, AttentionMap(alpha.data, mask if mask.ndim == 2 else mask[None, :])
