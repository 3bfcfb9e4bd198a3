"""The combined model: shared encoder, two heads, independent BCE losses, averaged scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .data import Batch
from .encoder import Encoder, EncoderConfig, HiddenStates
from .errors import ConfigError, ValidationError
from .heads import AttentionMap, GlobalHead, LocalHead
from .numerics import Rng, Tensor

GROUP_NAMES = ("backbone", "global_pooler", "global_classifier", "local_attention", "local_mlp")
SOURCES = ("global", "local", "final")

# per-group learning rates used with pretrained backbones
PRETRAINED_RATES_WIKI10 = {
    "backbone": 1e-5, "global_pooler": 1e-4, "global_classifier": 1e-3,
    "local_attention": 2e-4, "local_mlp": 2e-3,
}
PRETRAINED_RATES_OTHER = {
    "backbone": 5e-5, "global_pooler": 2e-4, "global_classifier": 2e-3,
    "local_attention": 2e-4, "local_mlp": 2e-3,
}
# from-scratch defaults for the small synthetic setting
DEFAULT_RATES = {
    "backbone": 1e-3, "global_pooler": 1e-3, "global_classifier": 3e-3,
    "local_attention": 1e-3, "local_mlp": 3e-3,
}


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    num_labels: int
    tau: float = 1.0
    local_layer: int = 1
    pooler: bool = False
    attn_dim: int | None = None
    value_dim: int | None = None
    hidden_dim: int | None = None

    def __post_init__(self):
        if self.num_labels < 1:
            raise ValidationError("num_labels must be >= 1")
        if not 0 <= self.local_layer <= self.encoder.num_layers:
            raise ValidationError(
                f"local_layer {self.local_layer} outside [0, {self.encoder.num_layers}]"
            )
        if not self.tau > 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


@dataclass
class PredictionBatch:
    p_global: np.ndarray
    p_local: np.ndarray
    p_final: np.ndarray
    attention: AttentionMap | None = None

    def source(self, name: str) -> np.ndarray:
        if name not in SOURCES:
            raise ValidationError(f"unknown source {name!r}; expected one of {SOURCES}")
        return {"global": self.p_global, "local": self.p_local, "final": self.p_final}[name]


def combine(p_local: np.ndarray, p_global: np.ndarray) -> np.ndarray:
    return 0.5 * (p_local + p_global)


class GlocalModel:
    """Encoder shared by a global [CLS] head and a local label-attention head.

    Each component draws its initial weights from its own seed stream, so
    changing e.g. ``local_layer`` leaves the encoder initialisation intact.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        root = Rng(seed)
        d = config.encoder.model_dim
        self.encoder = Encoder(config.encoder, root.spawn("encoder"))
        self.global_head = GlobalHead(d, config.num_labels, root.spawn("global"), pooler=config.pooler)
        self.local_head = LocalHead(
            d, config.num_labels, root.spawn("local"), tau=config.tau, local_layer=config.local_layer,
            attn_dim=config.attn_dim, value_dim=config.value_dim, hidden_dim=config.hidden_dim,
        )
        self.dropout_rng = root.spawn("dropout")
        self.training = False

    @property
    def num_labels(self) -> int:
        return self.config.num_labels

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.global_head.parameters() + self.local_head.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def zero_classifier_outputs(self) -> None:
        """Zero the global label embeddings and the local MLP output layer (all scores 0.5)."""
        self.global_head.label_emb.data[...] = 0.0
        self.local_head.mlp_w2.data[...] = 0.0
        self.local_head.mlp_b2.data[...] = 0.0

    def hidden_states(self, token_ids: np.ndarray, mask: np.ndarray) -> HiddenStates:
        rng = self.dropout_rng if self.training else None
        return self.encoder(token_ids, mask, rng)

    def logits(self, token_ids: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """One encoder pass feeding both heads: ``(global logits, local logits, attention)``."""
        states = self.hidden_states(token_ids, mask)
        h_cls = states.layer(states.num_layers)[:, 0, :]
        z_global = self.global_head(h_cls)
        z_local, alpha = self.local_head(states.layer(self.local_head.local_layer), states.mask)
        return z_global, z_local, alpha

    def forward(self, batch: Batch | tuple[np.ndarray, np.ndarray]) -> PredictionBatch:
        token_ids, mask = (batch.token_ids, batch.mask) if isinstance(batch, Batch) else batch
        z_global, z_local, alpha = self.logits(token_ids, mask)
        p_global = nx.sigmoid(z_global).data
        p_local = nx.sigmoid(z_local).data
        mask = np.asarray(mask, dtype=bool).reshape(alpha.shape[0], -1)
        return PredictionBatch(p_global, p_local, combine(p_local, p_global), AttentionMap(alpha.data, mask))

    __call__ = forward


def forward(model: GlocalModel, batch) -> PredictionBatch:
    return model.forward(batch)


@dataclass
class LossTerms:
    total: Tensor
    global_term: Tensor
    local_term: Tensor


def loss_terms(model: GlocalModel, batch: Batch) -> LossTerms:
    """BCE on each head separately; the combined score gets no loss of its own."""
    z_global, z_local, _ = model.logits(batch.token_ids, batch.mask)
    g = nx.bce_with_logits(z_global, batch.targets)
    l = nx.bce_with_logits(z_local, batch.targets)
    return LossTerms(g + l, g, l)


def loss(model: GlocalModel, batch: Batch) -> Tensor:
    return loss_terms(model, batch).total


def rank_labels(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` label ids per row, highest score first, ties to the lower id."""
    scores = np.atleast_2d(scores)
    L = scores.shape[1]
    if not 1 <= k <= L:
        raise ValidationError(f"k must lie in [1, {L}], got {k}")
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def predict_topk(model: GlocalModel, batch, k: int, source: str = "final") -> np.ndarray:
    if not 1 <= k <= model.num_labels:
        raise ValidationError(f"k must lie in [1, {model.num_labels}], got {k}")
    return rank_labels(model.forward(batch).source(source), k)


@dataclass
class ParamGroup:
    name: str
    params: list[Tensor]
    lr: float


@dataclass
class ParamGroups:
    groups: dict[str, ParamGroup] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.groups.values())

    def __getitem__(self, name: str) -> ParamGroup:
        return self.groups[name]

    def rates(self) -> dict[str, float]:
        return {name: g.lr for name, g in self.groups.items()}

    def num_parameters(self) -> int:
        return sum(p.size for g in self for p in g.params)


def param_groups(model: GlocalModel, lr_config: Mapping[str, float] | float) -> ParamGroups:
    """Split parameters into the five learning-rate groups.

    ``lr_config`` maps every name in ``GROUP_NAMES`` to a positive rate; a
    single number applies one rate to all groups.
    """
    if isinstance(lr_config, (int, float)):
        lr_config = {name: float(lr_config) for name in GROUP_NAMES}
    missing = [n for n in GROUP_NAMES if n not in lr_config]
    if missing:
        raise ConfigError(f"missing learning rate(s) for {', '.join(missing)}")
    unknown = set(lr_config) - set(GROUP_NAMES)
    if unknown:
        raise ConfigError(f"unknown parameter group(s) {sorted(unknown)}")
    for name in GROUP_NAMES:
        if not float(lr_config[name]) >= 0:
            raise ConfigError(f"learning rate for {name} must be non-negative")
    members = {
        "backbone": model.encoder.parameters(),
        "global_pooler": model.global_head.pooler_parameters(),
        "global_classifier": model.global_head.classifier_parameters(),
        "local_attention": model.local_head.attention_parameters(),
        "local_mlp": model.local_head.mlp_parameters(),
    }
    return ParamGroups({n: ParamGroup(n, members[n], float(lr_config[n])) for n in GROUP_NAMES})
