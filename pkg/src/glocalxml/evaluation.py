"""P@k, Jensen-Shannon analysis, per-layer ablation and score ensembling."""

from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import Corpus, batches
from .errors import AlignmentError, DegenerateInputError, ParseError, ValidationError
from .model import SOURCES, GlocalModel, ModelConfig, PredictionBatch, combine, rank_labels

log = logging.getLogger(__name__)


def precision_at_k(ranked: Sequence[Sequence[int]], truths: Sequence[Iterable[int]], k: int) -> float:
    """Mean over documents of ``|top-k ∩ truth| / k``."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(ranked) != len(truths):
        raise ValidationError(f"{len(ranked)} rankings for {len(truths)} truth sets")
    if len(ranked) == 0:
        raise ValidationError("precision_at_k over zero documents")
    total = 0
    for row, truth in zip(ranked, truths):
        if len(row) < k:
            raise ValidationError(f"ranked list of length {len(row)} is shorter than k={k}")
        truth = set(truth)
        total += sum(1 for lab in list(row)[:k] if int(lab) in truth)
    return total / (k * len(ranked))


def _check_distribution(p: np.ndarray, name: str) -> None:
    if p.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValidationError(f"{name} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValidationError(f"{name} sums to {p.sum()!r}, not 1")


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in bits, so the value lies in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValidationError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    return min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), 1.0)


def prediction_distribution(probs) -> np.ndarray:
    """Per-label sigmoid scores rescaled to sum to one over the label space."""
    probs = np.asarray(probs, dtype=np.float64)
    total = probs.sum()
    if not total > 0:
        raise DegenerateInputError("cannot normalise scores that sum to zero")
    return probs / total


def mean_jsd(p_a: np.ndarray, p_b: np.ndarray) -> float:
    """Average per-document JSD between the normalised score rows of two heads."""
    return float(np.mean([jsd(prediction_distribution(a), prediction_distribution(b))
                          for a, b in zip(p_a, p_b)]))


@dataclass
class MetricsReport:
    precision: dict[str, dict[int, float]]
    num_docs: int
    jsd: float | None = None

    def flat(self) -> dict[str, float]:
        return {f"{src}_p@{k}": v for src, row in self.precision.items() for k, v in row.items()}

    def summary(self) -> str:
        parts = []
        for src, row in self.precision.items():
            parts.append(src + " " + " ".join(f"P@{k}={v:.4f}" for k, v in row.items()))
        return "; ".join(parts)

    def to_csv(self) -> str:
        ks = sorted({k for row in self.precision.values() for k in row})
        lines = ["source," + ",".join(f"p@{k}" for k in ks) + ",num_docs"]
        for src, row in self.precision.items():
            lines.append(src + "," + ",".join(repr(float(row[k])) for k in ks) + f",{self.num_docs}")
        return "\n".join(lines) + "\n"


def predict_corpus(model: GlocalModel, corpus: Corpus, batch_size: int = 128,
                   keep_attention: bool = False) -> PredictionBatch:
    """Score every document of an encoded corpus, in corpus order."""
    trim = not keep_attention
    parts = [model.forward(b) for b in batches(corpus, batch_size, trim=trim)]
    att = None
    if keep_attention:
        from .heads import AttentionMap

        att = AttentionMap(np.concatenate([p.attention.weights for p in parts]),
                           np.concatenate([p.attention.mask for p in parts]))
    p_global = np.concatenate([p.p_global for p in parts])
    p_local = np.concatenate([p.p_local for p in parts])
    return PredictionBatch(p_global, p_local, combine(p_local, p_global), att)


def metrics_from_predictions(preds: PredictionBatch, truths: Sequence[Iterable[int]],
                             ks: Sequence[int] = (1, 3, 5), with_jsd: bool = False) -> MetricsReport:
    L = preds.p_final.shape[1]
    ks = [k for k in ks if k <= L]
    precision = {}
    for src in SOURCES:
        ranked = rank_labels(preds.source(src), max(ks))
        precision[src] = {k: precision_at_k(ranked, truths, k) for k in ks}
    value = mean_jsd(preds.p_global, preds.p_local) if with_jsd else None
    return MetricsReport(precision, len(truths), value)


def evaluate(model: GlocalModel, corpus: Corpus, ks: Sequence[int] = (1, 3, 5),
             with_jsd: bool = False, batch_size: int = 128) -> MetricsReport:
    preds = predict_corpus(model, corpus, batch_size)
    return metrics_from_predictions(preds, corpus.label_sets(), ks, with_jsd)


# -------------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    layer: int
    precision: dict[str, dict[int, float]]
    jsd: float

    def values(self) -> dict:
        row = {"layer": self.layer}
        for src in SOURCES:
            for k, v in self.precision[src].items():
                row[f"{src}_p@{k}"] = v
        row["jsd"] = self.jsd
        return row


def ablation_csv(rows: Sequence[AblationRow], path: str | Path | None = None) -> str:
    if not rows:
        return ""
    fields = list(rows[0].values())
    lines = [",".join(fields)]
    for r in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in r.values().values()))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _thread_budget() -> int:
    try:
        return max(1, int(os.environ.get("GLOCAL_THREADS", "1")))
    except ValueError:
        return 1


def _ablate_one(base_config: ModelConfig, train: Corpus, test: Corpus, train_config, n: int,
                ks: Sequence[int]) -> AblationRow:
    from .train import train_model

    cfg = dataclasses.replace(base_config, local_layer=n)
    model, _ = train_model(cfg, train, None, train_config)
    report = evaluate(model, test, ks, with_jsd=True)
    log.info("ablation layer %d: %s jsd=%.4f", n, report.summary(), report.jsd)
    return AblationRow(n, report.precision, report.jsd)


def _ablate_fixed_global(base_config: ModelConfig, train: Corpus, test: Corpus, train_config,
                         layers: Sequence[int], ks: Sequence[int]) -> list[AblationRow]:
    from .heads import LocalHead
    from .numerics import Rng, derive_seed
    from .train import checkpoint_from, fit, model_from_checkpoint, train_model

    base, _ = train_model(base_config, train, None, train_config)
    snapshot = checkpoint_from(base)
    frozen = dict(train_config.lr, backbone=0.0, global_pooler=0.0, global_classifier=0.0)
    rows = []
    for n in layers:
        model = model_from_checkpoint(snapshot)
        model.config = dataclasses.replace(model.config, local_layer=n)
        rng = Rng(derive_seed(train_config.seed, f"local-head/{n}"))
        model.local_head = LocalHead(
            base_config.encoder.model_dim, base_config.num_labels, rng, tau=base_config.tau,
            local_layer=n, attn_dim=base_config.attn_dim, value_dim=base_config.value_dim,
            hidden_dim=base_config.hidden_dim,
        )
        fit(model, train, None, dataclasses.replace(train_config, lr=frozen, checkpoint_path=None,
                                                    log_path=None))
        report = evaluate(model, test, ks, with_jsd=True)
        rows.append(AblationRow(n, report.precision, report.jsd))
    return rows


def layer_ablation(base_config: ModelConfig, train: Corpus, test: Corpus, layers: Sequence[int],
                   train_config=None, ks: Sequence[int] = (1, 3, 5),
                   fixed_global: bool = False) -> list[AblationRow]:
    """Pair the global head with local features from each layer in ``layers``.

    The default retrains a fresh model (same seed) per layer. With
    ``fixed_global=True`` one model is trained once, and for each layer only a
    new local head is trained on top of the frozen encoder and global head.
    ``GLOCAL_THREADS`` > 1 runs the retrain mode's layers in parallel processes.
    """
    from .train import TrainConfig

    train_config = train_config or TrainConfig()
    N = base_config.encoder.num_layers
    for n in layers:
        if not 0 <= n <= N:
            raise ValidationError(f"layer {n} outside [0, {N}]")
    if fixed_global:
        return _ablate_fixed_global(base_config, train, test, train_config, layers, ks)
    workers = min(_thread_budget(), len(layers))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_ablate_one, base_config, train, test, train_config, n, ks) for n in layers]
            return [f.result() for f in futures]
    return [_ablate_one(base_config, train, test, train_config, n, ks) for n in layers]


def plot_ablation(rows: Sequence[AblationRow], path: str | Path, k: int = 5) -> None:
    """P@k per source and JSD against the local layer index, saved as an image."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    layers = [r.layer for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for src in SOURCES:
        ax.plot(layers, [r.precision[src][k] for r in rows], marker="o", label=f"{src} P@{k}")
    ax.set_xlabel("local layer")
    ax.set_ylabel(f"P@{k}")
    twin = ax.twinx()
    twin.plot(layers, [r.jsd for r in rows], color="tab:green", linestyle="--", marker="s", label="JSD")
    twin.set_ylabel("JSD (bits)")
    ax.legend(loc="lower left")
    twin.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ----------------------------------------------------------- prediction dumps


def write_predictions(path: str | Path, doc_ids: Sequence, scores: np.ndarray,
                      top: int | None = None) -> None:
    """One line per document: ``doc_id<TAB>label:prob label:prob ...``, highest first."""
    scores = np.atleast_2d(scores)
    n = scores.shape[1] if top is None else min(top, scores.shape[1])
    ranked = rank_labels(scores, n)
    with open(path, "w", encoding="utf-8") as fh:
        for doc, row, s in zip(doc_ids, ranked, scores):
            pairs = " ".join(f"{lab}:{float(s[lab])!r}" for lab in row)
            fh.write(f"{doc}\t{pairs}\n")


def read_predictions(path: str | Path) -> dict[str, dict[int, float]]:
    out: dict[str, dict[int, float]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ParseError("missing TAB after document id", lineno)
            doc, rest = line.split("\t", 1)
            scores = {}
            for pair in rest.split():
                lab, _, prob = pair.partition(":")
                try:
                    scores[int(lab)] = float(prob)
                except ValueError as exc:
                    raise ParseError(f"bad label:prob pair {pair!r}", lineno) from exc
            if doc in out:
                raise ParseError(f"duplicate document id {doc!r}", lineno)
            out[doc] = scores
    return out


def ensemble(predictions: Sequence[Mapping[str, Mapping[int, float]] | str | Path]) -> dict[str, dict[int, float]]:
    """Average per-label scores across prediction sets with identical documents and labels."""
    sets = [read_predictions(p) if isinstance(p, (str, Path)) else p for p in predictions]
    if not sets:
        raise ValidationError("nothing to ensemble")
    docs = list(sets[0])
    for other in sets[1:]:
        if set(other) != set(docs):
            raise AlignmentError("prediction files cover different document ids")
    out = {}
    for doc in docs:
        labels = set(sets[0][doc])
        for other in sets[1:]:
            if set(other[doc]) != labels:
                raise AlignmentError(f"document {doc!r} has different label sets across files")
        out[doc] = {lab: _running_mean([s[doc][lab] for s in sets]) for lab in labels}
    return out


def _running_mean(values: Sequence[float]) -> float:
    # incremental form keeps the mean of identical values exact
    m = 0.0
    for i, x in enumerate(values, start=1):
        m += (float(x) - m) / i
    return m


def write_ensemble(path: str | Path, merged: Mapping[str, Mapping[int, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc, scores in merged.items():
            ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
            fh.write(f"{doc}\t" + " ".join(f"{lab}:{float(p)!r}" for lab, p in ordered) + "\n")


# ---------------------------------------------------------- keyword attention


def keyword_attention_ratios(model: GlocalModel, corpus: Corpus, triggers: Mapping[int, int],
                             batch_size: int = 128) -> np.ndarray:
    """Attention on planted trigger tokens relative to the uniform weight.

    ``triggers`` maps a label id to its trigger token id. For every document
    containing the trigger of one of its true labels, the local head's weight
    for (label, trigger position) is multiplied by the number of unmasked
    positions, so 1.0 means "no better than uniform".
    """
    preds = predict_corpus(model, corpus, batch_size, keep_attention=True)
    weights, mask = preds.attention.weights, preds.attention.mask
    ratios = []
    for d, ex in enumerate(corpus.examples):
        n_real = int(mask[d].sum())
        for lab in sorted(ex.labels):
            tok = triggers.get(lab)
            if tok is None:
                continue
            positions = np.flatnonzero((ex.token_ids == tok) & mask[d])
            for pos in positions:
                ratios.append(weights[d, lab, pos] * n_real)
    return np.asarray(ratios)
