"""Adam with per-group learning rates, the training loop and checkpoint files."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import Corpus, batches
from .errors import IntegrityError, NumericError, ValidationError
from .model import DEFAULT_RATES, GROUP_NAMES, GlocalModel, ModelConfig, ParamGroups, loss_terms, param_groups
from .numerics import Tape, derive_seed

log = logging.getLogger(__name__)

MAGIC = b"GLXCKPT1"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: dict = field(default_factory=lambda: dict(DEFAULT_RATES))
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None
    seed: int = 0
    eval_every: int = 1
    eval_k: tuple[int, ...] = (1, 3, 5)
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("Adam betas must lie in (0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError("grad_clip must be positive")
        if isinstance(self.lr, (int, float)):
            self.lr = {name: float(self.lr) for name in GROUP_NAMES}
        for name in GROUP_NAMES:
            if name not in self.lr:
                raise ValidationError(f"missing learning rate for group {name}")
            if self.lr[name] < 0:
                raise ValidationError(f"learning rate for {name} must be non-negative")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(groups: ParamGroups, state: OptimizerState, config: TrainConfig) -> None:
    """One bias-corrected Adam update in place; gradients are cleared afterwards.

    Weight decay is decoupled (``p -= lr * wd * p``). A non-finite gradient
    anywhere aborts the step before any parameter is touched.
    """
    params = [(g.lr, p) for g in groups for p in g.params]
    for _, p in params:
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for {p.name}; step aborted")
    if config.grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in params))
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
            for _, p in params:
                p.grad *= scale
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for lr, p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        if lr:
            if config.weight_decay:
                p.data -= lr * config.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        p.grad[...] = 0.0


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model_config: dict
    params: dict[str, np.ndarray]
    epoch: int = 0
    seed: int = 0
    rng_state: dict | None = None
    optimizer: OptimizerState | None = None
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def checkpoint_from(model: GlocalModel, epoch: int = 0, optimizer: OptimizerState | None = None,
                    extra: dict | None = None) -> Checkpoint:
    return Checkpoint(
        model_config=model.config.to_dict(),
        params={name: p.data.copy() for name, p in model.named_parameters().items()},
        epoch=epoch,
        seed=model.seed,
        rng_state=model.dropout_rng.state,
        optimizer=optimizer,
        extra=dict(extra or {}),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> GlocalModel:
    model = GlocalModel(ModelConfig.from_dict(ckpt.model_config), seed=ckpt.seed)
    named = model.named_parameters()
    if set(named) != set(ckpt.params):
        raise IntegrityError("checkpoint parameters do not match the model configuration")
    for name, p in named.items():
        if p.data.shape != ckpt.params[name].shape:
            raise IntegrityError(f"shape mismatch for {name}")
        p.data[...] = ckpt.params[name]
    if ckpt.rng_state is not None:
        model.dropout_rng.state = ckpt.rng_state
    return model


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Magic, length-prefixed JSON header, little-endian float64 blobs, CRC32 trailer."""
    tensors: list[tuple[str, np.ndarray]] = [(f"model/{k}", v) for k, v in ckpt.params.items()]
    opt_header = None
    if ckpt.optimizer is not None:
        opt_header = {"step": ckpt.optimizer.step}
        tensors += [(f"adam.m/{k}", v) for k, v in ckpt.optimizer.m.items()]
        tensors += [(f"adam.v/{k}", v) for k, v in ckpt.optimizer.v.items()]
    directory = []
    offset = 0
    for name, arr in tensors:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "version": ckpt.version,
        "model_config": ckpt.model_config,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "rng_state": ckpt.rng_state,
        "optimizer": opt_header,
        "extra": ckpt.extra,
        "tensors": directory,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<Q", len(head))
    body += head
    for _, arr in tensors:
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 or raw[: len(MAGIC)] != MAGIC:
        if raw[:6] == MAGIC[:6]:
            raise IntegrityError(f"unsupported checkpoint version {raw[:8]!r}")
        raise IntegrityError("not a checkpoint file (bad magic bytes)")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise IntegrityError("checkpoint checksum mismatch")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {header.get('version')}")
    blob = raw[16 + hlen : -4]
    params, m, v = {}, {}, {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=entry["offset"]).astype(np.float64)
        arr = arr.reshape(entry["shape"])
        kind, name = entry["name"].split("/", 1)
        {"model": params, "adam.m": m, "adam.v": v}[kind][name] = arr
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = OptimizerState(step=header["optimizer"]["step"], m=m, v=v)
    return Checkpoint(
        model_config=header["model_config"],
        params=params,
        epoch=header["epoch"],
        seed=header["seed"],
        rng_state=header["rng_state"],
        optimizer=optimizer,
        extra=header.get("extra", {}),
        version=header["version"],
    )


# ---------------------------------------------------------------------- loop

LOG_FIELDS = ["epoch", "step", "loss_total", "loss_global", "loss_local"] + [
    f"{src}_p@{k}" for src in ("global", "local", "final") for k in (1, 3, 5)
]


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def steps(self) -> list[dict]:
        return [r for r in self.rows if r.get("loss_total") is not None]

    def evals(self) -> list[dict]:
        return [r for r in self.rows if r.get("final_p@1") is not None]

    def to_csv(self, path: str | Path | None = None) -> str:
        lines = [",".join(LOG_FIELDS)]
        for row in self.rows:
            lines.append(",".join(_fmt(row.get(f)) for f in LOG_FIELDS))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def fit(model: GlocalModel, train_corpus: Corpus, dev_corpus: Corpus | None, config: TrainConfig,
        resume: Checkpoint | None = None, max_steps: int | None = None) -> TrainingLog:
    """Train both heads jointly; evaluate P@k on ``dev_corpus`` every ``eval_every`` epochs.

    Batches for epoch ``e`` are shuffled with a seed derived from
    ``(config.seed, e)``, so a run resumed from a checkpoint replays the
    same order as an uninterrupted one.
    """
    from .evaluation import evaluate

    groups = param_groups(model, config.lr)
    state = OptimizerState()
    start_epoch = 0
    if resume is not None:
        state = resume.optimizer or OptimizerState()
        start_epoch = resume.epoch
    out = TrainingLog()
    writer = open(config.log_path, "w") if config.log_path else None
    if writer:
        writer.write(",".join(LOG_FIELDS) + "\n")

    def emit(row):
        out.rows.append(row)
        if writer:
            writer.write(",".join(_fmt(row.get(f)) for f in LOG_FIELDS) + "\n")
            writer.flush()

    model.training = True
    started = time.perf_counter()
    try:
        for epoch in range(start_epoch, config.epochs):
            seed = derive_seed(config.seed, f"shuffle/{epoch}")
            for batch in batches(train_corpus, config.batch_size, shuffle_seed=seed, trim=True):
                if max_steps is not None and state.step >= max_steps:
                    return out
                with Tape() as tape:
                    terms = loss_terms(model, batch)
                    total = float(terms.total.data)
                    if not math.isfinite(total):
                        if config.checkpoint_path:
                            save_checkpoint(f"{config.checkpoint_path}.diag",
                                            checkpoint_from(model, epoch, state))
                        raise NumericError(f"non-finite loss at epoch {epoch}, step {state.step + 1}")
                    tape.backward(terms.total)
                adam_step(groups, state, config)
                emit({"epoch": epoch + 1, "step": state.step, "loss_total": total,
                      "loss_global": float(terms.global_term.data),
                      "loss_local": float(terms.local_term.data)})
            done = epoch + 1
            if dev_corpus is not None and config.eval_every and (done % config.eval_every == 0 or done == config.epochs):
                model.training = False
                report = evaluate(model, dev_corpus, ks=config.eval_k)
                model.training = True
                row = {"epoch": done, "step": state.step}
                row.update(report.flat())
                emit(row)
                log.info("epoch %d step %d dev %s (%.1fs)", done, state.step,
                         report.summary(), time.perf_counter() - started)
            if config.checkpoint_path:
                save_checkpoint(config.checkpoint_path, checkpoint_from(model, done, state))
    finally:
        model.training = False
        if writer:
            writer.close()
    return out


def train_model(model_config: ModelConfig, train_corpus: Corpus, dev_corpus: Corpus | None,
                config: TrainConfig, model_seed: int | None = None) -> tuple[GlocalModel, TrainingLog]:
    """Build a fresh model from ``config.seed`` (or ``model_seed``) and fit it."""
    seed = derive_seed(config.seed, "model") if model_seed is None else model_seed
    model = GlocalModel(model_config, seed=seed)
    return model, fit(model, train_corpus, dev_corpus, config)


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def merge_rates(base: Mapping[str, float], **overrides: float | None) -> dict:
    out = dict(base)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out
