"""Command-line entry point: ``glocalxml {train,eval,ablate,gradcheck,synth,ensemble}``.

Settings come from an optional INI-style ``--config`` file (sections below)
and are overridden by flags. Unknown sections or keys are rejected.

    [data]   train, test, num_labels, max_len, min_freq
    [model]  num_layers, model_dim, num_heads, ffn_dim, dropout, tau, local_layer, pooler
    [train]  epochs, batch_size, seed, lr_backbone, lr_pooler, lr_global, lr_attention,
             lr_mlp, weight_decay, grad_clip
    [synth]  num_docs, num_labels, vocab_size, num_topics, noise, seed
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

from .data import Corpus, SyntheticSpec, Vocab, build_vocab, encode_corpus, generate_synthetic, load_corpus, save_corpus
from .encoder import EncoderConfig
from .errors import ConfigError, GlocalError
from .evaluation import (
    ablation_csv,
    ensemble,
    layer_ablation,
    metrics_from_predictions,
    plot_ablation,
    predict_corpus,
    write_ensemble,
    write_predictions,
)
from .model import DEFAULT_RATES, SOURCES, ModelConfig
from .train import TrainConfig, checkpoint_from, load_checkpoint, model_from_checkpoint, save_checkpoint, train_model

log = logging.getLogger("glocalxml")


def _bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if str(text).strip().lower() in ("", "none") else float(text)


SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "train": (str, None), "test": (str, None), "num_labels": (int, None),
        "max_len": (int, 64), "min_freq": (int, 1),
    },
    "model": {
        "num_layers": (int, 4), "model_dim": (int, 64), "num_heads": (int, 4), "ffn_dim": (int, 256),
        "dropout": (float, 0.0), "tau": (float, 1.0), "local_layer": (int, 1), "pooler": (_bool, False),
    },
    "train": {
        "epochs": (int, 10), "batch_size": (int, 32), "seed": (int, 0),
        "lr_backbone": (float, DEFAULT_RATES["backbone"]),
        "lr_pooler": (float, DEFAULT_RATES["global_pooler"]),
        "lr_global": (float, DEFAULT_RATES["global_classifier"]),
        "lr_attention": (float, DEFAULT_RATES["local_attention"]),
        "lr_mlp": (float, DEFAULT_RATES["local_mlp"]),
        "weight_decay": (float, 0.0), "grad_clip": (_opt_float, None),
    },
    "synth": {
        "num_docs": (int, 2000), "num_labels": (int, 50), "vocab_size": (int, 400),
        "num_topics": (int, 10), "noise": (float, 0.0), "seed": (int, 0),
    },
}

# flag dest -> (section, key)
FLAG_KEYS = {
    "train_path": ("data", "train"), "test_path": ("data", "test"), "num_labels": ("data", "num_labels"),
    "max_len": ("data", "max_len"), "tau": ("model", "tau"), "local_layer": ("model", "local_layer"),
    "epochs": ("train", "epochs"), "batch_size": ("train", "batch_size"), "seed": ("train", "seed"),
    "lr_backbone": ("train", "lr_backbone"), "lr_pooler": ("train", "lr_pooler"),
    "lr_global": ("train", "lr_global"), "lr_attention": ("train", "lr_attention"),
    "lr_mlp": ("train", "lr_mlp"),
}


def load_settings(path: str | None) -> dict[str, dict]:
    """Schema defaults merged with an optional config file; types are checked here."""
    settings = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
    if path is None:
        return settings
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            kind = SCHEMA[section][key][0]
            try:
                settings[section][key] = kind(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return settings


def apply_flags(settings: dict[str, dict], args: argparse.Namespace) -> dict[str, dict]:
    for dest, (section, key) in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            settings[section][key] = value
    if getattr(args, "seed", None) is not None:
        settings["synth"]["seed"] = args.seed
    return settings


def parse_layers(text: str) -> list[int]:
    """``"0..4"`` (inclusive) or a comma list ``"0,2,4"``."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer range {text!r}; use A..B or a comma list") from None


def parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive integers")
    return ks


# ------------------------------------------------------------------ builders


def synth_spec(s: dict) -> SyntheticSpec:
    syn = s["synth"]
    return SyntheticSpec(num_docs=syn["num_docs"], num_labels=syn["num_labels"], vocab_size=syn["vocab_size"],
                         num_topics=syn["num_topics"], noise=syn["noise"], seed=syn["seed"])


def _infer_num_labels(paths: list[str]) -> int:
    top = -1
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                head = line.split("\t", 1)[0]
                for tok in head.split(","):
                    if tok.strip().isdigit():
                        top = max(top, int(tok))
    if top < 0:
        raise ConfigError("cannot infer num_labels from empty data files")
    return top + 1


def load_raw_data(s: dict) -> tuple[Corpus, Corpus | None]:
    """Corpora named in [data], or the synthetic corpus of [synth] when no train file is given."""
    d = s["data"]
    if d["train"] is None:
        return generate_synthetic(synth_spec(s))
    paths = [d["train"]] + ([d["test"]] if d["test"] else [])
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError(f"data file not found: {p}")
    L = d["num_labels"] or _infer_num_labels(paths)
    train = load_corpus(d["train"], L)
    test = load_corpus(d["test"], L) if d["test"] else None
    return train, test


def model_config(s: dict, vocab_size: int, num_labels: int) -> ModelConfig:
    m = s["model"]
    enc = EncoderConfig(num_layers=m["num_layers"], model_dim=m["model_dim"], num_heads=m["num_heads"],
                        ffn_dim=m["ffn_dim"], max_positions=s["data"]["max_len"], vocab_size=vocab_size,
                        dropout=m["dropout"])
    return ModelConfig(enc, num_labels=num_labels, tau=m["tau"], local_layer=m["local_layer"], pooler=m["pooler"])


def train_config(s: dict, **extra) -> TrainConfig:
    t = s["train"]
    rates = {"backbone": t["lr_backbone"], "global_pooler": t["lr_pooler"], "global_classifier": t["lr_global"],
             "local_attention": t["lr_attention"], "local_mlp": t["lr_mlp"]}
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], seed=t["seed"], lr=rates,
                       weight_decay=t["weight_decay"], grad_clip=t["grad_clip"], **extra)


def _prepare(s: dict):
    train_raw, test_raw = load_raw_data(s)
    vocab = build_vocab(train_raw, min_freq=s["data"]["min_freq"])
    max_len = s["data"]["max_len"]
    train = encode_corpus(train_raw, vocab, max_len)
    test = encode_corpus(test_raw, vocab, max_len) if test_raw is not None else None
    return vocab, train, test


# ------------------------------------------------------------------ commands


def cmd_synth(args, s) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = synth_spec(s)
    train, test = generate_synthetic(spec)
    save_corpus(train, out / "train.txt")
    save_corpus(test, out / "test.txt")
    with open(out / "keywords.tsv", "w", encoding="utf-8") as fh:
        fh.write("label\ttoken\n")
        for lab, tok in spec.keyword_map:
            fh.write(f"{lab}\t{tok}\n")
    print(f"wrote {len(train)} train / {len(test)} test documents to {out}")
    return 0


def cmd_train(args, s) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab, train, test = _prepare(s)
    vocab.save(out / "vocab.txt")
    mcfg = model_config(s, len(vocab), train.num_labels)
    tcfg = train_config(s, log_path=str(out / "train_log.csv"), eval_k=args.k)
    model, tlog = train_model(mcfg, train, test, tcfg)
    extra = {"vocab": vocab.itos[3:], "max_len": s["data"]["max_len"]}
    save_checkpoint(out / "model.ckpt", checkpoint_from(model, tcfg.epochs, extra=extra))
    last = tlog.evals()[-1] if tlog.evals() else None
    if last:
        print(" ".join(f"{k}={last[k]:.4f}" for k in last if "p@" in k))
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_eval(args, s) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    if "vocab" not in ckpt.extra:
        raise ConfigError("checkpoint carries no vocabulary; train it with this tool")
    vocab = Vocab(ckpt.extra["vocab"])
    data_path = args.data or s["data"]["test"]
    if data_path is None:
        raise ConfigError("eval needs --data (or [data] test)")
    if not Path(data_path).is_file():
        raise ConfigError(f"data file not found: {data_path}")
    corpus = encode_corpus(load_corpus(data_path, model.num_labels), vocab, ckpt.extra["max_len"])
    preds = predict_corpus(model, corpus)
    report = metrics_from_predictions(preds, corpus.label_sets(), args.k, with_jsd=True)
    sources = [args.source] if args.source else list(SOURCES)
    ks = sorted(next(iter(report.precision.values())))
    print("source," + ",".join(f"p@{k}" for k in ks))
    for src in sources:
        print(src + "," + ",".join(f"{report.precision[src][k]:.6f}" for k in ks))
    print(f"jsd,{report.jsd:.6f}")
    if args.predictions:
        out = Path(args.predictions)
        out.mkdir(parents=True, exist_ok=True)
        ids = [str(i) for i in range(len(corpus))]
        for src in sources:
            write_predictions(out / f"{src}.txt", ids, preds.source(src))
    return 0


def cmd_ablate(args, s) -> int:
    vocab, train, test = _prepare(s)
    if test is None:
        raise ConfigError("ablation needs a test corpus")
    mcfg = model_config(s, len(vocab), train.num_labels)
    rows = layer_ablation(mcfg, train, test, args.layers, train_config(s), ks=args.k,
                          fixed_global=args.fixed_global)
    text = ablation_csv(rows, args.out)
    sys.stdout.write(text)
    if args.plot:
        plot_ablation(rows, args.plot, k=max(args.k))
    return 0


def cmd_gradcheck(args, s) -> int:
    from .experiments import tiny_gradcheck

    report = tiny_gradcheck(seed=s["train"]["seed"], tau=s["model"]["tau"], eps=args.eps, tol=args.tol)
    print(f"max relative error {report.max_rel_error:.3e} over {report.n_checked} entries (tol {args.tol:g})")
    return 0 if report.passed else 1


def cmd_ensemble(args, s) -> int:
    merged = ensemble(args.inputs)
    write_ensemble(args.out, merged)
    print(f"averaged {len(args.inputs)} files over {len(merged)} documents -> {args.out}")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glocalxml", description=__doc__.splitlines()[0])
    parser.add_argument("--config", metavar="PATH", help="INI-style settings file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, model=True, training=True):
        p.add_argument("--seed", type=int, help="root seed for data, weights and shuffling")
        if data:
            p.add_argument("--train", dest="train_path", metavar="PATH", help="training corpus (labels<TAB>text)")
            p.add_argument("--test", dest="test_path", metavar="PATH", help="test corpus")
            p.add_argument("--num-labels", type=int, help="label space size (inferred from files if omitted)")
            p.add_argument("--max-len", type=int, help="sequence length including [CLS]")
        if model:
            p.add_argument("--tau", type=float, help="local attention temperature")
            p.add_argument("--local-layer", type=int, help="encoder layer feeding the local head (0 = embeddings)")
        if training:
            p.add_argument("--epochs", type=int, help="training epochs")
            p.add_argument("--batch-size", type=int, help="documents per step")
            p.add_argument("--lr-backbone", type=float, help="encoder learning rate")
            p.add_argument("--lr-pooler", type=float, help="global pooler learning rate")
            p.add_argument("--lr-global", type=float, help="global label-embedding learning rate")
            p.add_argument("--lr-attention", type=float, help="local key/value/label-embedding learning rate")
            p.add_argument("--lr-mlp", type=float, help="local scorer MLP learning rate")
        p.add_argument("--k", type=parse_ks, default=(1, 3, 5), help="comma list of k for P@k (default 1,3,5)")

    p = sub.add_parser("train", help="train a model and write checkpoint, vocabulary and log")
    common(p)
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a corpus with a checkpoint")
    common(p, model=False, training=False)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", metavar="PATH", help="corpus to score (default: [data] test)")
    p.add_argument("--source", choices=SOURCES, help="report only this head")
    p.add_argument("--predictions", metavar="DIR", help="write per-source prediction dumps here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="pair the global head with local features from each layer")
    common(p)
    p.add_argument("--layers", type=parse_layers, default=parse_layers("0..4"), help="A..B or comma list")
    p.add_argument("--fixed-global", action="store_true", help="train one model, then only new local heads")
    p.add_argument("--out", metavar="PATH", help="CSV output path")
    p.add_argument("--plot", metavar="PATH", help="image of P@k and JSD per layer (needs matplotlib)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on a tiny model")
    p.add_argument("--seed", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write the planted-keyword synthetic corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ensemble", help="average prediction dumps")
    p.add_argument("inputs", nargs="+", metavar="PRED")
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        settings = apply_flags(load_settings(args.config), args)
        return args.func(args, settings)
    except (GlocalError, OSError) as exc:
        print(f"glocalxml {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
