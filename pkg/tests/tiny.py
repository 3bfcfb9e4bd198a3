"""Small models and corpora shared across test modules."""

from glocalxml.data import SyntheticSpec, build_vocab, encode_corpus, generate_synthetic, make_batch
from glocalxml.encoder import EncoderConfig
from glocalxml.model import GlocalModel, ModelConfig

TINY_SPEC = dict(num_docs=60, num_labels=6, vocab_size=30, num_topics=3, doc_len=(4, 7),
                 keywords_per_doc=(1, 1))


def tiny_config(num_labels=5, d=8, layers=1, vocab=40, positions=12, **kw):
    enc = EncoderConfig(num_layers=layers, model_dim=d, num_heads=2, ffn_dim=2 * d,
                        max_positions=positions, vocab_size=vocab)
    kw.setdefault("local_layer", min(1, layers))
    return ModelConfig(enc, num_labels=num_labels, **kw)


def tiny_corpus(seed=0, max_len=10, **overrides):
    spec = SyntheticSpec(**{**TINY_SPEC, **overrides, "seed": seed})
    train, test = generate_synthetic(spec)
    vocab = build_vocab(train)
    return vocab, encode_corpus(train, vocab, max_len), encode_corpus(test, vocab, max_len)


def tiny_model_and_batch(seed=0, n=4, **kw):
    vocab, train, _ = tiny_corpus(seed)
    cfg = tiny_config(num_labels=train.num_labels, vocab=len(vocab), **kw)
    model = GlocalModel(cfg, seed=seed)
    return model, make_batch(train.examples[:n], train.num_labels, trim=True)
