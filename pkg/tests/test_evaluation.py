import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glocalxml.errors import AlignmentError, DegenerateInputError, ParseError, ValidationError
from glocalxml.evaluation import (
    ablation_csv,
    ensemble,
    evaluate,
    jsd,
    keyword_attention_ratios,
    layer_ablation,
    mean_jsd,
    precision_at_k,
    prediction_distribution,
    read_predictions,
    write_ensemble,
    write_predictions,
)
from glocalxml.model import GlocalModel
from glocalxml.train import TrainConfig

import oracles
from tiny import tiny_config, tiny_corpus


# ---------------------------------------------------------------------- P@k


def test_precision_examples():
    assert precision_at_k([[1, 2, 3]], [{1, 3}], 3) == pytest.approx(2 / 3, abs=0)
    assert precision_at_k([[4, 5]], [{4, 5, 6}], 2) == 1.0
    assert precision_at_k([[0, 1], [2, 3]], [{1}, {7}], 1) == 0.0


def test_precision_errors():
    with pytest.raises(ValidationError):
        precision_at_k([[1]], [{1}], 2)
    with pytest.raises(ValidationError):
        precision_at_k([[1]], [{1}, {2}], 1)
    with pytest.raises(ValidationError):
        precision_at_k([], [], 1)


def test_precision_random_matches_oracle():
    rng = np.random.default_rng(0)
    ranked = [list(rng.permutation(12)) for _ in range(20)]
    truths = [set(rng.choice(12, rng.integers(1, 6), replace=False).tolist()) for _ in range(20)]
    for k in (1, 3, 5):
        assert precision_at_k(ranked, truths, k) == oracles.precision_at_k(ranked, truths, k)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_precision_document_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    ranked = [list(rng.permutation(6)) for _ in range(7)]
    truths = [set(rng.choice(6, 2, replace=False).tolist()) for _ in range(7)]
    perm = rng.permutation(7)
    a = precision_at_k(ranked, truths, 3)
    b = precision_at_k([ranked[i] for i in perm], [truths[i] for i in perm], 3)
    assert abs(a - b) <= 1e-15 and 0 <= a <= 1


# ---------------------------------------------------------------------- JSD


def test_jsd_examples():
    assert jsd([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert jsd([1.0, 0.0], [0.0, 1.0]) == 1.0
    direct = 0.5 * math.log2(4 / 3) + 0.5 * (0.5 * math.log2(2 / 3) + 0.5 * math.log2(2))
    assert abs(jsd([1.0, 0.0], [0.5, 0.5]) - direct) <= 1e-15
    assert round(direct, 6) == 0.311278


def test_jsd_rejects_unnormalised():
    with pytest.raises(ValidationError):
        jsd([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValidationError):
        jsd([1.2, -0.2], [0.5, 0.5])
    with pytest.raises(ValidationError):
        jsd([1.0], [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 9))
def test_jsd_symmetric_and_bounded(seed, n):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n) * 0.5)
    q = rng.dirichlet(np.ones(n) * 0.5)
    a, b = jsd(p, q), jsd(q, p)
    assert abs(a - b) <= 1e-12 and 0 <= a <= 1
    assert abs(a - oracles.jsd_bits(p.tolist(), q.tolist())) <= 1e-12


def test_prediction_distribution():
    np.testing.assert_allclose(prediction_distribution([0.4] * 5), [0.2] * 5, rtol=0, atol=1e-15)
    d = prediction_distribution([0.99, 0.01, 0.01])
    assert d[0] > 0.9
    r = prediction_distribution(np.random.default_rng(1).random(30))
    assert abs(r.sum() - 1) <= 1e-12
    with pytest.raises(DegenerateInputError):
        prediction_distribution([0.0, 0.0])


def test_mean_jsd_identical_heads_is_zero():
    p = np.random.default_rng(2).random((4, 6))
    assert mean_jsd(p, p) == 0.0


# ------------------------------------------------------------ model metrics


@pytest.fixture(scope="module")
def small():
    vocab, train, test = tiny_corpus()
    cfg = tiny_config(num_labels=train.num_labels, vocab=len(vocab), layers=2)
    return cfg, train, test


def test_zero_classifier_model_gives_identical_sources(small):
    cfg, _, test = small
    model = GlocalModel(cfg)
    model.zero_classifier_outputs()
    report = evaluate(model, test, with_jsd=True)
    assert report.precision["global"] == report.precision["local"] == report.precision["final"]
    assert report.jsd == 0.0
    assert report.to_csv().splitlines()[0] == "source,p@1,p@3,p@5,num_docs"


def test_layer_ablation_rows_and_determinism(small):
    cfg, train, test = small
    tc = TrainConfig(epochs=1, batch_size=16)
    rows = layer_ablation(cfg, train, test, [0, 1, 2], tc)
    assert [r.layer for r in rows] == [0, 1, 2]
    assert all(0 <= r.jsd <= 1 for r in rows)
    again = layer_ablation(cfg, train, test, [0, 1, 2], tc)
    assert ablation_csv(rows) == ablation_csv(again)
    with pytest.raises(ValidationError):
        layer_ablation(cfg, train, test, [3], tc)


def test_single_layer_ablation_reproduces_standard_run(small):
    from glocalxml.train import train_model

    cfg, train, test = small
    tc = TrainConfig(epochs=1, batch_size=16)
    (row,) = layer_ablation(cfg, train, test, [1], tc)
    model, _ = train_model(cfg, train, None, tc)
    report = evaluate(model, test, with_jsd=True)
    assert row.precision == report.precision and row.jsd == report.jsd


def test_fixed_global_ablation_keeps_global_scores(small):
    cfg, train, test = small
    rows = layer_ablation(cfg, train, test, [0, 2], TrainConfig(epochs=1, batch_size=16), fixed_global=True)
    assert rows[0].precision["global"] == rows[1].precision["global"]


def test_keyword_attention_ratios_uniform_baseline(small):
    cfg, _, _ = small
    vocab, _, test = tiny_corpus()
    model = GlocalModel(cfg)
    model.local_head.label_emb.data[...] = 0.0
    from glocalxml.data import SyntheticSpec
    from tiny import TINY_SPEC

    triggers = {lab: vocab.id(tok) for lab, tok in SyntheticSpec(**TINY_SPEC).keyword_map if tok in vocab}
    ratios = keyword_attention_ratios(model, test, triggers)
    assert ratios.size > 0
    np.testing.assert_allclose(ratios, 1.0, rtol=0, atol=1e-12)


# ------------------------------------------------------------------ dumps


def test_prediction_dump_roundtrip_and_ensemble(tmp_path):
    scores = np.array([[0.2, 0.9, 0.5], [0.6, 0.1, 0.3]])
    write_predictions(tmp_path / "a.txt", ["d0", "d1"], scores)
    first = (tmp_path / "a.txt").read_text().splitlines()[0]
    assert first.startswith("d0\t1:0.9 2:0.5 0:0.2")
    back = read_predictions(tmp_path / "a.txt")
    assert back["d1"] == {0: 0.6, 1: 0.1, 2: 0.3}
    assert ensemble([tmp_path / "a.txt"]) == back
    assert ensemble([back, back, back]) == back
    write_predictions(tmp_path / "b.txt", ["d0", "d1"], np.full((2, 3), 0.6))
    merged = ensemble([tmp_path / "a.txt", tmp_path / "b.txt"])
    assert abs(merged["d0"][0] - 0.4) <= 1e-15
    write_ensemble(tmp_path / "m.txt", merged)
    assert read_predictions(tmp_path / "m.txt") == merged


def test_ensemble_alignment_and_parse_errors(tmp_path):
    write_predictions(tmp_path / "a.txt", ["d0"], np.array([[0.1, 0.2]]))
    write_predictions(tmp_path / "b.txt", ["d9"], np.array([[0.1, 0.2]]))
    with pytest.raises(AlignmentError):
        ensemble([tmp_path / "a.txt", tmp_path / "b.txt"])
    write_predictions(tmp_path / "c.txt", ["d0"], np.array([[0.1, 0.2, 0.3]]))
    with pytest.raises(AlignmentError):
        ensemble([tmp_path / "a.txt", tmp_path / "c.txt"])
    (tmp_path / "bad.txt").write_text("d0\t1:x\n")
    with pytest.raises(ParseError, match="line 1"):
        read_predictions(tmp_path / "bad.txt")
