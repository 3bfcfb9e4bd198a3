import math

import numpy as np
import pytest

from glocalxml.errors import ConfigError, ValidationError
from glocalxml.model import (
    GROUP_NAMES,
    PRETRAINED_RATES_OTHER,
    PRETRAINED_RATES_WIKI10,
    GlocalModel,
    ModelConfig,
    combine,
    loss_terms,
    param_groups,
    predict_topk,
    rank_labels,
)
from glocalxml.numerics import Tape, bce_with_logits, check_gradients

import oracles
from tiny import tiny_config, tiny_model_and_batch


def test_combined_score_is_the_mean():
    model, batch = tiny_model_and_batch(seed=1)
    out = model(batch)
    assert np.array_equal(out.p_final, 0.5 * (out.p_local + out.p_global))
    lo = np.minimum(out.p_local, out.p_global)
    hi = np.maximum(out.p_local, out.p_global)
    assert np.all((lo <= out.p_final) & (out.p_final <= hi))


def test_combine_examples():
    assert combine(np.array([0.9]), np.array([0.1]))[0] == 0.5
    assert combine(np.array([1.0]), np.array([1.0]))[0] == 1.0


def test_zero_classifier_outputs_give_one_half():
    model, batch = tiny_model_and_batch()
    model.zero_classifier_outputs()
    out = model(batch)
    for src in ("global", "local", "final"):
        assert np.all(out.source(src) == 0.5)
    terms = loss_terms(model, batch)
    assert abs(float(terms.total.data) - 2 * math.log(2)) <= 1e-12


def test_saturated_logits_give_tiny_loss():
    y = np.array([[1.0, 0.0, 1.0]])
    z = np.where(y > 0, 40.0, -40.0)
    assert float(bce_with_logits(z, y).data) <= 1e-15


def test_loss_decomposes_into_head_terms():
    model, batch = tiny_model_and_batch(seed=2)
    z_global, z_local, _ = model.logits(batch.token_ids, batch.mask)
    terms = loss_terms(model, batch)
    want_g = oracles.naive_bce(z_global.data.ravel().tolist(), batch.targets.ravel().tolist())
    want_l = oracles.naive_bce(z_local.data.ravel().tolist(), batch.targets.ravel().tolist())
    assert abs(float(terms.global_term.data) - want_g) <= 1e-12
    assert abs(float(terms.local_term.data) - want_l) <= 1e-12
    assert abs(float(terms.total.data) - (want_g + want_l)) <= 1e-12


def test_global_label_embedding_gets_no_local_gradient():
    model, batch = tiny_model_and_batch(seed=3)
    with Tape() as tape:
        terms = loss_terms(model, batch)
        tape.backward(terms.local_term)
    g = model.global_head.label_emb.grad
    assert g is None or not np.any(g)
    assert np.any(model.local_head.label_emb.grad)


def test_full_model_gradients():
    model, batch = tiny_model_and_batch(seed=4, n=2)
    report = check_gradients(lambda: loss_terms(model, batch).total, model.parameters(), tol=1e-4)
    assert report.passed, report


def test_config_validation_and_roundtrip():
    cfg = tiny_config(tau=0.5, pooler=True)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        tiny_config(local_layer=3)
    with pytest.raises(ValidationError):
        tiny_config(tau=0.0)


def test_same_seed_same_weights():
    a = GlocalModel(tiny_config(), seed=7).named_parameters()
    b = GlocalModel(tiny_config(), seed=7).named_parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


# ------------------------------------------------------------------ ranking


def test_rank_labels_examples():
    assert rank_labels(np.array([0.1, 0.9, 0.5]), 2).tolist() == [[1, 2]]
    assert rank_labels(np.array([0.5, 0.5, 0.1]), 2).tolist() == [[0, 1]]
    with pytest.raises(ValidationError):
        rank_labels(np.array([0.1, 0.2]), 3)


def test_ranking_invariant_under_monotone_transform():
    scores = np.random.default_rng(0).random((20, 9))
    assert np.array_equal(rank_labels(scores, 4), rank_labels(np.log(scores) * 3 + 1, 4))


def test_predict_topk_uses_requested_source():
    model, batch = tiny_model_and_batch(seed=5)
    out = model(batch)
    for src in ("global", "local", "final"):
        assert np.array_equal(predict_topk(model, batch, 3, src), rank_labels(out.source(src), 3))
    with pytest.raises(ValidationError):
        predict_topk(model, batch, 0)
    with pytest.raises(ValidationError):
        out.source("both")


# ---------------------------------------------------------- parameter groups


def test_param_groups_partition_all_parameters():
    model = GlocalModel(tiny_config(pooler=True))
    groups = param_groups(model, PRETRAINED_RATES_OTHER)
    ids = [id(p) for g in groups for p in g.params]
    assert len(ids) == len(set(ids)) == len(model.parameters())
    assert groups.num_parameters() == model.num_parameters()
    assert groups["global_pooler"].params and groups["backbone"].lr == 5e-5


def test_param_groups_pretrained_rates_and_uniform_rate():
    model = GlocalModel(tiny_config())
    assert param_groups(model, PRETRAINED_RATES_WIKI10).rates() == PRETRAINED_RATES_WIKI10
    assert set(param_groups(model, 2e-3).rates().values()) == {2e-3}
    assert param_groups(model, 1e-3)["global_pooler"].params == []


def test_param_groups_rejects_bad_rates():
    model = GlocalModel(tiny_config())
    rates = dict.fromkeys(GROUP_NAMES, 1e-3)
    with pytest.raises(ConfigError):
        param_groups(model, {k: v for k, v in rates.items() if k != "local_mlp"})
    with pytest.raises(ConfigError):
        param_groups(model, {**rates, "decoder": 1.0})
    with pytest.raises(ConfigError):
        param_groups(model, {**rates, "backbone": -1.0})
