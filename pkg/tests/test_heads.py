import math
from itertools import product

import numpy as np
import pytest

from glocalxml.errors import DegenerateInputError, DimensionError, DomainError
from glocalxml.heads import GlobalHead, LocalHead, global_logits, label_attention, local_logits
from glocalxml.numerics import Rng, Tensor, check_gradients

import oracles


def local_head(d=2, L=2, tau=1.0, seed=0, **kw):
    return LocalHead(d, L, Rng(seed), tau=tau, **kw)


def local_oracle(head, h, mask):
    return oracles.local_head(
        h.tolist(), mask.tolist(), head.key_w.data.tolist(), head.key_b.data.tolist(),
        head.value_w.data.tolist(), head.value_b.data.tolist(), head.label_emb.data.tolist(),
        head.mlp_w1.data.tolist(), head.mlp_b1.data.tolist(), head.mlp_w2.data.tolist(),
        head.mlp_b2.data.tolist(), head.tau,
    )


def randomize(head, rng, scale=1.0):
    for p in head.parameters():
        p.data[...] = rng.normal(size=p.shape) * scale


# ------------------------------------------------------------------ global


def test_global_zero_label_embeddings():
    head = GlobalHead(4, 3, Rng(0))
    head.label_emb.data[...] = 0
    z = global_logits(head, Tensor(np.random.default_rng(0).normal(size=(2, 4))))
    assert np.all(z.data == 0)
    assert np.all(1 / (1 + np.exp(-z.data)) == 0.5)


def test_global_single_dot_product():
    head = GlobalHead(2, 1, Rng(0))
    head.label_emb.data[...] = [[3.0, -1.0]]
    assert global_logits(head, Tensor([[1.0, 0.0]])).data[0, 0] == 3.0


@pytest.mark.parametrize("pooler", [False, True])
def test_global_matches_dot_product_oracle(pooler):
    rng = np.random.default_rng(5)
    head = GlobalHead(3, 4, Rng(1), pooler=pooler)
    h = rng.normal(size=(5, 3))
    got = global_logits(head, Tensor(h)).data
    want = oracles.global_logits(
        h.tolist(), head.label_emb.data.tolist(),
        head.pool_w.data.tolist() if pooler else None, head.pool_b.data.tolist() if pooler else None,
    )
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_global_dimension_error():
    with pytest.raises(DimensionError):
        global_logits(GlobalHead(4, 3, Rng(0)), Tensor(np.zeros((2, 5))))


# ------------------------------------------------------------- attention


def test_zero_label_row_gives_uniform_attention():
    head = local_head(d=3, L=2)
    head.label_emb.data[0] = 0.0
    h = np.random.default_rng(1).normal(size=(1, 4, 3))
    mask = np.array([[True, True, False, True]])
    att = label_attention(head, Tensor(h), mask).weights
    np.testing.assert_allclose(att[0, 0], [1 / 3, 1 / 3, 0, 1 / 3], rtol=0, atol=1e-15)


def test_cls_and_one_token_closed_form():
    head = local_head(d=2, L=1)
    head.key_w.data[...] = np.eye(2)
    head.key_b.data[...] = 0
    head.label_emb.data[...] = [[1.0, 0.0]]
    h = np.array([[[0.0, 0.0], [math.log(3.0), 0.0]]])
    att = label_attention(head, Tensor(h), np.ones((1, 2), bool)).weights
    np.testing.assert_allclose(att[0, 0], [0.25, 0.75], rtol=0, atol=1e-15)


def test_low_temperature_concentrates_on_argmax():
    # score gaps of at least 0.2 give exp(-20) leakage per loser at tau 0.01
    head = local_head(d=2, L=2, tau=0.01)
    head.key_w.data[...] = np.eye(2)
    head.key_b.data[...] = 0
    head.label_emb.data[...] = [[1.0, 0.0], [0.0, 1.0]]
    h = np.array([[[0.0, 0.0], [1.0, 0.5], [0.3, -0.2], [-1.0, 1.2]]])
    att = label_attention(head, Tensor(h), np.ones((1, 4), bool)).weights[0]
    assert att[0, 1] >= 1 - 1e-8
    assert att[1, 3] >= 1 - 1e-8


def test_all_masked_document_is_degenerate():
    with pytest.raises(DegenerateInputError):
        label_attention(local_head(), Tensor(np.zeros((1, 3, 2))), np.zeros((1, 3), bool))


def test_bad_temperature():
    with pytest.raises(DomainError):
        local_head(tau=0.0)


# ---------------------------------------------------------------- logits


def test_one_hot_attention_retrieves_single_value():
    head = local_head(d=3, L=2, tau=1e-4, seed=2)
    rng = np.random.default_rng(3)
    h = Tensor(rng.normal(size=(1, 5, 3)))
    mask = np.ones((1, 5), bool)
    pooled, alpha = head.pool(h, mask)
    values = h.data[0] @ head.value_w.data + head.value_b.data
    for j in range(2):
        star = int(np.argmax(alpha.data[0, j]))
        np.testing.assert_allclose(pooled.data[0, j], values[star], rtol=0, atol=1e-8)


def test_zero_final_layer_gives_bias():
    head = local_head(d=3, L=4)
    head.mlp_w2.data[...] = 0
    head.mlp_b2.data[...] = 0.37
    z, _ = local_logits(head, Tensor(np.random.default_rng(0).normal(size=(2, 3, 3))), np.ones((2, 3), bool))
    assert np.all(z.data == 0.37)


@pytest.mark.parametrize("T,L", list(product([1, 2, 3], [1, 2])))
def test_local_head_matches_nested_loop_oracle(T, L):
    rng = np.random.default_rng(10 * T + L)
    head = local_head(d=2, L=L, tau=0.7, seed=T)
    randomize(head, rng)
    h = rng.normal(size=(2, T + 1, 2))
    mask = np.ones((2, T + 1), bool)
    mask[1, T] = T == 1  # second document has a padded last slot when T > 1
    z, att = local_logits(head, Tensor(h), mask)
    want_z, want_att = local_oracle(head, h, mask)
    np.testing.assert_allclose(z.data, want_z, rtol=0, atol=1e-12)
    np.testing.assert_allclose(att.weights, want_att, rtol=0, atol=1e-12)


# ------------------------------------------------------------ invariants


def test_attention_rows_are_stochastic_and_masked():
    rng = np.random.default_rng(4)
    head = local_head(d=4, L=5)
    mask = rng.random((3, 9)) < 0.6
    mask[:, 0] = True
    att = label_attention(head, Tensor(rng.normal(size=(3, 9, 4)) * 3), mask).weights
    np.testing.assert_allclose(att.sum(-1), 1.0, rtol=0, atol=1e-9)
    assert np.all(att[np.broadcast_to(~mask[:, None, :], att.shape)] == 0)


def test_entropy_non_decreasing_in_temperature():
    rng = np.random.default_rng(6)
    h = Tensor(rng.normal(size=(2, 7, 3)))
    mask = np.ones((2, 7), bool)
    base = local_head(d=3, L=3, seed=1)
    previous = None
    for tau in [0.05, 0.1, 0.3, 0.5, 1.0, 2.0, 5.0, 20.0]:
        base.tau = tau
        att = label_attention(base, h, mask).weights
        ent = -(att * np.log(np.where(att > 0, att, 1.0))).sum(-1)
        if previous is not None:
            assert np.all(ent >= previous - 1e-12)
        previous = ent


def test_padding_does_not_change_head_logits():
    rng = np.random.default_rng(7)
    lh = local_head(d=3, L=4, seed=3)
    gh = GlobalHead(3, 4, Rng(3))
    h = rng.normal(size=(1, 4, 3))
    padded = np.concatenate([h, rng.normal(size=(1, 3, 3)) * 50], axis=1)
    mask = np.array([[True] * 4 + [False] * 3])
    z_short, _ = local_logits(lh, Tensor(h), np.ones((1, 4), bool))
    z_long, _ = local_logits(lh, Tensor(padded), mask)
    np.testing.assert_allclose(z_long.data, z_short.data, rtol=0, atol=1e-9)
    g_short = global_logits(gh, Tensor(h[:, 0]))
    g_long = global_logits(gh, Tensor(padded[:, 0]))
    np.testing.assert_allclose(g_long.data, g_short.data, rtol=0, atol=1e-9)


def test_attention_is_permutation_equivariant():
    rng = np.random.default_rng(8)
    head = local_head(d=3, L=3, seed=4)
    h = rng.normal(size=(1, 6, 3))
    perm = np.concatenate([[0], 1 + rng.permutation(5)])
    mask = np.ones((1, 6), bool)
    pooled, alpha = head.pool(Tensor(h), mask)
    pooled_p, alpha_p = head.pool(Tensor(h[:, perm]), mask)
    np.testing.assert_allclose(alpha_p.data, alpha.data[:, :, perm], rtol=0, atol=1e-14)
    np.testing.assert_allclose(pooled_p.data, pooled.data, rtol=0, atol=1e-12)


@pytest.mark.parametrize("pooler", [False, True])
def test_head_gradients(pooler):
    rng = np.random.default_rng(9)
    lh = local_head(d=4, L=3, tau=0.5, seed=5)
    gh = GlobalHead(4, 3, Rng(5), pooler=pooler)
    h = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)
    w = rng.normal(size=(2, 3))

    def f():
        zl, _ = lh(h, mask)
        return (zl * w).sum() + (gh(h[:, 0, :]) * w).sum()

    report = check_gradients(f, [h] + lh.parameters() + gh.parameters(), tol=1e-4)
    assert report.passed, report
    assert report.per_param["local.key.weight"] <= 1e-4
    assert report.per_param["local.label_emb"] <= 1e-4


def test_attention_dump(tmp_path):
    head = local_head(d=2, L=2)
    att = label_attention(head, Tensor(np.ones((1, 3, 2))), np.array([[True, True, False]]))
    att.dump(tmp_path / "att.tsv", doc_ids=["d0"])
    lines = (tmp_path / "att.tsv").read_text().splitlines()
    assert lines[0] == "doc_id\tlabel\tposition\tweight"
    assert len(lines) == 1 + 2 * 2
    assert lines[1].split("\t")[:3] == ["d0", "0", "0"]
