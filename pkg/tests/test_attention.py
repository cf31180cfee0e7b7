"""Fact-level attention encoder: reference-path oracles and the margin loss."""

import numpy as np
import pytest

import kgstale.autodiff as ad
from kgstale import attention as att
from kgstale.autodiff import Rng
from kgstale.data import Fact, KnowledgeGraph, Vocab

from gradcheck import check_grads


def tiny_kg(facts, n_ent, n_rel, labels=None, split="train"):
    ents = Vocab([f"e{i}" for i in range(n_ent)])
    rels = Vocab([f"r{i}" for i in range(n_rel)])
    labels = labels or [1] * len(facts)
    fs = [Fact(h, r, t, lab) for (h, r, t), lab in zip(facts, labels)]
    return KnowledgeGraph(ents, rels, fs, [split] * len(fs))


class FixedSampler:
    """Deterministic stand-in so losses are reproducible across calls."""

    def __init__(self, nh, nr, nt, ratio=1):
        self.nh = np.asarray(nh, dtype=np.int64)
        self.nr = np.asarray(nr, dtype=np.int64)
        self.nt = np.asarray(nt, dtype=np.int64)
        self.ratio = ratio

    def sample(self, heads, rels, tails):
        return self.nh, self.nr, self.nt


# ---------------------------------------------------------------------------
# reference path


def test_fact_embed_identity_theta():
    E = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    R = np.array([[10.0]])
    layer = att.AttentionLayer([np.eye(5)], [np.ones((5, 1))], None, "concat")
    np.testing.assert_array_equal(
        att.fact_embed(layer, E, R, (0, 0, 1)), [1, 2, 10, 3, 4])
    np.testing.assert_array_equal(
        att.fact_embed(layer, E, R, (2, 0, 0)), [5, 6, 10, 1, 2])


def test_fact_embed_range_errors():
    layer = att.AttentionLayer([np.eye(5)], [np.ones((5, 1))], None, "concat")
    E, R = np.ones((2, 2)), np.ones((1, 1))
    with pytest.raises(ValueError, match="entity"):
        att.fact_embed(layer, E, R, (2, 0, 0))
    with pytest.raises(ValueError, match="relation"):
        att.fact_embed(layer, E, R, (0, 1, 1))


def test_incidence_pools():
    heads = np.array([0, 1, 2, 2])
    tails = np.array([1, 0, 2, 0])
    pools = att.incidence_pools(heads, tails, 4)
    assert pools == [[0, 1, 3], [0, 1], [2, 3], []]  # self-loop (2,2) once


def test_attention_scores_single_fact_is_one():
    rng = np.random.default_rng(0)
    layer = att.AttentionLayer([rng.normal(size=(5, 3))],
                               [rng.normal(size=(3, 1))], None, "concat")
    E, R = rng.normal(size=(2, 2)), rng.normal(size=(1, 1))
    facts = (np.array([0]), np.array([0]), np.array([1]))
    scores = att.attention_scores(layer, E, R, facts, 2)
    np.testing.assert_allclose(scores[0], [1.0])
    np.testing.assert_allclose(scores[1], [1.0])


def test_attention_scores_identical_facts_split_evenly():
    rng = np.random.default_rng(1)
    layer = att.AttentionLayer([rng.normal(size=(5, 3))],
                               [rng.normal(size=(3, 1))], None, "concat")
    E, R = rng.normal(size=(2, 2)), rng.normal(size=(1, 1))
    facts = (np.array([0, 0]), np.array([0, 0]), np.array([1, 1]))
    scores = att.attention_scores(layer, E, R, facts, 2)
    np.testing.assert_allclose(scores[0], [0.5, 0.5])


def test_attention_scores_manual():
    # one entity with three incident facts, worked by hand
    rng = np.random.default_rng(2)
    theta1 = rng.normal(size=(5, 3))
    theta2 = rng.normal(size=(3, 1))
    layer = att.AttentionLayer([theta1], [theta2], None, "concat")
    E = rng.normal(size=(4, 2))
    R = rng.normal(size=(2, 1))
    h = np.array([0, 0, 3])
    r = np.array([0, 1, 0])
    t = np.array([1, 2, 0])
    F = np.stack([np.concatenate([E[a], R[b], E[c]]) @ theta1
                  for a, b, c in zip(h, r, t)])
    raw = (F @ theta2)[:, 0]
    s = np.where(raw > 0, raw, 0.2 * raw)
    e = np.exp(s - s.max())
    expect = e / e.sum()
    scores = att.attention_scores(layer, E, R, (h, r, t), 4)
    np.testing.assert_allclose(scores[0], expect, atol=1e-12)


def test_entity_update_concat_and_average():
    F = np.array([[1.0, -2.0], [3.0, 4.0]])
    pools = [[0, 1], []]
    scores = [[np.array([0.25, 0.75]), np.array([])]]
    agg = 0.25 * F[0] + 0.75 * F[1]
    layer_c = att.AttentionLayer([np.eye(2)], [np.ones((2, 1))], None,
                                 "concat")
    out = att.entity_update(layer_c, scores, [F], pools)
    np.testing.assert_allclose(out[0], np.where(agg > 0, agg, 0.2 * agg))
    np.testing.assert_array_equal(out[1], [0.0, 0.0])

    layer_a = att.AttentionLayer([np.eye(2), np.eye(2)],
                                 [np.ones((2, 1))] * 2, None, "average")
    out = att.entity_update(layer_a, [scores[0], scores[0]], [F, F], pools)
    np.testing.assert_allclose(out[0], np.where(agg > 0, agg, 0.2 * agg))


def test_entity_update_duplicated_fact_matches_single():
    # two copies of one fact share the softmax mass; the weighted sum is
    # the same as attending to the fact once
    rng = np.random.default_rng(3)
    F1 = rng.normal(size=(1, 3))
    F2 = np.vstack([F1, F1])
    layer = att.AttentionLayer([np.eye(3)], [np.ones((3, 1))], None,
                               "concat")
    one = att.entity_update(layer, [[np.array([1.0])]], [F1], [[0]])
    two = att.entity_update(layer, [[np.array([0.5, 0.5])]], [F2], [[0, 1]])
    np.testing.assert_allclose(one, two, atol=1e-15)


# ---------------------------------------------------------------------------
# encoder


def small_encoder(self_loops=True, heads=2, dim=4, seed=0):
    kg = tiny_kg([(0, 0, 1), (1, 1, 2), (2, 0, 3), (3, 1, 0), (0, 1, 2)],
                 4, 2)
    rng = Rng(seed)
    E0 = rng.normal(0, 0.5, (4, 4))
    R0 = rng.normal(0, 0.5, (2, 4))
    cfg = att.EncoderConfig(heads=heads, dim_out=dim, self_loops=self_loops)
    return kg, att.FactAttentionEncoder(kg, E0, R0, cfg, Rng(seed + 1))


def test_encoder_output_shapes():
    kg, enc = small_encoder()
    E_out, R_out = enc.encode()
    assert E_out.shape == (4, 4)
    assert R_out.shape == (2, 4)


def test_encoder_rejects_bad_dims():
    kg = tiny_kg([(0, 0, 1)], 2, 1)
    E0, R0 = np.ones((2, 4)), np.ones((1, 4))
    with pytest.raises(ValueError, match="divisible"):
        att.FactAttentionEncoder(kg, E0, R0,
                                 att.EncoderConfig(heads=3, dim_out=4),
                                 Rng(0))
    with pytest.raises(ValueError, match="rows"):
        att.FactAttentionEncoder(kg, np.ones((3, 4)), R0,
                                 att.EncoderConfig(), Rng(0))


def test_encoder_matches_layer_reference():
    # the fused tape path must agree with the plain-numpy reference
    # composition of both layers
    kg, enc = small_encoder()
    E_out, R_out = enc.encode()

    facts = (enc.heads_idx, enc.rels_idx, enc.tails_idx)
    R_ext = np.vstack([enc.R.value, enc.r_self.value])
    H1 = att.layer_reference(enc.layer_view(1), enc.E.value, R_ext, facts,
                             kg.n1)
    R1 = R_ext @ enc.map_l1.value
    E_ref = att.layer_reference(enc.layer_view(2), H1, R1, facts, kg.n1)
    R_ref = (R1 @ enc.map_l2.value)[:kg.n2]
    np.testing.assert_allclose(E_out, E_ref, atol=1e-10)
    np.testing.assert_allclose(R_out, R_ref, atol=1e-10)


def test_encoder_matches_layer_reference_no_self_loops():
    kg, enc = small_encoder(self_loops=False, heads=1)
    E_out, R_out = enc.encode()
    facts = (enc.heads_idx, enc.rels_idx, enc.tails_idx)
    H1 = att.layer_reference(enc.layer_view(1), enc.E.value, enc.R.value,
                             facts, kg.n1)
    R1 = enc.R.value @ enc.map_l1.value
    E_ref = att.layer_reference(enc.layer_view(2), H1, R1, facts, kg.n1)
    np.testing.assert_allclose(E_out, E_ref, atol=1e-10)
    np.testing.assert_allclose(R_out, R1 @ enc.map_l2.value, atol=1e-10)


def test_encoder_invariant_to_fact_order():
    kg, enc = small_encoder()
    base_E, base_R = enc.encode()
    perm = Rng(9).permutation(enc.heads_idx.shape[0])
    enc.heads_idx = enc.heads_idx[perm]
    enc.rels_idx = enc.rels_idx[perm]
    enc.tails_idx = enc.tails_idx[perm]
    perm_E, perm_R = enc.encode()
    np.testing.assert_allclose(perm_E, base_E, atol=1e-10)
    np.testing.assert_array_equal(perm_R, base_R)


def test_encoder_isolated_entity_rows_are_zero():
    # without self-loops, an entity with no incident facts aggregates an
    # empty pool: zero vector in, activation(0) = 0 out, both layers
    kg = tiny_kg([(0, 0, 1), (1, 1, 2)], 4, 2)  # entity 3 isolated
    rng = Rng(5)
    enc = att.FactAttentionEncoder(
        kg, rng.normal(0, 0.5, (4, 4)), rng.normal(0, 0.5, (2, 4)),
        att.EncoderConfig(heads=2, dim_out=4, self_loops=False), Rng(6))
    E_out, _ = enc.encode()
    np.testing.assert_array_equal(E_out[3], np.zeros(4))
    assert np.any(E_out[0] != 0)


def test_encoder_excludes_outdated_facts():
    kg = tiny_kg([(0, 0, 1), (1, 1, 2), (2, 0, 3)], 4, 2,
                 labels=[1, 0, 1])
    h, r, t = att.training_fact_arrays(kg)
    assert list(zip(h, r, t)) == [(0, 0, 1), (2, 0, 3)]


def test_encoder_deterministic_and_kernel_agreement():
    kg, enc = small_encoder()
    E1, R1 = enc.encode(use_kernel=False)
    E2, R2 = enc.encode(use_kernel=False)
    np.testing.assert_array_equal(E1, E2)
    from kgstale import _kernels
    if _kernels.NUMBA_AVAILABLE:
        E3, R3 = enc.encode(use_kernel=True)
        np.testing.assert_allclose(E3, E1, atol=1e-10)
        np.testing.assert_array_equal(R3, R1)


def test_module_level_encode():
    kg = tiny_kg([(0, 0, 1), (1, 0, 2)], 3, 1)
    E0 = Rng(0).normal(0, 0.5, (3, 6))
    R0 = Rng(1).normal(0, 0.5, (1, 6))
    E_out, R_out = att.encode(kg, E0, R0,
                              att.EncoderConfig(heads=2, dim_out=6), Rng(2))
    assert E_out.shape == (3, 6) and R_out.shape == (1, 6)
    assert np.all(np.isfinite(E_out)) and np.all(np.isfinite(R_out))


def test_layer_view_rejects_bad_index():
    _, enc = small_encoder()
    with pytest.raises(ValueError, match="layer"):
        enc.layer_view(3)


# ---------------------------------------------------------------------------
# negative sampling + margin loss


def test_sampler_avoids_filter_and_corrupts_one_side():
    truth = {(0, 0, 1), (1, 0, 2), (2, 0, 3)}
    sampler = att.NegativeSampler(Rng(0), 3, truth, 4)
    h = np.array([0, 1, 2])
    r = np.array([0, 0, 0])
    t = np.array([1, 2, 3])
    nh, nr, nt = sampler.sample(h, r, t)
    assert nh.shape == (9,)
    pos = list(zip(h, r, t)) * 3
    for (ph, pr, pt), (a, b, c) in zip(pos, zip(nh, nr, nt)):
        assert (a, b, c) not in truth
        assert b == pr  # relation never corrupted
        assert (a == ph) or (c == pt)  # exactly one side moved


def test_sampler_rejects_bad_ratio():
    with pytest.raises(ValueError, match="ratio"):
        att.NegativeSampler(Rng(0), 0, set(), 3)


def test_sampler_exhausts_when_graph_complete():
    n = 2
    truth = {(a, 0, b) for a in range(n) for b in range(n)}
    sampler = att.NegativeSampler(Rng(0), 1, truth, n)
    with pytest.raises(RuntimeError, match="corruption"):
        sampler.sample(np.array([0]), np.array([0]), np.array([1]))


def test_gat_loss_matches_brute_force():
    rng = np.random.default_rng(7)
    E = rng.normal(size=(4, 3))
    R = rng.normal(size=(2, 3))
    h = np.array([0, 1])
    r = np.array([0, 1])
    t = np.array([1, 2])
    nh = np.array([2, 1, 3, 0])
    nr = np.array([0, 1, 0, 1])
    nt = np.array([1, 3, 1, 2])
    sampler = FixedSampler(nh, nr, nt, ratio=2)
    margin = 0.7

    def d(E_, R_, a, b, c):
        return np.abs(E_[a] + R_[b] - E_[c]).sum()

    expect = 0.0
    for k, (a, b, c) in enumerate(zip(nh, nr, nt)):
        i = k % 2  # positives repeat per corruption round
        expect += max(d(E, R, h[i], r[i], t[i]) - d(E, R, a, b, c)
                      + margin, 0.0)

    tape = ad.Tape()
    loss = att.gat_loss(tape.const(E), tape.const(R), h, r, t, sampler,
                        margin)
    np.testing.assert_allclose(loss.value[0, 0], expect, atol=1e-10)


def test_gat_loss_equal_distances_gives_margin_times_count():
    # corruption identical to the positive (not filtered here) zeroes the
    # difference, so each pair contributes exactly the margin
    E = np.array([[0.5, 1.0], [2.0, -1.0]])
    R = np.array([[0.25, 0.5]])
    h = np.array([0])
    r = np.array([0])
    t = np.array([1])
    sampler = FixedSampler([0], [0], [1])
    tape = ad.Tape()
    loss = att.gat_loss(tape.const(E), tape.const(R), h, r, t, sampler,
                        margin=0.9)
    np.testing.assert_allclose(loss.value[0, 0], 0.9, atol=1e-12)


def test_gat_loss_printed_form_warns_and_flips():
    E = np.array([[0.5, 1.0], [2.0, -1.0], [0.0, 0.0]])
    R = np.array([[0.25, 0.5]])
    h, r, t = np.array([0]), np.array([0]), np.array([1])
    sampler = FixedSampler([2], [0], [1])
    tape = ad.Tape()
    base = att.gat_loss(tape.const(E), tape.const(R), h, r, t, sampler,
                        margin=0.0)
    with pytest.warns(UserWarning, match="printed_form"):
        flipped = att.gat_loss(tape.const(E), tape.const(R), h, r, t,
                               sampler, margin=0.0, printed_form=True)
    d_pos = np.abs(E[0] + R[0] - E[1]).sum()
    d_neg = np.abs(E[2] + R[0] - E[1]).sum()
    np.testing.assert_allclose(base.value[0, 0],
                               max(d_pos - d_neg, 0.0), atol=1e-12)
    np.testing.assert_allclose(flipped.value[0, 0],
                               max(d_neg - d_pos, 0.0), atol=1e-12)


def test_gradcheck_full_encoder_loss_path():
    # end-to-end: both attention layers, relation maps, and the margin
    # loss against central finite differences
    kg, enc = small_encoder(heads=2, dim=4, seed=3)
    h, r, t = att.training_fact_arrays(kg)
    sampler = FixedSampler([3, 2, 1, 0, 2], [0, 1, 0, 1, 1],
                           [1, 3, 3, 0, 0], ratio=1)

    def build(tape):
        E_out, R_out = enc.encode_on_tape(tape, use_kernel=False)
        return att.gat_loss(E_out, R_out, h, r, t, sampler, margin=0.5) \
            * (1.0 / len(h))

    worst = check_grads(build, enc.parameters())
    assert worst < 1e-4
