"""Translation-embedding warm start and the binary matrix container."""

import numpy as np
import pytest

from kgstale import transe
from kgstale.autodiff import Rng
from kgstale.data import Fact, KnowledgeGraph, Vocab, load_dataset


def tiny_kg(facts, n_ent, n_rel, split="train"):
    ents = Vocab([f"e{i}" for i in range(n_ent)])
    rels = Vocab([f"r{i}" for i in range(n_rel)])
    fs = [Fact(h, r, t) for h, r, t in facts]
    return KnowledgeGraph(ents, rels, fs, [split] * len(fs))


# ---------------------------------------------------------------------------
# matrix container


def test_matrix_roundtrip(tmp_path):
    path = str(tmp_path / "m.bin")
    a = np.arange(6.0).reshape(2, 3)
    b = np.array([[np.pi]])
    transe.write_matrices(path, [a, b])
    out = transe.read_matrices(path)
    assert len(out) == 2
    np.testing.assert_array_equal(out[0], a)
    np.testing.assert_array_equal(out[1], b)


def test_matrix_bad_magic(tmp_path):
    path = tmp_path / "m.bin"
    path.write_bytes(b"\x00" * 24)
    with pytest.raises(ValueError, match="magic"):
        transe.read_matrices(str(path))


def test_matrix_truncated(tmp_path):
    path = str(tmp_path / "m.bin")
    transe.write_matrices(path, [np.ones((4, 4))])
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-8])
    with pytest.raises(ValueError, match="truncated"):
        transe.read_matrices(path)


def test_vocab_roundtrip(tmp_path):
    path = str(tmp_path / "v.tsv")
    names = ["alice", "bob", "with space"]
    transe.write_vocab(path, names)
    assert transe.read_vocab(path) == names


def test_vocab_out_of_order(tmp_path):
    path = tmp_path / "v.tsv"
    path.write_text("0\ta\n2\tb\n")
    with pytest.raises(ValueError, match="out of order"):
        transe.read_vocab(str(path))


def test_save_load_embeddings(tmp_path):
    prefix = str(tmp_path / "emb")
    E = np.random.default_rng(0).normal(size=(3, 4))
    R = np.random.default_rng(1).normal(size=(2, 4))
    transe.save_embeddings(prefix, E, R, ["a", "b", "c"], ["r0", "r1"])
    ents, rels = transe.load_embeddings(prefix)
    np.testing.assert_array_equal(ents.values, E)
    np.testing.assert_array_equal(rels.values, R)
    assert ents.names == ["a", "b", "c"]
    assert rels.names == ["r0", "r1"]
    assert (ents.count, ents.dim) == (3, 4)


def test_load_embeddings_vocab_mismatch(tmp_path):
    prefix = str(tmp_path / "emb")
    transe.save_embeddings(prefix, np.ones((3, 2)), np.ones((2, 2)),
                           ["a", "b", "c"], ["r0", "r1"])
    transe.write_vocab(prefix + ".entities.tsv", ["a", "b"])
    with pytest.raises(ValueError, match="do not match"):
        transe.load_embeddings(prefix)


# ---------------------------------------------------------------------------
# training


def test_transe_rejects_bad_dim():
    kg = tiny_kg([(0, 0, 1)], 2, 1)
    with pytest.raises(ValueError, match="dim"):
        transe.transe_train(kg, dim=0)


def test_transe_rejects_empty_train():
    kg = tiny_kg([(0, 0, 1)], 2, 1, split="test")
    with pytest.raises(ValueError, match="empty training split"):
        transe.transe_train(kg, dim=4)


def test_transe_shapes_and_row_norms():
    kg = tiny_kg([(0, 0, 1), (1, 0, 2), (2, 1, 0)], 4, 2)
    E, R = transe.transe_train(kg, dim=8, epochs=3, rng=Rng(0))
    assert E.shape == (4, 8) and R.shape == (2, 8)
    # rows renormalized after every epoch, including the last
    np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-9)


def test_transe_deterministic():
    kg = tiny_kg([(0, 0, 1), (1, 1, 2), (2, 0, 3)], 4, 2)
    E1, R1 = transe.transe_train(kg, dim=6, epochs=4, rng=Rng(42))
    E2, R2 = transe.transe_train(kg, dim=6, epochs=4, rng=Rng(42))
    np.testing.assert_array_equal(E1, E2)
    np.testing.assert_array_equal(R1, R2)


def test_transe_loss_decreases():
    facts = [(i, 0, (i + 1) % 6) for i in range(6)] \
        + [(i, 1, (i + 2) % 6) for i in range(6)]
    kg = tiny_kg(facts, 6, 2)
    log = []
    transe.transe_train(kg, dim=16, epochs=40, rng=Rng(3), loss_log=log)
    assert len(log) == 40
    assert all(v >= 0 for v in log)
    assert np.mean(log[-10:]) < np.mean(log[:10])


def test_transe_ranks_true_facts():
    # two banks of paired entities, one translation per relation — a
    # structure the model family can represent exactly; true facts must
    # beat nearly every head/tail corruption under the L1 score
    n = 12
    facts = [(i, 0, i + 4) for i in range(4)] \
        + [(i, 1, i + 8) for i in range(4)]
    kg = tiny_kg(facts, n, 2)
    E, R = transe.transe_train(kg, dim=16, epochs=60, lr=0.05, rng=Rng(1))
    truth = set(facts)
    wins = total = 0
    for h, r, t in facts:
        d_true = transe.l1_distance(E, R, [h], [r], [t])[0]
        for e in range(n):
            for cand in [(e, r, t), (h, r, e)]:
                if cand in truth or cand == (h, r, t):
                    continue
                total += 1
                wins += bool(d_true < transe.l1_distance(
                    E, R, [cand[0]], [cand[1]], [cand[2]])[0])
    assert wins / total > 0.9


def test_transe_skips_outdated_and_nontrain_facts():
    ents = Vocab(["a", "b", "c"])
    rels = Vocab(["r0", "r1"])
    facts = [Fact(0, 0, 1, 1), Fact(1, 0, 2, 0), Fact(2, 1, 0, 1)]
    kg = KnowledgeGraph(ents, rels, facts, ["train", "train", "test"])
    h, r, t = transe._training_triples(kg)
    assert list(zip(h, r, t)) == [(0, 0, 1)]


def test_transe_on_real_file():
    kg = load_dataset("datasets/nations/train.txt")
    log = []
    E, R = transe.transe_train(kg, dim=10, epochs=2, rng=Rng(0),
                               loss_log=log)
    assert E.shape == (14, 10) and R.shape == (55, 10)
    assert log[1] < log[0]
