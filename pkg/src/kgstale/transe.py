"""Translation-based embedding initialization and matrix file IO.

Trains TransE over the current training facts to produce the initial entity
and relation features the attention encoder starts from. Also owns the flat
binary matrix format used for every saved artifact (embeddings, detector).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import CURRENT, TRAIN, KnowledgeGraph

MAGIC = int.from_bytes(b"KGMATB01", "little")


@dataclass
class EmbeddingTable:
    """A saved embedding matrix plus the vocabulary naming its rows."""

    values: ad.Matrix
    names: list[str] | None = None

    @property
    def count(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


def write_matrices(path: str, mats: list[ad.Matrix]) -> None:
    """Sequential records: <QQQ little-endian magic,rows,cols> + row-major f8."""
    with io.open(path, "wb") as fh:
        for m in mats:
            m = ad.matrix(m)
            fh.write(struct.pack("<QQQ", MAGIC, m.shape[0], m.shape[1]))
            fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def read_matrices(path: str) -> list[ad.Matrix]:
    out = []
    with io.open(path, "rb") as fh:
        while True:
            head = fh.read(24)
            if not head:
                break
            if len(head) < 24:
                raise ValueError(f"{path}: truncated record header")
            magic, rows, cols = struct.unpack("<QQQ", head)
            if magic != MAGIC:
                raise ValueError(f"{path}: bad magic, not a matrix file")
            buf = fh.read(rows * cols * 8)
            if len(buf) < rows * cols * 8:
                raise ValueError(f"{path}: truncated matrix body")
            out.append(np.frombuffer(buf, dtype="<f8").astype(
                np.float64).reshape(rows, cols))
    return out


def write_vocab(path: str, names: list[str]) -> None:
    with io.open(path, "w", encoding="utf-8") as fh:
        for i, n in enumerate(names):
            fh.write(f"{i}\t{n}\n")


def read_vocab(path: str) -> list[str]:
    names = []
    with io.open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            idx, name = line.split("\t", 1)
            if int(idx) != len(names):
                raise ValueError(f"{path}:{lineno + 1}: rows out of order")
            names.append(name)
    return names


def _training_triples(kg: KnowledgeGraph):
    facts = [f for f, s in zip(kg.facts, kg.split)
             if s == TRAIN and f.label == CURRENT]
    h = np.array([f.head for f in facts], dtype=np.int64)
    r = np.array([f.relation for f in facts], dtype=np.int64)
    t = np.array([f.tail for f in facts], dtype=np.int64)
    return h, r, t


def transe_train(kg: KnowledgeGraph, dim: int = 200, margin: float = 1.0,
                 epochs: int = 50, lr: float = 0.01,
                 rng: ad.Rng | None = None, batch: int = 512,
                 loss_log: list | None = None
                 ) -> tuple[ad.Matrix, ad.Matrix]:
    """Margin-ranking TransE with L1 distance and plain SGD.

    One uniformly corrupted negative per positive (head or tail, coin flip),
    filtered against all triples in kg. Entity rows are L2-normalized after
    every epoch. Returns (E, R) detached from any tape.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    heads, rels, tails = _training_triples(kg)
    n = heads.shape[0]
    if n == 0:
        raise ValueError("empty training split: nothing to embed")
    rng = rng or ad.Rng(0)
    init = rng.substream("init")
    samp = rng.substream("sampling")
    shuf = rng.substream("shuffle")

    bound = 6.0 / np.sqrt(dim)
    E = ad.Parameter(init.uniform(-bound, bound, (kg.n1, dim)), "E0")
    R = ad.Parameter(init.uniform(-bound, bound, (kg.n2, dim)), "R0")
    truth = {(f.head, f.relation, f.tail) for f in kg.facts}

    def corrupt(h, r, t):
        for _ in range(100 * kg.n1):
            e = int(samp.integers(0, kg.n1))
            if samp.integers(0, 2) == 0:
                cand = (e, r, t)
            else:
                cand = (h, r, e)
            if cand not in truth:
                return cand
        raise RuntimeError("could not corrupt fact: graph nearly complete")

    for epoch in range(epochs):
        order = shuf.permutation(n)
        total = 0.0
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            neg = [corrupt(int(heads[i]), int(rels[i]), int(tails[i]))
                   for i in idx]
            nh = np.array([c[0] for c in neg])
            nt = np.array([c[2] for c in neg])
            tape = ad.Tape()
            Ev, Rv = tape.param(E), tape.param(R)
            rvec = ad.gather_rows(Rv, rels[idx])
            d_pos = ad.row_sum(ad.abs_(
                ad.gather_rows(Ev, heads[idx]) + rvec
                - ad.gather_rows(Ev, tails[idx])))
            d_neg = ad.row_sum(ad.abs_(
                ad.gather_rows(Ev, nh) + rvec - ad.gather_rows(Ev, nt)))
            loss = ad.sum_all(ad.relu(d_pos - d_neg + margin))
            total += loss.value[0, 0]
            grads = ad.backward(tape, loss)
            ad.sgd_step([E, R], grads, lr)
        norms = np.maximum(np.linalg.norm(E.value, axis=1, keepdims=True),
                           1e-12)
        E.value /= norms
        if loss_log is not None:
            loss_log.append(total / n)
    return E.value.copy(), R.value.copy()


def l1_distance(E: ad.Matrix, R: ad.Matrix, h, r, t) -> np.ndarray:
    """d(h, r, t) = ||e_h + r - e_t||_1 for parallel index arrays."""
    return np.abs(E[h] + R[r] - E[t]).sum(axis=1)


def save_embeddings(path_prefix: str, E: ad.Matrix, R: ad.Matrix,
                    entity_names: list[str], relation_names: list[str]):
    write_matrices(path_prefix + ".bin", [E, R])
    write_vocab(path_prefix + ".entities.tsv", entity_names)
    write_vocab(path_prefix + ".relations.tsv", relation_names)


def load_embeddings(path_prefix: str) -> tuple[EmbeddingTable, EmbeddingTable]:
    mats = read_matrices(path_prefix + ".bin")
    if len(mats) != 2:
        raise ValueError(
            f"{path_prefix}.bin: expected 2 matrices, found {len(mats)}")
    ents = read_vocab(path_prefix + ".entities.tsv")
    rels = read_vocab(path_prefix + ".relations.tsv")
    E, R = mats
    if E.shape[0] != len(ents) or R.shape[0] != len(rels):
        raise ValueError(
            f"{path_prefix}: matrix rows {E.shape[0]}/{R.shape[0]} do not "
            f"match vocab sizes {len(ents)}/{len(rels)}")
    return EmbeddingTable(E, ents), EmbeddingTable(R, rels)
