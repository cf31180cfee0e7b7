"""Relation co-occurrence graph and the contrastive relation objective.

Nodes are relation TYPES; the weight between two relations counts the
entities at which both are incident. Relation features propagate through a
two-layer GCN over this graph, and a bilinear discriminator contrasts true
(node, graph-summary) pairs against row-shuffled corruptions, DGI style.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import CURRENT, TRAIN, KnowledgeGraph


def build_r2n(kg: KnowledgeGraph) -> ad.Matrix:
    """Co-occurrence adjacency over training facts.

    A[x, z] counts entities incident (head or tail side) to both relation
    types x and z; the SET of distinct incident types per entity is what
    pairs up, so multiplicity at one entity never inflates a weight.
    Symmetric, zero diagonal, exact integers in float storage.

    Vectorized as B^T B on the entity-relation incidence indicator; the
    per-entity pair-loop oracle in the tests checks the algebra.
    """
    B = np.zeros((kg.n1, kg.n2))
    for f, s in zip(kg.facts, kg.split):
        if s == TRAIN and f.label == CURRENT:
            B[f.head, f.relation] = 1.0
            B[f.tail, f.relation] = 1.0
    A = B.T @ B
    np.fill_diagonal(A, 0.0)
    return A


def write_edge_list(path: str, A: ad.Matrix,
                    names: list[str] | None = None) -> int:
    """Upper-triangle nonzero edges as relation_x<TAB>relation_z<TAB>weight."""
    n = A.shape[0]
    count = 0
    with io.open(path, "w", encoding="utf-8") as fh:
        for x in range(n):
            for z in range(x + 1, n):
                if A[x, z] != 0:
                    nx = names[x] if names else str(x)
                    nz = names[z] if names else str(z)
                    fh.write(f"{nx}\t{nz}\t{int(A[x, z])}\n")
                    count += 1
    return count


def normalized_adjacency(A: ad.Matrix) -> ad.Matrix:
    """D^{-1/2} (A + I) D^{-1/2} with integer co-occurrence weights kept."""
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    ahat = A + np.eye(A.shape[0])
    dinv = 1.0 / np.sqrt(ahat.sum(axis=1))
    return ahat * dinv[:, None] * dinv[None, :]


@dataclass
class ContrastiveModel:
    """Feature map, GCN stack, PReLU slopes, and the discriminator."""

    theta3: ad.Parameter  # d2 x d2'
    gcn: list[ad.Parameter]  # per layer, d2' x d2'
    slopes: list[ad.Parameter]  # per layer, 1 x 1 learned PReLU slope
    theta_d: ad.Parameter  # d2' x d2'

    @staticmethod
    def init(d2: int, d2p: int, rng: ad.Rng, depth: int = 2
             ) -> "ContrastiveModel":
        init = rng.substream("init")

        def xavier(rows, cols, name):
            lim = np.sqrt(6.0 / (rows + cols))
            return ad.Parameter(init.uniform(-lim, lim, (rows, cols)), name)

        return ContrastiveModel(
            theta3=xavier(d2, d2p, "theta3"),
            gcn=[xavier(d2p, d2p, f"gcn.l{i}") for i in range(depth)],
            slopes=[ad.Parameter([[0.25]], f"prelu.l{i}")
                    for i in range(depth)],
            theta_d=xavier(d2p, d2p, "theta_d"),
        )

    def parameters(self) -> list[ad.Parameter]:
        return [self.theta3, *self.gcn, *self.slopes, self.theta_d]


def gcn_forward(model: ContrastiveModel, norm_adj: ad.Matrix, X: ad.Var
                ) -> ad.Var:
    """H^(l) = PReLU(norm_adj H^(l-1) Theta^(l-1)), slopes learned."""
    tape = X.tape
    if norm_adj.shape[1] != X.shape[0]:
        raise ValueError(
            f"adjacency {norm_adj.shape} does not match features {X.shape}")
    adj = tape.const(norm_adj)
    H = X
    for theta, slope in zip(model.gcn, model.slopes):
        H = ad.prelu(ad.matmul(ad.matmul(adj, H), tape.param(theta)),
                     tape.param(slope))
    return H


def corrupt_features(X: ad.Var, rng: ad.Rng) -> ad.Var:
    """Row-shuffle the feature matrix; the adjacency stays fixed."""
    perm = rng.permutation(X.shape[0])
    return ad.gather_rows(X, perm)


def readout(H: ad.Var) -> ad.Var:
    """Graph summary: column-wise mean of node embeddings, shape (1, d)."""
    return ad.col_mean(H)


def discriminate(model: ContrastiveModel, h: ad.Var, g: ad.Var) -> ad.Var:
    """sigmoid(h Theta_d g^T) row-wise: (n, d) x (1, d) -> (n, 1)."""
    tape = h.tape
    return ad.sigmoid(_logits(model, tape, h, g))


def _logits(model, tape, H, g):
    return ad.matmul(ad.matmul(H, tape.param(model.theta_d)),
                     ad.transpose(g))


def r2n_loss(model: ContrastiveModel, norm_adj: ad.Matrix, X: ad.Var,
             rng: ad.Rng) -> ad.Var:
    """DGI-style BCE: -(1/2n2) [sum log D(h, g) + sum log(1 - D(h~, g))].

    The summary g comes from the positive branch only; the corrupted branch
    shares every weight. One shuffled copy per call, so positives and
    negatives both number n2.
    """
    tape = X.tape
    H_pos = gcn_forward(model, norm_adj, X)
    g = readout(H_pos)
    H_neg = gcn_forward(model, norm_adj, corrupt_features(X, rng))
    pos = ad.log_sigmoid(_logits(model, tape, H_pos, g))
    neg = ad.log_sigmoid(-_logits(model, tape, H_neg, g))
    return -ad.mean_all(ad.concat_rows([pos, neg]))


def relation_features(model: ContrastiveModel, tape: ad.Tape, R: ad.Var
                      ) -> ad.Var:
    """X = R theta3, recomputed from the live relation leaf every step."""
    return ad.matmul(R, tape.param(model.theta3))
