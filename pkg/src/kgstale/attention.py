"""Multi-head attention over facts producing updated entity embeddings.

A fact (h, r, t) is embedded by a per-head linear map over the concatenation
[e_h || r || e_t]; each entity softmax-attends over every fact it appears in
(head or tail side) and aggregates the fact embeddings. Two layers: the
hidden layer concatenates K head outputs, the final layer averages them.
Relations travel through a learned linear map per layer so their dimension
tracks the entity dimension.

Parameters are stored per-head as the full theta1 matrix (2*d_e + d_r rows);
forward passes slice it into head/relation/tail blocks and project the whole
embedding tables once, which turns the per-fact concat-then-multiply into
three gathers plus adds inside the attention primitive.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import CURRENT, TRAIN, KnowledgeGraph


@dataclass
class EncoderConfig:
    heads: int = 2
    dim_out: int = 200  # entity output dim; also relation output dim
    slope: float = 0.2  # LeakyReLU slope for scores and activations
    self_loops: bool = True
    include_outdated: bool = False  # feature learning uses current facts only


@dataclass
class AttentionLayer:
    """Per-head parameter views of one attention layer (reference API)."""

    theta1: list[ad.Matrix]  # per head, (2*d_in_e + d_in_r) x d_f
    theta2: list[ad.Matrix]  # per head, d_f x 1
    relation_map: ad.Matrix  # d_in_r x d_out_r
    mode: str = "concat"  # concat | average

    @property
    def heads(self):
        return len(self.theta1)


def slice_rows(a: ad.Var, start: int, stop: int) -> ad.Var:
    """Contiguous row slice on the tape; backward pads with zeros."""
    rows = a.shape[0]
    out = a.value[start:stop].copy()

    def vjp(g):
        da = np.zeros((rows, g.shape[1]))
        da[start:stop] = g
        return (da,)

    return a.tape._record("slice_rows", (a.idx,), out, vjp)


def training_fact_arrays(kg: KnowledgeGraph, include_outdated: bool = False):
    """Head/relation/tail index arrays of the encoder's incidence facts."""
    facts = [f for f, s in zip(kg.facts, kg.split)
             if s == TRAIN and (include_outdated or f.label == CURRENT)]
    h = np.array([f.head for f in facts], dtype=np.int64)
    r = np.array([f.relation for f in facts], dtype=np.int64)
    t = np.array([f.tail for f in facts], dtype=np.int64)
    return h, r, t


class FactAttentionEncoder:
    """Two attention layers with trainable input tables.

    Holds every Parameter of the encoder path: the entity/relation leaves
    (initialized from the translation embedding), the optional self-loop
    relation vector, per-head theta1/theta2 for both layers, and the two
    relation maps.
    """

    def __init__(self, kg: KnowledgeGraph, E0: ad.Matrix, R0: ad.Matrix,
                 config: EncoderConfig, rng: ad.Rng):
        d1, d2 = E0.shape[1], R0.shape[1]
        K, dim = config.heads, config.dim_out
        if K < 1 or dim < 1:
            raise ValueError(f"bad encoder config: heads={K} dim={dim}")
        if dim % K != 0:
            raise ValueError(
                f"dim_out {dim} must be divisible by heads {K}")
        if E0.shape[0] != kg.n1 or R0.shape[0] != kg.n2:
            raise ValueError(
                f"embedding rows ({E0.shape[0]}, {R0.shape[0]}) do not match "
                f"graph sizes ({kg.n1}, {kg.n2})")
        self.config = config
        self.n1, self.n2 = kg.n1, kg.n2
        self.d1, self.d2, self.df1 = d1, d2, dim // K

        h, r, t = training_fact_arrays(kg, config.include_outdated)
        if config.self_loops:
            loop = np.arange(kg.n1, dtype=np.int64)
            h = np.concatenate([h, loop])
            t = np.concatenate([t, loop])
            r = np.concatenate([r, np.full(kg.n1, kg.n2, dtype=np.int64)])
        self.heads_idx, self.rels_idx, self.tails_idx = h, r, t

        init = rng.substream("init")

        def xavier(rows, cols, name):
            lim = np.sqrt(6.0 / (rows + cols))
            return ad.Parameter(init.uniform(-lim, lim, (rows, cols)), name)

        self.E = ad.Parameter(E0.copy(), "E")
        self.R = ad.Parameter(R0.copy(), "R")
        self.r_self = None
        if config.self_loops:
            b = 6.0 / np.sqrt(d2)
            self.r_self = ad.Parameter(init.uniform(-b, b, (1, d2)), "r_self")
        df1 = self.df1
        self.theta1_l1 = [xavier(2 * d1 + d2, df1, f"theta1.l1.h{k}")
                          for k in range(K)]
        self.theta2_l1 = [xavier(df1, 1, f"theta2.l1.h{k}") for k in range(K)]
        self.map_l1 = xavier(d2, dim, "relation_map.l1")
        self.theta1_l2 = [xavier(2 * dim + dim, dim, f"theta1.l2.h{k}")
                          for k in range(K)]
        self.theta2_l2 = [xavier(dim, 1, f"theta2.l2.h{k}") for k in range(K)]
        self.map_l2 = xavier(dim, dim, "relation_map.l2")

    def parameters(self) -> list[ad.Parameter]:
        ps = [self.E, self.R]
        if self.r_self is not None:
            ps.append(self.r_self)
        ps += self.theta1_l1 + self.theta2_l1 + [self.map_l1]
        ps += self.theta1_l2 + self.theta2_l2 + [self.map_l2]
        return ps

    def _attend_layer(self, tape, H, R_ext, theta1s, theta2s, d_e, d_r,
                      use_kernel):
        cfg = self.config
        outs = []
        for th1, th2 in zip(theta1s, theta2s):
            t1 = tape.param(th1)
            Hh = H @ slice_rows(t1, 0, d_e)
            Rr = R_ext @ slice_rows(t1, d_e, d_e + d_r)
            Ht = H @ slice_rows(t1, d_e + d_r, 2 * d_e + d_r)
            outs.append(ad.attend_facts(
                Hh, Rr, Ht, tape.param(th2), self.heads_idx, self.rels_idx,
                self.tails_idx, self.n1, cfg.slope, use_kernel=use_kernel))
        return outs

    def encode_on_tape(self, tape: ad.Tape, use_kernel: bool | None = None
                       ) -> tuple[ad.Var, ad.Var]:
        """Record the full two-layer forward pass; returns (E_out, R_out)."""
        cfg = self.config
        K, dim = cfg.heads, cfg.dim_out
        Ev = tape.param(self.E)
        Rv = tape.param(self.R)
        if self.r_self is not None:
            R_ext = ad.concat_rows([Rv, tape.param(self.r_self)])
        else:
            R_ext = Rv

        heads_out = self._attend_layer(tape, Ev, R_ext, self.theta1_l1,
                                       self.theta2_l1, self.d1, self.d2,
                                       use_kernel)
        H1 = ad.concat_cols([ad.leaky_relu(o, cfg.slope) for o in heads_out])
        R1 = R_ext @ tape.param(self.map_l1)

        heads_out = self._attend_layer(tape, H1, R1, self.theta1_l2,
                                       self.theta2_l2, dim, dim, use_kernel)
        acc = heads_out[0]
        for o in heads_out[1:]:
            acc = acc + o
        E_out = ad.leaky_relu(acc * (1.0 / K), cfg.slope)
        R_out = R1 @ tape.param(self.map_l2)
        if self.r_self is not None:
            R_out = slice_rows(R_out, 0, self.n2)
        return E_out, R_out

    def encode(self, use_kernel: bool | None = None
               ) -> tuple[ad.Matrix, ad.Matrix]:
        """One detached forward pass (no training)."""
        tape = ad.Tape()
        E_out, R_out = self.encode_on_tape(tape, use_kernel)
        return E_out.value.copy(), R_out.value.copy()

    def layer_view(self, layer: int) -> AttentionLayer:
        """Read-only AttentionLayer view for the reference-path oracles."""
        if layer == 1:
            return AttentionLayer([p.value for p in self.theta1_l1],
                                  [p.value for p in self.theta2_l1],
                                  self.map_l1.value, "concat")
        if layer == 2:
            return AttentionLayer([p.value for p in self.theta1_l2],
                                  [p.value for p in self.theta2_l2],
                                  self.map_l2.value, "average")
        raise ValueError(f"layer must be 1 or 2, got {layer}")


def encode(kg: KnowledgeGraph, E0: ad.Matrix, R0: ad.Matrix,
           config: EncoderConfig, rng: ad.Rng | None = None
           ) -> tuple[ad.Matrix, ad.Matrix]:
    """Untrained two-layer encode with freshly initialized layer weights."""
    enc = FactAttentionEncoder(kg, E0, R0, config, rng or ad.Rng(0))
    return enc.encode()


# ---------------------------------------------------------------------------
# reference path (plain numpy, no tape): used as the oracle for the fused op


def fact_embed(layer: AttentionLayer, E_in: ad.Matrix, R_in: ad.Matrix,
               fact, head: int = 0) -> np.ndarray:
    """f = [e_h || r || e_t] theta1 for one fact, one head; shape (d_f,)."""
    h, r, t = fact
    if not (0 <= h < E_in.shape[0] and 0 <= t < E_in.shape[0]):
        raise ValueError(f"entity id out of range in fact {fact}")
    if not 0 <= r < R_in.shape[0]:
        raise ValueError(f"relation id out of range in fact {fact}")
    cat = np.concatenate([E_in[h], R_in[r], E_in[t]])
    return cat @ layer.theta1[head]


def incidence_pools(heads, tails, n1: int) -> list[list[int]]:
    """Fact indices incident to each entity; self-loops appear once."""
    pools: list[list[int]] = [[] for _ in range(n1)]
    for f, (h, t) in enumerate(zip(heads, tails)):
        pools[h].append(f)
        if t != h:
            pools[t].append(f)
    return pools


def attention_scores(layer: AttentionLayer, E_in: ad.Matrix,
                     R_in: ad.Matrix, facts, n1: int, head: int = 0,
                     slope: float = 0.2) -> list[np.ndarray]:
    """Per-entity normalized attention over incident facts (one head).

    facts is a (heads, rels, tails) triple of index arrays. Entities with
    no incident facts get an empty score list.
    """
    heads, rels, tails = facts
    F = np.stack([fact_embed(layer, E_in, R_in, (h, r, t), head)
                  for h, r, t in zip(heads, rels, tails)])
    raw = (F @ layer.theta2[head])[:, 0]
    s = np.where(raw > 0, raw, slope * raw)
    out = []
    for pool in incidence_pools(heads, tails, n1):
        if not pool:
            out.append(np.array([]))
            continue
        e = np.exp(s[pool] - np.max(s[pool]))
        out.append(e / e.sum())
    return out


def entity_update(layer: AttentionLayer, scores: list[list[np.ndarray]],
                  fact_embeds: list[np.ndarray], pools: list[list[int]],
                  slope: float = 0.2) -> np.ndarray:
    """Aggregate per-head weighted sums into entity rows.

    scores[k][i] are entity i's normalized weights for head k, aligned with
    pools[i]; fact_embeds[k] is the (m, d_f) embedding matrix for head k.
    Concat mode joins head outputs, average mode means them; the activation
    is applied after aggregation either way.
    """
    K = layer.heads
    n1 = len(pools)
    per_head = []
    for k in range(K):
        df = fact_embeds[k].shape[1]
        H = np.zeros((n1, df))
        for i, pool in enumerate(pools):
            if pool:
                H[i] = scores[k][i] @ fact_embeds[k][pool]
        per_head.append(H)
    if layer.mode == "concat":
        agg = np.concatenate([np.where(H > 0, H, slope * H)
                              for H in per_head], axis=1)
        return agg
    agg = sum(per_head) / K
    return np.where(agg > 0, agg, slope * agg)


def layer_reference(layer: AttentionLayer, E_in, R_in, facts, n1,
                    slope: float = 0.2) -> np.ndarray:
    """Full reference forward of one layer (all heads), for cross-checks."""
    heads, rels, tails = facts
    pools = incidence_pools(heads, tails, n1)
    scores = [attention_scores(layer, E_in, R_in, facts, n1, k, slope)
              for k in range(layer.heads)]
    embeds = [np.stack([fact_embed(layer, E_in, R_in, (h, r, t), k)
                        for h, r, t in zip(heads, rels, tails)])
              for k in range(layer.heads)]
    return entity_update(layer, scores, embeds, pools, slope)


# ---------------------------------------------------------------------------
# margin loss over valid/invalid fact pairs


class NegativeSampler:
    """Uniform head-or-tail corruption filtered against true triples."""

    def __init__(self, rng: ad.Rng, ratio: int,
                 filter_triples: set[tuple[int, int, int]], n_entities: int):
        if ratio < 1:
            raise ValueError(f"ratio must be >= 1, got {ratio}")
        self.rng = rng
        self.ratio = ratio
        self.filter = filter_triples
        self.n1 = n_entities

    def sample(self, heads, rels, tails):
        """ratio corruptions per fact, blocks of len(heads) per round."""
        nh, nr, nt = [], [], []
        for _ in range(self.ratio):
            for h, r, t in zip(heads, rels, tails):
                h, r, t = int(h), int(r), int(t)
                for _ in range(100 * self.n1):
                    e = int(self.rng.integers(0, self.n1))
                    cand = (e, r, t) if self.rng.integers(0, 2) == 0 \
                        else (h, r, e)
                    if cand not in self.filter:
                        break
                else:
                    raise RuntimeError(
                        "no valid corruption found: filter is near-complete")
                nh.append(cand[0])
                nr.append(cand[1])
                nt.append(cand[2])
        return (np.array(nh, dtype=np.int64), np.array(nr, dtype=np.int64),
                np.array(nt, dtype=np.int64))


def gat_loss(E_out: ad.Var, R_out: ad.Var, heads, rels, tails,
             sampler: NegativeSampler, margin: float = 1.0,
             printed_form: bool = False) -> ad.Var:
    """Margin ranking loss over valid facts and their sampled corruptions.

    Sum over pairs of max(d_valid - d_invalid + margin, 0) with L1 distance
    d = ||e_h + r - e_t||_1. printed_form=True flips the difference to the
    form the source prints, which pushes valid facts AWAY; it exists only
    for side-by-side debugging and warns when used.
    """
    eh = ad.gather_rows(E_out, heads)
    rv = ad.gather_rows(R_out, rels)
    et = ad.gather_rows(E_out, tails)
    d_pos = ad.row_sum(ad.abs_(eh + rv - et))
    nh, nr, nt = sampler.sample(heads, rels, tails)
    d_neg = ad.row_sum(ad.abs_(
        ad.gather_rows(E_out, nh) + ad.gather_rows(R_out, nr)
        - ad.gather_rows(E_out, nt)))
    d_pos_rep = ad.concat_rows([d_pos] * sampler.ratio)
    if printed_form:
        warnings.warn("gat_loss printed_form reverses the margin objective; "
                      "debug use only", stacklevel=2)
        diff = d_neg - d_pos_rep
    else:
        diff = d_pos_rep - d_neg
    return ad.sum_all(ad.relu(diff + margin))
