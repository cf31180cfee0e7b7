"""Dense float64 matrices, a minimal reverse-mode tape, Adam, and seeded RNG.

Every trainable computation in the pipeline runs through this module. A Tape
is built per loss evaluation: forward calls record primitive nodes, then
backward() sweeps the node list once in reverse and returns a gradient per
parameter. Tapes are throwaway; nothing persists across steps except the
Parameter values and optimizer state.

Matrices are plain 2-D C-contiguous float64 numpy arrays. Dense is fine at
this scale (a few hundred relations, desk-scale entity counts).
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

Matrix = np.ndarray


def matrix(data) -> Matrix:
    """Coerce to a 2-D C-contiguous float64 array (the Matrix type)."""
    a = np.ascontiguousarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"Matrix must be 2-D, got shape {a.shape}")
    return a


class Parameter:
    """A trainable leaf: a named Matrix updated in place by an optimizer."""

    __slots__ = ("value", "name")

    def __init__(self, value, name: str = ""):
        self.value = matrix(value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name or '?'}, {self.value.shape})"


class Node:
    __slots__ = ("op", "parents", "value", "vjp", "param")

    def __init__(self, op, parents, value, vjp, param=None):
        self.op = op
        self.parents = parents  # tuple of node indices
        self.value = value
        self.vjp = vjp  # callable grad_out -> tuple of parent grads (or None)
        self.param = param  # set on leaf nodes lifted from a Parameter


class Var:
    """Handle to one recorded node on a Tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> Matrix:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.const(np.full((1, 1), float(other))), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered list of primitive operations; inputs always precede users."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._lifted: dict[int, int] = {}  # id(Parameter) -> node idx
        self.params: list[Parameter] = []

    def _record(self, op, parents, value, vjp, param=None) -> Var:
        self.nodes.append(Node(op, parents, value, vjp, param))
        return Var(self, len(self.nodes) - 1)

    def param(self, p: Parameter) -> Var:
        """Lift a Parameter onto the tape (idempotent per tape)."""
        k = id(p)
        if k in self._lifted:
            return Var(self, self._lifted[k])
        v = self._record("param", (), p.value, None, param=p)
        self._lifted[k] = v.idx
        self.params.append(p)
        return v

    def const(self, x) -> Var:
        return self._record("const", (), matrix(x), None)


def _as_var(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x
    if isinstance(x, Parameter):
        return tape.param(x)
    if np.isscalar(x):
        return tape.const(np.full((1, 1), float(x)))
    return tape.const(x)


def _unbroadcast(grad: Matrix, shape) -> Matrix:
    """Sum a gradient down to the shape the operand actually had."""
    if grad.shape == shape:
        return grad
    g = grad
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(sa, sb, op):
    ok = all(a == b or a == 1 or b == 1 for a, b in zip(sa, sb))
    if not ok:
        raise ValueError(f"{op}: shapes {sa} and {sb} do not broadcast")


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a = _as_var(tape, a)
    b = _as_var(tape, b)
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions differ, {av.shape} x {bv.shape}")
    out = av @ bv

    def vjp(g):
        return g @ bv.T, av.T @ g

    return tape._record("matmul", (a.idx, b.idx), out, vjp)


def add(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a = _as_var(tape, a)
    b = _as_var(tape, b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return tape._record("add", (a.idx, b.idx), a.value + b.value, vjp)


def sub(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a = _as_var(tape, a)
    b = _as_var(tape, b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return tape._record("sub", (a.idx, b.idx), a.value - b.value, vjp)


def mul(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a = _as_var(tape, a)
    b = _as_var(tape, b)
    _check_broadcast(a.shape, b.shape, "mul")
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape._record("mul", (a.idx, b.idx), av * bv, vjp)


def neg(a: Var) -> Var:
    return a.tape._record("neg", (a.idx,), -a.value, lambda g: (-g,))


def transpose(a: Var) -> Var:
    return a.tape._record("transpose", (a.idx,), a.value.T.copy(),
                          lambda g: (g.T.copy(),))


def abs_(a: Var) -> Var:
    sign = np.sign(a.value)
    return a.tape._record("abs", (a.idx,), np.abs(a.value),
                          lambda g: (g * sign,))


def relu(a: Var) -> Var:
    mask = a.value > 0
    # maximum (not where) so non-finite inputs stay visible in the output
    return a.tape._record("relu", (a.idx,), np.maximum(a.value, 0.0),
                          lambda g: (np.where(mask, g, 0.0),))


def leaky_relu(a: Var, slope: float = 0.2) -> Var:
    pos = a.value > 0
    out = np.where(pos, a.value, slope * a.value)

    def vjp(g):
        return (np.where(pos, g, slope * g),)

    return a.tape._record("leaky_relu", (a.idx,), out, vjp)


def prelu(a: Var, slope: Var) -> Var:
    """LeakyReLU with a learned scalar slope (slope is a 1x1 Var)."""
    tape = a.tape
    slope = _as_var(tape, slope)
    if slope.shape != (1, 1):
        raise ValueError(f"prelu: slope must be 1x1, got {slope.shape}")
    av = a.value
    sv = slope.value[0, 0]
    pos = av > 0
    out = np.where(pos, av, sv * av)

    def vjp(g):
        da = np.where(pos, g, sv * g)
        ds = np.array([[np.sum(g[~pos] * av[~pos])]])
        return da, ds

    return tape._record("prelu", (a.idx, slope.idx), out, vjp)


def sigmoid(a: Var) -> Var:
    out = _sigmoid_np(a.value)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return a.tape._record("sigmoid", (a.idx,), out, vjp)


def _sigmoid_np(x: Matrix) -> Matrix:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log_sigmoid(a: Var) -> Var:
    # log sigma(x) = -softplus(-x), stable at both tails
    out = -np.logaddexp(0.0, -a.value)
    sig = _sigmoid_np(a.value)

    def vjp(g):
        return (g * (1.0 - sig),)

    return a.tape._record("log_sigmoid", (a.idx,), out, vjp)


def softplus(a: Var) -> Var:
    out = np.logaddexp(0.0, a.value)
    sig = _sigmoid_np(a.value)
    return a.tape._record("softplus", (a.idx,), out, lambda g: (g * sig,))


def softmax_rows(a: Var) -> Var:
    """Row-wise softmax with max subtraction for stability."""
    av = a.value
    if av.shape[1] == 0:
        raise ValueError("softmax_rows: empty rows")
    shifted = av - av.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return a.tape._record("softmax_rows", (a.idx,), out, vjp)


def sum_all(a: Var) -> Var:
    shape = a.shape
    out = np.array([[a.value.sum()]])
    return a.tape._record("sum_all", (a.idx,), out,
                          lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Var) -> Var:
    shape = a.shape
    n = a.value.size
    out = np.array([[a.value.mean()]])
    return a.tape._record("mean_all", (a.idx,), out,
                          lambda g: (np.full(shape, g[0, 0] / n),))


def row_sum(a: Var) -> Var:
    """Sum each row: (m, n) -> (m, 1)."""
    shape = a.shape
    out = a.value.sum(axis=1, keepdims=True)
    return a.tape._record("row_sum", (a.idx,), out,
                          lambda g: (np.broadcast_to(g, shape).copy(),))


def col_mean(a: Var) -> Var:
    """Mean down each column: (m, n) -> (1, n)."""
    shape = a.shape
    out = a.value.mean(axis=0, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / shape[0], shape).copy(),)

    return a.tape._record("col_mean", (a.idx,), out, vjp)


def concat_rows(parts: Sequence[Var]) -> Var:
    tape = parts[0].tape
    parts = [_as_var(tape, p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=0)
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offs[i]:offs[i + 1]] for i in range(len(sizes)))

    return tape._record("concat_rows", tuple(p.idx for p in parts), out, vjp)


def concat_cols(parts: Sequence[Var]) -> Var:
    tape = parts[0].tape
    parts = [_as_var(tape, p) for p in parts]
    sizes = [p.shape[1] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=1)
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, offs[i]:offs[i + 1]] for i in range(len(sizes)))

    return tape._record("concat_cols", tuple(p.idx for p in parts), out, vjp)


def gather_rows(a: Var, idx) -> Var:
    """Select rows by integer index; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = a.shape[0]
    out = a.value[idx]

    def vjp(g):
        da = np.zeros((rows, g.shape[1]))
        np.add.at(da, idx, g)
        return (da,)

    return a.tape._record("gather_rows", (a.idx,), out, vjp)


# ---------------------------------------------------------------------------
# fact-attention primitive

# The per-entity softmax aggregation over incident facts is one primitive
# with a hand-derived VJP; composed from gather/scatter ops it blows the
# end-to-end time budget by ~4x. Entity i's pool holds every fact where i
# is the head plus every fact where i is the tail (self-loops pooled once);
# scores are LeakyReLU(F th2) softmax-normalized within the pool and the
# output row is the score-weighted sum of fact embeddings F.


def _attend_forward_np(Hh, Rr, Ht, th2, heads, rels, tails, n1, slope):
    F = Hh[heads] + Rr[rels] + Ht[tails]
    raw = (F @ th2)[:, 0]
    s = np.where(raw > 0, raw, slope * raw)
    tmask = tails != heads
    M = np.full(n1, -np.inf)
    np.maximum.at(M, heads, s)
    np.maximum.at(M, tails[tmask], s[tmask])
    uh = np.exp(s - M[heads])
    ut = np.zeros_like(s)
    ut[tmask] = np.exp(s[tmask] - M[tails[tmask]])
    Z = np.zeros(n1)
    np.add.at(Z, heads, uh)
    np.add.at(Z, tails[tmask], ut[tmask])
    S = np.zeros((n1, F.shape[1]))
    np.add.at(S, heads, uh[:, None] * F)
    np.add.at(S, tails[tmask], ut[tmask, None] * F[tmask])
    out = np.zeros_like(S)
    nz = Z != 0  # empty pools stay zero; non-finite Z must propagate
    out[nz] = S[nz] / Z[nz, None]
    return out, F, raw, s, uh, ut, Z


def _attend_backward_np(g, out, F, raw, uh, ut, Z, th2, heads, rels, tails,
                        n1, n2e, slope):
    ah = uh / Z[heads]
    at = np.zeros_like(ut)
    tmask = tails != heads
    at[tmask] = ut[tmask] / Z[tails[tmask]]
    c = (out * g).sum(axis=1)
    dF = ah[:, None] * g[heads] + at[:, None] * g[tails]
    ds = ah * ((F * g[heads]).sum(axis=1) - c[heads])
    ds += at * ((F * g[tails]).sum(axis=1) - c[tails])
    draw = ds * np.where(raw > 0, 1.0, slope)
    dth2 = F.T @ draw[:, None]
    dF += draw[:, None] * th2[:, 0][None, :]
    df = F.shape[1]
    dHh = np.zeros((n1, df))
    dRr = np.zeros((n2e, df))
    dHt = np.zeros((n1, df))
    np.add.at(dHh, heads, dF)
    np.add.at(dRr, rels, dF)
    np.add.at(dHt, tails, dF)
    return dHh, dRr, dHt, dth2


def attend_facts(Hh: Var, Rr: Var, Ht: Var, th2: Var, heads, rels, tails,
                 n_entities: int, slope: float = 0.2,
                 use_kernel: bool | None = None) -> Var:
    """Attention-aggregate incident facts into entity rows.

    Hh/Ht: (n1, df) head- and tail-projected entity features; Rr: (n2e, df)
    projected relation features; th2: (df, 1) score vector. heads/rels/tails
    are parallel int arrays defining the fact list. Returns (n1, df); rows
    of entities with no incident fact are zero.
    """
    tape = Hh.tape
    Rr = _as_var(tape, Rr)
    Ht = _as_var(tape, Ht)
    th2 = _as_var(tape, th2)
    heads = np.ascontiguousarray(heads, dtype=np.int64)
    rels = np.ascontiguousarray(rels, dtype=np.int64)
    tails = np.ascontiguousarray(tails, dtype=np.int64)
    if th2.shape != (Hh.shape[1], 1):
        raise ValueError(
            f"attend_facts: th2 must be ({Hh.shape[1]}, 1), got {th2.shape}")
    n1 = int(n_entities)
    n2e = Rr.shape[0]
    fast = _kernels.NUMBA_AVAILABLE if use_kernel is None else use_kernel

    if fast:
        out, F, raw, s, uh, ut, Z = _kernels.attend_forward(
            Hh.value, Rr.value, Ht.value, th2.value[:, 0].copy(),
            heads, rels, tails, n1, slope)
    else:
        out, F, raw, s, uh, ut, Z = _attend_forward_np(
            Hh.value, Rr.value, Ht.value, th2.value,
            heads, rels, tails, n1, slope)
    th2v = th2.value

    def vjp(g):
        if fast:
            dHh, dRr, dHt, dth2 = _kernels.attend_backward(
                np.ascontiguousarray(g), out, F, raw, uh, ut, Z,
                th2v[:, 0].copy(), heads, rels, tails, n1, n2e, slope)
            return dHh, dRr, dHt, dth2[:, None]
        return _attend_backward_np(g, out, F, raw, uh, ut, Z, th2v,
                                   heads, rels, tails, n1, n2e, slope)

    return tape._record("attend_facts",
                        (Hh.idx, Rr.idx, Ht.idx, th2.idx), out, vjp)


# ---------------------------------------------------------------------------
# backward


def backward(tape: Tape, loss: Var,
             params: Iterable[Parameter] = ()) -> dict[Parameter, Matrix]:
    """Gradient of a scalar loss w.r.t. every Parameter lifted on the tape.

    Parameters that never influence the loss (including any extras passed
    in `params`) get a zero gradient of matching shape.
    """
    if loss.tape is not tape:
        raise ValueError("loss was recorded on a different tape")
    if loss.value.shape != (1, 1):
        raise ValueError(
            f"backward: loss must be 1x1 scalar, got shape {loss.value.shape}")
    grads_by_node: list[Matrix | None] = [None] * (loss.idx + 1)
    grads_by_node[loss.idx] = np.ones((1, 1))
    for i in range(loss.idx, -1, -1):
        g = grads_by_node[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if not node.parents:
            continue
        parent_grads = node.vjp(g)
        for pidx, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if grads_by_node[pidx] is None:
                grads_by_node[pidx] = pg.copy() if pg.base is not None else pg
            else:
                grads_by_node[pidx] = grads_by_node[pidx] + pg
    out: dict[Parameter, Matrix] = {}
    for p in tape.params:
        g = grads_by_node[tape._lifted[id(p)]] if tape._lifted[id(p)] <= loss.idx else None
        out[p] = g if g is not None else np.zeros_like(p.value)
    for p in params:
        if p not in out:
            out[p] = np.zeros_like(p.value)
    return out


# ---------------------------------------------------------------------------
# optimizers


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.m: dict[Parameter, Matrix] = {}
        self.v: dict[Parameter, Matrix] = {}
        self.t = 0


def adam_step(params: Sequence[Parameter], grads: dict[Parameter, Matrix],
              state: AdamState, lr: float = 1e-3,
              betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    for p in params:
        g = grads[p]
        if g.shape != p.value.shape:
            raise ValueError(
                f"adam_step: grad shape {g.shape} != param shape "
                f"{p.value.shape} for {p.name!r}")
        if p not in state.m:
            state.m[p] = np.zeros_like(p.value)
            state.v[p] = np.zeros_like(p.value)
        m = state.m[p]
        v = state.v[p]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.value -= lr * mhat / (np.sqrt(vhat) + eps)


def sgd_step(params: Sequence[Parameter], grads: dict[Parameter, Matrix],
             lr: float) -> None:
    for p in params:
        g = grads[p]
        if g.shape != p.value.shape:
            raise ValueError(
                f"sgd_step: grad shape {g.shape} != param shape "
                f"{p.value.shape} for {p.name!r}")
        p.value -= lr * g


# ---------------------------------------------------------------------------
# seeded randomness


class Rng:
    """PCG64 generator with named, independent substreams.

    Substream seeds are derived by hashing the stream name, so adding or
    reordering streams never perturbs the draws of existing ones. Identical
    seed means identical streams across runs and platforms.
    """

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed)
        self._key = _key
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, *_key])))

    def substream(self, name: str) -> "Rng":
        h = hashlib.sha256(name.encode("utf-8")).digest()
        tag = int.from_bytes(h[:8], "big")
        return Rng(self.seed, self._key + (tag,))

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def shuffle(self, x):
        self._gen.shuffle(x)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)
