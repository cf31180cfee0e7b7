"""Optional numba-compiled kernels for the fact-attention hot loop.

The pure-numpy implementations in autodiff.py are the reference; these
kernels compute the same thing with fused loops so a full-graph encode
stays cheap enough for the <15 min end-to-end budget. Import failure is
fine: callers fall back to numpy automatically.
"""

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without the extra
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def attend_forward(Hh, Rr, Ht, th2, heads, rels, tails, n1, slope):
    """Per-entity softmax attention over incident facts, all in one pass.

    Returns (out, F, raw, s, uh, ut, Z). A fact sits in the pool of its head
    and, when distinct, its tail; self-loop facts are pooled once.
    """
    m = heads.shape[0]
    df = Hh.shape[1]
    F = np.empty((m, df))
    raw = np.empty(m)
    s = np.empty(m)
    for f in range(m):
        h = heads[f]
        r = rels[f]
        t = tails[f]
        acc = 0.0
        for j in range(df):
            v = Hh[h, j] + Rr[r, j] + Ht[t, j]
            F[f, j] = v
            acc += v * th2[j]
        raw[f] = acc
        s[f] = acc if acc > 0.0 else slope * acc

    M = np.full(n1, -np.inf)
    for f in range(m):
        if s[f] > M[heads[f]]:
            M[heads[f]] = s[f]
        if tails[f] != heads[f] and s[f] > M[tails[f]]:
            M[tails[f]] = s[f]

    uh = np.empty(m)
    ut = np.zeros(m)
    Z = np.zeros(n1)
    S = np.zeros((n1, df))
    for f in range(m):
        h = heads[f]
        t = tails[f]
        u1 = np.exp(s[f] - M[h])
        uh[f] = u1
        Z[h] += u1
        for j in range(df):
            S[h, j] += u1 * F[f, j]
        if t != h:
            u2 = np.exp(s[f] - M[t])
            ut[f] = u2
            Z[t] += u2
            for j in range(df):
                S[t, j] += u2 * F[f, j]

    out = np.zeros((n1, df))
    for i in range(n1):
        if Z[i] != 0.0:  # empty pools stay zero; non-finite must propagate
            inv = 1.0 / Z[i]
            for j in range(df):
                out[i, j] = S[i, j] * inv
    return out, F, raw, s, uh, ut, Z


@njit(cache=True)
def attend_backward(g, out, F, raw, uh, ut, Z, th2, heads, rels, tails,
                    n1, n2e, slope):
    m = heads.shape[0]
    df = F.shape[1]
    c = np.zeros(n1)
    for i in range(n1):
        acc = 0.0
        for j in range(df):
            acc += out[i, j] * g[i, j]
        c[i] = acc

    dHh = np.zeros((n1, df))
    dRr = np.zeros((n2e, df))
    dHt = np.zeros((n1, df))
    dth2 = np.zeros(df)
    dFrow = np.empty(df)
    for f in range(m):
        h = heads[f]
        t = tails[f]
        ah = uh[f] / Z[h]
        dot = 0.0
        for j in range(df):
            dFrow[j] = ah * g[h, j]
            dot += F[f, j] * g[h, j]
        ds = ah * (dot - c[h])
        if t != h:
            at = ut[f] / Z[t]
            dot = 0.0
            for j in range(df):
                dFrow[j] += at * g[t, j]
                dot += F[f, j] * g[t, j]
            ds += at * (dot - c[t])
        draw = ds * (1.0 if raw[f] > 0.0 else slope)
        r = rels[f]
        for j in range(df):
            dth2[j] += draw * F[f, j]
            dv = dFrow[j] + draw * th2[j]
            dHh[h, j] += dv
            dRr[r, j] += dv
            dHt[t, j] += dv
    return dHh, dRr, dHt, dth2
