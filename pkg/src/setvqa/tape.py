"""Recorded-trace reverse-mode gradients for a closed set of layers.

Not a general autodiff engine: every operation the models use is listed here
with a hand-derived backward rule, and nothing else exists. A ``Tape`` records
closures during the forward pass; ``Tape.backward`` replays them in reverse.
All absolute-value and min/clamp kinks use the right derivative.
"""

from __future__ import annotations

import numpy as np


class Var:
    """Value plus gradient slot. Constants never accumulate gradients."""

    __slots__ = ("v", "g", "const")

    def __init__(self, value, const: bool = False):
        self.v = value
        self.g = None
        self.const = const


def const(value) -> Var:
    return Var(value, const=True)


class Tape:
    def __init__(self):
        self._ops: list = []
        self._consumed = False

    def record(self, fn) -> None:
        self._ops.append(fn)

    def backward(self, seeds: list[tuple[Var, object]]) -> None:
        """Seed output gradients and sweep the trace in reverse, once."""
        if self._consumed:
            raise RuntimeError("backward called twice on the same recorded trace")
        if not self._ops:
            raise RuntimeError("backward called with no recorded forward trace")
        self._consumed = True
        for var, g in seeds:
            _acc(var, g if np.isscalar(var.v) else np.asarray(g, dtype=float))
        for fn in reversed(self._ops):
            fn()


def _acc(x: Var, g) -> None:
    if x.const:
        return
    if x.g is None:
        x.g = g
    else:
        x.g = x.g + g


def _sign_right(x: np.ndarray) -> np.ndarray:
    """d|x|/dx with the right-derivative convention at 0."""
    return np.where(x >= 0.0, 1.0, -1.0)


# ---------------------------------------------------------------------------
# dense layers


def embed_mean(tape: Tape, emb: Var, ids: np.ndarray) -> Var:
    """Mean-pooled embedding lookup; ids may repeat."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Var(emb.v[ids].mean(axis=0))

    def bw():
        if out.g is None or emb.const:
            return
        d = np.zeros_like(emb.v)
        np.add.at(d, ids, out.g / len(ids))
        _acc(emb, d)

    tape.record(bw)
    return out


def affine_vec(tape: Tape, W: Var, x: Var, b: Var | None = None) -> Var:
    out = Var(W.v @ x.v + (b.v if b is not None else 0.0))

    def bw():
        g = out.g
        if g is None:
            return
        _acc(W, np.outer(g, x.v))
        _acc(x, W.v.T @ g)
        if b is not None:
            _acc(b, g)

    tape.record(bw)
    return out


def affine_rows(tape: Tape, X: Var, W: Var, b: Var | None = None) -> Var:
    """Row-wise affine map: out[i] = W @ X[i] + b."""
    out = Var(X.v @ W.v.T + (b.v if b is not None else 0.0))

    def bw():
        G = out.g
        if G is None:
            return
        _acc(X, G @ W.v)
        _acc(W, G.T @ X.v)
        if b is not None:
            _acc(b, G.sum(axis=0))

    tape.record(bw)
    return out


def tanh(tape: Tape, x: Var) -> Var:
    out = Var(np.tanh(x.v))

    def bw():
        if out.g is not None:
            _acc(x, out.g * (1.0 - out.v * out.v))

    tape.record(bw)
    return out


def sigmoid(tape: Tape, x: Var) -> Var:
    out = Var(1.0 / (1.0 + np.exp(-x.v)))

    def bw():
        if out.g is not None:
            _acc(x, out.g * out.v * (1.0 - out.v))

    tape.record(bw)
    return out


def mul(tape: Tape, a: Var, b: Var) -> Var:
    """Elementwise product of same-shape arrays."""
    out = Var(a.v * b.v)

    def bw():
        g = out.g
        if g is None:
            return
        _acc(a, g * b.v)
        _acc(b, g * a.v)

    tape.record(bw)
    return out


def mul_rows_vec(tape: Tape, X: Var, q: Var) -> Var:
    """out[i] = X[i] * q, broadcasting q across rows."""
    out = Var(X.v * q.v[None, :])

    def bw():
        G = out.g
        if G is None:
            return
        _acc(X, G * q.v[None, :])
        _acc(q, (G * X.v).sum(axis=0))

    tape.record(bw)
    return out


def add_rows_vec(tape: Tape, X: Var, q: Var) -> Var:
    out = Var(X.v + q.v[None, :])

    def bw():
        G = out.g
        if G is None:
            return
        _acc(X, G)
        _acc(q, G.sum(axis=0))

    tape.record(bw)
    return out


def rows_dot_vec(tape: Tape, X: Var, u: Var) -> Var:
    out = Var(X.v @ u.v)

    def bw():
        g = out.g
        if g is None:
            return
        _acc(X, np.outer(g, u.v))
        _acc(u, X.v.T @ g)

    tape.record(bw)
    return out


def rowscale(tape: Tape, X: Var, s: Var) -> Var:
    """Scale row i of X by s[i]."""
    out = Var(X.v * s.v[:, None])

    def bw():
        G = out.g
        if G is None:
            return
        _acc(X, G * s.v[:, None])
        _acc(s, (G * X.v).sum(axis=1))

    tape.record(bw)
    return out


def weighted_rowsum(tape: Tape, X: Var, w: Var) -> Var:
    out = Var(X.v.T @ w.v)

    def bw():
        g = out.g
        if g is None:
            return
        _acc(X, np.outer(w.v, g))
        _acc(w, X.v @ g)

    tape.record(bw)
    return out


def concat_vec(tape: Tape, a: Var, b: Var) -> Var:
    na = a.v.shape[0]
    out = Var(np.concatenate([a.v, b.v]))

    def bw():
        g = out.g
        if g is None:
            return
        _acc(a, g[:na])
        _acc(b, g[na:])

    tape.record(bw)
    return out


# ---------------------------------------------------------------------------
# softmax, losses, scalar glue


def softmax(tape: Tape, s: Var) -> Var:
    z = s.v - s.v.max()
    e = np.exp(z)
    p = e / e.sum()
    out = Var(p)

    def bw():
        g = out.g
        if g is None:
            return
        _acc(s, p * (g - float(g @ p)))

    tape.record(bw)
    return out


def softmax_cross_entropy(tape: Tape, logits: Var, gold: int) -> Var:
    z = logits.v - logits.v.max()
    lse = float(np.log(np.exp(z).sum()))
    p = np.exp(z - lse)
    out = Var(lse - float(z[gold]))

    def bw():
        g = out.g
        if g is None:
            return
        d = p.copy()
        d[gold] -= 1.0
        _acc(logits, g * d)

    tape.record(bw)
    return out


def neglog1m_sum(tape: Tape, p: Var, hi: float = 1.0 - 1e-7) -> Var:
    """sum_c -log(1 - min(p_c, hi)); pushes every probability toward zero."""
    clamped = np.minimum(p.v, hi)
    out = Var(float(-np.log1p(-clamped).sum()))

    def bw():
        g = out.g
        if g is None:
            return
        d = np.where(p.v < hi, 1.0 / (1.0 - clamped), 0.0)
        _acc(p, g * d)

    tape.record(bw)
    return out


def vsum(tape: Tape, x: Var) -> Var:
    out = Var(float(np.sum(x.v)))

    def bw():
        if out.g is not None:
            _acc(x, np.full_like(x.v, out.g))

    tape.record(bw)
    return out


def smul(tape: Tape, x: Var, c: float) -> Var:
    out = Var(x.v * c)

    def bw():
        if out.g is not None:
            _acc(x, out.g * c)

    tape.record(bw)
    return out


def sadd(tape: Tape, a: Var, b: Var) -> Var:
    out = Var(a.v + b.v)

    def bw():
        g = out.g
        if g is None:
            return
        _acc(a, g)
        _acc(b, g)

    tape.record(bw)
    return out


def min_const(tape: Tape, x: Var, cap: float) -> Var:
    out = Var(min(x.v, cap))

    def bw():
        if out.g is not None and x.v < cap:
            _acc(x, out.g)

    tape.record(bw)
    return out


def squared_error(tape: Tape, r: Var, target: float) -> Var:
    diff = r.v - target
    out = Var(float(diff * diff))

    def bw():
        if out.g is not None:
            _acc(r, out.g * 2.0 * diff)

    tape.record(bw)
    return out


# ---------------------------------------------------------------------------
# counting-specific structure


def outer_sym(tape: Tape, a: Var) -> Var:
    """A = a a^T."""
    out = Var(np.outer(a.v, a.v))

    def bw():
        G = out.g
        if G is None:
            return
        _acc(a, (G + G.T) @ a.v)

    tape.record(bw)
    return out


def attention_agreement(tape: Tape, a: Var) -> Var:
    """M_ij = 1 - |a_i - a_j|."""
    diff = a.v[:, None] - a.v[None, :]
    out = Var(1.0 - np.abs(diff))

    def bw():
        G = out.g
        if G is None:
            return
        sg = _sign_right(diff) * G
        _acc(a, sg.sum(axis=0) - sg.sum(axis=1))

    tape.record(bw)
    return out


def ones_minus(tape: Tape, X: Var) -> Var:
    out = Var(1.0 - X.v)

    def bw():
        if out.g is not None:
            _acc(X, -out.g)

    tape.record(bw)
    return out


def row_similarity(tape: Tape, P: Var) -> Var:
    """R_ij = 1 - mean_{k not in {i,j}} |P_ik - P_jk|, with R = 1 when n <= 2."""
    n = P.v.shape[0]
    m = max(n - 2, 1)
    diff = P.v[:, None, :] - P.v[None, :, :]          # diff[i,j,k] = P_ik - P_jk
    total = np.abs(diff).sum(axis=2)
    d = np.diag(P.v)
    excl_ki = np.abs(d[:, None] - P.v.T)              # k = i term: |P_ii - P_ji|
    excl_kj = np.abs(P.v - d[None, :])                # k = j term: |P_ij - P_jj|
    out = Var(1.0 - (total - excl_ki - excl_kj) / m)

    def bw():
        G = out.g
        if G is None:
            return
        mask = np.ones((n, n, n))
        k = np.arange(n)
        mask[k, :, k] = 0.0
        mask[:, k, k] = 0.0
        W = (G[:, :, None] / -m) * _sign_right(diff) * mask
        _acc(P, W.sum(axis=1) - W.sum(axis=0))

    tape.record(bw)
    return out


def row_sum(tape: Tape, M: Var) -> Var:
    out = Var(M.v.sum(axis=1))

    def bw():
        if out.g is not None:
            _acc(M, np.broadcast_to(out.g[:, None], M.v.shape).copy())

    tape.record(bw)
    return out


def div(tape: Tape, a: Var, b: Var) -> Var:
    out = Var(a.v / b.v)

    def bw():
        g = out.g
        if g is None:
            return
        _acc(a, g / b.v)
        _acc(b, -g * a.v / (b.v * b.v))

    tape.record(bw)
    return out


# ---------------------------------------------------------------------------
# piecewise-linear monotone function on [0, 1]


def pwl_increments(raw_weights: np.ndarray) -> np.ndarray:
    """Positive segment increments summing to 1 (softmax of the raw weights)."""
    z = raw_weights - raw_weights.max()
    e = np.exp(z)
    return e / e.sum()


def pwl_eval(raw_weights: np.ndarray, x: np.ndarray):
    """Evaluate the piecewise-linear map; returns (value, cache for backward)."""
    k = raw_weights.shape[0]
    inc = pwl_increments(raw_weights)
    csum = np.concatenate([[0.0], np.cumsum(inc)])
    xc = np.clip(x, 0.0, 1.0)
    y = xc * k
    idx = np.minimum(y.astype(np.int64), k - 1)
    frac = y - idx
    out = csum[idx] + frac * inc[idx]
    return out, (inc, idx, frac)


def pwl(tape: Tape, w: Var, x: Var) -> Var:
    """Monotone piecewise-linear map with k fixed breakpoints; f(0)=0, f(1)=1.

    Differentiable in both the input and the raw weights; the input derivative
    is the active segment's slope (right derivative at breakpoints).
    """
    k = w.v.shape[0]
    val, (inc, idx, frac) = pwl_eval(w.v, np.asarray(x.v))
    out = Var(val)

    def bw():
        G = out.g
        if G is None:
            return
        if not x.const:
            _acc(x, G * inc[idx] * k)
        if not w.const:
            flat_idx = idx.ravel()
            flat_g = np.asarray(G).ravel()
            bins = np.bincount(flat_idx, weights=flat_g, minlength=k)
            fracterm = np.bincount(flat_idx, weights=flat_g * frac.ravel(), minlength=k)
            # d/d inc_j = sum of g over entries with idx > j, plus frac-weighted own bin
            suffix = np.concatenate([np.cumsum(bins[::-1])[::-1][1:], [0.0]])
            dinc = suffix + fracterm
            _acc(w, inc * (dinc - float(dinc @ inc)))

    tape.record(bw)
    return out
