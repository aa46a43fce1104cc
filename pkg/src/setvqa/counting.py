"""Differentiable deduplicated counting from attention weights and boxes.

Proposals form a graph whose adjacency is the outer product of the attention
vector. Edges between overlapping proposals of one object are pruned by an
IoU-based distance; surviving row-similarity plus attention agreement merges
duplicates into a shared count mass, giving per-proposal scores C with
c_hat = sum(C). Learnable monotone piecewise-linear maps shape every edge
weight; at identity initialization the exact collapse/additivity cases hold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .geometry import BBox
from .tape import Tape, Var, const, pwl_eval, pwl_increments

DEFAULT_INTERVALS = 8


@dataclass
class PiecewiseLinearFn:
    """Monotone map on [0,1] with f(0)=0, f(1)=1 and k equal-width segments.

    Raw weights pass through a softmax to give positive segment increments
    summing to one; equal raw weights make the map the identity.
    """

    raw_weights: np.ndarray

    @classmethod
    def identity(cls, k: int = DEFAULT_INTERVALS) -> "PiecewiseLinearFn":
        return cls(raw_weights=np.zeros(k))

    @property
    def k(self) -> int:
        return self.raw_weights.shape[0]

    @property
    def increments(self) -> np.ndarray:
        return pwl_increments(self.raw_weights)

    def __call__(self, x) -> np.ndarray:
        y, _ = pwl_eval(self.raw_weights, np.asarray(x, dtype=float))
        return y


@dataclass
class CountModuleParams:
    f1: PiecewiseLinearFn  # edge-weight shaping
    f2: PiecewiseLinearFn  # distance shaping
    f3: PiecewiseLinearFn  # attention-agreement shaping

    @classmethod
    def identity(cls, k: int = DEFAULT_INTERVALS) -> "CountModuleParams":
        return cls(PiecewiseLinearFn.identity(k), PiecewiseLinearFn.identity(k),
                   PiecewiseLinearFn.identity(k))


@dataclass
class CountOutput:
    A: np.ndarray        # adjacency a a^T
    D: np.ndarray        # 1 - IoU distances (1 across images)
    A_prime: np.ndarray  # pruned adjacency f1(A) * f2(D)
    sim: np.ndarray      # duplicate-similarity, diagonal 1
    C: np.ndarray        # per-proposal count scores
    c_hat: float         # scalar count estimate


def adjacency(a: np.ndarray) -> np.ndarray:
    """A_ij = a_i a_j for attention values in [0, 1]."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 1:
        raise ValueError("attention must be a vector")
    if np.any(a < 0.0) or np.any(a > 1.0):
        raise ValueError("attention values must lie in [0, 1]")
    return np.outer(a, a)


def distance_matrix(boxes: list[BBox], image_idx: np.ndarray | None = None) -> np.ndarray:
    """D_ij = 1 - IoU(b_i, b_j); pairs from different images are fully distant."""
    B = np.array([b.as_list() for b in boxes], dtype=float)
    ix = np.clip(np.minimum(B[:, None, 2], B[None, :, 2]) - np.maximum(B[:, None, 0], B[None, :, 0]), 0.0, None)
    iy = np.clip(np.minimum(B[:, None, 3], B[None, :, 3]) - np.maximum(B[:, None, 1], B[None, :, 1]), 0.0, None)
    inter = ix * iy
    area = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area[:, None] + area[None, :] - inter
    D = 1.0 - inter / union
    if image_idx is not None:
        image_idx = np.asarray(image_idx)
        D[image_idx[:, None] != image_idx[None, :]] = 1.0
    return D


def _offdiag_mask(n: int) -> np.ndarray:
    return 1.0 - np.eye(n)


def build_count_graph(tape: Tape, a: Var, D: np.ndarray,
                      f1_w: Var, f2_w: Var, f3_w: Var) -> dict[str, Var]:
    """Record the counting forward pass on the given trace.

    `a` holds attention in [0,1]; `D` is the constant distance matrix.
    Returns the named intermediate Vars, including C and c_hat.
    """
    n = a.v.shape[0]
    A = T.outer_sym(tape, a)
    A_prime = T.mul(tape, T.pwl(tape, f1_w, A), T.pwl(tape, f2_w, const(D)))
    gap = T.attention_agreement(tape, a)            # 1 - |a_i - a_j|
    agree = T.pwl(tape, f3_w, gap)
    keep = T.ones_minus(tape, A_prime)              # inter-object edges do not merge
    rowsim = T.row_similarity(tape, A_prime)
    sim_full = T.mul(tape, T.mul(tape, agree, keep), rowsim)
    sim = T.sadd(tape, T.mul(tape, sim_full, const(_offdiag_mask(n))), const(np.eye(n)))
    dup_mass = T.row_sum(tape, sim)                 # >= 1 by construction
    C = T.div(tape, a, dup_mass)
    c_hat = T.vsum(tape, C)
    return {"A": A, "A_prime": A_prime, "sim": sim, "C": C, "c_hat": c_hat}


def prune_intra(A: np.ndarray, D: np.ndarray, params: CountModuleParams) -> np.ndarray:
    """A'_ij = f1(A_ij) * f2(D_ij); zero diagonal since D_ii = 0 and f2(0) = 0."""
    if A.shape != D.shape:
        raise ValueError(f"shape mismatch: A {A.shape} vs D {D.shape}")
    return params.f1(A) * params.f2(D)


def dedup_scores(a: np.ndarray, A_prime: np.ndarray,
                 params: CountModuleParams) -> tuple[np.ndarray, np.ndarray, float]:
    """Similarity matrix, per-proposal scores C_i = a_i / dup_mass_i, and c_hat."""
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    gap = 1.0 - np.abs(a[:, None] - a[None, :])
    t = Tape()
    rowsim = T.row_similarity(t, const(A_prime)).v
    sim = params.f3(gap) * (1.0 - A_prime) * rowsim
    sim = sim * _offdiag_mask(n) + np.eye(n)
    dup_mass = sim.sum(axis=1)
    C = a / dup_mass
    return sim, C, float(C.sum())


class CountTrace:
    """Recorded forward pass of the counting module, ready for one backward."""

    def __init__(self, a: np.ndarray, D: np.ndarray, params: CountModuleParams):
        self.tape = Tape()
        self.a = Var(np.asarray(a, dtype=float))
        self.f1_w = Var(params.f1.raw_weights.astype(float))
        self.f2_w = Var(params.f2.raw_weights.astype(float))
        self.f3_w = Var(params.f3.raw_weights.astype(float))
        self.vars = build_count_graph(self.tape, self.a, D, self.f1_w, self.f2_w, self.f3_w)
        self.output = CountOutput(
            A=self.vars["A"].v,
            D=D,
            A_prime=self.vars["A_prime"].v,
            sim=self.vars["sim"].v,
            C=self.vars["C"].v,
            c_hat=self.vars["c_hat"].v,
        )


@dataclass
class CountGrads:
    d_a: np.ndarray
    d_f1: np.ndarray
    d_f2: np.ndarray
    d_f3: np.ndarray


def count_forward(a: np.ndarray, boxes: list[BBox], image_idx: np.ndarray,
                  params: CountModuleParams) -> CountOutput:
    adjacency(a)  # range validation
    D = distance_matrix(boxes, image_idx)
    return CountTrace(a, D, params).output


def count_backward(trace: CountTrace, d_c_hat: float = 1.0,
                   d_C: np.ndarray | None = None) -> CountGrads:
    """Exact gradients of (d_c_hat * c_hat + d_C . C) w.r.t. a and all raw weights."""
    seeds: list[tuple[Var, object]] = [(trace.vars["c_hat"], float(d_c_hat))]
    if d_C is not None:
        seeds.append((trace.vars["C"], np.asarray(d_C, dtype=float)))
    trace.tape.backward(seeds)

    def grad(var: Var, like: np.ndarray) -> np.ndarray:
        return np.zeros_like(like) if var.g is None else np.asarray(var.g)

    return CountGrads(
        d_a=grad(trace.a, trace.a.v),
        d_f1=grad(trace.f1_w, trace.f1_w.v),
        d_f2=grad(trace.f2_w, trace.f2_w.v),
        d_f3=grad(trace.f3_w, trace.f3_w.v),
    )


def count_aware_features(features: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Scale feature row i by its count score C_i."""
    features = np.asarray(features, dtype=float)
    C = np.asarray(C, dtype=float)
    if features.ndim != 2 or C.shape != (features.shape[0],):
        raise ValueError(f"shape mismatch: features {features.shape} vs C {C.shape}")
    return features * C[:, None]
