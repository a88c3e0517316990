"""Piece-wise weighted inner-product relation measurement in the state space.

The proximity of two embedded nodes is the lambda-weighted sum over k pieces
of the inner products of their piece transforms; values range over all of R,
which is what lets pathway weights suppress or amplify individual messages.
A row-softmax attention variant is kept as the ablation comparator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, ShapeError, Tensor


@dataclass
class NLParams:
    """One linear map plus LeakyReLU slope."""
    w: Tensor
    b: Tensor
    slope: float = 0.01

    def apply(self, x: Tensor, row_stable: bool = False) -> Tensor:
        return ad.nl_apply(x, self.w, self.b, self.slope, row_stable=row_stable)

    def leaves(self, prefix: str):
        return [(f"{prefix}.w", self.w, True), (f"{prefix}.b", self.b, False)]


def init_nl(d_in: int, d_out: int, rng: Rng, slope: float = 0.01) -> NLParams:
    bound = 1.0 / np.sqrt(d_in)
    return NLParams(rng.uniform(d_in, d_out, bound), Tensor(np.zeros((1, d_out))), slope)


@dataclass
class ProximityParams:
    """k piece transforms (square, q -> q) and their learnable weights."""
    pieces: list[NLParams]
    lambdas: list[Tensor]       # k 1x1 tensors

    def __post_init__(self):
        if len(self.pieces) < 1 or len(self.pieces) != len(self.lambdas):
            raise ShapeError("ProximityParams", (len(self.pieces), len(self.lambdas)))

    @property
    def k(self) -> int:
        return len(self.pieces)

    @property
    def q_in(self) -> int:
        return self.pieces[0].w.rows

    def leaves(self, prefix: str):
        out = []
        for i, p in enumerate(self.pieces):
            out.extend(p.leaves(f"{prefix}.piece{i}"))
        for i, lam in enumerate(self.lambdas):
            out.append((f"{prefix}.lambda{i}", lam, True))
        return out


def init_proximity(q_in: int, k: int, rng: Rng) -> ProximityParams:
    """Pieces uniform +-1/sqrt(q_in), lambdas 1/k so the initial magnitude
    of the measurement is insensitive to k."""
    pieces = [init_nl(q_in, q_in, rng.child(i)) for i in range(k)]
    lambdas = [Tensor(np.array([[1.0 / k]])) for _ in range(k)]
    return ProximityParams(pieces, lambdas)


def piece_transform(states: Tensor, params: ProximityParams, piece: int,
                    row_stable: bool = False) -> Tensor:
    if states.cols != params.q_in:
        raise ShapeError("piece_transform", states.shape, params.pieces[piece].w.shape)
    return params.pieces[piece].apply(states, row_stable=row_stable)


def proximity(qa: Tensor, qb: Tensor, params: ProximityParams) -> float:
    """Relation of two single states (1 x q rows)."""
    if qa.shape != (1, params.q_in) or qb.shape != (1, params.q_in):
        raise ShapeError("proximity", qa.shape, qb.shape)
    return proximity_matrix(qa, qb, params).item()


def proximity_matrix(a: Tensor, b: Tensor, params: ProximityParams,
                     stable_rows: bool = False) -> Tensor:
    """Entry (i, j) = proximity(a_i, b_j); computed piece-by-piece without
    materializing anything larger than a x b."""
    if a.cols != params.q_in or b.cols != params.q_in:
        raise ShapeError("proximity_matrix", a.shape, b.shape)
    same = a is b
    total = None
    for t in range(params.k):
        pa = params.pieces[t].apply(a, row_stable=stable_rows)
        pb = pa if same else params.pieces[t].apply(b, row_stable=stable_rows)
        term = ad.scalar_mul(params.lambdas[t], ad.matmul_nt(pa, pb))
        total = term if total is None else ad.add(total, term)
    return total


def attention_scores(a: Tensor, b: Tensor, params: ProximityParams) -> Tensor:
    """Row-softmax of (a W_Q)(b W_K)^T / sqrt(q): the ablation comparator.

    W_Q and W_K are the first two piece weights (the same parameter budget
    as the measurement they replace); biases are unused.
    """
    if a.cols != params.q_in or b.cols != params.q_in:
        raise ShapeError("attention_scores", a.shape, b.shape)
    wq = params.pieces[0].w
    wk = params.pieces[min(1, params.k - 1)].w
    scores = ad.matmul_nt(ad.matmul(a, wq, row_stable=True),
                          ad.matmul(b, wk, row_stable=True))
    return ad.row_softmax(ad.scale(scores, 1.0 / np.sqrt(params.q_in)))
